//! HyperNet: simulation parameters → convolution kernels for FLINT*, plus
//! parameter-space analysis tools.
//!
//! HyperNet is `linear → PReLU → dropout → linear → PReLU → dropout →
//! linear → PReLU`, reshaped to `(c0 × L)`, two kernel-3 conv1d layers with
//! PReLU, flattened, and a final linear layer emitting θ. θ is the
//! concatenation of the body kernels (every layer except the head) of every
//! FLINT* block, in layer order. Biases, PReLU slopes and heads are static.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fieldio::{EnsembleSet, Grid};
use crate::flint::{forward_student, infer_with, init_kernel, init_layers, FlintConfig, Inference, StudentOutput};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Graph, Node, Tensor};

/// Paper-scale FLINT* widths.
pub const FLINTSTAR_CHANNELS: [usize; 3] = [128, 96, 64];
/// Scale of the final HyperNet weights relative to the standard bound.
const OUT_WEIGHT_SCALE: f64 = 0.05;

/// A FLINT* layer whose kernel comes from θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    pub param_dim: usize,
    pub hidden: [usize; 2],
    /// Conv1d stage: input channels × length (the third MLP width is their product).
    pub conv_channels: usize,
    pub conv_len: usize,
    pub conv_out: usize,
    pub dropout: f64,
    /// FLINT* configuration (no teacher).
    pub flint: FlintConfig,
    /// Training-set mean and std of each simulation parameter.
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
}

impl HyperConfig {
    /// FLINT* at paper widths divided by `divisor`, with desk-size HyperNet stages.
    pub fn new(param_dim: usize, rank: usize, divisor: usize) -> Self {
        Self {
            param_dim,
            hidden: [32, 64],
            conv_channels: 8,
            conv_len: 16,
            conv_out: 8,
            dropout: 0.1,
            flint: FlintConfig {
                n_blocks: FLINTSTAR_CHANNELS.len(),
                channels: FLINTSTAR_CHANNELS.to_vec(),
                teacher_channels: None,
                rank,
                desk_scale: (divisor > 1).then_some(divisor),
            },
            param_mean: vec![0.0; param_dim],
            param_std: vec![1.0; param_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flint.validate()?;
        if self.flint.teacher_channels.is_some() {
            return Err(invalid!("FLINT* has no teacher block"));
        }
        if self.param_dim == 0 || self.hidden.contains(&0) || self.conv_channels == 0 || self.conv_len == 0 || self.conv_out == 0 {
            return Err(invalid!("HyperNet sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0,1), got {}", self.dropout));
        }
        if self.param_mean.len() != self.param_dim || self.param_std.len() != self.param_dim {
            return Err(invalid!("standardization statistics do not match param_dim"));
        }
        if self.param_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("standardization std must be positive"));
        }
        Ok(())
    }

    /// θ slots in emission order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut off = 0;
        self.flint
            .layers()
            .into_iter()
            .filter(|l| l.is_body())
            .map(|l| {
                let shape = l.kernel_shape(self.flint.rank);
                let s = Slot { name: l.weight_name(), offset: off, shape };
                off += s.len();
                s
            })
            .collect()
    }

    pub fn theta_len(&self) -> usize {
        self.slots().iter().map(Slot::len).sum()
    }

    /// Sets the standardization statistics from the training members' parameters.
    /// A parameter with zero spread gets std 1.
    pub fn fit_standardization(&mut self, params: &[Vec<f64>]) -> Result<()> {
        if params.is_empty() || params.iter().any(|p| p.len() != self.param_dim) {
            return Err(invalid!("need parameter vectors of length {}", self.param_dim));
        }
        let n = params.len() as f64;
        for d in 0..self.param_dim {
            let m = params.iter().map(|p| p[d]).sum::<f64>() / n;
            let v = params.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / n;
            self.param_mean[d] = m;
            self.param_std[d] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn standardize(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.param_dim {
            return Err(invalid!("expected {} simulation parameters, got {}", self.param_dim, p.len()));
        }
        Ok(p.iter()
            .zip(self.param_mean.iter().zip(&self.param_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn write_meta(&self, p: &mut ModelParams) {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        self.flint.write_meta(p);
        p.set_meta("hyper.param_dim", self.param_dim);
        p.set_meta("hyper.hidden", format!("{},{}", self.hidden[0], self.hidden[1]));
        p.set_meta("hyper.conv", format!("{},{},{}", self.conv_channels, self.conv_len, self.conv_out));
        p.set_meta("hyper.dropout", self.dropout);
        p.set_meta("hyper.param_mean", list(&self.param_mean));
        p.set_meta("hyper.param_std", list(&self.param_std));
    }

    pub fn from_meta(p: &ModelParams) -> Result<Self> {
        fn list<T: std::str::FromStr>(p: &ModelParams, key: &str) -> Result<Vec<T>> {
            p.meta(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?
                .split(',')
                .map(|s| s.parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("checkpoint `{key}` is malformed")))
        }
        let hidden: Vec<usize> = list(p, "hyper.hidden")?;
        let conv: Vec<usize> = list(p, "hyper.conv")?;
        let (&[h0, h1], &[c0, l, c1]) = (hidden.as_slice(), conv.as_slice()) else {
            return Err(Error::Format("checkpoint HyperNet sizes are malformed".into()));
        };
        let cfg = Self {
            param_dim: p.meta_parse("hyper.param_dim")?,
            hidden: [h0, h1],
            conv_channels: c0,
            conv_len: l,
            conv_out: c1,
            dropout: p.meta_parse("hyper.dropout")?,
            flint: FlintConfig::from_meta(p)?,
            param_mean: list(p, "hyper.param_mean")?,
            param_std: list(p, "hyper.param_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// HyperNet weights plus the static FLINT* tensors, deterministic under `seed`.
pub fn build_hyperflint(cfg: &HyperConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let widths = [cfg.param_dim, cfg.hidden[0], cfg.hidden[1], cfg.conv_channels * cfg.conv_len];
    for i in 0..3 {
        let b = (1.0 / widths[i] as f64).sqrt();
        p.insert(format!("hyper.fc{i}.weight"), uniform(&[widths[i + 1], widths[i]], b, &mut rng));
        p.insert(format!("hyper.fc{i}.bias"), uniform(&[widths[i + 1]], b, &mut rng));
        p.insert(format!("hyper.fc{i}.slope"), Tensor::from_vec(vec![0.25]));
    }
    for (i, (cin, cout)) in [(cfg.conv_channels, cfg.conv_out), (cfg.conv_out, cfg.conv_out)].into_iter().enumerate() {
        let b = (1.0 / (3 * cin) as f64).sqrt();
        p.insert(format!("hyper.conv{i}.weight"), uniform(&[cout, cin, 3], b, &mut rng));
        p.insert(format!("hyper.conv{i}.bias"), uniform(&[cout], b, &mut rng));
        p.insert(format!("hyper.conv{i}.slope"), Tensor::filled(vec![cout], 0.25));
    }
    let flat = cfg.conv_out * cfg.conv_len;
    let theta_len = cfg.theta_len();
    let b = OUT_WEIGHT_SCALE * (1.0 / flat as f64).sqrt();
    p.insert("hyper.out.weight", uniform(&[theta_len, flat], b, &mut rng));
    // the output bias starts as a standard draw of every slot kernel
    let mut bias = Vec::with_capacity(theta_len);
    for s in cfg.slots() {
        bias.extend(init_kernel(&s.shape, &mut rng).into_data());
    }
    p.insert("hyper.out.bias", Tensor::from_vec(bias));
    let mut fl = ModelParams::new();
    init_layers(&cfg.flint.layers(), cfg.flint.rank, &mut rng, &mut fl);
    for (name, t) in fl.iter() {
        if !cfg.slots().iter().any(|s| s.name == name) {
            p.insert(name, t.clone());
        }
    }
    cfg.write_meta(&mut p);
    Ok(p)
}

fn dropout(g: &mut Graph, x: Node, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Node> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let m: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(shape, m)?);
    g.mul(x, mask)
}

/// θ for `sim_params`. Dropout is active only when `rng` is given.
pub fn hypernet_forward(
    g: &mut Graph,
    net: &Bound,
    cfg: &HyperConfig,
    sim_params: &[f64],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Node> {
    let z = cfg.standardize(sim_params)?;
    let mut h = g.constant(Tensor::from_vec(z));
    for i in 0..3 {
        let w = net.get(&format!("hyper.fc{i}.weight"))?;
        let b = net.get(&format!("hyper.fc{i}.bias"))?;
        let a = net.get(&format!("hyper.fc{i}.slope"))?;
        h = g.linear(h, w, b)?;
        h = g.prelu(h, a)?;
        if i < 2 {
            h = dropout(g, h, cfg.dropout, rng.as_deref_mut())?;
        }
    }
    h = g.reshape(h, &[cfg.conv_channels, cfg.conv_len])?;
    for i in 0..2 {
        let w = net.get(&format!("hyper.conv{i}.weight"))?;
        let b = net.get(&format!("hyper.conv{i}.bias"))?;
        let a = net.get(&format!("hyper.conv{i}.slope"))?;
        h = g.conv(h, w, b, &[1], &[1])?;
        h = g.prelu(h, a)?;
    }
    h = g.reshape(h, &[cfg.conv_out * cfg.conv_len])?;
    let w = net.get("hyper.out.weight")?;
    let b = net.get("hyper.out.bias")?;
    g.linear(h, w, b)
}

/// `net` with every slot kernel replaced by its slice of `theta`.
pub fn bind_theta(g: &mut Graph, net: &Bound, cfg: &HyperConfig, theta: Node) -> Result<Bound> {
    let want = cfg.theta_len();
    if g.shape(theta) != [want] {
        return Err(invalid!("θ has shape {:?}, expected [{want}]", g.shape(theta)));
    }
    let mut out = net.clone();
    for s in cfg.slots() {
        let flat = g.narrow(theta, s.offset, s.len())?;
        let k = g.reshape(flat, &s.shape)?;
        out.set(s.name, k);
    }
    Ok(out)
}

/// FLINT* with θ-derived kernels; same contract as [`forward_student`].
pub fn flintstar_forward(
    g: &mut Graph,
    net: &Bound,
    cfg: &HyperConfig,
    theta: Node,
    ds: Node,
    du: Node,
    tau: f64,
) -> Result<StudentOutput> {
    let full = bind_theta(g, net, cfg, theta)?;
    forward_student(g, &full, &cfg.flint, ds, du, tau)
}

/// Eval-mode θ as plain values.
pub fn theta_of(params: &ModelParams, cfg: &HyperConfig, sim_params: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let net = params.bind_frozen(&mut g);
    let t = hypernet_forward(&mut g, &net, cfg, sim_params, None)?;
    Ok(g.value(t).data().to_vec())
}

/// Eval-mode HyperFLINT inference.
pub fn hyper_infer(params: &ModelParams, sim_params: &[f64], ds: &Grid, du: &Grid, tau: f64) -> Result<Inference> {
    let cfg = HyperConfig::from_meta(params)?;
    let mut g = Graph::new();
    let net = params.bind_frozen(&mut g);
    let theta = hypernet_forward(&mut g, &net, &cfg, sim_params, None)?;
    let full = bind_theta(&mut g, &net, &cfg, theta)?;
    infer_with(&mut g, &full, &cfg.flint, ds, du, tau)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn distance_matrix(vecs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vecs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(&vecs[i], &vecs[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Pairwise Euclidean distances between eval-mode θ vectors.
pub fn weight_similarity_matrix(params: &ModelParams, param_sets: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if param_sets.len() < 2 {
        return Err(invalid!("need at least two parameter sets"));
    }
    let cfg = HyperConfig::from_meta(params)?;
    let thetas = param_sets
        .iter()
        .map(|p| theta_of(params, &cfg, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(distance_matrix(&thetas))
}

/// Pairwise distances between members' flattened fields and flows over
/// their common timestep prefix.
pub fn data_distance_matrix(dataset: &EnsembleSet) -> Result<Vec<Vec<f64>>> {
    let steps = dataset.members.iter().map(|m| m.len()).min().unwrap_or(0);
    if steps == 0 {
        return Err(invalid!("dataset has an empty member"));
    }
    let vecs: Vec<Vec<f64>> = dataset
        .members
        .iter()
        .map(|m| {
            let mut v: Vec<f64> = m.timesteps[..steps].iter().flat_map(|g| g.values().iter().copied()).collect();
            if let Some(fl) = &m.flows {
                for f in &fl[..steps] {
                    for c in f.components() {
                        v.extend_from_slice(c);
                    }
                }
            }
            v
        })
        .collect();
    if vecs.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(invalid!("members differ in grid size"));
    }
    Ok(distance_matrix(&vecs))
}

/// Fraction of sampled (anchor, closer, farther) triplets, ranked by
/// `reference`, whose order `candidate` preserves strictly. Triplets tied in
/// `reference` are redrawn.
pub fn triplet_agreement(reference: &[Vec<f64>], candidate: &[Vec<f64>], n_triplets: usize, seed: u64) -> Result<f64> {
    let n = reference.len();
    if n < 3 || candidate.len() != n {
        return Err(invalid!("need at least three members with matching matrices"));
    }
    let untied = (0..n).any(|a| {
        (0..n).any(|b| (0..n).any(|c| a != b && a != c && b != c && reference[a][b] != reference[a][c]))
    });
    if !untied {
        return Err(invalid!("every triplet is tied in the reference distances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = 0usize;
    let mut drawn = 0usize;
    while drawn < n_triplets {
        let idx = sample(&mut rng, n, 3);
        let (a, b, c) = (idx.index(0), idx.index(1), idx.index(2));
        let (db, dc) = (reference[a][b], reference[a][c]);
        if db == dc {
            continue;
        }
        let (near, far) = if db < dc { (b, c) } else { (c, b) };
        drawn += 1;
        if candidate[a][near] < candidate[a][far] {
            kept += 1;
        }
    }
    Ok(kept as f64 / n_triplets.max(1) as f64)
}

/// Triplet agreement between data-space and θ-space distances of the members.
pub fn triplet_correlation(params: &ModelParams, dataset: &EnsembleSet, n_triplets: usize, seed: u64) -> Result<f64> {
    if dataset.members.len() < 3 {
        return Err(invalid!("triplet correlation needs at least three members"));
    }
    let data = data_distance_matrix(dataset)?;
    let sets: Vec<Vec<f64>> = dataset.members.iter().map(|m| m.sim_params.clone()).collect();
    let theta = weight_similarity_matrix(params, &sets)?;
    triplet_agreement(&data, &theta, n_triplets, seed)
}
