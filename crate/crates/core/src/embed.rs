//! Embedding backends: z-scored PCA and a dense autoencoder family
//! (plain, sparse, β-VAE). Latent codes wider than 2 are reduced to 2D
//! with PCA.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};
use crate::evalkit::Embedding2D;
use crate::fieldio::EnsembleSet;
use crate::flint::{init_bias, init_kernel};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Graph, Node, Tensor};
use crate::trainer::{opt_step, AdamState};

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;
pub const SPARSE_L1_DEFAULT: f64 = 1e-4;
pub const SPARSE_L2_DEFAULT: f64 = 1e-5;
const PRELU_INIT: f64 = 0.25;

/// Z-scored principal component model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Per-feature standard deviation; 1 for constant features.
    pub scale: Vec<f64>,
    /// `k` orthonormal components, each of length `features`.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing.
    pub variances: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or_else(|| invalid!("no data rows"))?;
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(shape_err!("data rows must share one nonzero length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("data has non-finite entries".into()));
    }
    Ok(d)
}

/// Fits the top `k` components by projected power iteration on the
/// covariance of the z-scored rows. The covariance is applied as
/// `Xᵀ(Xv)/(n−1)` and never formed.
pub fn pca_fit(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let d = check_rows(rows)?;
    let n = rows.len();
    if k == 0 || k > n.min(d) {
        return Err(invalid!("pca: k={k} must be in 1..={}", n.min(d)));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let denom = (n.max(2) - 1) as f64;
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / denom;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let cov = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for r in &x {
            let p = dot(r, v) / denom;
            out.iter_mut().zip(r).for_each(|(o, ri)| *o += p * ri);
        }
        out
    };
    // residuals this small relative to the covariance trace are round-off
    let trace = x.iter().flatten().map(|v| v * v).sum::<f64>() / denom;
    let null = 1e-13 * trace.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        project_out(&mut v, &components);
        normalize(&mut v);
        for _ in 0..POWER_MAX_ITERS {
            let mut w = cov(&v);
            project_out(&mut w, &components);
            if normalize(&mut w) <= null {
                break;
            }
            // re-orthogonalize against round-off drift
            project_out(&mut w, &components);
            normalize(&mut w);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if delta < POWER_TOL {
                break;
            }
        }
        let big = v.iter().enumerate().fold(0, |bi, (i, x)| if x.abs() > v[bi].abs() { i } else { bi });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variances.push(dot(&v, &cov(&v)).max(0.0));
        components.push(v);
    }
    Ok(PcaModel { mean, scale, components, variances })
}

impl PcaModel {
    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `k`-dimensional codes of `rows`.
    pub fn project(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                if r.len() != self.features() {
                    return Err(shape_err!("pca: row has {} features, model has {}", r.len(), self.features()));
                }
                let z: Vec<f64> = r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
                Ok(self.components.iter().map(|c| dot(&z, c)).collect())
            })
            .collect()
    }

    /// Maps codes back to feature space.
    pub fn reconstruct(&self, codes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        codes
            .iter()
            .map(|c| {
                let mut z = vec![0.0; self.features()];
                for (ci, comp) in c.iter().zip(&self.components) {
                    z.iter_mut().zip(comp).for_each(|(zi, v)| *zi += ci * v);
                }
                z.iter().zip(&self.mean).zip(&self.scale).map(|((z, m), s)| z * s + m).collect()
            })
            .collect()
    }
}

/// Shorthand for [`PcaModel::project`].
pub fn pca_project(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    model.project(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Plain,
    Sparse { l1: f64, l2: f64 },
    BetaVae { beta: f64 },
}

impl Variant {
    pub fn sparse_default() -> Self {
        Variant::Sparse { l1: SPARSE_L1_DEFAULT, l2: SPARSE_L2_DEFAULT }
    }
}

/// Dense encoder widths; the decoder mirrors them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub variant: Variant,
}

impl EncoderConfig {
    /// `depth` hidden layers halving from `input_dim`, never narrower than the latent.
    pub fn halving(input_dim: usize, latent_dim: usize, depth: usize, variant: Variant) -> Self {
        let hidden = (1..=depth).map(|i| (input_dim >> i).max(latent_dim)).collect();
        Self { input_dim, hidden, latent_dim, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(invalid!("encoder widths must be positive"));
        }
        match self.variant {
            Variant::Sparse { l1, l2 } if !(l1 >= 0.0 && l2 >= 0.0) => Err(invalid!("sparse λ must be nonnegative")),
            Variant::BetaVae { beta } if !(beta >= 0.0) => Err(invalid!("β must be nonnegative")),
            _ => Ok(()),
        }
    }

    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.hidden.iter().copied()).collect()
    }

    fn write_meta(&self, p: &mut ModelParams) {
        let h: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        p.set_meta("embed.input", self.input_dim);
        p.set_meta("embed.hidden", h.join(","));
        p.set_meta("embed.latent", self.latent_dim);
        let v = match self.variant {
            Variant::Plain => "plain".to_string(),
            Variant::Sparse { l1, l2 } => format!("sparse:{l1}:{l2}"),
            Variant::BetaVae { beta } => format!("vae:{beta}"),
        };
        p.set_meta("embed.variant", v);
    }

    fn from_meta(p: &ModelParams) -> Result<Self> {
        let bad = |k: &str| Error::Format(format!("checkpoint `{k}` is malformed"));
        let hidden = p
            .meta("embed.hidden")
            .ok_or_else(|| bad("embed.hidden"))?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("embed.hidden")))
            .collect::<Result<_>>()?;
        let v = p.meta("embed.variant").ok_or_else(|| bad("embed.variant"))?;
        let f: Vec<&str> = v.split(':').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("embed.variant"));
        let variant = match f[..] {
            ["plain"] => Variant::Plain,
            ["sparse", a, b] => Variant::Sparse { l1: num(a)?, l2: num(b)? },
            ["vae", b] => Variant::BetaVae { beta: num(b)? },
            _ => return Err(bad("embed.variant")),
        };
        Ok(Self { input_dim: p.meta_parse("embed.input")?, hidden, latent_dim: p.meta_parse("embed.latent")?, variant })
    }
}

/// Encoder/decoder parameters.
///
/// Names: `enc{i}.*` and `dec{i}.*` hidden layers (weight, bias, shared
/// PReLU slope), `enc.out.*` (or `enc.mu.*` and `enc.logsig.*` for the
/// β-VAE) and `dec.out.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEncoder {
    pub cfg: EncoderConfig,
    pub params: ModelParams,
}

fn dense(p: &mut ModelParams, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    let shape = [out, inp];
    p.insert(format!("{name}.weight"), init_kernel(&shape, rng));
    p.insert(format!("{name}.bias"), init_bias(&shape, out, rng));
}

impl LatentEncoder {
    /// Untrained encoder with uniform `±sqrt(1/fan_in)` weights.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let w = cfg.widths();
        for i in 0..cfg.hidden.len() {
            dense(&mut p, &format!("enc{i}"), w[i + 1], w[i], &mut rng);
            p.insert(format!("enc{i}.slope"), Tensor::from_vec(vec![PRELU_INIT]));
        }
        let top = *w.last().expect("input width");
        match cfg.variant {
            Variant::BetaVae { .. } => {
                dense(&mut p, "enc.mu", cfg.latent_dim, top, &mut rng);
                dense(&mut p, "enc.logsig", cfg.latent_dim, top, &mut rng);
            }
            _ => dense(&mut p, "enc.out", cfg.latent_dim, top, &mut rng),
        }
        let mut prev = cfg.latent_dim;
        for (i, &h) in cfg.hidden.iter().rev().enumerate() {
            dense(&mut p, &format!("dec{i}"), h, prev, &mut rng);
            p.insert(format!("dec{i}.slope"), Tensor::from_vec(vec![PRELU_INIT]));
            prev = h;
        }
        dense(&mut p, "dec.out", cfg.input_dim, prev, &mut rng);
        cfg.write_meta(&mut p);
        p.set_meta("embed.trained", false);
        Ok(Self { cfg, params: p })
    }

    pub fn is_trained(&self) -> bool {
        self.params.meta("embed.trained") == Some("true")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let params = ModelParams::load(path)?;
        let cfg = EncoderConfig::from_meta(&params)?;
        Ok(Self { cfg, params })
    }

    /// Name of the final encoder weight (the sparse L1 target).
    pub fn final_weight(&self) -> &'static str {
        match self.cfg.variant {
            Variant::BetaVae { .. } => "enc.mu.weight",
            _ => "enc.out.weight",
        }
    }
}

fn layer(g: &mut Graph, net: &Bound, name: &str, x: Node, act: bool) -> Result<Node> {
    let y = g.linear(x, net.get(&format!("{name}.weight"))?, net.get(&format!("{name}.bias"))?)?;
    if act {
        g.prelu(y, net.get(&format!("{name}.slope"))?)
    } else {
        Ok(y)
    }
}

fn encode_graph(g: &mut Graph, net: &Bound, cfg: &EncoderConfig, x: Node) -> Result<(Node, Option<Node>)> {
    let mut h = x;
    for i in 0..cfg.hidden.len() {
        h = layer(g, net, &format!("enc{i}"), h, true)?;
    }
    match cfg.variant {
        Variant::BetaVae { .. } => Ok((layer(g, net, "enc.mu", h, false)?, Some(layer(g, net, "enc.logsig", h, false)?))),
        _ => Ok((layer(g, net, "enc.out", h, false)?, None)),
    }
}

fn decode_graph(g: &mut Graph, net: &Bound, cfg: &EncoderConfig, z: Node) -> Result<Node> {
    let mut h = z;
    for i in 0..cfg.hidden.len() {
        h = layer(g, net, &format!("dec{i}"), h, true)?;
    }
    layer(g, net, "dec.out", h, false)
}

fn batch_node(g: &mut Graph, rows: &[Vec<f64>], d: usize) -> Result<Node> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
        return Err(shape_err!("encoder input rows must be non-empty with {d} features"));
    }
    Ok(g.constant(Tensor::new(vec![rows.len(), d], rows.concat())?))
}

/// Latent codes (`μ` for the β-VAE).
pub fn encode(enc: &LatentEncoder, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let net = enc.params.bind_frozen(&mut g);
    let x = batch_node(&mut g, rows, enc.cfg.input_dim)?;
    let (z, _) = encode_graph(&mut g, &net, &enc.cfg, x)?;
    Ok(g.value(z).data().chunks(enc.cfg.latent_dim).map(<[f64]>::to_vec).collect())
}

fn mse(g: &mut Graph, a: Node, b: Node) -> Result<Node> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Plain or sparse objective: reconstruction MSE, plus `λ₁‖W_final‖₁ + λ₂Σ‖W‖²`
/// for the sparse variant.
pub fn ae_loss(g: &mut Graph, net: &Bound, enc: &LatentEncoder, x: Node) -> Result<Node> {
    let (z, _) = encode_graph(g, net, &enc.cfg, x)?;
    let y = decode_graph(g, net, &enc.cfg, z)?;
    let rec = mse(g, y, x)?;
    match enc.cfg.variant {
        Variant::Plain => Ok(rec),
        Variant::Sparse { l1, l2 } => {
            let a = g.abs(net.get(enc.final_weight())?);
            let s = g.sum(a);
            let pen1 = g.scale(s, l1);
            let mut out = g.add(rec, pen1)?;
            for (_, node) in net.iter().filter(|(n, _)| n.ends_with(".weight")).collect::<Vec<_>>() {
                let sq = g.square(node);
                let s = g.sum(sq);
                let pen = g.scale(s, l2);
                out = g.add(out, pen)?;
            }
            Ok(out)
        }
        Variant::BetaVae { .. } => Err(invalid!("β-VAE encoders use vae_loss")),
    }
}

/// `−½ Σ (1 + log σ² − μ² − σ²)` for one latent vector.
pub fn kl_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 1.0 + (s * s).ln() - m * m - s * s)
        .sum::<f64>()
}

/// Reconstruction MSE from `z = μ + σ⊙ε` plus `β` times the mean per-row KL.
/// `ε` is drawn once per call from `rng`.
pub fn vae_loss(g: &mut Graph, net: &Bound, enc: &LatentEncoder, x: Node, beta: f64, rng: &mut ChaCha8Rng) -> Result<Node> {
    let (mu, logsig) = encode_graph(g, net, &enc.cfg, x)?;
    let logsig = logsig.ok_or_else(|| invalid!("vae_loss needs a β-VAE encoder"))?;
    let shape = g.shape(mu).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = g.constant(Tensor::new(shape.clone(), eps)?);
    let sigma = g.exp(logsig);
    let noise = g.mul(sigma, eps)?;
    let z = g.add(mu, noise)?;
    let y = decode_graph(g, net, &enc.cfg, z)?;
    let rec = mse(g, y, x)?;
    // 1 + 2 log σ − μ² − σ²
    let two_ls = g.scale(logsig, 2.0);
    let one = g.offset(two_ls, 1.0);
    let mu2 = g.square(mu);
    let s2 = g.square(sigma);
    let a = g.sub(one, mu2)?;
    let b = g.sub(a, s2)?;
    let s = g.sum(b);
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let kl = g.scale(s, -0.5 / rows as f64);
    let bkl = g.scale(kl, beta);
    g.add(rec, bkl)
}

fn objective(g: &mut Graph, net: &Bound, enc: &LatentEncoder, x: Node, rng: &mut ChaCha8Rng) -> Result<Node> {
    match enc.cfg.variant {
        Variant::BetaVae { beta } => vae_loss(g, net, enc, x, beta, rng),
        _ => ae_loss(g, net, enc, x),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 16, lr: 1e-3, weight_decay: 0.0, seed: 0 }
    }
}

/// Minibatch AdamW on shuffled rows; returns per-epoch mean losses.
pub fn train_encoder(enc: &mut LatentEncoder, rows: &[Vec<f64>], cfg: &EncoderTrainConfig) -> Result<Vec<f64>> {
    check_rows(rows)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(invalid!("epochs and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&enc.params);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let mut g = Graph::new();
            let net = enc.params.bind(&mut g);
            let x = batch_node(&mut g, &batch, enc.cfg.input_dim)?;
            let l = objective(&mut g, &net, enc, x, &mut rng)?;
            let v = g.value(l).item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("encoder loss is not finite ({v})")));
            }
            total += v * chunk.len() as f64;
            g.backward(l)?;
            let grads = net.grads(&g, &enc.params);
            opt_step(&mut enc.params, &grads, &mut state, cfg.lr, cfg.weight_decay)?;
        }
        history.push(total / rows.len() as f64);
    }
    enc.params.set_meta("embed.trained", true);
    Ok(history)
}

pub enum Backend<'a> {
    Pca,
    Encoder(&'a LatentEncoder),
}

/// Flattened timestep fields of every member, in member then time order.
pub fn dataset_rows(dataset: &EnsembleSet) -> Vec<Vec<f64>> {
    dataset
        .members
        .iter()
        .flat_map(|m| m.timesteps.iter().map(|g| g.values().to_vec()))
        .collect()
}

/// One 2D point per timestep, labeled with its member's parameter class.
pub fn embed_dataset(dataset: &EnsembleSet, backend: &Backend) -> Result<Embedding2D> {
    let rows = dataset_rows(dataset);
    let classes = dataset.param_classes();
    let labels: Vec<Option<usize>> = dataset
        .members
        .iter()
        .zip(&classes)
        .flat_map(|(m, &c)| std::iter::repeat_n(Some(c), m.len()))
        .collect();
    let codes = match backend {
        Backend::Pca => pca_fit(&rows, 2.min(rows.len()).min(rows[0].len()))?.project(&rows)?,
        Backend::Encoder(enc) => {
            if !enc.is_trained() {
                return Err(invalid!("encoder backend is untrained"));
            }
            let z = encode(enc, &rows)?;
            if enc.cfg.latent_dim > 2 {
                pca_fit(&z, 2.min(z.len()))?.project(&z)?
            } else {
                z
            }
        }
    };
    let points = codes.iter().map(|c| [c[0], c.get(1).copied().unwrap_or(0.0)]).collect();
    Embedding2D::new(points, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldio::{synth_ensemble, Motion, SynthConfig};
    use crate::tensor::grad_check;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // anisotropic so the spectrum is well separated
        (0..n)
            .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64) + if j % 3 == 0 { 0.0 } else { 0.3 }).collect())
            .collect()
    }

    #[test]
    fn rank_one_data() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let m = pca_fit(&rows, 2).unwrap();
        assert!(m.variances[1] < 1e-8, "{:?}", m.variances);
        assert!((m.variances[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn mean_row_projects_to_origin() {
        let rows = random_rows(40, 6, 1);
        let m = pca_fit(&rows, 3).unwrap();
        let z = m.project(&[m.mean.clone()]).unwrap();
        assert!(z[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn components_orthonormal_and_sign_fixed() {
        let m = pca_fit(&random_rows(50, 8, 2), 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&m.components[i], &m.components[j]) - want).abs() < 1e-10);
            }
            let c = &m.components[i];
            let big = c.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
        assert!(m.variances.windows(2).all(|w| w[0] >= w[1]));
    }

    fn sym_eig_oracle(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = rows.len();
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
            .collect();
        let x = DMatrix::from_fn(n, d, |i, j| (rows[i][j] - mean[j]) / sd[j]);
        let c = x.transpose() * &x / (n - 1) as f64;
        let e = c.symmetric_eigen();
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        (
            idx.iter().map(|&i| e.eigenvalues[i]).collect(),
            idx.iter().map(|&i| e.eigenvectors.column(i).iter().copied().collect()).collect(),
        )
    }

    #[test]
    fn top2_subspace_matches_dense_eigensolver() {
        for seed in 0..5 {
            let rows = random_rows(60, 12 + seed as usize, seed);
            let m = pca_fit(&rows, 2).unwrap();
            let (vals, vecs) = sym_eig_oracle(&rows);
            // principal angles: singular values of QᵀV are their cosines
            let q = DMatrix::from_fn(m.features(), 2, |i, j| m.components[j][i]);
            let v = DMatrix::from_fn(m.features(), 2, |i, j| vecs[j][i]);
            let s = (q.transpose() * v).singular_values();
            for c in s.iter() {
                let angle = c.min(1.0).acos();
                assert!(angle < 1e-6, "seed {seed}: angle {angle}");
            }
            assert!((m.variances[0] - vals[0]).abs() < 1e-8 * vals[0]);
        }
    }

    #[test]
    fn full_rank_is_lossless() {
        let rows = random_rows(20, 5, 4);
        let m = pca_fit(&rows, 5).unwrap();
        let back = m.reconstruct(&m.project(&rows).unwrap());
        let err: f64 = back.iter().flatten().zip(rows.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(pca_fit(&rows, 6).is_err());
    }

    #[test]
    fn constant_feature_scale_is_one() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 3.0]).collect();
        let m = pca_fit(&rows, 1).unwrap();
        assert_eq!(m.scale[1], 1.0);
    }

    fn identity_encoder(d: usize) -> LatentEncoder {
        let cfg = EncoderConfig { input_dim: d, hidden: vec![], latent_dim: d, variant: Variant::Plain };
        let mut e = LatentEncoder::new(cfg, 0).unwrap();
        let eye = Tensor::new(vec![d, d], (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        for n in ["enc.out", "dec.out"] {
            *e.params.get_mut(&format!("{n}.weight")).unwrap() = eye.clone();
            *e.params.get_mut(&format!("{n}.bias")).unwrap() = Tensor::zeros(vec![d]);
        }
        e
    }

    fn eval_ae(e: &LatentEncoder, rows: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let net = e.params.bind_frozen(&mut g);
        let x = batch_node(&mut g, rows, e.cfg.input_dim).unwrap();
        let l = ae_loss(&mut g, &net, e, x).unwrap();
        g.value(l).item()
    }

    #[test]
    fn ae_loss_examples() {
        let rows = vec![vec![0.1, 0.5, 0.9], vec![0.3, 0.2, 0.7]];
        let mut e = identity_encoder(3);
        assert_eq!(eval_ae(&e, &rows), 0.0);
        *e.params.get_mut("dec.out.bias").unwrap() = Tensor::filled(vec![3], 0.1);
        assert!((eval_ae(&e, &rows) - 0.01).abs() < 1e-15);
        // all-ones final encoder weight of 10 entries
        let cfg = EncoderConfig { input_dim: 5, hidden: vec![], latent_dim: 2, variant: Variant::Sparse { l1: 0.1, l2: 0.0 } };
        let mut s = LatentEncoder::new(cfg, 0).unwrap();
        let mut plain = s.clone();
        plain.cfg.variant = Variant::Plain;
        *s.params.get_mut("enc.out.weight").unwrap() = Tensor::filled(vec![2, 5], 1.0);
        *plain.params.get_mut("enc.out.weight").unwrap() = Tensor::filled(vec![2, 5], 1.0);
        let x = vec![vec![0.2; 5]];
        assert!((eval_ae(&s, &x) - eval_ae(&plain, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_closed_form(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((kl_closed_form(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    pub(crate) fn kl_monte_carlo(mu: f64, sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        // E_q[log q(z) − log p(z)]
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu + sigma * e;
                (-0.5 * e * e - sigma.ln()) - (-0.5 * z * z)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mu = rng.random_range(-2.0..2.0);
            let sigma = rng.random_range(0.5..2.0);
            let cf = kl_closed_form(&[mu], &[sigma]);
            let mc = kl_monte_carlo(mu, sigma, 100_000, &mut rng);
            assert!((mc - cf).abs() <= 0.02 * cf.max(0.05), "{mu} {sigma}: {mc} vs {cf}");
        }
    }

    fn vae_value(e: &LatentEncoder, x: &[Vec<f64>], beta: f64, seed: u64) -> f64 {
        let mut g = Graph::new();
        let net = e.params.bind_frozen(&mut g);
        let xn = batch_node(&mut g, x, e.cfg.input_dim).unwrap();
        let l = vae_loss(&mut g, &net, e, xn, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        g.value(l).item()
    }

    #[test]
    fn vae_loss_gradients() {
        let cfg = EncoderConfig::halving(6, 2, 1, Variant::BetaVae { beta: 0.7 });
        let e = LatentEncoder::new(cfg, 3).unwrap();
        let names: Vec<String> = e.params.names().map(String::from).collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| e.params.get(n).unwrap().clone()).collect();
        let x = vec![vec![0.1, 0.4, 0.8, 0.3, 0.9, 0.5], vec![0.6, 0.2, 0.3, 0.7, 0.1, 0.4]];
        let err = grad_check(&inputs, |g, nodes| {
            let mut b = Bound::default();
            for (n, &node) in names.iter().zip(nodes) {
                b.set(n.clone(), node);
            }
            let xn = batch_node(g, &x, 6)?;
            vae_loss(g, &b, &e, xn, 0.7, &mut ChaCha8Rng::seed_from_u64(1))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sparse_loss_gradients() {
        let cfg = EncoderConfig::halving(6, 2, 1, Variant::Sparse { l1: 0.01, l2: 0.001 });
        let e = LatentEncoder::new(cfg, 4).unwrap();
        let names: Vec<String> = e.params.names().map(String::from).collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| e.params.get(n).unwrap().clone()).collect();
        let x = vec![vec![0.1, 0.4, 0.8, 0.3, 0.9, 0.5]];
        let err = grad_check(&inputs, |g, nodes| {
            let mut b = Bound::default();
            for (n, &node) in names.iter().zip(nodes) {
                b.set(n.clone(), node);
            }
            let xn = batch_node(g, &x, 6)?;
            ae_loss(g, &b, &e, xn)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_reduces_loss_and_round_trips() {
        let rows = random_rows(32, 8, 6).into_iter().map(|r| r.iter().map(|v| (v + 9.0) / 18.0).collect()).collect::<Vec<Vec<f64>>>();
        for variant in [Variant::Plain, Variant::sparse_default(), Variant::BetaVae { beta: 1.0 }] {
            let mut e = LatentEncoder::new(EncoderConfig::halving(8, 2, 2, variant), 0).unwrap();
            assert!(!e.is_trained());
            let h = train_encoder(&mut e, &rows, &EncoderTrainConfig { epochs: 40, batch_size: 8, lr: 3e-3, ..Default::default() }).unwrap();
            assert!(h.last().unwrap() < &h[0], "{variant:?}: {h:?}");
            assert!(e.is_trained());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("enc.ckpt");
            e.save(&path).unwrap();
            let back = LatentEncoder::load(&path).unwrap();
            assert_eq!(back.cfg, e.cfg);
            assert!(back.is_trained());
        }
    }

    fn two_param_set() -> EnsembleSet {
        let cfg = SynthConfig {
            dims: vec![16, 16],
            n_timesteps: 8,
            motions: vec![
                Motion::Translation(vec![0.5, 0.0]),
                Motion::Translation(vec![0.5, 0.0]),
                Motion::Translation(vec![0.0, 1.5]),
                Motion::Translation(vec![0.0, 1.5]),
            ],
            shared_layout: true,
            noise_sigma: 0.01,
            ..SynthConfig::default()
        };
        let mut e = synth_ensemble(&cfg).unwrap();
        e.normalize(false);
        e
    }

    fn mean_dist(emb: &Embedding2D, same: bool) -> f64 {
        let (mut t, mut n) = (0.0, 0usize);
        for i in 0..emb.len() {
            for j in i + 1..emb.len() {
                if (emb.labels[i] == emb.labels[j]) == same {
                    let (a, b) = (emb.points[i], emb.points[j]);
                    t += (a[0] - b[0]).hypot(a[1] - b[1]);
                    n += 1;
                }
            }
        }
        t / n as f64
    }

    #[test]
    fn embed_dataset_pca_and_encoder() {
        let set = two_param_set();
        let emb = embed_dataset(&set, &Backend::Pca).unwrap();
        assert_eq!(emb.len(), 32);
        assert!(mean_dist(&emb, true) < mean_dist(&emb, false));
        let enc = LatentEncoder::new(EncoderConfig::halving(256, 4, 2, Variant::Plain), 0).unwrap();
        assert!(embed_dataset(&set, &Backend::Encoder(&enc)).is_err());
        let mut enc = enc;
        train_encoder(&mut enc, &dataset_rows(&set), &EncoderTrainConfig { epochs: 5, ..Default::default() }).unwrap();
        let e2 = embed_dataset(&set, &Backend::Encoder(&enc)).unwrap();
        assert_eq!(e2.len(), 32);
        assert_eq!(e2, embed_dataset(&set, &Backend::Encoder(&enc)).unwrap());
    }

    #[test]
    fn identical_rows_identical_points() {
        let mut set = two_param_set();
        let first = set.members[0].timesteps[0].clone();
        set.members[1].timesteps[3] = first;
        let emb = embed_dataset(&set, &Backend::Pca).unwrap();
        assert_eq!(emb.points[0], emb.points[8 + 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kl_nonnegative(mu in proptest::collection::vec(-3.0f64..3.0, 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma: Vec<f64> = mu.iter().map(|_| rng.random_range(0.2..3.0)).collect();
            prop_assert!(kl_closed_form(&mu, &sigma) >= 0.0);
            let zero = vec![0.0; mu.len()];
            let one = vec![1.0; mu.len()];
            prop_assert_eq!(kl_closed_form(&zero, &one), 0.0);
        }

        #[test]
        fn vae_loss_monotone_in_beta(b1 in 0.0f64..4.0, b2 in 0.0f64..4.0, seed in 0u64..100) {
            let e = LatentEncoder::new(EncoderConfig::halving(6, 2, 1, Variant::BetaVae { beta: 1.0 }), seed).unwrap();
            let x = vec![vec![0.1, 0.4, 0.8, 0.3, 0.9, 0.5]];
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            prop_assert!(vae_value(&e, &x, lo, seed) <= vae_value(&e, &x, hi, seed) + 1e-15);
        }
    }
}
