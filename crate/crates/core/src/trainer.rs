//! Optimization loop shared by FLINT and HyperFLINT.
//!
//! One epoch is `batches_per_epoch` mini-batches of triplets drawn from the
//! training members. Every triplet runs on its own graph; gradients are
//! averaged over the batch before one AdamW step. Validation runs once per
//! epoch on a fixed triplet set drawn from the validation members.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fieldio::{EnsembleSet, FlowGrid, Grid, Member};
use crate::flint::{forward_student, forward_teacher, FlintConfig};
use crate::hyper::{flintstar_forward, hypernet_forward, HyperConfig};
use crate::losses::{l_dis, l_flow, l_photo, l_rec, l_reg, total_supervised, total_unsupervised, LossWeights, UnsupervisedParts};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Graph, Node};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// `L_rec + λ_flow L_flow` with student and teacher.
    FlowSupervised,
    /// `L_rec + λ_dis L_dis + λ_photo L_photo + λ_reg L_reg`; GT flow unused.
    FlowUnsupervised,
    /// HyperNet + FLINT*: `L_rec + λ_flow L_flow`, student only.
    Hyper,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::FlowSupervised),
            "unsupervised" => Ok(Self::FlowUnsupervised),
            "hyper" => Ok(Self::Hyper),
            _ => Err(invalid!("unknown mode `{s}` (supervised, unsupervised, hyper)")),
        }
    }
}

/// How predicted `t→u` flows are compared with the per-step GT velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowScaling {
    /// `F̂_{t→u}` against `F_gt` as is.
    #[default]
    Direct,
    /// `F̂_{t→u} / (u − t)` against `F_gt` (cells per step).
    GapScaled,
}

impl FlowScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::GapScaled => "gap",
        }
    }

    /// Reads the scaling recorded in a trained checkpoint (direct when absent).
    pub fn of(params: &ModelParams) -> Result<Self> {
        params.meta("train.flow_scaling").unwrap_or("direct").parse()
    }
}

impl std::str::FromStr for FlowScaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "gap" => Ok(Self::GapScaled),
            _ => Err(invalid!("unknown flow scaling `{s}` (direct, gap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Flint(FlintConfig),
    Hyper(HyperConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Maximum `u − s`.
    pub window: usize,
    pub mode: TrainMode,
    pub flow_scaling: FlowScaling,
    pub seed: u64,
    /// Validation member indices; empty selects the last member.
    pub val_members: Vec<usize>,
    pub val_triplets: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            batch_size: 8,
            batches_per_epoch: 4,
            base_lr: 1e-3,
            final_lr: 1e-5,
            weight_decay: 1e-4,
            patience: 30,
            window: 12,
            mode: TrainMode::FlowSupervised,
            flow_scaling: FlowScaling::Direct,
            seed: 0,
            val_members: Vec::new(),
            val_triplets: 16,
            weights: LossWeights::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid!("config `{key}`: cannot parse `{v}`"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.val_triplets == 0 {
            return Err(invalid!("epochs, batch size, batches per epoch and validation triplets must be positive"));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(invalid!("need 0 < final_lr ≤ base_lr"));
        }
        if self.window < 2 {
            return Err(invalid!("window must be at least 2"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid!("weight_decay must be nonnegative"));
        }
        self.weights.validate()
    }

    /// Applies one `key = value` setting; returns false for keys it does not own.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "batches_per_epoch" => self.batches_per_epoch = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "final_lr" => self.final_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "flow_scaling" => self.flow_scaling = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "val_members" => {
                self.val_members = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "val_triplets" => self.val_triplets = parse(key, v)?,
            "lambda_flow" => self.weights.flow = parse(key, v)?,
            "gamma" => self.weights.gamma = parse(key, v)?,
            "lambda_dis" => self.weights.dis = parse(key, v)?,
            "lambda_photo" => self.weights.photo = parse(key, v)?,
            "lambda_reg" => self.weights.reg = parse(key, v)?,
            "charbonnier_eps" => self.weights.eps = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid!("config line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(invalid!("config line {}: empty key", i + 1));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Frame indices of a training triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub s: usize,
    pub t: usize,
    pub u: usize,
    pub tau: f64,
}

/// Gap uniform in `[2, min(W, len−1)]`, `s` uniform, `t` uniform over the
/// strict interior.
pub fn sample_triplet(len: usize, window: usize, rng: &mut ChaCha8Rng) -> Result<Triplet> {
    if len < 3 {
        return Err(invalid!("member has {len} timesteps; triplets need at least 3"));
    }
    if window < 2 {
        return Err(invalid!("window must be at least 2"));
    }
    let gap = rng.random_range(2..=window.min(len - 1));
    let s = rng.random_range(0..len - gap);
    let u = s + gap;
    let t = rng.random_range(s + 1..u);
    Ok(Triplet { s, t, u, tau: (t - s) as f64 / gap as f64 })
}

/// Everything one loss evaluation needs.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub ds: Grid,
    pub dt: Grid,
    pub du: Grid,
    pub tau: f64,
    /// `u − t` in timesteps.
    pub gap_tu: f64,
    pub flow: Option<FlowGrid>,
    pub sim_params: Vec<f64>,
}

impl TrainSample {
    pub fn from_member(m: &Member, tr: Triplet) -> Self {
        Self {
            ds: m.timesteps[tr.s].clone(),
            dt: m.timesteps[tr.t].clone(),
            du: m.timesteps[tr.u].clone(),
            tau: tr.tau,
            gap_tu: (tr.u - tr.t) as f64,
            flow: m.flows.as_ref().map(|f| f[tr.t].clone()),
            sim_params: m.sim_params.clone(),
        }
    }
}

/// AdamW moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: i32,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update followed by decoupled decay `p ← p − lr·wd·p`.
pub fn opt_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, wd: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(invalid!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step);
    let c2 = 1.0 - BETA2.powi(state.step);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(invalid!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape()));
        }
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let (m, v) = (state.m.get(name)?.data(), state.v.get(name)?.data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            *pi -= lr * wd * *pi;
        }
    }
    Ok(())
}

/// `final + ½(base − final)(1 + cos(π·epoch/max_epochs))`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, base: f64, final_lr: f64) -> f64 {
    let x = epoch as f64 / max_epochs.max(1) as f64;
    final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Tracks the best validation loss; stops after `patience` epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Records `loss` at `epoch`; returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }
}

/// Initial parameters for `model`, with training metadata attached.
pub fn init_model(model: &ModelSpec, seed: u64) -> Result<ModelParams> {
    match model {
        ModelSpec::Flint(c) => crate::flint::build_flint(c, seed),
        ModelSpec::Hyper(c) => crate::hyper::build_hyperflint(c, seed),
    }
}

fn scaled_flow(g: &mut Graph, f: Node, s: &TrainSample, scaling: FlowScaling) -> Node {
    match scaling {
        FlowScaling::Direct => f,
        FlowScaling::GapScaled => g.scale(f, 1.0 / s.gap_tu),
    }
}

fn need_flow(s: &TrainSample) -> Result<&FlowGrid> {
    s.flow
        .as_ref()
        .ok_or_else(|| invalid!("flow-supervised training needs GT flows"))
}

/// Builds the objective for one sample on `g`.
pub fn sample_loss(
    g: &mut Graph,
    net: &Bound,
    model: &ModelSpec,
    cfg: &TrainConfig,
    s: &TrainSample,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Node> {
    let ds = g.constant(s.ds.to_tensor());
    let du = g.constant(s.du.to_tensor());
    let dt = g.constant(s.dt.to_tensor());
    let w = &cfg.weights;
    match (model, cfg.mode) {
        (ModelSpec::Flint(fc), TrainMode::FlowSupervised) => {
            let gt = g.constant(need_flow(s)?.to_tensor());
            let out = forward_student(g, net, fc, ds, du, s.tau)?;
            let last = *out.states.last().expect("n_blocks ≥ 2");
            let tea = match fc.teacher_channels {
                Some(_) => Some(forward_teacher(g, net, fc, ds, du, s.tau, &last, dt)?),
                None => None,
            };
            let rec = l_rec(g, out.output, tea.map(|t| t.output), dt)?;
            let flows: Vec<Node> = out.states.iter().map(|st| scaled_flow(g, st.flow_u, s, cfg.flow_scaling)).collect();
            let tf = tea.map(|t| scaled_flow(g, t.flow_u, s, cfg.flow_scaling));
            let fl = l_flow(g, &flows, tf, gt, w.gamma)?;
            total_supervised(g, rec, fl, w)
        }
        (ModelSpec::Flint(fc), TrainMode::FlowUnsupervised) => {
            if fc.teacher_channels.is_none() {
                return Err(invalid!("flow-unsupervised training needs a teacher block"));
            }
            let out = forward_student(g, net, fc, ds, du, s.tau)?;
            let last = *out.states.last().expect("n_blocks ≥ 2");
            let tea = forward_teacher(g, net, fc, ds, du, s.tau, &last, dt)?;
            let rec = l_rec(g, out.output, Some(tea.output), dt)?;
            let dis = l_dis(g, [last.flow_s, last.flow_u], [tea.flow_s, tea.flow_u])?;
            let photo = l_photo(g, last.flow_s, last.flow_u, ds, du, out.output, w.eps)?;
            let last_block = fc.n_blocks - 1;
            let mut kernels = Vec::new();
            for l in fc.layers() {
                if l.name.starts_with(&format!("block{last_block}.")) || l.name.starts_with("teacher.") {
                    kernels.push(net.get(&l.weight_name())?);
                }
            }
            let reg = l_reg(g, &kernels)?;
            total_unsupervised(g, UnsupervisedParts { rec, dis, photo, reg }, w)
        }
        (ModelSpec::Hyper(hc), TrainMode::Hyper) => {
            let gt = g.constant(need_flow(s)?.to_tensor());
            let theta = hypernet_forward(g, net, hc, &s.sim_params, dropout)?;
            let out = flintstar_forward(g, net, hc, theta, ds, du, s.tau)?;
            let rec = l_rec(g, out.output, None, dt)?;
            let flows: Vec<Node> = out.states.iter().map(|st| scaled_flow(g, st.flow_u, s, cfg.flow_scaling)).collect();
            let fl = l_flow(g, &flows, None, gt, w.gamma)?;
            total_supervised(g, rec, fl, w)
        }
        (ModelSpec::Hyper(_), m) => Err(invalid!("HyperFLINT trains only in hyper mode, got {m:?}")),
        (ModelSpec::Flint(_), TrainMode::Hyper) => Err(invalid!("hyper mode needs a HyperFLINT model")),
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({v}); training diverged")))
    }
}

/// Mean loss over `samples` and its gradient.
pub fn loss_and_grads(
    params: &ModelParams,
    model: &ModelSpec,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams)> {
    let mut acc = params.zeros_like();
    let mut total = 0.0;
    let k = 1.0 / samples.len() as f64;
    for s in samples {
        let mut g = Graph::new();
        let net = params.bind(&mut g);
        let l = sample_loss(&mut g, &net, model, cfg, s, dropout.as_deref_mut())?;
        total += finite(g.value(l).item(), "training loss")?;
        g.backward(l)?;
        for (name, node) in net.iter() {
            let gr = g.grad(node);
            for (a, b) in acc.get_mut(name)?.data_mut().iter_mut().zip(gr.data()) {
                *a += k * b;
            }
        }
    }
    Ok((total * k, acc))
}

/// Mean eval-mode loss over `samples`.
pub fn eval_loss(params: &ModelParams, model: &ModelSpec, cfg: &TrainConfig, samples: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let net = params.bind_frozen(&mut g);
        let l = sample_loss(&mut g, &net, model, cfg, s, None)?;
        total += g.value(l).item();
    }
    finite(total / samples.len() as f64, "validation loss")
}

/// Splits member indices into (train, validation).
pub fn split_members(n: usize, val: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let val: Vec<usize> = if val.is_empty() { n.checked_sub(1).into_iter().collect() } else { val.to_vec() };
    if let Some(&bad) = val.iter().find(|&&v| v >= n) {
        return Err(invalid!("validation member {bad} out of range (ensemble has {n})"));
    }
    let train: Vec<usize> = (0..n).filter(|i| !val.contains(i)).collect();
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("train/validation split leaves an empty side ({n} members)"));
    }
    Ok((train, val))
}

fn draw(members: &[&Member], window: usize, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let m = members[rng.random_range(0..members.len())];
    let tr = sample_triplet(m.len(), window, rng)?;
    Ok(TrainSample::from_member(m, tr))
}

/// Trains from `init` (or a fresh model when `None`) and returns the
/// best-validation parameters.
pub fn train(
    dataset: &EnsembleSet,
    model: &ModelSpec,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<(ModelParams, TrainHistory)> {
    train_with(dataset, model, cfg, init, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &EnsembleSet,
    model: &ModelSpec,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    dataset.validate()?;
    let (tr_idx, val_idx) = split_members(dataset.members.len(), &cfg.val_members)?;
    let train_m: Vec<&Member> = tr_idx.iter().map(|&i| &dataset.members[i]).collect();
    let val_m: Vec<&Member> = val_idx.iter().map(|&i| &dataset.members[i]).collect();

    let model = match model {
        ModelSpec::Hyper(hc) => {
            let mut hc = hc.clone();
            let ps: Vec<Vec<f64>> = train_m.iter().map(|m| m.sim_params.clone()).collect();
            hc.fit_standardization(&ps)?;
            ModelSpec::Hyper(hc)
        }
        m => m.clone(),
    };
    let mut params = match init {
        Some(p) => p,
        None => init_model(&model, cfg.seed)?,
    };
    if let ModelSpec::Hyper(hc) = &model {
        hc.write_meta(&mut params);
    }
    params.set_meta("train.flow_scaling", cfg.flow_scaling.as_str());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d80f);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a1_1da7e));
    let val: Vec<TrainSample> = (0..cfg.val_triplets)
        .map(|_| draw(&val_m, cfg.window, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut state = AdamState::new(&params);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut hist = TrainHistory::default();
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.base_lr, cfg.final_lr);
        let mut train_loss = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch: Vec<TrainSample> = (0..cfg.batch_size)
                .map(|_| draw(&train_m, cfg.window, &mut rng))
                .collect::<Result<_>>()?;
            let (l, grads) = loss_and_grads(&params, &model, cfg, &batch, Some(&mut drop_rng))?;
            opt_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)?;
            train_loss += l / cfg.batches_per_epoch as f64;
        }
        let val_loss = eval_loss(&params, &model, cfg, &val)?;
        let rec = EpochRecord { epoch, train_loss, val_loss, lr };
        on_epoch(&rec);
        hist.epochs.push(rec);
        let (improved, halt) = stop.observe(epoch, val_loss);
        if improved {
            best = params.clone();
        }
        if halt {
            break;
        }
    }
    hist.best_epoch = stop.best_epoch;
    Ok((best, hist))
}
