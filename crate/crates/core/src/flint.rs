//! FLINT: stacked convolutional blocks that jointly refine two intermediate
//! flows and a fusion mask, plus a privileged teacher block.
//!
//! Every block maps its input to the same spatial resolution through
//! `conv s2 → conv → conv → deconv s2 → head`, PReLU after each body layer.
//! The head emits `2·rank + 1` channels: the `t→s` flow increment, the `t→u`
//! flow increment and a mask-logit increment. Block 0 starts from zero state.
//! Spatial extents must be even so the stride-2 pair restores the input size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::fieldio::{FlowGrid, Grid};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Graph, Node, Tensor};
use crate::warp::{backward_warp, fuse};

/// Paper-scale student channels for the four FLINT blocks.
pub const PAPER_CHANNELS: [usize; 4] = [256, 192, 192, 128];
pub const PAPER_TEACHER_CHANNELS: usize = 128;
/// Channel divisor used for desk-scale runs.
pub const DESK_DIVISOR: usize = 8;

const BODY_KERNEL: usize = 3;
const DECONV_KERNEL: usize = 4;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct FlintConfig {
    pub n_blocks: usize,
    /// Undivided channel width of each student block.
    pub channels: Vec<usize>,
    /// Undivided teacher width; `None` builds no teacher.
    pub teacher_channels: Option<usize>,
    pub rank: usize,
    /// Divides every channel width (rounded down, at least 1).
    pub desk_scale: Option<usize>,
}

impl FlintConfig {
    pub fn paper(rank: usize) -> Self {
        Self {
            n_blocks: PAPER_CHANNELS.len(),
            channels: PAPER_CHANNELS.to_vec(),
            teacher_channels: Some(PAPER_TEACHER_CHANNELS),
            rank,
            desk_scale: None,
        }
    }

    pub fn desk(rank: usize) -> Self {
        Self {
            desk_scale: Some(DESK_DIVISOR),
            ..Self::paper(rank)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return Err(invalid!("n_blocks must be at least 2, got {}", self.n_blocks));
        }
        if self.channels.len() != self.n_blocks {
            return Err(invalid!(
                "{} channel widths for {} blocks",
                self.channels.len(),
                self.n_blocks
            ));
        }
        if self.channels.iter().chain(&self.teacher_channels).any(|&c| c == 0) {
            return Err(invalid!("channel widths must be positive"));
        }
        if self.desk_scale == Some(0) {
            return Err(invalid!("desk_scale divisor must be positive"));
        }
        if !(2..=3).contains(&self.rank) {
            return Err(invalid!("rank must be 2 or 3, got {}", self.rank));
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        (c / self.desk_scale.unwrap_or(1)).max(1)
    }

    /// Effective student widths after `desk_scale`.
    pub fn block_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn teacher_width(&self) -> Option<usize> {
        self.teacher_channels.map(|c| self.scaled(c))
    }

    pub fn head_channels(&self) -> usize {
        2 * self.rank + 1
    }

    /// Input channels of student block `i`.
    pub fn block_inputs(&self, i: usize) -> usize {
        if i == 0 {
            3
        } else {
            6 + 2 * self.rank
        }
    }

    pub fn teacher_inputs(&self) -> usize {
        self.block_inputs(1) + 1
    }

    /// Every layer of every block, in parameter order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for (i, &c) in self.block_channels().iter().enumerate() {
            out.extend(block_layers(&format!("block{i}"), self.block_inputs(i), c, self.head_channels()));
        }
        if let Some(c) = self.teacher_width() {
            out.extend(block_layers("teacher", self.teacher_inputs(), c, self.head_channels()));
        }
        out
    }

    pub fn write_meta(&self, p: &mut ModelParams) {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        p.set_meta("flint.n_blocks", self.n_blocks);
        p.set_meta("flint.channels", list(&self.channels));
        p.set_meta(
            "flint.teacher",
            self.teacher_channels.map_or("none".to_string(), |c| c.to_string()),
        );
        p.set_meta("flint.rank", self.rank);
        p.set_meta("flint.desk_scale", self.desk_scale.unwrap_or(1));
    }

    pub fn from_meta(p: &ModelParams) -> Result<Self> {
        let channels = p
            .meta("flint.channels")
            .ok_or_else(|| Error::Format("checkpoint lacks `flint.channels`".into()))?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format("checkpoint `flint.channels` is malformed".into()))?;
        let teacher = match p.meta("flint.teacher") {
            Some("none") | None => None,
            Some(_) => Some(p.meta_parse("flint.teacher")?),
        };
        let div: usize = p.meta_parse("flint.desk_scale")?;
        let cfg = Self {
            n_blocks: p.meta_parse("flint.n_blocks")?,
            channels,
            teacher_channels: teacher,
            rank: p.meta_parse("flint.rank")?,
            desk_scale: (div > 1).then_some(div),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution with the given stride.
    Conv(usize),
    /// Stride-2 transposed convolution.
    Deconv,
    /// Output convolution, zero-initialized.
    Head,
}

/// One convolutional layer of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// `block{i}.conv{j}` or `teacher.conv{j}`.
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn kernel_shape(&self, rank: usize) -> Vec<usize> {
        let (k, lead) = match self.kind {
            LayerKind::Deconv => (DECONV_KERNEL, [self.in_ch, self.out_ch]),
            _ => (BODY_KERNEL, [self.out_ch, self.in_ch]),
        };
        let mut s = lead.to_vec();
        s.extend(std::iter::repeat_n(k, rank));
        s
    }

    pub fn is_body(&self) -> bool {
        self.kind != LayerKind::Head
    }
}

fn block_layers(prefix: &str, cin: usize, c: usize, head: usize) -> Vec<LayerSpec> {
    let kinds = [
        (LayerKind::Conv(2), cin, c),
        (LayerKind::Conv(1), c, c),
        (LayerKind::Conv(1), c, c),
        (LayerKind::Deconv, c, c),
        (LayerKind::Head, c, head),
    ];
    kinds
        .into_iter()
        .enumerate()
        .map(|(j, (kind, in_ch, out_ch))| LayerSpec {
            name: format!("{prefix}.conv{j}"),
            kind,
            in_ch,
            out_ch,
        })
        .collect()
}

fn act_name(layer: &LayerSpec) -> String {
    layer.name.replace(".conv", ".act") + ".slope"
}

/// Uniform `±sqrt(1/fan_in)` kernels with `fan_in = shape[1] · kernel volume`.
pub(crate) fn init_kernel(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let b = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("kernel shape")
}

pub(crate) fn init_bias(kernel_shape: &[usize], out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = kernel_shape[1..].iter().product();
    let b = (1.0 / fan_in as f64).sqrt();
    Tensor::from_vec((0..out).map(|_| rng.random_range(-b..b)).collect())
}

/// Adds the tensors of `layers` to `p`, drawing from `rng` in layer order.
pub(crate) fn init_layers(layers: &[LayerSpec], rank: usize, rng: &mut ChaCha8Rng, p: &mut ModelParams) {
    for l in layers {
        let ks = l.kernel_shape(rank);
        if l.kind == LayerKind::Head {
            p.insert(l.weight_name(), Tensor::zeros(ks));
            p.insert(l.bias_name(), Tensor::zeros(vec![l.out_ch]));
        } else {
            p.insert(l.weight_name(), init_kernel(&ks, rng));
            p.insert(l.bias_name(), init_bias(&ks, l.out_ch, rng));
            p.insert(act_name(l), Tensor::filled(vec![l.out_ch], PRELU_INIT));
        }
    }
}

/// Deterministic parameters for `cfg` under `seed`.
pub fn build_flint(cfg: &FlintConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    init_layers(&cfg.layers(), cfg.rank, &mut rng, &mut p);
    cfg.write_meta(&mut p);
    Ok(p)
}

/// One block's refined state.
#[derive(Debug, Clone, Copy)]
pub struct BlockState {
    pub index: usize,
    pub flow_s: Node,
    pub flow_u: Node,
    pub mask_logits: Node,
    pub mask: Node,
    pub warped_s: Node,
    pub warped_u: Node,
    /// Fused reconstruction from this block's warps and mask.
    pub output: Node,
}

#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub states: Vec<BlockState>,
    /// Reconstruction of the last block.
    pub output: Node,
}

fn run_block(g: &mut Graph, net: &Bound, prefix: &str, x: Node, rank: usize) -> Result<Node> {
    let probe = |j: usize| format!("{prefix}.conv{j}");
    let spatial_one = vec![1; rank];
    let spatial_two = vec![2; rank];
    let mut h = x;
    for j in 0..5 {
        let w = net.get(&format!("{}.weight", probe(j)))?;
        let b = net.get(&format!("{}.bias", probe(j)))?;
        h = match j {
            0 => g.conv(h, w, b, &spatial_two, &spatial_one)?,
            3 => g.deconv(h, w, b, &spatial_two, &spatial_one)?,
            _ => g.conv(h, w, b, &spatial_one, &spatial_one)?,
        };
        if j < 4 {
            let a = net.get(&format!("{prefix}.act{j}.slope"))?;
            h = g.prelu(h, a)?;
        }
    }
    Ok(h)
}

fn state_from(
    g: &mut Graph,
    index: usize,
    ds: Node,
    du: Node,
    flow_s: Node,
    flow_u: Node,
    mask_logits: Node,
) -> Result<BlockState> {
    let mask = g.sigmoid(mask_logits);
    let warped_s = backward_warp(g, ds, flow_s)?;
    let warped_u = backward_warp(g, du, flow_u)?;
    let output = fuse(g, warped_s, warped_u, mask)?;
    Ok(BlockState { index, flow_s, flow_u, mask_logits, mask, warped_s, warped_u, output })
}

/// Applies a block's head increments on top of `prev` (or zero state).
fn refine(
    g: &mut Graph,
    net: &Bound,
    prefix: &str,
    index: usize,
    x: Node,
    prev: Option<&BlockState>,
    ds: Node,
    du: Node,
    rank: usize,
) -> Result<BlockState> {
    let out = run_block(g, net, prefix, x, rank)?;
    let dfs = g.narrow(out, 0, rank)?;
    let dfu = g.narrow(out, rank, rank)?;
    let dm = g.narrow(out, 2 * rank, 1)?;
    let (fs, fu, m) = match prev {
        None => (dfs, dfu, dm),
        Some(p) => (g.add(p.flow_s, dfs)?, g.add(p.flow_u, dfu)?, g.add(p.mask_logits, dm)?),
    };
    state_from(g, index, ds, du, fs, fu, m)
}

fn check_inputs(g: &Graph, ds: Node, du: Node, tau: f64, rank: usize) -> Result<()> {
    let (a, b) = (g.shape(ds), g.shape(du));
    if a != b {
        return Err(shape_err!("D_s shape {a:?} differs from D_u shape {b:?}"));
    }
    if a.len() != rank + 1 || a[0] != 1 {
        return Err(shape_err!("fields must be [1, {rank} spatial axes], got {a:?}"));
    }
    if let Some(ax) = a[1..].iter().position(|d| d % 2 != 0) {
        return Err(shape_err!("spatial axis {ax} has odd extent {}", a[1 + ax]));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid!("tau must lie in (0,1), got {tau}"));
    }
    Ok(())
}

fn tau_channel(g: &mut Graph, like: Node, tau: f64) -> Node {
    let shape = g.shape(like).to_vec();
    g.constant(Tensor::filled(shape, tau))
}

fn block_input(g: &mut Graph, ds: Node, du: Node, prev: &BlockState, tau: Node, extra: Option<Node>) -> Result<Node> {
    let mut parts = vec![ds, du, prev.warped_s, prev.warped_u, prev.flow_s, prev.flow_u, prev.mask, tau];
    parts.extend(extra);
    g.concat(&parts)
}

/// Runs every student block. `ds`, `du` are `[1, dims…]`; `tau` is the
/// fractional position of the target frame.
pub fn forward_student(
    g: &mut Graph,
    net: &Bound,
    cfg: &FlintConfig,
    ds: Node,
    du: Node,
    tau: f64,
) -> Result<StudentOutput> {
    check_inputs(g, ds, du, tau, cfg.rank)?;
    let tc = tau_channel(g, ds, tau);
    let mut states: Vec<BlockState> = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let x = match states.last() {
            None => g.concat(&[ds, du, tc])?,
            Some(p) => block_input(g, ds, du, p, tc, None)?,
        };
        let st = refine(g, net, &format!("block{i}"), i, x, states.last(), ds, du, cfg.rank)?;
        states.push(st);
    }
    let output = states.last().expect("n_blocks ≥ 2").output;
    Ok(StudentOutput { states, output })
}

/// Teacher block refining the student's last state with `dt_gt` appended.
pub fn forward_teacher(
    g: &mut Graph,
    net: &Bound,
    cfg: &FlintConfig,
    ds: Node,
    du: Node,
    tau: f64,
    last: &BlockState,
    dt_gt: Node,
) -> Result<BlockState> {
    if cfg.teacher_channels.is_none() {
        return Err(invalid!("configuration has no teacher block"));
    }
    check_inputs(g, ds, du, tau, cfg.rank)?;
    if g.shape(dt_gt) != g.shape(ds) {
        return Err(shape_err!(
            "D_t^GT shape {:?} differs from D_s {:?}",
            g.shape(dt_gt),
            g.shape(ds)
        ));
    }
    let tc = tau_channel(g, ds, tau);
    let x = block_input(g, ds, du, last, tc, Some(dt_gt))?;
    refine(g, net, "teacher", cfg.n_blocks, x, Some(last), ds, du, cfg.rank)
}

/// Reconstruction and flows of the last student block, as plain grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub frame: Grid,
    /// `F̂_{t→u}`, the reported intermediate flow.
    pub flow_u: FlowGrid,
    pub flow_s: FlowGrid,
    pub mask: Grid,
}

/// Runs the student on unit-normalized grids; the teacher is unused.
pub fn infer(params: &ModelParams, ds: &Grid, du: &Grid, tau: f64) -> Result<Inference> {
    let cfg = FlintConfig::from_meta(params)?;
    let mut g = Graph::new();
    let net = params.bind_frozen(&mut g);
    infer_with(&mut g, &net, &cfg, ds, du, tau)
}

pub(crate) fn infer_with(
    g: &mut Graph,
    net: &Bound,
    cfg: &FlintConfig,
    ds: &Grid,
    du: &Grid,
    tau: f64,
) -> Result<Inference> {
    let s = g.constant(ds.to_tensor());
    let u = g.constant(du.to_tensor());
    let out = forward_student(g, net, cfg, s, u, tau)?;
    let last = out.states.last().expect("n_blocks ≥ 2");
    Ok(Inference {
        frame: Grid::from_tensor(g.value(out.output))?,
        flow_u: FlowGrid::from_tensor(g.value(last.flow_u))?,
        flow_s: FlowGrid::from_tensor(g.value(last.flow_s))?,
        mask: Grid::from_tensor(g.value(last.mask))?,
    })
}
