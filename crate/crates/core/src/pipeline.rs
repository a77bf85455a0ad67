//! Checkpoint-level inference: keyframe interpolation of whole members and
//! conversion of predicted flows to cells per timestep.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::evalkit::{epe, psnr};
use crate::fieldio::{FlowGrid, Grid, Member};
use crate::flint::{infer, FlintConfig, Inference};
use crate::hyper::{hyper_infer, HyperConfig};
use crate::params::ModelParams;
use crate::trainer::FlowScaling;

/// Meta key holding the divisor that was applied to GT flows before training.
pub const FLOW_SCALE_KEY: &str = "data.flow_scale";

/// A trained checkpoint of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Flint { params: ModelParams, cfg: FlintConfig },
    Hyper { params: ModelParams, cfg: HyperConfig },
}

impl Model {
    pub fn from_params(params: ModelParams) -> Result<Self> {
        if params.contains("hyper.out.weight") {
            let cfg = HyperConfig::from_meta(&params)?;
            Ok(Model::Hyper { params, cfg })
        } else {
            let cfg = FlintConfig::from_meta(&params)?;
            Ok(Model::Flint { params, cfg })
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ModelParams::load(path)?)
    }

    pub fn params(&self) -> &ModelParams {
        match self {
            Model::Flint { params, .. } | Model::Hyper { params, .. } => params,
        }
    }

    pub fn is_hyper(&self) -> bool {
        matches!(self, Model::Hyper { .. })
    }

    /// Student inference; `sim_params` is ignored by plain FLINT.
    pub fn predict(&self, ds: &Grid, du: &Grid, tau: f64, sim_params: &[f64]) -> Result<Inference> {
        match self {
            Model::Flint { params, .. } => infer(params, ds, du, tau),
            Model::Hyper { params, .. } => hyper_infer(params, sim_params, ds, du, tau),
        }
    }

    /// Converts `F̂_{t→u}` to a per-step velocity in raw cell units.
    pub fn velocity(&self, flow_u: &FlowGrid, gap_tu: f64) -> Result<FlowGrid> {
        let p = self.params();
        let scale: f64 = match p.meta(FLOW_SCALE_KEY) {
            Some(_) => p.meta_parse(FLOW_SCALE_KEY)?,
            None => 1.0,
        };
        let k = match FlowScaling::of(p)? {
            FlowScaling::Direct => scale,
            FlowScaling::GapScaled => scale / gap_tu,
        };
        let mut v = flow_u.clone();
        v.components_mut().iter_mut().flatten().for_each(|x| *x *= k);
        Ok(v)
    }
}

/// `(1 − τ)·D_s + τ·D_u`.
pub fn linear_blend(ds: &Grid, du: &Grid, tau: f64) -> Result<Grid> {
    if ds.dims() != du.dims() {
        return Err(invalid!("blend of grids with different dims"));
    }
    let v = ds.values().iter().zip(du.values()).map(|(a, b)| (1.0 - tau) * a + tau * b).collect();
    Grid::new(ds.dims().to_vec(), v)
}

/// One frame of a keyframe interpolation run.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame: usize,
    /// 0 for keyframes, which are copied.
    pub tau: f64,
    pub pred: Grid,
    /// Per-step velocity; `None` for keyframes.
    pub velocity: Option<FlowGrid>,
    pub psnr: f64,
    pub psnr_linear: f64,
    pub epe: Option<f64>,
    pub epe_zero: Option<f64>,
}

/// Keeps every `rate`-th timestep and predicts the frames in between, up to
/// the last keyframe. Grids must already be unit-normalized.
pub fn interpolate_member(model: &Model, member: &Member, rate: usize) -> Result<Vec<FramePrediction>> {
    if rate == 0 {
        return Err(invalid!("rate must be positive"));
    }
    let n = member.len();
    if n <= rate {
        return Err(invalid!("member has {n} timesteps; rate {rate} needs at least {}", rate + 1));
    }
    let last_key = (n - 1) / rate * rate;
    let mut out = Vec::with_capacity(last_key + 1);
    for k in 0..=last_key {
        let gt = &member.timesteps[k];
        let gt_flow = member.flows.as_ref().map(|f| &f[k]);
        if k % rate == 0 {
            out.push(FramePrediction {
                frame: k,
                tau: 0.0,
                pred: gt.clone(),
                velocity: None,
                psnr: psnr(gt, gt)?,
                psnr_linear: psnr(gt, gt)?,
                epe: None,
                epe_zero: None,
            });
            continue;
        }
        let s = k - k % rate;
        let u = s + rate;
        let tau = (k - s) as f64 / rate as f64;
        let (ds, du) = (&member.timesteps[s], &member.timesteps[u]);
        let r = model.predict(ds, du, tau, &member.sim_params)?;
        let vel = model.velocity(&r.flow_u, (u - k) as f64)?;
        let (e, e0) = match gt_flow {
            Some(f) => (Some(epe(f, &vel)?), Some(epe(f, &FlowGrid::zeros(f.dims().to_vec())?)?)),
            None => (None, None),
        };
        out.push(FramePrediction {
            frame: k,
            tau,
            psnr: psnr(gt, &r.frame)?,
            psnr_linear: psnr(gt, &linear_blend(ds, du, tau)?)?,
            pred: r.frame,
            velocity: Some(vel),
            epe: e,
            epe_zero: e0,
        });
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `member,frame,tau,psnr,psnr_linear,epe,epe_zero`; `inf` marks an exact
/// reconstruction and empty cells mark missing flows.
pub fn predictions_csv(rows: &[(usize, Vec<FramePrediction>)]) -> String {
    let mut s = String::from("member,frame,tau,psnr,psnr_linear,epe,epe_zero\n");
    for (m, preds) in rows {
        for p in preds {
            let _ = writeln!(
                s,
                "{m},{},{},{},{},{},{}",
                p.frame,
                p.tau,
                p.psnr,
                p.psnr_linear,
                opt(p.epe),
                opt(p.epe_zero)
            );
        }
    }
    s
}

/// Mean of the interpolated (non-keyframe) entries of each column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpSummary {
    pub frames: usize,
    pub psnr: f64,
    pub psnr_linear: f64,
    pub epe: Option<f64>,
    pub epe_zero: Option<f64>,
}

pub fn summarize(preds: &[FramePrediction]) -> Result<InterpSummary> {
    let mid: Vec<&FramePrediction> = preds.iter().filter(|p| p.velocity.is_some()).collect();
    if mid.is_empty() {
        return Err(invalid!("no interpolated frames to summarize"));
    }
    let n = mid.len() as f64;
    let mean = |f: &dyn Fn(&FramePrediction) -> f64| mid.iter().map(|p| f(p)).sum::<f64>() / n;
    let both = mid.iter().all(|p| p.epe.is_some());
    Ok(InterpSummary {
        frames: mid.len(),
        psnr: mean(&|p| p.psnr),
        psnr_linear: mean(&|p| p.psnr_linear),
        epe: both.then(|| mean(&|p| p.epe.unwrap_or(0.0))),
        epe_zero: both.then(|| mean(&|p| p.epe_zero.unwrap_or(0.0))),
    })
}
