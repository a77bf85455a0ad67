//! Synthetic ensembles of advected Gaussian blobs with analytic flow.
//!
//! Every frame is evaluated in closed form from the blob trajectories, so the
//! returned flow fields are exact velocities rather than solver output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EnsembleSet, FlowGrid, Grid, Member};
use crate::error::{invalid, Result};

/// Rigid motion applied to every blob of a member.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Constant velocity in cells per step, ordered x, y, (z).
    Translation(Vec<f64>),
    /// Rotation rate in radians per step about the domain center (the z axis in 3D).
    Rotation(f64),
}

impl Motion {
    /// Parameter vector `[vx, vy, (vz), ω]` describing the motion.
    pub fn params(&self, rank: usize) -> Vec<f64> {
        let mut p = vec![0.0; rank + 1];
        match self {
            Motion::Translation(v) => p[..v.len().min(rank)].copy_from_slice(&v[..v.len().min(rank)]),
            Motion::Rotation(w) => p[rank] = *w,
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Spatial extents, slowest first.
    pub dims: Vec<usize>,
    pub n_timesteps: usize,
    /// One motion per member.
    pub motions: Vec<Motion>,
    pub n_blobs: usize,
    pub sigma_range: (f64, f64),
    pub noise_sigma: f64,
    /// Use the same blob layout for every member (members then differ only by motion).
    pub shared_layout: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 32],
            n_timesteps: 16,
            motions: vec![Motion::Translation(vec![0.5, 0.25])],
            n_blobs: 8,
            sigma_range: (2.5, 4.5),
            noise_sigma: 0.0,
            shared_layout: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Blob {
    /// Position at step 0, ordered x, y, (z), in cell coordinates.
    center: Vec<f64>,
    sigma: f64,
    amp: f64,
}

/// Extents reordered x, y, (z).
fn xyz(dims: &[usize]) -> Vec<f64> {
    dims.iter().rev().map(|&d| d as f64).collect()
}

fn domain_center(dims: &[usize]) -> Vec<f64> {
    xyz(dims).iter().map(|n| (n - 1.0) / 2.0).collect()
}

/// Minimum-image displacement on a periodic axis of length `n`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

impl Motion {
    fn check(&self, dims: &[usize]) -> Result<()> {
        let ext = xyz(dims);
        match self {
            Motion::Translation(v) => {
                if v.len() != dims.len() {
                    return Err(invalid!(
                        "translation has {} components for {} axes",
                        v.len(),
                        dims.len()
                    ));
                }
                for (a, (&c, &n)) in v.iter().zip(&ext).enumerate() {
                    if c.abs() > 0.25 * n {
                        return Err(invalid!(
                            "velocity {c} on axis {a} exceeds 0.25·extent ({}); frames would alias",
                            0.25 * n
                        ));
                    }
                }
            }
            Motion::Rotation(w) => {
                let c = domain_center(dims);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                let min_ext = ext[0].min(ext[1]);
                if w.abs() * r > 0.25 * min_ext {
                    return Err(invalid!(
                        "rotation rate {w} moves corners {} cells per step, above 0.25·extent",
                        w.abs() * r
                    ));
                }
            }
        }
        Ok(())
    }

    /// Blob center at step `k` (unwrapped).
    fn position(&self, start: &[f64], k: f64, center: &[f64]) -> Vec<f64> {
        match self {
            Motion::Translation(v) => start.iter().zip(v).map(|(s, v)| s + v * k).collect(),
            Motion::Rotation(w) => {
                let (s, c) = (w * k).sin_cos();
                let dx = start[0] - center[0];
                let dy = start[1] - center[1];
                let mut p = start.to_vec();
                p[0] = center[0] + c * dx - s * dy;
                p[1] = center[1] + s * dx + c * dy;
                p
            }
        }
    }

    /// Velocity at a point in cell coordinates (x, y, (z)).
    pub fn velocity(&self, p: &[f64], center: &[f64]) -> Vec<f64> {
        match self {
            Motion::Translation(v) => v.clone(),
            Motion::Rotation(w) => {
                let mut out = vec![0.0; p.len()];
                out[0] = -w * (p[1] - center[1]);
                out[1] = w * (p[0] - center[0]);
                out
            }
        }
    }
}

fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng, rotating: bool) -> Vec<Blob> {
    let ext = xyz(&cfg.dims);
    let center = domain_center(&cfg.dims);
    let radius = 0.35 * ext[0].min(ext[1]);
    (0..cfg.n_blobs)
        .map(|_| {
            let mut c: Vec<f64> = ext.iter().map(|&n| rng.random_range(0.0..n)).collect();
            if rotating {
                let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                c[0] = center[0] + r * th.cos();
                c[1] = center[1] + r * th.sin();
            }
            let (lo, hi) = cfg.sigma_range;
            let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
            Blob {
                center: c,
                sigma,
                amp: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

/// Closed-form field value of `blobs` under `motion` at step `k`, at the
/// continuous point `p` (x, y, (z)).
pub(crate) fn eval_blobs(blobs: &[Blob], motion: &Motion, dims: &[usize], k: f64, p: &[f64]) -> f64 {
    let ext = xyz(dims);
    let center = domain_center(dims);
    blobs
        .iter()
        .map(|b| {
            let c = motion.position(&b.center, k, &center);
            let d2: f64 = p
                .iter()
                .zip(&c)
                .zip(&ext)
                .map(|((pi, ci), n)| {
                    let d = wrap(pi - ci, *n);
                    d * d
                })
                .sum();
            b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
        })
        .sum()
}

/// Cell coordinates (x, y, (z)) of every cell in row-major order.
fn cell_coords(dims: &[usize]) -> Vec<Vec<f64>> {
    let n: usize = dims.iter().product();
    (0..n)
        .map(|mut i| {
            let mut c = Vec::with_capacity(dims.len());
            for &d in dims.iter().rev() {
                c.push((i % d) as f64);
                i /= d;
            }
            c
        })
        .collect()
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if !(2..=3).contains(&cfg.dims.len()) {
        return Err(invalid!("dims must have 2 or 3 axes"));
    }
    if let Some(a) = cfg.dims.iter().position(|&d| d < 16) {
        return Err(invalid!("axis {a} extent {} is below 16", cfg.dims[a]));
    }
    if cfg.n_timesteps == 0 || cfg.motions.is_empty() || cfg.n_blobs == 0 {
        return Err(invalid!("need at least one timestep, member and blob"));
    }
    if cfg.noise_sigma < 0.0 || cfg.sigma_range.0 <= 0.0 || cfg.sigma_range.1 < cfg.sigma_range.0 {
        return Err(invalid!("invalid noise or blob sigma"));
    }
    cfg.motions.iter().try_for_each(|m| m.check(&cfg.dims))
}

pub(crate) fn member_layout(cfg: &SynthConfig, m: usize) -> Vec<Blob> {
    let seed = if cfg.shared_layout {
        cfg.seed
    } else {
        cfg.seed.wrapping_add(0x9e37_79b9 * (m as u64 + 1))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotating = cfg.shared_layout && cfg.motions.iter().any(|m| matches!(m, Motion::Rotation(_)))
        || matches!(cfg.motions[m], Motion::Rotation(_));
    layout(cfg, &mut rng, rotating)
}

/// Generates the ensemble described by `cfg` (raw, un-normalized values).
pub fn synth_ensemble(cfg: &SynthConfig) -> Result<EnsembleSet> {
    validate(cfg)?;
    let rank = cfg.dims.len();
    let coords = cell_coords(&cfg.dims);
    let center = domain_center(&cfg.dims);
    let mut members = Vec::with_capacity(cfg.motions.len());
    for (m, motion) in cfg.motions.iter().enumerate() {
        let blobs = member_layout(cfg, m);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xabcd_ef01 + m as u64));
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| invalid!("noise: {e}"))?;
        let mut comps = vec![Vec::with_capacity(coords.len()); rank];
        for p in &coords {
            for (c, v) in comps.iter_mut().zip(motion.velocity(p, &center)) {
                c.push(v);
            }
        }
        let flow = FlowGrid::new(cfg.dims.clone(), comps)?;
        let mut timesteps = Vec::with_capacity(cfg.n_timesteps);
        for k in 0..cfg.n_timesteps {
            let vals = coords
                .iter()
                .map(|p| {
                    let v = eval_blobs(&blobs, motion, &cfg.dims, k as f64, p);
                    if cfg.noise_sigma > 0.0 {
                        v + noise.sample(&mut noise_rng)
                    } else {
                        v
                    }
                })
                .collect();
            timesteps.push(Grid::new(cfg.dims.clone(), vals)?);
        }
        members.push(Member {
            sim_params: motion.params(rank),
            timesteps,
            flows: Some(vec![flow; cfg.n_timesteps]),
        });
    }
    Ok(EnsembleSet { members })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(motion: Motion) -> SynthConfig {
        SynthConfig {
            dims: vec![24, 32],
            n_timesteps: 5,
            motions: vec![motion],
            n_blobs: 6,
            sigma_range: (2.0, 4.0),
            noise_sigma: 0.0,
            shared_layout: false,
            seed: 42,
        }
    }

    #[test]
    fn zero_velocity_is_static() {
        let e = synth_ensemble(&cfg(Motion::Translation(vec![0.0, 0.0]))).unwrap();
        let m = &e.members[0];
        for g in &m.timesteps[1..] {
            assert_eq!(g.values(), m.timesteps[0].values());
        }
        for f in m.flows.as_ref().unwrap() {
            assert_eq!(f.max_abs(), 0.0);
        }
    }

    #[test]
    fn unit_translation_shifts_in_x() {
        let e = synth_ensemble(&cfg(Motion::Translation(vec![1.0, 0.0]))).unwrap();
        let m = &e.members[0];
        let (ny, nx) = (24, 32);
        // oracle: evaluate the blob sum directly at the back-shifted point
        let blobs = member_layout(&cfg(Motion::Translation(vec![1.0, 0.0])), 0);
        for k in 0..5 {
            for y in 0..ny {
                for x in 0..nx {
                    let shifted = m.timesteps[0].values()[y * nx + (x + nx * 8 - k) % nx];
                    let got = m.timesteps[k].values()[y * nx + x];
                    let direct = eval_blobs(
                        &blobs,
                        &Motion::Translation(vec![0.0, 0.0]),
                        &[ny, nx],
                        0.0,
                        &[x as f64 - k as f64, y as f64],
                    );
                    assert!((got - shifted).abs() < 1e-12);
                    assert!((got - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_flow_formula() {
        let w = 0.05;
        let e = synth_ensemble(&cfg(Motion::Rotation(w))).unwrap();
        let f = &e.members[0].flows.as_ref().unwrap()[0];
        let (cx, cy) = (15.5, 11.5);
        for y in 0..24 {
            for x in 0..32 {
                let v = f.at(y * 32 + x);
                assert!((v[0] - (-w * (y as f64 - cy))).abs() < 1e-15);
                assert!((v[1] - w * (x as f64 - cx)).abs() < 1e-15);
            }
        }
        assert_eq!(e.members[0].sim_params, vec![0.0, 0.0, w]);
    }

    #[test]
    fn aliasing_velocity_rejected() {
        assert!(synth_ensemble(&cfg(Motion::Translation(vec![8.5, 0.0]))).is_err());
        assert!(synth_ensemble(&cfg(Motion::Rotation(1.0))).is_err());
        let mut c = cfg(Motion::Translation(vec![0.0, 0.0]));
        c.dims = vec![8, 32];
        assert!(synth_ensemble(&c).is_err());
    }

    #[test]
    fn flow_advection_reproduces_next_frame() {
        // 64×64, small velocities: advect frame k analytically along one
        // exactly-integrated step of the flow and compare with frame k+1.
        for motion in [Motion::Translation(vec![0.3, -0.2]), Motion::Rotation(0.01)] {
            let c = SynthConfig {
                dims: vec![64, 64],
                n_timesteps: 3,
                motions: vec![motion.clone()],
                ..cfg(motion.clone())
            };
            let e = synth_ensemble(&c).unwrap();
            let blobs = member_layout(&c, 0);
            let center = domain_center(&c.dims);
            let m = &e.members[0];
            let mut worst = 0.0f64;
            for k in 0..2 {
                for (i, p) in cell_coords(&c.dims).iter().enumerate() {
                    // backtrace p one step along the flow (exact for rigid motion)
                    let back = match &motion {
                        Motion::Translation(v) => vec![p[0] - v[0], p[1] - v[1]],
                        Motion::Rotation(w) => {
                            let (s, co) = (-w).sin_cos();
                            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                            vec![center[0] + co * dx - s * dy, center[1] + s * dx + co * dy]
                        }
                    };
                    let advected = eval_blobs(&blobs, &motion, &c.dims, k as f64, &back);
                    worst = worst.max((advected - m.timesteps[k + 1].values()[i]).abs());
                }
            }
            assert!(worst < 1e-3, "{motion:?}: {worst}");
        }
    }

    #[test]
    fn noise_touches_fields_only() {
        let mut c = cfg(Motion::Translation(vec![0.5, 0.0]));
        c.noise_sigma = 0.025;
        let noisy = synth_ensemble(&c).unwrap();
        c.noise_sigma = 0.0;
        let clean = synth_ensemble(&c).unwrap();
        assert_ne!(noisy.members[0].timesteps[0], clean.members[0].timesteps[0]);
        assert_eq!(noisy.members[0].flows, clean.members[0].flows);
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(Motion::Rotation(0.02));
        assert_eq!(synth_ensemble(&c).unwrap(), synth_ensemble(&c).unwrap());
    }
}
