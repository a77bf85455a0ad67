//! Ensemble data model: scalar grids, flow grids, members and the
//! normalization used before training.

mod manifest;
mod raw;
mod synth;

pub use manifest::{read_ensemble, write_ensemble, MANIFEST_NAME};
pub use raw::{decode_raw, encode_raw, read_raw, write_raw, RawField, RAW_MAGIC};
pub use synth::{synth_ensemble, Motion, SynthConfig};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Whether a grid still holds raw values or has been mapped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    Raw,
    UnitNormalized,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if !(2..=3).contains(&dims.len()) {
        return Err(shape_err!("grids need 2 or 3 spatial axes, got {}", dims.len()));
    }
    if let Some(a) = dims.iter().position(|&d| d == 0) {
        return Err(shape_err!("axis {a} has zero extent"));
    }
    Ok(dims.iter().product())
}

/// Dense scalar field. `dims` are spatial extents slowest first
/// (`[ny, nx]` or `[nz, ny, nx]`); values are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    values: Vec<f64>,
    range: ValueRange,
}

impl Grid {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != values.len() {
            return Err(shape_err!("grid {:?} needs {} values, got {}", dims, n, values.len()));
        }
        Ok(Self {
            dims,
            values,
            range: ValueRange::Raw,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        Self::new(dims, vec![0.0; n])
    }

    /// Marks the grid unit-normalized; fails if any value lies outside `[0, 1]`.
    pub fn into_unit(mut self) -> Result<Self> {
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("grid has values outside [0, 1]"));
        }
        self.range = ValueRange::UnitNormalized;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.range = ValueRange::Raw;
        &mut self.values
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    /// Single-channel tensor `[1, dims...]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend(&self.dims);
        Tensor::new(shape, self.values.clone()).expect("grid shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(shape_err!("axis 0: expected 1 channel, got {}", t.channels()));
        }
        Self::new(t.spatial().to_vec(), t.data().to_vec())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Dense vector field: one component array per spatial axis, ordered
/// x, y, z (x is the fastest-varying storage axis). Units are cells per
/// unit timestep unless normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    dims: Vec<usize>,
    components: Vec<Vec<f64>>,
}

impl FlowGrid {
    pub fn new(dims: Vec<usize>, components: Vec<Vec<f64>>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if components.len() != dims.len() {
            return Err(shape_err!(
                "flow over {} axes needs {} components, got {}",
                dims.len(),
                dims.len(),
                components.len()
            ));
        }
        if let Some(c) = components.iter().position(|c| c.len() != n) {
            return Err(shape_err!("component {c} has wrong length"));
        }
        Ok(Self { dims, components })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        let r = dims.len();
        Self::new(dims, vec![vec![0.0; n]; r])
    }

    /// Spatially constant flow; `v` is ordered x, y, z.
    pub fn constant(dims: Vec<usize>, v: &[f64]) -> Result<Self> {
        let n = check_dims(&dims)?;
        Self::new(dims, v.iter().map(|&c| vec![c; n]).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.components
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn cells(&self) -> usize {
        self.components[0].len()
    }

    /// Vector at a cell, ordered x, y, z.
    pub fn at(&self, cell: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[cell]).collect()
    }

    /// Tensor `[rank, dims...]` with channel c holding component c.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.rank()];
        shape.extend(&self.dims);
        Tensor::new(shape, self.components.concat()).expect("flow shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.spatial().to_vec();
        let n: usize = dims.iter().product();
        let comps = t.data().chunks(n).map(|c| c.to_vec()).collect();
        Self::new(dims, comps)
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One simulation run: its parameter vector and an ordered sequence of fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub sim_params: Vec<f64>,
    pub timesteps: Vec<Grid>,
    pub flows: Option<Vec<FlowGrid>>,
}

impl Member {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.timesteps.first() else {
            return Err(invalid!("member has no timesteps"));
        };
        if self.timesteps.iter().any(|g| g.dims() != first.dims()) {
            return Err(shape_err!("member timesteps differ in dims"));
        }
        if let Some(flows) = &self.flows {
            if flows.len() != self.timesteps.len() {
                return Err(invalid!(
                    "member has {} flows for {} timesteps",
                    flows.len(),
                    self.timesteps.len()
                ));
            }
            if flows.iter().any(|f| f.dims() != first.dims()) {
                return Err(shape_err!("member flows differ in dims from its grids"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

/// Ordered ensemble members.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnsembleSet {
    pub members: Vec<Member>,
}

/// Affine map applied by [`normalize`]: `normalized = (raw - min) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormScale {
    pub min: f64,
    pub scale: f64,
}

impl NormScale {
    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.min
    }
}

/// Statistics of a dataset-wide normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleNorm {
    pub field: NormScale,
    /// Divisor applied to every flow component (1 when flows were left raw).
    pub flow_scale: f64,
}

/// Affine map of a grid to `[0, 1]`. A constant grid maps to zeros with scale 1.
pub fn normalize(grid: &Grid) -> (Grid, NormScale) {
    let (lo, hi) = grid.min_max();
    normalize_with(grid, lo, hi)
}

fn normalize_with(grid: &Grid, lo: f64, hi: f64) -> (Grid, NormScale) {
    let scale = if hi > lo { hi - lo } else { 1.0 };
    let values = grid
        .values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / scale).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let g = Grid {
        dims: grid.dims.clone(),
        values,
        range: ValueRange::UnitNormalized,
    };
    (g, NormScale { min: lo, scale })
}

/// Divides every component by the global max |component| so the result lies
/// in `[-1, 1]`. Returns the divisor (1 for an all-zero flow).
pub fn normalize_flow(flow: &FlowGrid) -> (FlowGrid, f64) {
    let m = flow.max_abs();
    let s = if m > 0.0 { m } else { 1.0 };
    let mut out = flow.clone();
    out.components
        .iter_mut()
        .flatten()
        .for_each(|v| *v /= s);
    (out, s)
}

impl EnsembleSet {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(invalid!("ensemble has no members"));
        }
        self.members.iter().try_for_each(Member::validate)
    }

    /// Maps all scalar fields to `[0, 1]` using the dataset-wide range, and
    /// optionally divides all flows by the dataset-wide max |component|.
    pub fn normalize(&mut self, flows: bool) -> EnsembleNorm {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in self.members.iter().flat_map(|m| &m.timesteps) {
            let (a, b) = g.min_max();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        let mut field = NormScale { min: lo, scale: 1.0 };
        for g in self.members.iter_mut().flat_map(|m| &mut m.timesteps) {
            let (n, s) = normalize_with(g, lo, hi);
            *g = n;
            field = s;
        }
        let mut flow_scale = 1.0;
        if flows {
            let m = self
                .members
                .iter()
                .filter_map(|m| m.flows.as_ref())
                .flatten()
                .fold(0.0f64, |a, f| a.max(f.max_abs()));
            if m > 0.0 {
                flow_scale = m;
            }
            for f in self
                .members
                .iter_mut()
                .filter_map(|m| m.flows.as_mut())
                .flatten()
            {
                f.components.iter_mut().flatten().for_each(|v| *v /= flow_scale);
            }
        }
        EnsembleNorm { field, flow_scale }
    }

    /// Class id per member: index of its parameter vector among the distinct
    /// vectors, in order of first appearance.
    pub fn param_classes(&self) -> Vec<usize> {
        let mut seen: Vec<&[f64]> = Vec::new();
        self.members
            .iter()
            .map(|m| match seen.iter().position(|p| *p == m.sim_params.as_slice()) {
                Some(i) => i,
                None => {
                    seen.push(&m.sim_params);
                    seen.len() - 1
                }
            })
            .collect()
    }
}
