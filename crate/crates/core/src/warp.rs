//! Differentiable backward warping and fusion-mask blending.
//!
//! `output(p) = interp(source, p + flow(p))` with multilinear weights.
//! Sample coordinates are clamped to `[0, n-1]` per axis; a clamped
//! coordinate contributes no flow gradient. The cell pair used on axis `a`
//! is `(x0, x0+1)` with `x0 = min(floor(q), n-2)`, so at integer `q` the
//! derivative is the forward difference starting at `q`.

use crate::error::{shape_err, Error, Result};
use crate::fieldio::{FlowGrid, Grid};
use crate::tensor::{CustomOp, Graph, Node, Tensor};

/// Sample-position boundary treatment. Only clamp-to-edge exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarpBoundary {
    #[default]
    ClampToEdge,
}

/// Per-axis interpolation stencil: lower index, fractional weight, and
/// whether the coordinate was inside the domain (carries a derivative).
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    /// Offset to the upper neighbour (0 on a unit-extent axis).
    step: usize,
    w: f64,
    live: bool,
}

fn axis(q: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis { i0: 0, step: 0, w: 0.0, live: false };
    }
    let hi = (n - 1) as f64;
    let (qc, live) = if q < 0.0 {
        (0.0, false)
    } else if q > hi {
        (hi, false)
    } else {
        (q, true)
    };
    let i0 = (qc.floor() as usize).min(n - 2);
    Axis { i0, step: 1, w: qc - i0 as f64, live }
}

/// Geometry shared by forward and backward: spatial dims slowest first,
/// flow component `a` displaces spatial axis `rank-1-a`.
struct Layout {
    dims: Vec<usize>,
    strides: Vec<usize>,
    cells: usize,
}

impl Layout {
    fn new(dims: &[usize]) -> Self {
        let mut strides = vec![1; dims.len()];
        for i in (0..dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * dims[i + 1];
        }
        Self { dims: dims.to_vec(), strides, cells: dims.iter().product() }
    }

    /// Stencils for cell `p` under `flow` (shape `[rank, cells]`), indexed by spatial axis.
    fn stencil(&self, p: usize, flow: &[f64], out: &mut [Axis]) {
        let r = self.dims.len();
        let mut rem = p;
        for s in 0..r {
            let coord = rem / self.strides[s];
            rem %= self.strides[s];
            let comp = r - 1 - s;
            out[s] = axis(coord as f64 + flow[comp * self.cells + p], self.dims[s]);
        }
    }
}

fn check(source: &[usize], flow: &[usize]) -> Result<(usize, Vec<usize>)> {
    if source.len() < 2 || source.len() > 4 {
        return Err(shape_err!("warp: source must be [channels, 1..3 spatial axes], got {source:?}"));
    }
    let dims = &source[1..];
    if flow.len() != source.len() || flow[0] != dims.len() {
        return Err(shape_err!(
            "warp: flow shape {flow:?} must be [{}, {dims:?}]",
            dims.len()
        ));
    }
    if let Some(a) = (0..dims.len()).find(|&a| flow[1 + a] != dims[a]) {
        return Err(shape_err!(
            "warp: spatial axis {a} differs (source {} vs flow {})",
            dims[a],
            flow[1 + a]
        ));
    }
    Ok((source[0], dims.to_vec()))
}

/// Visits the `2^rank` stencil corners as (flat offset, weight, d weight / d q_s).
fn corners(st: &[Axis], strides: &[usize], mut f: impl FnMut(usize, f64, &[f64])) {
    let r = st.len();
    let mut dw = [0.0f64; 3];
    for mask in 0..(1usize << r) {
        let mut idx = 0;
        let mut w = 1.0;
        let mut parts = [0.0f64; 3];
        let mut signs = [0.0f64; 3];
        for s in 0..r {
            let hi = mask >> s & 1 == 1;
            let a = st[s];
            idx += (a.i0 + if hi { a.step } else { 0 }) * strides[s];
            parts[s] = if hi { a.w } else { 1.0 - a.w };
            signs[s] = if hi { 1.0 } else { -1.0 };
            w *= parts[s];
        }
        for s in 0..r {
            dw[s] = if st[s].live {
                (0..r).filter(|&t| t != s).map(|t| parts[t]).product::<f64>() * signs[s]
            } else {
                0.0
            };
        }
        f(idx, w, &dw[..r]);
    }
}

fn forward(src: &[f64], flow: &[f64], ch: usize, lay: &Layout) -> Vec<f64> {
    let n = lay.cells;
    let mut out = vec![0.0; ch * n];
    let mut st = [Axis { i0: 0, step: 0, w: 0.0, live: false }; 3];
    let r = lay.dims.len();
    for p in 0..n {
        lay.stencil(p, flow, &mut st[..r]);
        corners(&st[..r], &lay.strides, |idx, w, _| {
            if w != 0.0 {
                for c in 0..ch {
                    out[c * n + p] += w * src[c * n + idx];
                }
            }
        });
    }
    out
}

struct WarpOp;

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "backward_warp"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (src, flow) = (inputs[0], inputs[1]);
        let ch = src.shape()[0];
        let lay = Layout::new(&src.shape()[1..]);
        let (n, r) = (lay.cells, lay.dims.len());
        let (s, f) = (src.data(), flow.data());
        let mut gs = vec![0.0; s.len()];
        let mut gf = vec![0.0; f.len()];
        let mut st = [Axis { i0: 0, step: 0, w: 0.0, live: false }; 3];
        for p in 0..n {
            lay.stencil(p, f, &mut st[..r]);
            corners(&st[..r], &lay.strides, |idx, w, dw| {
                for c in 0..ch {
                    let go = g[c * n + p];
                    gs[c * n + idx] += go * w;
                    let v = go * s[c * n + idx];
                    for sa in 0..r {
                        gf[(r - 1 - sa) * n + p] += v * dw[sa];
                    }
                }
            });
        }
        vec![Some(gs), Some(gf)]
    }
}

/// Samples every channel of `source` (`[C, dims…]`) at `p + flow(p)`
/// (`flow`: `[rank, dims…]`, component 0 along the fastest axis).
pub fn backward_warp(g: &mut Graph, source: Node, flow: Node) -> Result<Node> {
    let (ch, dims) = check(g.shape(source), g.shape(flow))?;
    let lay = Layout::new(&dims);
    let out = forward(g.value(source).data(), g.value(flow).data(), ch, &lay);
    let t = Tensor::new(g.shape(source).to_vec(), out)?;
    Ok(g.custom(&[source, flow], t, Box::new(WarpOp)))
}

/// Graph-free warp of a grid, for baselines and evaluation.
pub fn warp_grid(source: &Grid, flow: &FlowGrid) -> Result<Grid> {
    let st = source.to_tensor();
    let ft = flow.to_tensor();
    let (ch, dims) = check(st.shape(), ft.shape())?;
    let out = forward(st.data(), ft.data(), ch, &Layout::new(&dims));
    Grid::new(dims, out)
}

/// `warped_s ⊙ mask + warped_u ⊙ (1 − mask)`; all three must share a shape.
pub fn fuse(g: &mut Graph, warped_s: Node, warped_u: Node, mask: Node) -> Result<Node> {
    for (n, what) in [(warped_u, "warped_u"), (mask, "mask")] {
        if g.shape(n) != g.shape(warped_s) {
            return Err(shape_err!(
                "fuse: {what} shape {:?} differs from warped_s {:?}",
                g.shape(n),
                g.shape(warped_s)
            ));
        }
    }
    if let Some(v) = g.value(mask).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("fuse: mask value {v} outside [0,1]")));
    }
    let diff = g.sub(warped_s, warped_u)?;
    let scaled = g.mul(mask, diff)?;
    g.add(warped_u, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn warp_vals(src: Tensor, flow: Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let s = g.constant(src);
        let f = g.constant(flow);
        let o = backward_warp(&mut g, s, f).unwrap();
        g.value(o).data().to_vec()
    }

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [vec![2, 5, 7], vec![1, 3, 4, 5]] {
            let src = random(&shape, -1.0, 1.0, &mut rng);
            let mut fs = shape.clone();
            fs[0] = shape.len() - 1;
            let out = warp_vals(src.clone(), Tensor::zeros(fs));
            assert_eq!(out, src.data());
        }
    }

    #[test]
    fn integer_shift_clamps_edge() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let s = Tensor::new(vec![1, 3, 4], src.clone()).unwrap();
        let mut f = vec![0.0; 24];
        f[..12].fill(1.0);
        let out = warp_vals(s, Tensor::new(vec![2, 3, 4], f).unwrap());
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(out[y * 4 + x], src[y * 4 + (x + 1).min(3)]);
            }
        }
    }

    #[test]
    fn half_cell_shift_averages() {
        let s = Tensor::new(vec![1, 2, 3], vec![0.0, 2.0, 4.0, 0.0, 2.0, 4.0]).unwrap();
        let mut f = vec![0.0; 12];
        f[..6].fill(0.5);
        let out = warp_vals(s, Tensor::new(vec![2, 2, 3], f).unwrap());
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 3.0);
        assert_eq!(out[2], 4.0);
    }

    #[test]
    fn trilinear_matches_hand_evaluation() {
        // f(x,y,z) = x + 10y + 100z is reproduced exactly by trilinear interpolation.
        let (nz, ny, nx) = (3, 4, 5);
        let src: Vec<f64> = (0..nz * ny * nx)
            .map(|i| (i % nx) as f64 + 10.0 * ((i / nx) % ny) as f64 + 100.0 * (i / (nx * ny)) as f64)
            .collect();
        let n = src.len();
        let mut f = vec![0.0; 3 * n];
        f[..n].fill(0.25);
        f[n..2 * n].fill(0.5);
        f[2 * n..].fill(0.75);
        let out = warp_vals(Tensor::new(vec![1, nz, ny, nx], src.clone()).unwrap(), Tensor::new(vec![3, nz, ny, nx], f).unwrap());
        assert!((out[0] - (0.25 + 5.0 + 75.0)).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(vec![1, 4, 4]));
        let f = g.constant(Tensor::zeros(vec![2, 4, 5]));
        assert!(matches!(backward_warp(&mut g, s, f), Err(Error::Shape(m)) if m.contains("axis 1")));
        let f3 = g.constant(Tensor::zeros(vec![3, 4, 4]));
        assert!(backward_warp(&mut g, s, f3).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for shape in [vec![2, 5, 6], vec![1, 3, 4, 4]] {
            let r = shape.len() - 1;
            let src = random(&shape, -1.0, 1.0, &mut rng);
            let mut fs = shape.clone();
            fs[0] = r;
            // keep samples away from integer coordinates
            let n: usize = fs.iter().product();
            let flow = Tensor::new(
                fs,
                (0..n)
                    .map(|_| {
                        let k: i32 = rng.random_range(-3..3);
                        k as f64 + rng.random_range(0.2..0.8)
                    })
                    .collect(),
            )
            .unwrap();
            let w = random(&shape, -1.0, 1.0, &mut rng);
            let err = grad_check(&[src, flow], |g, x| {
                let o = backward_warp(g, x[0], x[1])?;
                let wn = g.constant(w.clone());
                let m = g.mul(o, wn)?;
                Ok(g.sum(m))
            })
            .unwrap();
            assert!(err < 1e-4, "{shape:?}: {err}");
        }
    }

    #[test]
    fn integer_sample_uses_forward_difference() {
        let s = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 5.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let sn = g.param(s);
        let fl = g.param(Tensor::new(vec![2, 1, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let o = backward_warp(&mut g, sn, fl).unwrap();
        let l = g.sum(o);
        g.backward(l).unwrap();
        // cell 0 samples x = 1 exactly: derivative is s[2] - s[1]
        assert_eq!(g.grad(fl).data()[0], 4.0);
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(vec![1, 2, 2], 2.0));
        let b = g.constant(Tensor::filled(vec![1, 2, 2], 4.0));
        for (m, want) in [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)] {
            let mn = g.constant(Tensor::filled(vec![1, 2, 2], m));
            let o = fuse(&mut g, a, b, mn).unwrap();
            assert!(g.value(o).data().iter().all(|&v| v == want));
        }
        let bad = g.constant(Tensor::filled(vec![1, 2, 2], 1.5));
        assert!(matches!(fuse(&mut g, a, b, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = [
            random(&[1, 3, 3], -1.0, 1.0, &mut rng),
            random(&[1, 3, 3], -1.0, 1.0, &mut rng),
            random(&[1, 3, 3], 0.1, 0.9, &mut rng),
        ];
        let err = grad_check(&xs, |g, x| {
            let o = fuse(g, x[0], x[1], x[2])?;
            let sq = g.square(o);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn warp_is_convex_combination(
            seed in any::<u64>(),
            three in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = if three { vec![1, 3, 4, 5] } else { vec![1, 6, 7] };
            let src = random(&shape, -2.0, 3.0, &mut rng);
            let mut fs = shape.clone();
            fs[0] = shape.len() - 1;
            let flow = random(&fs, -8.0, 8.0, &mut rng);
            let lo = src.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in warp_vals(src, flow) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn fuse_between_inputs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.constant(random(&[1, 4, 4], -1.0, 1.0, &mut rng));
            let b = g.constant(random(&[1, 4, 4], -1.0, 1.0, &mut rng));
            let m = g.constant(random(&[1, 4, 4], 0.0, 1.0, &mut rng));
            let o = fuse(&mut g, a, b, m).unwrap();
            for i in 0..16 {
                let (x, y) = (g.value(a).data()[i], g.value(b).data()[i]);
                let v = g.value(o).data()[i];
                prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
            }
        }
    }
}
