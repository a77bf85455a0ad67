//! Loss terms and the two composite objectives.
//!
//! Spatial sums are per-cell means, so the weights transfer across grid sizes.
//! `l_reg` is the exception: it is a raw L1 sum over kernel entries.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Node};
use crate::warp::backward_warp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub flow: f64,
    pub gamma: f64,
    pub dis: f64,
    pub photo: f64,
    pub reg: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { flow: 0.2, gamma: 0.8, dis: 1e-4, photo: 1e-6, reg: 1e-8, eps: 1e-9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.flow, self.dis, self.photo, self.reg, self.eps];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("loss weights must be finite and nonnegative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid!("gamma must lie in (0,1], got {}", self.gamma));
        }
        Ok(())
    }
}

fn same(g: &Graph, a: Node, b: Node, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn cells(g: &Graph, n: Node) -> usize {
    g.shape(n)[1..].iter().product()
}

/// Mean absolute difference per entry.
fn mean_l1(g: &mut Graph, a: Node, b: Node, what: &str) -> Result<Node> {
    same(g, a, b, what)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Per-cell L1 summed over components, averaged over cells.
fn flow_l1(g: &mut Graph, a: Node, b: Node) -> Result<Node> {
    same(g, a, b, "flow")?;
    let n = cells(g, a);
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / n as f64))
}

fn add_all(g: &mut Graph, terms: &[Node]) -> Result<Node> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `mean|D_t − D̂_t| (+ mean|D_t − D̂_t^teach|)`.
pub fn l_rec(g: &mut Graph, pred: Node, teacher: Option<Node>, gt: Node) -> Result<Node> {
    let s = mean_l1(g, pred, gt, "l_rec")?;
    match teacher {
        None => Ok(s),
        Some(t) => {
            let tt = mean_l1(g, t, gt, "l_rec teacher")?;
            g.add(s, tt)
        }
    }
}

/// `Σ_i γ^{N−1−i} · L1(F̂^i, F_gt)` over `flows` in block order, plus the
/// teacher term at unit weight.
pub fn l_flow(g: &mut Graph, flows: &[Node], teacher: Option<Node>, gt: Node, gamma: f64) -> Result<Node> {
    if flows.is_empty() {
        return Err(invalid!("l_flow needs at least one block flow"));
    }
    let n = flows.len();
    let mut terms = Vec::with_capacity(n + 1);
    for (i, &f) in flows.iter().enumerate() {
        let l = flow_l1(g, f, gt)?;
        terms.push(g.scale(l, gamma.powi((n - 1 - i) as i32)));
    }
    if let Some(t) = teacher {
        terms.push(flow_l1(g, t, gt)?);
    }
    add_all(g, &terms)
}

/// `Σ_{j∈{s,u}} mean ‖F̂_{t→j} − F̂^teach_{t→j}‖₂`; the teacher side is detached.
pub fn l_dis(g: &mut Graph, student: [Node; 2], teacher: [Node; 2]) -> Result<Node> {
    let mut terms = Vec::with_capacity(2);
    for (s, t) in student.into_iter().zip(teacher) {
        same(g, s, t, "l_dis")?;
        let t = g.detach(t);
        let d = g.sub(s, t)?;
        let nrm = g.channel_norm(d);
        terms.push(g.mean(nrm));
    }
    add_all(g, &terms)
}

/// `½ Σ_j mean_p ρ(D_j(p) − D̂_t(p − F̂_{t→j}(p)))`, `ρ(x) = sqrt(x² + ε²)`.
///
/// `−F̂_{t→j}` is the first-order inverse of the `t→j` flow, carrying `D̂_t`
/// back onto frame `j`.
pub fn l_photo(
    g: &mut Graph,
    flow_s: Node,
    flow_u: Node,
    ds: Node,
    du: Node,
    pred: Node,
    eps: f64,
) -> Result<Node> {
    let mut terms = Vec::with_capacity(2);
    for (d, f) in [(ds, flow_s), (du, flow_u)] {
        same(g, d, pred, "l_photo field")?;
        let inv = g.scale(f, -1.0);
        let w = backward_warp(g, pred, inv)?;
        let diff = g.sub(d, w)?;
        let r = g.charbonnier(diff, eps);
        terms.push(g.mean(r));
    }
    let s = add_all(g, &terms)?;
    Ok(g.scale(s, 0.5))
}

/// `Σ ‖W‖₁` over `kernels`.
pub fn l_reg(g: &mut Graph, kernels: &[Node]) -> Result<Node> {
    if kernels.is_empty() {
        return Err(invalid!("l_reg needs at least one kernel"));
    }
    let terms: Vec<Node> = kernels
        .iter()
        .map(|&k| {
            let a = g.abs(k);
            g.sum(a)
        })
        .collect();
    add_all(g, &terms)
}

/// `L_rec + λ_flow · L_flow`.
pub fn total_supervised(g: &mut Graph, rec: Node, flow: Node, w: &LossWeights) -> Result<Node> {
    let f = g.scale(flow, w.flow);
    g.add(rec, f)
}

#[derive(Debug, Clone, Copy)]
pub struct UnsupervisedParts {
    pub rec: Node,
    pub dis: Node,
    pub photo: Node,
    pub reg: Node,
}

/// `L_rec + λ_dis L_dis + λ_photo L_photo + λ_reg L_reg`.
pub fn total_unsupervised(g: &mut Graph, p: UnsupervisedParts, w: &LossWeights) -> Result<Node> {
    let d = g.scale(p.dis, w.dis);
    let ph = g.scale(p.photo, w.photo);
    let r = g.scale(p.reg, w.reg);
    add_all(g, &[p.rec, d, ph, r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(g: &mut Graph, shape: &[usize], v: f64) -> Node {
        g.constant(Tensor::filled(shape.to_vec(), v))
    }

    fn t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    }

    fn val(g: &Graph, n: Node) -> f64 {
        g.value(n).item()
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let gt = c(&mut g, &[1, 3, 3], 0.4);
        let p = c(&mut g, &[1, 3, 3], 0.5);
        let tch = c(&mut g, &[1, 3, 3], 0.6);
        let l0 = l_rec(&mut g, gt, None, gt).unwrap();
        let l1 = l_rec(&mut g, p, None, gt).unwrap();
        let l2 = l_rec(&mut g, p, Some(tch), gt).unwrap();
        assert_eq!(val(&g, l0), 0.0);
        assert!((val(&g, l1) - 0.1).abs() < 1e-12);
        assert!((val(&g, l2) - 0.3).abs() < 1e-12);
        let bad = c(&mut g, &[1, 3, 4], 0.0);
        assert!(l_rec(&mut g, bad, None, gt).is_err());
    }

    #[test]
    fn flow_weights_follow_gamma() {
        let mut g = Graph::new();
        let gt = c(&mut g, &[2, 4, 4], 0.0);
        // per-cell L1 of a constant (e, e) offset is 2e
        let e = 0.3;
        let f = c(&mut g, &[2, 4, 4], e);
        let l = l_flow(&mut g, &[f, f, f, f], None, gt, 0.8).unwrap();
        assert!((val(&g, l) - 2.952 * 2.0 * e).abs() < 1e-12);
        let one = l_flow(&mut g, &[f], None, gt, 0.8).unwrap();
        assert!((val(&g, one) - 2.0 * e).abs() < 1e-12);
        let z = l_flow(&mut g, &[gt, gt], Some(gt), gt, 0.8).unwrap();
        assert_eq!(val(&g, z), 0.0);
        assert!(l_flow(&mut g, &[], None, gt, 0.8).is_err());
    }

    #[test]
    fn distillation_fixture() {
        let mut g = Graph::new();
        // 2×2 grid, flow_s differs by (3,4) at one cell and (1,0) at another
        let s = g.param(Tensor::new(vec![2, 2, 2], vec![3.0, 1.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0]).unwrap());
        let z = c(&mut g, &[2, 2, 2], 0.0);
        let tch = g.param(Tensor::zeros(vec![2, 2, 2]));
        let l = l_dis(&mut g, [s, z], [tch, z]).unwrap();
        assert!((val(&g, l) - (5.0 + 1.0) / 4.0).abs() < 1e-12);
        g.backward(l).unwrap();
        assert_eq!(g.grad(tch).max_abs(), 0.0);
        assert!(g.grad(s).max_abs() > 0.0);
        let same = l_dis(&mut g, [z, z], [z, z]).unwrap();
        assert_eq!(val(&g, same), 0.0);
    }

    #[test]
    fn photometric_plug_in_values() {
        let mut g = Graph::new();
        let z = c(&mut g, &[1, 3, 3], 0.0);
        let zf = c(&mut g, &[2, 3, 3], 0.0);
        let l = l_photo(&mut g, zf, zf, z, z, z, 1e-9).unwrap();
        assert!((val(&g, l) - 1e-9).abs() < 1e-24);
        let d = c(&mut g, &[1, 3, 3], 3e-9);
        let l = l_photo(&mut g, zf, zf, d, d, z, 1e-9).unwrap();
        assert!((val(&g, l) - 10f64.sqrt() * 1e-9).abs() < 1e-22);
    }

    #[test]
    fn photometric_matches_direct_summation() {
        let ds = t(&[1, 3, 3], 1, 0.0, 1.0);
        let du = t(&[1, 3, 3], 2, 0.0, 1.0);
        let pred = t(&[1, 3, 3], 3, 0.0, 1.0);
        // half-pixel flows: t→s is (+0.5, 0), t→u is (0, −0.5)
        let mut fs = vec![0.0; 18];
        fs[..9].fill(0.5);
        let mut fu = vec![0.0; 18];
        fu[9..].fill(-0.5);
        let eps = 1e-3;
        // oracle: sample pred at p − flow with explicit 1-D blends
        let p = pred.data();
        let at = |y: usize, x: usize| p[y * 3 + x];
        let mut total = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                // x − 0.5: clamped at x=0, else midpoint of x−1 and x
                let vs = if x == 0 { at(y, 0) } else { 0.5 * (at(y, x - 1) + at(y, x)) };
                // y + 0.5: clamped at y=2, else midpoint of y and y+1
                let vu = if y == 2 { at(2, x) } else { 0.5 * (at(y, x) + at(y + 1, x)) };
                let rs = ds.data()[y * 3 + x] - vs;
                let ru = du.data()[y * 3 + x] - vu;
                total += (rs * rs + eps * eps).sqrt() + (ru * ru + eps * eps).sqrt();
            }
        }
        let want = 0.5 * total / 9.0;
        let mut g = Graph::new();
        let (a, b, pr) = (g.constant(ds), g.constant(du), g.constant(pred));
        let fsn = g.constant(Tensor::new(vec![2, 3, 3], fs).unwrap());
        let fun = g.constant(Tensor::new(vec![2, 3, 3], fu).unwrap());
        let l = l_photo(&mut g, fsn, fun, a, b, pr, eps).unwrap();
        assert!((val(&g, l) - want).abs() / want < 1e-10);
    }

    #[test]
    fn regularizer_examples() {
        let mut g = Graph::new();
        let z = c(&mut g, &[2, 2], 0.0);
        let l = l_reg(&mut g, &[z]).unwrap();
        assert_eq!(val(&g, l), 0.0);
        let ones_s = c(&mut g, &[10], 1.0);
        let ones_t = c(&mut g, &[10], 1.0);
        let l = l_reg(&mut g, &[ones_s, ones_t]).unwrap();
        assert_eq!(val(&g, l), 20.0);
        let w = t(&[3, 4], 5, -1.0, 1.0);
        let sign: Vec<f64> = w.data().iter().map(|v| v.signum()).collect();
        let mut g = Graph::new();
        let wn = g.param(w.clone());
        let l = l_reg(&mut g, &[wn]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(wn).data(), sign.as_slice());
        let err = grad_check(&[w], |g, x| l_reg(g, &[x[0]])).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn composite_objectives() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let s = total_supervised(&mut g, one, one, &w).unwrap();
        assert!((val(&g, s) - 1.2).abs() < 1e-15);
        let z = total_supervised(&mut g, zero, zero, &w).unwrap();
        assert_eq!(val(&g, z), 0.0);
        let parts = UnsupervisedParts { rec: one, dis: one, photo: one, reg: one };
        let u = total_unsupervised(&mut g, parts, &w).unwrap();
        assert!((val(&g, u) - (1.0 + 1e-4 + 1e-6 + 1e-8)).abs() < 1e-15);
        let dropped = LossWeights { photo: 0.0, ..w };
        let d = total_unsupervised(&mut g, UnsupervisedParts { photo: zero, ..parts }, &w).unwrap();
        let d2 = total_unsupervised(&mut g, parts, &dropped).unwrap();
        assert_eq!(val(&g, d), val(&g, d2));
        assert!(LossWeights { gamma: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let xs = [
            t(&[1, 4, 4], 10, 0.0, 1.0),
            t(&[1, 4, 4], 11, 0.0, 1.0),
            t(&[1, 4, 4], 12, 0.0, 1.0),
            t(&[2, 4, 4], 13, 0.2, 0.8),
            t(&[2, 4, 4], 14, -0.8, -0.2),
        ];
        let err = grad_check(&xs, |g, x| {
            let gt = g.constant(Tensor::filled(vec![2, 4, 4], 0.05));
            let r = l_rec(g, x[0], Some(x[1]), x[2])?;
            let f = l_flow(g, &[x[3], x[4]], None, gt, 0.8)?;
            let d = l_dis(g, [x[3], x[4]], [gt, gt])?;
            let p = l_photo(g, x[3], x[4], x[1], x[2], x[0], 1e-3)?;
            let parts = UnsupervisedParts { rec: r, dis: d, photo: p, reg: f };
            let w = LossWeights { dis: 0.5, photo: 0.7, reg: 0.3, ..Default::default() };
            total_unsupervised(g, parts, &w)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
