use super::{Graph, Node, Tensor};
use crate::error::{invalid, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator, per unit of `max(1, |f|)`, so
/// entries whose true gradient is ~0 are judged by absolute error. Central
/// differences of `f` carry cancellation error proportional to `|f|`.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh graph plus one parameter node per input and must
/// return a scalar root. The result is the worst relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR · max(1, |f|))`
/// over every input entry.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Node]) -> Result<Node>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let nodes: Vec<Node> = vals.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &nodes)?;
        if g.value(root).len() != 1 {
            return Err(invalid!("grad_check needs a scalar root"));
        }
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let nodes: Vec<Node> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &nodes)?;
    let floor = REL_FLOOR * g.value(root).item().abs().max(1.0);
    g.backward(root)?;
    let analytic: Vec<Tensor> = nodes.iter().map(|&n| g.grad(n)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, an) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = an.data()[j];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
