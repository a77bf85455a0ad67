//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends an entry to the tape; entries only reference
//! earlier entries, so the tape order is a topological order and a backward
//! pass is a single reverse sweep.

use super::conv::{col2im, gemm, im2col, ConvGeom};
use super::value::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(pub(crate) usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` where the input receives none).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv {
        input: Node,
        kernel: Node,
        bias: Node,
        geom: ConvGeom,
    },
    Deconv {
        input: Node,
        kernel: Node,
        bias: Node,
        geom: ConvGeom,
    },
    Linear {
        input: Node,
        weight: Node,
        bias: Node,
        rows: usize,
    },
    Prelu {
        input: Node,
        slope: Node,
    },
    Concat {
        inputs: Vec<Node>,
        sizes: Vec<usize>,
    },
    Narrow {
        input: Node,
        start: usize,
    },
    Reshape(Node),
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    Offset(Node),
    Sigmoid(Node),
    Abs(Node),
    Square(Node),
    Exp(Node),
    Charbonnier(Node),
    ChannelNorm(Node),
    Sum(Node),
    Mean(Node),
    Custom {
        inputs: Vec<Node>,
        op: Box<dyn CustomOp>,
    },
}

struct Entry {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A computation graph confined to one thread.
#[derive(Default)]
pub struct Graph {
    entries: Vec<Entry>,
}

fn same_shape(g: &Graph, a: Node, b: Node, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        let axis = sa
            .iter()
            .zip(sb)
            .position(|(x, y)| x != y)
            .map(|i| format!("axis {i}"))
            .unwrap_or_else(|| "rank".to_string());
        return Err(shape_err!("{what}: {axis} differs ({sa:?} vs {sb:?})"));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Node {
        self.entries.push(Entry {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Node(self.entries.len() - 1)
    }

    fn rg(&self, nodes: &[Node]) -> bool {
        nodes.iter().any(|n| self.entries[n.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Node {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Node {
        self.push(value, false, Op::Leaf)
    }

    /// Copy of `node`'s current value with gradient flow cut.
    pub fn detach(&mut self, node: Node) -> Node {
        let v = self.value(node).clone();
        self.constant(v)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.entries[node.0].value
    }

    pub fn shape(&self, node: Node) -> &[usize] {
        self.entries[node.0].value.shape()
    }

    pub fn requires_grad(&self, node: Node) -> bool {
        self.entries[node.0].requires_grad
    }

    /// Accumulated gradient (zeros until a backward pass reaches the node).
    pub fn grad(&self, node: Node) -> Tensor {
        let e = &self.entries[node.0];
        match &e.grad {
            Some(g) => Tensor::new(e.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(e.value.shape().to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn conv(
        &mut self,
        input: Node,
        kernel: Node,
        bias: Node,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Node> {
        let geom = ConvGeom::conv(self.shape(input), self.shape(kernel), stride, pad)?;
        if self.shape(bias) != [geom.out_ch] {
            return Err(shape_err!(
                "axis 0: bias has shape {:?}, expected [{}]",
                self.shape(bias),
                geom.out_ch
            ));
        }
        let col = im2col(self.value(input).data(), &geom);
        let p = geom.out_cells();
        let kk = geom.in_ch * geom.kernel_volume();
        let mut out = vec![0.0; geom.out_ch * p];
        let b = self.value(bias).data();
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(
            geom.out_ch,
            kk,
            p,
            self.value(kernel).data(),
            false,
            &col,
            false,
            1.0,
            &mut out,
        );
        let mut shape = vec![geom.out_ch];
        shape.extend(geom.out_spatial());
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Transposed convolution with kernel layout `[in_ch, out_ch, k...]`.
    pub fn deconv(
        &mut self,
        input: Node,
        kernel: Node,
        bias: Node,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Node> {
        let geom = ConvGeom::deconv(self.shape(input), self.shape(kernel), stride, pad)?;
        if self.shape(bias) != [geom.in_ch] {
            return Err(shape_err!(
                "axis 0: bias has shape {:?}, expected [{}]",
                self.shape(bias),
                geom.in_ch
            ));
        }
        let p = geom.out_cells();
        let kk = geom.in_ch * geom.kernel_volume();
        let mut col = vec![0.0; kk * p];
        // col = Wᵀ · x with W viewed as (in_ch_deconv × out_ch·K)
        gemm(
            kk,
            geom.out_ch,
            p,
            self.value(kernel).data(),
            true,
            self.value(input).data(),
            false,
            0.0,
            &mut col,
        );
        let cells = geom.in_cells();
        let mut out = vec![0.0; geom.in_ch * cells];
        let b = self.value(bias).data();
        for (o, chunk) in out.chunks_mut(cells).enumerate() {
            chunk.fill(b[o]);
        }
        col2im(&col, &geom, &mut out);
        let mut shape = vec![geom.in_ch];
        shape.extend(geom.in_spatial());
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Deconv {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Affine map `weight · x + bias`; `input` is a vector `[in]` or a row
    /// batch `[rows, in]`, `weight` is `[out, in]`.
    pub fn linear(&mut self, input: Node, weight: Node, bias: Node) -> Result<Node> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(shape_err!("weight must be rank 2, got {:?}", ws));
        }
        let is = self.shape(input).to_vec();
        let (rows, len) = match is.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return Err(shape_err!("linear input must be rank 1 or 2, got {:?}", is)),
        };
        if ws[1] != len {
            return Err(shape_err!(
                "axis {}: input length {} does not match weight columns {}",
                is.len() - 1,
                len,
                ws[1]
            ));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(shape_err!(
                "axis 0: bias has shape {:?}, expected [{}]",
                self.shape(bias),
                ws[0]
            ));
        }
        let out_n = ws[0];
        let mut out = Vec::with_capacity(rows * out_n);
        let b = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        gemm(
            rows,
            len,
            out_n,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let shape = if is.len() == 1 {
            vec![out_n]
        } else {
            vec![rows, out_n]
        };
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
            },
        ))
    }

    /// Parametric ReLU; `slope` holds one shared value or one per entry of axis 0.
    pub fn prelu(&mut self, input: Node, slope: Node) -> Result<Node> {
        let ns = self.value(slope).len();
        let c = self.shape(input)[0];
        if ns != 1 && ns != c {
            return Err(shape_err!(
                "axis 0: slope has {ns} entries, expected 1 or {c}"
            ));
        }
        let x = self.value(input);
        let a = self.value(slope).data();
        let per = x.len() / c;
        let out: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = if ns == 1 { a[0] } else { a[i / per] };
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            })
            .collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, slope]);
        Ok(self.push(t, rg, Op::Prelu { input, slope }))
    }

    /// Stacks inputs along axis 0.
    pub fn concat(&mut self, inputs: &[Node]) -> Result<Node> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid!("concat of zero inputs"))?;
        let rest = self.shape(first)[1..].to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(inputs.len());
        let mut channels = 0;
        for &n in inputs {
            let s = self.shape(n);
            if s.len() != rest.len() + 1 {
                return Err(shape_err!("concat: rank {} vs {}", s.len(), rest.len() + 1));
            }
            if let Some(i) = s[1..].iter().zip(&rest).position(|(a, b)| a != b) {
                return Err(shape_err!(
                    "concat: axis {} differs ({} vs {})",
                    i + 1,
                    s[i + 1],
                    rest[i]
                ));
            }
            channels += s[0];
            sizes.push(self.value(n).len());
            data.extend_from_slice(self.value(n).data());
        }
        let mut shape = vec![channels];
        shape.extend(rest);
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
            },
        ))
    }

    /// Entries `start..start+len` of axis 0.
    pub fn narrow(&mut self, input: Node, start: usize, len: usize) -> Result<Node> {
        let s = self.shape(input).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(shape_err!(
                "axis 0: range {}..{} outside extent {}",
                start,
                start + len,
                s[0]
            ));
        }
        let per: usize = s[1..].iter().product();
        let data = self.value(input).data()[start * per..(start + len) * per].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Narrow {
                input,
                start: start * per,
            },
        ))
    }

    pub fn reshape(&mut self, input: Node, shape: &[usize]) -> Result<Node> {
        let t = self.value(input).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, rg, Op::Reshape(input)))
    }

    fn binary(&mut self, a: Node, b: Node, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, a, b, what)?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn unary(&self, a: Node, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Node, factor: f64) -> Node {
        let t = self.unary(a, |v| v * factor);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Node, value: f64) -> Node {
        let t = self.unary(a, |v| v + value);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let t = self.unary(a, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Node) -> Node {
        let t = self.unary(a, f64::abs);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Abs(a))
    }

    pub fn square(&mut self, a: Node) -> Node {
        let t = self.unary(a, |v| v * v);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Square(a))
    }

    pub fn exp(&mut self, a: Node) -> Node {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Exp(a))
    }

    /// Elementwise `sqrt(x² + eps²)`.
    pub fn charbonnier(&mut self, a: Node, eps: f64) -> Node {
        let t = self.unary(a, |v| (v * v + eps * eps).sqrt());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Charbonnier(a))
    }

    /// Euclidean norm across axis 0, keeping a unit channel axis.
    pub fn channel_norm(&mut self, a: Node) -> Node {
        let x = self.value(a);
        let c = x.shape()[0];
        let per = x.len() / c;
        let mut out = vec![0.0; per];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&x.data()[ch * per..(ch + 1) * per]) {
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let t = Tensor::new(shape, out).expect("norm shape");
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::ChannelNorm(a))
    }

    pub fn sum(&mut self, a: Node) -> Node {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Node) -> Node {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Mean(a))
    }

    /// Records a value computed outside the graph together with its backward rule.
    pub fn custom(&mut self, inputs: &[Node], output: Tensor, op: Box<dyn CustomOp>) -> Node {
        let rg = self.rg(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar root. Gradients are added to whatever the
    /// nodes already hold; call [`Graph::zero_grads`] between steps.
    pub fn backward(&mut self, root: Node) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = Vec::new();
        tmp.resize_with(root.0 + 1, || None);
        tmp[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.entries[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut tmp);
            let e = &mut self.entries[i];
            match &mut e.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => e.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let val = |n: Node| &self.entries[n.0].value;
        let mut acc = |n: Node, f: &mut dyn FnMut(&mut [f64])| {
            if !self.entries[n.0].requires_grad {
                return;
            }
            let slot = tmp[n.0].get_or_insert_with(|| vec![0.0; self.entries[n.0].value.len()]);
            f(slot);
        };
        let out = &self.entries[i].value;
        match &self.entries[i].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let p = geom.out_cells();
                let kk = geom.in_ch * geom.kernel_volume();
                acc(*bias, &mut |d| {
                    for (o, row) in g.chunks(p).enumerate() {
                        d[o] += row.iter().sum::<f64>();
                    }
                });
                if self.entries[kernel.0].requires_grad {
                    let col = im2col(val(*input).data(), geom);
                    acc(*kernel, &mut |d| {
                        gemm(geom.out_ch, p, kk, g, false, &col, true, 1.0, d)
                    });
                }
                if self.entries[input.0].requires_grad {
                    let mut dcol = vec![0.0; kk * p];
                    gemm(kk, geom.out_ch, p, val(*kernel).data(), true, g, false, 0.0, &mut dcol);
                    acc(*input, &mut |d| col2im(&dcol, geom, d));
                }
            }
            Op::Deconv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let cells = geom.in_cells();
                let p = geom.out_cells();
                let kk = geom.in_ch * geom.kernel_volume();
                acc(*bias, &mut |d| {
                    for (o, row) in g.chunks(cells).enumerate() {
                        d[o] += row.iter().sum::<f64>();
                    }
                });
                let need_k = self.entries[kernel.0].requires_grad;
                let need_x = self.entries[input.0].requires_grad;
                if need_k || need_x {
                    let gcol = im2col(g, geom);
                    if need_k {
                        acc(*kernel, &mut |d| {
                            gemm(geom.out_ch, p, kk, val(*input).data(), false, &gcol, true, 1.0, d)
                        });
                    }
                    if need_x {
                        acc(*input, &mut |d| {
                            gemm(geom.out_ch, kk, p, val(*kernel).data(), false, &gcol, false, 1.0, d)
                        });
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
            } => {
                let ws = val(*weight).shape();
                let (out_n, in_n) = (ws[0], ws[1]);
                acc(*bias, &mut |d| {
                    for row in g.chunks(out_n) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                acc(*weight, &mut |d| {
                    gemm(out_n, *rows, in_n, g, true, val(*input).data(), false, 1.0, d)
                });
                acc(*input, &mut |d| {
                    gemm(*rows, out_n, in_n, g, false, val(*weight).data(), false, 1.0, d)
                });
            }
            Op::Prelu { input, slope } => {
                let x = val(*input);
                let a = val(*slope).data();
                let ns = a.len();
                let per = x.len() / x.shape()[0];
                let ch = |j: usize| if ns == 1 { 0 } else { j / per };
                acc(*input, &mut |d| {
                    for (j, (dv, &xv)) in d.iter_mut().zip(x.data()).enumerate() {
                        *dv += if xv > 0.0 { g[j] } else { a[ch(j)] * g[j] };
                    }
                });
                acc(*slope, &mut |d| {
                    for (j, &xv) in x.data().iter().enumerate() {
                        if xv <= 0.0 {
                            d[ch(j)] += xv * g[j];
                        }
                    }
                });
            }
            Op::Concat { inputs, sizes } => {
                let mut off = 0;
                for (&n, &sz) in inputs.iter().zip(sizes) {
                    let part = &g[off..off + sz];
                    acc(n, &mut |d| d.iter_mut().zip(part).for_each(|(a, b)| *a += b));
                    off += sz;
                }
            }
            Op::Narrow { input, start } => {
                acc(*input, &mut |d| {
                    d[*start..*start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::Offset(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Sigmoid(a) => {
                let s = out.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * s[j] * (1.0 - s[j]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        let s = if x[j] > 0.0 {
                            1.0
                        } else if x[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[j] += g[j] * s;
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * x[j] * g[j];
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j];
                    }
                });
            }
            Op::Charbonnier(a) => {
                let x = val(*a).data();
                let y = out.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * x[j] / y[j];
                    }
                });
            }
            Op::ChannelNorm(a) => {
                let x = val(*a).data();
                let y = out.data();
                let per = y.len();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        let cell = j % per;
                        if y[cell] > 0.0 {
                            d[j] += g[cell] * x[j] / y[cell];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|n| val(*n)).collect();
                let grads = op.backward(&ins, out, g);
                for (&n, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        acc(n, &mut |d| d.iter_mut().zip(&gi).for_each(|(x, y)| *x += y));
                    }
                }
            }
        }
    }
}
