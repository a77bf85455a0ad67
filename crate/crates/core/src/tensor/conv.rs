//! Convolution kernels: im2col / col2im over up to three spatial axes and a
//! thin GEMM wrapper.
//!
//! Lower-rank problems are lifted to three spatial axes by prepending
//! unit extents, so one code path serves conv1d, conv2d and conv3d.

use crate::error::{shape_err, Result};

/// Geometry of a cross-correlation between an input of `in_ch` channels and
/// an output of `out_ch` channels, lifted to three spatial axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub rank: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let off = 3 - v.len();
    out[off..].copy_from_slice(v);
    out
}

impl ConvGeom {
    /// Geometry for a forward conv with kernel `[out_ch, in_ch, k...]`.
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let rank = input.len().checked_sub(1).unwrap_or(0);
        if !(1..=3).contains(&rank) {
            return Err(shape_err!("conv input must have 1..=3 spatial axes, got {rank}"));
        }
        if kernel.len() != rank + 2 {
            return Err(shape_err!(
                "kernel rank {} does not match input spatial rank {}",
                kernel.len(),
                rank
            ));
        }
        if kernel[1] != input[0] {
            return Err(shape_err!(
                "axis 0 (channels): kernel expects {} input channels, input has {}",
                kernel[1],
                input[0]
            ));
        }
        check_per_axis(rank, stride, pad)?;
        let mut out = Vec::with_capacity(rank);
        for a in 0..rank {
            let padded = input[a + 1] + 2 * pad[a];
            let k = kernel[a + 2];
            if k > padded {
                return Err(shape_err!(
                    "axis {}: kernel extent {} exceeds padded input extent {}",
                    a + 1,
                    k,
                    padded
                ));
            }
            out.push((padded - k) / stride[a] + 1);
        }
        Ok(Self {
            rank,
            in_ch: input[0],
            out_ch: kernel[0],
            in_dims: lift(&input[1..], 1),
            k: lift(&kernel[2..], 1),
            stride: lift(stride, 1),
            pad: lift(pad, 0),
            out_dims: lift(&out, 1),
        })
    }

    /// Geometry for a transposed conv with kernel `[in_ch, out_ch, k...]`.
    ///
    /// The returned geometry describes the *adjoint* forward conv: its input
    /// is the deconv output and its output is the deconv input.
    pub fn deconv(
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let rank = input.len().checked_sub(1).unwrap_or(0);
        if !(1..=3).contains(&rank) {
            return Err(shape_err!("deconv input must have 1..=3 spatial axes, got {rank}"));
        }
        if kernel.len() != rank + 2 {
            return Err(shape_err!(
                "kernel rank {} does not match input spatial rank {}",
                kernel.len(),
                rank
            ));
        }
        if kernel[0] != input[0] {
            return Err(shape_err!(
                "axis 0 (channels): kernel expects {} input channels, input has {}",
                kernel[0],
                input[0]
            ));
        }
        check_per_axis(rank, stride, pad)?;
        let mut out = Vec::with_capacity(rank);
        for a in 0..rank {
            let full = (input[a + 1] - 1) * stride[a] + kernel[a + 2];
            if full <= 2 * pad[a] {
                return Err(shape_err!(
                    "axis {}: padding {} leaves no output extent",
                    a + 1,
                    pad[a]
                ));
            }
            out.push(full - 2 * pad[a]);
        }
        Ok(Self {
            rank,
            in_ch: kernel[1],
            out_ch: input[0],
            in_dims: lift(&out, 1),
            k: lift(&kernel[2..], 1),
            stride: lift(stride, 1),
            pad: lift(pad, 0),
            out_dims: lift(&input[1..], 1),
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.k.iter().product()
    }

    pub fn in_cells(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_cells(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_spatial(&self) -> Vec<usize> {
        self.in_dims[3 - self.rank..].to_vec()
    }

    pub fn out_spatial(&self) -> Vec<usize> {
        self.out_dims[3 - self.rank..].to_vec()
    }
}

fn check_per_axis(rank: usize, stride: &[usize], pad: &[usize]) -> Result<()> {
    if stride.len() != rank || pad.len() != rank {
        return Err(shape_err!(
            "stride/padding need {rank} entries, got {}/{}",
            stride.len(),
            pad.len()
        ));
    }
    if let Some(a) = stride.iter().position(|&s| s == 0) {
        return Err(shape_err!("axis {}: stride must be positive", a + 1));
    }
    Ok(())
}

/// Unfolds `input` (`in_ch × in_cells`) into a `(in_ch·K) × out_cells` matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_cells();
    let rows = g.in_ch * g.kernel_volume();
    let mut col = vec![0.0; rows * p];
    let [dz, dy, dx] = g.in_dims;
    let [oz, oy, ox] = g.out_dims;
    let [kz, ky, kx] = g.k;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &input[c * dz * dy * dx..(c + 1) * dz * dy * dx];
        for a in 0..kz {
            for b in 0..ky {
                for e in 0..kx {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..oz {
                        let iz = (z * sz + a) as isize - pz as isize;
                        if iz < 0 || iz >= dz as isize {
                            idx += oy * ox;
                            continue;
                        }
                        for y in 0..oy {
                            let iy = (y * sy + b) as isize - py as isize;
                            if iy < 0 || iy >= dy as isize {
                                idx += ox;
                                continue;
                            }
                            let base = (iz as usize * dy + iy as usize) * dx;
                            for x in 0..ox {
                                let ix = (x * sx + e) as isize - px as isize;
                                if ix >= 0 && ix < dx as isize {
                                    dst[idx] = plane[base + ix as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into
/// `out` (`in_ch × in_cells`).
pub fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_cells();
    let [dz, dy, dx] = g.in_dims;
    let [oz, oy, ox] = g.out_dims;
    let [kz, ky, kx] = g.k;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut out[c * dz * dy * dx..(c + 1) * dz * dy * dx];
        for a in 0..kz {
            for b in 0..ky {
                for e in 0..kx {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..oz {
                        let iz = (z * sz + a) as isize - pz as isize;
                        if iz < 0 || iz >= dz as isize {
                            idx += oy * ox;
                            continue;
                        }
                        for y in 0..oy {
                            let iy = (y * sy + b) as isize - py as isize;
                            if iy < 0 || iy >= dy as isize {
                                idx += ox;
                                continue;
                            }
                            let base = (iz as usize * dy + iy as usize) * dx;
                            for x in 0..ox {
                                let ix = (x * sx + e) as isize - px as isize;
                                if ix >= 0 && ix < dx as isize {
                                    plane[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = beta·c + op(a)·op(b)` for row-major operands, where `op` optionally
/// transposes. `op(a)` is `m × k`, `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
