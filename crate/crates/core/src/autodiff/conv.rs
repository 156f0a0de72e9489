//! Zero-padded, stride-1 3D convolution over `[C, nz, ny, nx]` stacks.
//!
//! Weights are `[C_out, C_in, k, k, k]` with taps ordered `(dz, dy, dx)`; `k`
//! is odd and the padding is `k / 2`, so spatial dims are preserved.
//!
//! Every pass works on an explicitly zero-padded copy of its input, gathers
//! blocks of shifted runs (im2col) and hands the products to a GEMM kernel.

use super::tape::{NodeId, Op, Tape};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    dims: [usize; 3], // nz, ny, nx
}

impl ConvGeometry {
    fn from_shapes(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<Self> {
        if input.len() != 4 || weight.len() != 5 || bias.len() != 1 {
            return Err(Error::shape(
                "conv3d",
                format!("input {input:?}, weight {weight:?}, bias {bias:?}"),
            ));
        }
        let k = weight[2];
        if weight[3] != k || weight[4] != k || k.is_multiple_of(2) {
            return Err(Error::shape("conv3d", format!("kernel must be odd cube, got {weight:?}")));
        }
        if weight[1] != input[0] || bias[0] != weight[0] {
            return Err(Error::shape(
                "conv3d",
                format!("input {input:?}, weight {weight:?}, bias {bias:?}"),
            ));
        }
        Ok(Self {
            c_in: input[0],
            c_out: weight[0],
            k,
            dims: [input[1], input[2], input[3]],
        })
    }

    fn volume(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn padded_dims(&self) -> [usize; 3] {
        let e = self.k - 1;
        [self.dims[0] + e, self.dims[1] + e, self.dims[2] + e]
    }
}

/// Copies `c` channels of `dims` into a buffer with a zero border of `p`.
fn pad(data: &[f64], c: usize, dims: [usize; 3], p: usize) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let (pz, py, px) = (nz + 2 * p, ny + 2 * p, nx + 2 * p);
    let mut out = vec![0.0; c * pz * py * px];
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                let src = ((ch * nz + z) * ny + y) * nx;
                let dst = ((ch * pz + z + p) * py + y + p) * px + p;
                out[dst..dst + nx].copy_from_slice(&data[src..src + nx]);
            }
        }
    }
    out
}

/// Output positions are addressed with the padded strides so that every tap
/// is a fixed offset into the padded input. Positions past `nx` or `ny` in a
/// row or plane are computed and then dropped.
fn strided_len(g: &ConvGeometry) -> usize {
    let [nz, ny, nx] = g.dims;
    let [_, py, px] = g.padded_dims();
    (nz - 1) * py * px + (ny - 1) * px + nx
}

/// Strided positions per im2col block; a block of columns stays in cache.
const BLOCK: usize = 256;

/// Row-major matrix view: `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

/// `c = a·b + beta·c` with `a` m×k, `b` k×n and `c` m×n at row stride `rsc`.
fn gemm([m, k, n]: [usize; 3], a: View, b: View, beta: f64, c: &mut [f64], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, 1) < c.len());
    if k > 0 {
        assert!(last(m, k, a.rs, a.cs) < a.data.len());
        assert!(last(k, n, b.rs, b.cs) < b.data.len());
    }
    // SAFETY: the asserts above keep every index the kernel touches in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Fills `cols` (`[c_in·k³, n]`) with the shifted input runs for strided
/// positions `start..start + n`.
fn im2col(padded: &[f64], g: &ConvGeometry, start: usize, n: usize, cols: &mut [f64]) {
    let [pz, py, px] = g.padded_dims();
    let (plane, k) = (py * px, g.k);
    let mut r = 0;
    for ci in 0..g.c_in {
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    let off = ci * pz * plane + tz * plane + ty * px + tx + start;
                    cols[r * n..(r + 1) * n].copy_from_slice(&padded[off..off + n]);
                    r += 1;
                }
            }
        }
    }
}

/// Correlates a padded stack with `weight` (`[c_out, c_in, k, k, k]`).
fn correlate(padded: &[f64], g: &ConvGeometry, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let [nz, ny, nx] = g.dims;
    let [_, py, px] = g.padded_dims();
    let rows = g.c_in * g.k.pow(3);
    let len = strided_len(g);
    let mut cols = vec![0.0; rows * BLOCK];
    let mut acc = vec![0.0; g.c_out * len];
    let w = View { data: weight, rs: rows, cs: 1 };
    for start in (0..len).step_by(BLOCK) {
        let n = BLOCK.min(len - start);
        im2col(padded, g, start, n, &mut cols);
        let b = View { data: &cols, rs: n, cs: 1 };
        gemm([g.c_out, rows, n], w, b, 0.0, &mut acc[start..], len);
    }
    let mut out = vec![0.0; g.c_out * g.volume()];
    for co in 0..g.c_out {
        let bias = bias.map_or(0.0, |b| b[co]);
        for z in 0..nz {
            for y in 0..ny {
                let src = co * len + (z * py + y) * px;
                let dst = ((co * nz + z) * ny + y) * nx;
                for (o, &v) in out[dst..dst + nx].iter_mut().zip(&acc[src..src + nx]) {
                    *o = v + bias;
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::from_shapes(input.shape(), weight.shape(), bias.shape())?;
    let padded = pad(input.data(), g.c_in, g.dims, g.k / 2);
    let out = correlate(&padded, &g, weight.data(), Some(bias.data()));
    Ok(Tensor::new(
        vec![g.c_out, g.dims[0], g.dims[1], g.dims[2]],
        out,
    ))
}

/// `∂w[co, ci, t] = Σ_j grad[co, j] · input[ci, j + offset(t)]` with `grad` in
/// padded strides (zeros at dropped positions).
fn weight_grad(padded: &[f64], strided: &[f64], g: &ConvGeometry, gw: &mut [f64]) {
    let rows = g.c_in * g.k.pow(3);
    let len = strided_len(g);
    let mut cols = vec![0.0; rows * BLOCK];
    for start in (0..len).step_by(BLOCK) {
        let n = BLOCK.min(len - start);
        im2col(padded, g, start, n, &mut cols);
        let a = View { data: &strided[start..], rs: len, cs: 1 };
        let b = View { data: &cols, rs: 1, cs: n };
        gemm([g.c_out, n, rows], a, b, 1.0, gw, rows);
    }
}

/// Kernel of the adjoint convolution: channels swapped, taps reversed.
fn adjoint_weight(weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.k;
    let k3 = k * k * k;
    let mut out = vec![0.0; weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let src = &weight[(co * g.c_in + ci) * k3..(co * g.c_in + ci + 1) * k3];
            let dst = &mut out[(ci * g.c_out + co) * k3..(ci * g.c_out + co + 1) * k3];
            for (t, &w) in src.iter().enumerate() {
                dst[k3 - 1 - t] = w;
            }
        }
    }
    out
}

struct Conv3d {
    need_input_grad: bool,
}

impl Op for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (input, weight, bias) = (inputs[0], inputs[1], inputs[2]);
        let g = ConvGeometry::from_shapes(input.shape(), weight.shape(), bias.shape())
            .expect("shapes validated at record time");
        let [nz, ny, nx] = g.dims;
        let [_, py, px] = g.padded_dims();
        let n = g.volume();
        let k = g.k;

        let mut gb = Tensor::zeros_like(bias);
        for co in 0..g.c_out {
            gb.data_mut()[co] = grad.data()[co * n..(co + 1) * n].iter().sum();
        }

        let padded = pad(input.data(), g.c_in, g.dims, k / 2);
        let plane = py * px;
        let len = strided_len(&g);
        let mut strided = vec![0.0; g.c_out * len];
        for co in 0..g.c_out {
            for z in 0..nz {
                for y in 0..ny {
                    let src = ((co * nz + z) * ny + y) * nx;
                    let dst = co * len + z * plane + y * px;
                    strided[dst..dst + nx].copy_from_slice(&grad.data()[src..src + nx]);
                }
            }
        }
        let mut gw = Tensor::zeros_like(weight);
        weight_grad(&padded, &strided, &g, gw.data_mut());

        let gin = if self.need_input_grad {
            let adj = ConvGeometry {
                c_in: g.c_out,
                c_out: g.c_in,
                ..g
            };
            let padded_grad = pad(grad.data(), g.c_out, g.dims, k / 2);
            Tensor::new(input.shape().to_vec(), correlate(&padded_grad, &adj, &adjoint_weight(weight.data(), &g), None))
        } else {
            Tensor::zeros_like(input)
        };
        vec![gin, gw, gb]
    }
}

impl Tape {
    /// Same-size 3D convolution. `input` is `[C_in, nz, ny, nx]`.
    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = conv3d_forward(self.value(input), self.value(weight), self.value(bias))?;
        let op = Conv3d {
            need_input_grad: self.requires_grad(input),
        };
        Ok(self.record(op, &[input, weight, bias], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line definition used as the oracle.
    fn conv_naive(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let s = input.shape();
        let (c_in, nz, ny, nx) = (s[0], s[1], s[2], s[3]);
        let c_out = weight.shape()[0];
        let k = weight.shape()[2];
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros([c_out, nz, ny, nx]);
        for co in 0..c_out {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut acc = bias.data()[co];
                        for ci in 0..c_in {
                            for tz in 0..k {
                                for ty in 0..k {
                                    for tx in 0..k {
                                        let zi = z as isize + tz as isize - p;
                                        let yi = y as isize + ty as isize - p;
                                        let xi = x as isize + tx as isize - p;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= nz as isize || yi >= ny as isize || xi >= nx as isize {
                                            continue;
                                        }
                                        let w = weight.data()[(((co * c_in + ci) * k + tz) * k + ty) * k + tx];
                                        acc += w * input.data()[((ci * nz + zi as usize) * ny + yi as usize) * nx + xi as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * nz + z) * ny + y) * nx + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn matches_naive_definition() {
        let input = Tensor::new([2, 3, 4, 5], pseudo(120, 1));
        let weight = Tensor::new([3, 2, 3, 3, 3], pseudo(162, 2));
        let bias = Tensor::new([3], vec![0.1, -0.2, 0.3]);
        let fast = conv3d_forward(&input, &weight, &bias).unwrap();
        let slow = conv_naive(&input, &weight, &bias);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_kernel() {
        let input = Tensor::new([2, 2, 2, 2], pseudo(16, 3));
        let weight = Tensor::new([1, 2, 1, 1, 1], vec![2.0, -1.0]);
        let bias = Tensor::new([1], vec![0.5]);
        let out = conv3d_forward(&input, &weight, &bias).unwrap();
        for i in 0..8 {
            let expect = 0.5 + 2.0 * input.data()[i] - input.data()[8 + i];
            assert!((out.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_even_kernel() {
        let input = Tensor::zeros([1, 2, 2, 2]);
        let weight = Tensor::zeros([1, 1, 2, 2, 2]);
        let bias = Tensor::zeros([1]);
        assert!(conv3d_forward(&input, &weight, &bias).is_err());
    }
}
