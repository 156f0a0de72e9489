//! Pull-based affine resampling with trilinear interpolation, and the
//! similarity between fixed and moved volumes.
//!
//! `resample(moving, T)(x) = moving(T⁻¹ x)`: `T` maps moving coordinates into
//! fixed space, so the output lives on the fixed grid. Samples outside the
//! moving grid read as zero.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::align::{self, AffineTransform};
use crate::autodiff::{NodeId, Op, Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{Grid, Volume, Vec3};

/// Variance guard in the correlation denominator.
pub const NCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// Mean squared error.
    #[default]
    Mse,
    /// `1 − ρ` with ρ the global Pearson correlation.
    Ncc,
}

/// Trilinear interpolation of `data` at `p` with zero padding, plus its
/// spatial gradient.
#[inline]
pub(crate) fn sample_with_gradient(data: &[f64], grid: &Grid, p: &Vec3) -> (f64, Vec3) {
    let [nx, ny, nz] = grid.dims();
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    let at = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            data[x as usize + nx * (y as usize + ny * z as usize)]
        }
    };
    let c000 = at(x0, y0, z0);
    let c100 = at(x0 + 1, y0, z0);
    let c010 = at(x0, y0 + 1, z0);
    let c110 = at(x0 + 1, y0 + 1, z0);
    let c001 = at(x0, y0, z0 + 1);
    let c101 = at(x0 + 1, y0, z0 + 1);
    let c011 = at(x0, y0 + 1, z0 + 1);
    let c111 = at(x0 + 1, y0 + 1, z0 + 1);
    // interpolate along x, then y, then z
    let c00 = c000 + tx * (c100 - c000);
    let c10 = c010 + tx * (c110 - c010);
    let c01 = c001 + tx * (c101 - c001);
    let c11 = c011 + tx * (c111 - c011);
    let c0 = c00 + ty * (c10 - c00);
    let c1 = c01 + ty * (c11 - c01);
    let value = c0 + tz * (c1 - c0);

    let dx0 = (c100 - c000) + ty * ((c110 - c010) - (c100 - c000));
    let dx1 = (c101 - c001) + ty * ((c111 - c011) - (c101 - c001));
    let gx = dx0 + tz * (dx1 - dx0);
    let gy = (c10 - c00) + tz * ((c11 - c01) - (c10 - c00));
    let gz = c1 - c0;
    (value, Vec3::new(gx, gy, gz))
}

/// Scatters `g` onto the eight corners of the trilinear stencil at `p`.
#[inline]
fn scatter(out: &mut [f64], grid: &Grid, p: &Vec3, g: f64) {
    let [nx, ny, nz] = grid.dims();
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let (x, y, z) = (x0 + dx, y0 + dy, z0 + dz);
                if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                    continue;
                }
                out[x as usize + nx * (y as usize + ny * z as usize)] += g * wx * wy * wz;
            }
        }
    }
}

#[inline]
fn source_point(inv: &Matrix4<f64>, x: &Vec3) -> Vec3 {
    let h = inv * Vector4::new(x.x, x.y, x.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

pub(crate) fn resample_data(data: &[f64], grid: &Grid, inv: &Matrix4<f64>) -> Vec<f64> {
    (0..grid.len())
        .map(|n| sample_with_gradient(data, grid, &source_point(inv, &grid.coordinate(n))).0)
        .collect()
}

/// Moving volume pulled onto the fixed grid through `t`.
pub fn resample(moving: &Volume, t: &AffineTransform) -> Result<Volume> {
    let inv = align::invert(t)?;
    Volume::new(*moving.grid(), resample_data(moving.data(), moving.grid(), inv.matrix()))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

struct NccParts {
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn ncc_parts(a: &[f64], b: &[f64]) -> NccParts {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x - mean_a, y - mean_b);
        saa += u * u;
        sbb += v * v;
        sab += u * v;
    }
    NccParts {
        mean_a,
        mean_b,
        saa: saa / n + NCC_EPS,
        sbb: sbb / n + NCC_EPS,
        sab: sab / n,
    }
}

fn ncc_loss(a: &[f64], b: &[f64]) -> f64 {
    let p = ncc_parts(a, b);
    1.0 - p.sab / (p.saa * p.sbb).sqrt()
}

pub fn similarity(fixed: &Volume, moved: &Volume, kind: SimilarityKind) -> Result<f64> {
    if fixed.grid() != moved.grid() {
        return Err(Error::shape(
            "similarity",
            format!("{:?} vs {:?}", fixed.grid().dims(), moved.grid().dims()),
        ));
    }
    Ok(match kind {
        SimilarityKind::Mse => mse(fixed.data(), moved.data()),
        SimilarityKind::Ncc => ncc_loss(fixed.data(), moved.data()),
    })
}

// ---------------------------------------------------------------------------
// graph ops

struct Warp {
    grid: Grid,
    inverse: Matrix4<f64>,
    need_volume_grad: bool,
}

impl Op for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let vol = inputs[0];
        let mut g_vol = Tensor::zeros_like(vol);
        let mut g_inv = Matrix4::<f64>::zeros();
        for n in 0..self.grid.len() {
            let g = grad.data()[n];
            if g == 0.0 {
                continue;
            }
            let x = self.grid.coordinate(n);
            let p = source_point(&self.inverse, &x);
            let (_, dp) = sample_with_gradient(vol.data(), &self.grid, &p);
            let xh = [x.x, x.y, x.z, 1.0];
            for i in 0..3 {
                let gi = g * dp[i];
                for (j, &xj) in xh.iter().enumerate() {
                    g_inv[(i, j)] += gi * xj;
                }
            }
            if self.need_volume_grad {
                scatter(g_vol.data_mut(), &self.grid, &p, g);
            }
        }
        // d(T⁻¹) = −T⁻¹ dT T⁻¹
        let it = self.inverse.transpose();
        let g_t = -(it * g_inv * it);
        let mut flat = vec![0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                flat[r * 4 + c] = g_t[(r, c)];
            }
        }
        vec![g_vol, Tensor::new([4, 4], flat)]
    }
}

struct MseOp;

impl Op for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let c = 2.0 * grad.item() / a.len() as f64;
        let ga: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| c * (x - y)).collect();
        let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
        vec![Tensor::new(a.shape().to_vec(), ga), Tensor::new(b.shape().to_vec(), gb)]
    }
}

struct NccOp;

impl Op for NccOp {
    fn name(&self) -> &'static str {
        "ncc"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let p = ncc_parts(a.data(), b.data());
        let n = a.len() as f64;
        let root = (p.saa * p.sbb).sqrt();
        let c = -grad.item() / (n * root);
        let mut ga = Vec::with_capacity(a.len());
        let mut gb = Vec::with_capacity(b.len());
        for (x, y) in a.data().iter().zip(b.data()) {
            let (u, v) = (x - p.mean_a, y - p.mean_b);
            ga.push(c * (v - p.sab * u / p.saa));
            gb.push(c * (u - p.sab * v / p.sbb));
        }
        vec![Tensor::new(a.shape().to_vec(), ga), Tensor::new(b.shape().to_vec(), gb)]
    }
}

/// `[nz, ny, nx]` tensor holding a volume.
pub fn volume_tensor(v: &Volume) -> Tensor {
    let [nx, ny, nz] = v.grid().dims();
    Tensor::new([nz, ny, nx], v.data().to_vec())
}

impl Tape {
    /// Resamples `volume` (`[nz, ny, nx]`) through `transform` (`[4, 4]`).
    pub fn warp(&mut self, volume: NodeId, transform: NodeId) -> Result<NodeId> {
        let shape = self.value(volume).shape().to_vec();
        if shape.len() != 3 || self.value(transform).shape() != [4, 4] {
            return Err(Error::shape(
                "warp",
                format!("volume {shape:?}, transform {:?}", self.value(transform).shape()),
            ));
        }
        let grid = Grid::new([shape[2], shape[1], shape[0]])?;
        let t = AffineTransform::from_flat(self.value(transform).data())?;
        let inverse = *align::invert(&t)?.matrix();
        let out = Tensor::new(shape, resample_data(self.value(volume).data(), &grid, &inverse));
        let op = Warp {
            grid,
            inverse,
            need_volume_grad: self.requires_grad(volume),
        };
        Ok(self.record(op, &[volume, transform], out))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mse", "operand shapes differ"));
        }
        let v = Tensor::scalar(mse(self.value(a).data(), self.value(b).data()));
        Ok(self.record(MseOp, &[a, b], v))
    }

    pub fn ncc(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("ncc", "operand shapes differ"));
        }
        let v = Tensor::scalar(ncc_loss(self.value(a).data(), self.value(b).data()));
        Ok(self.record(NccOp, &[a, b], v))
    }

    pub fn similarity(&mut self, a: NodeId, b: NodeId, kind: SimilarityKind) -> Result<NodeId> {
        match kind {
            SimilarityKind::Mse => self.mse(a, b),
            SimilarityKind::Ncc => self.ncc(a, b),
        }
    }
}
