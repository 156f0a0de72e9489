//! Graph ops over feature stacks: softmax, moments, Gaussian log-density, KL,
//! covariance norms, and pairwise keypoint distances.

use nalgebra::Matrix3;

use super::tape::{NodeId, Op, Tape};
use super::Tensor;
use crate::error::{Error, Result};
use crate::field::{Grid, Vec3};
use crate::keypoints::{self, KL_PROB_FLOOR};

pub(crate) fn mat3(data: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&data[..9])
}

pub(crate) fn write_mat3(dst: &mut [f64], m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            dst[r * 3 + c] = m[(r, c)];
        }
    }
}

fn vec3(data: &[f64]) -> Vec3 {
    Vec3::new(data[0], data[1], data[2])
}

fn field_shape(k: usize, grid: &Grid) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims();
    vec![k, nz, ny, nx]
}

/// Grid of a `[K, nz, ny, nx]` tensor.
pub(crate) fn stack_grid(op: &'static str, shape: &[usize]) -> Result<Grid> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected [K, nz, ny, nx], got {shape:?}")));
    }
    Grid::new([shape[3], shape[2], shape[1]])
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("expected {want:?}, got {got:?}")));
    }
    Ok(())
}

struct SpatialSoftmax {
    n: usize,
}

impl Op for SpatialSoftmax {
    fn name(&self) -> &'static str {
        "spatial_softmax"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut gin = Tensor::zeros_like(output);
        for ((gi, f), g) in gin
            .data_mut()
            .chunks_exact_mut(self.n)
            .zip(output.data().chunks_exact(self.n))
            .zip(grad.data().chunks_exact(self.n))
        {
            let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &fv), &gv) in gi.iter_mut().zip(f).zip(g) {
                *o = fv * (gv - dot);
            }
        }
        vec![gin]
    }
}

struct CenterOfMass {
    grid: Grid,
}

impl Op for CenterOfMass {
    fn name(&self) -> &'static str {
        "center_of_mass"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = self.grid.len();
        let mut gin = Tensor::zeros_like(inputs[0]);
        for (k, gi) in gin.data_mut().chunks_exact_mut(n).enumerate() {
            let g = vec3(&grad.data()[3 * k..]);
            for (idx, o) in gi.iter_mut().enumerate() {
                *o = g.dot(&self.grid.coordinate(idx));
            }
        }
        vec![gin]
    }
}

struct Covariance {
    grid: Grid,
}

impl Op for Covariance {
    fn name(&self) -> &'static str {
        "covariance"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (f, mu) = (inputs[0], inputs[1]);
        let n = self.grid.len();
        let mut gf = Tensor::zeros_like(f);
        let mut gmu = Tensor::zeros_like(mu);
        for (k, (gfk, fk)) in gf
            .data_mut()
            .chunks_exact_mut(n)
            .zip(f.data().chunks_exact(n))
            .enumerate()
        {
            let g = mat3(&grad.data()[9 * k..]);
            let gs = (g + g.transpose()) * 0.5;
            let m = vec3(&mu.data()[3 * k..]);
            let mut m0 = 0.0;
            let mut m1 = Vec3::zeros();
            for (idx, (o, &fv)) in gfk.iter_mut().zip(fk).enumerate() {
                let x = self.grid.coordinate(idx);
                let d = x - m;
                *o = d.dot(&(gs * d));
                m0 += fv;
                m1 += fv * x;
            }
            let gm = -2.0 * gs * (m1 - m * m0);
            gmu.data_mut()[3 * k..3 * k + 3].copy_from_slice(gm.as_slice());
        }
        vec![gf, gmu]
    }
}

struct GaussianLogDensity {
    grid: Grid,
    normalise: bool,
}

impl Op for GaussianLogDensity {
    fn name(&self) -> &'static str {
        "gaussian_log_density"
    }
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (mu, prec) = (inputs[0], inputs[1]);
        let n = self.grid.len();
        let k = mu.shape()[0];
        let mut gmu = Tensor::zeros_like(mu);
        let mut gprec = Tensor::zeros_like(prec);
        let mut gld = Tensor::zeros([k]);
        for c in 0..k {
            let g = &grad.data()[c * n..(c + 1) * n];
            let out = &output.data()[c * n..(c + 1) * n];
            let gsum: f64 = g.iter().sum();
            let m = vec3(&mu.data()[3 * c..]);
            let p = mat3(&prec.data()[9 * c..]);
            let psym = p + p.transpose();
            let mut acc_g = 0.0;
            let mut acc_d = Vec3::zeros();
            let mut acc_dd = Matrix3::zeros();
            for idx in 0..n {
                let gi = if self.normalise {
                    g[idx] - out[idx].exp() * gsum
                } else {
                    g[idx]
                };
                if gi == 0.0 {
                    continue;
                }
                let d = self.grid.coordinate(idx) - m;
                acc_g += gi;
                acc_d += gi * d;
                acc_dd += gi * d * d.transpose();
            }
            gld.data_mut()[c] = -0.5 * acc_g;
            write_mat3(&mut gprec.data_mut()[9 * c..9 * c + 9], &(-0.5 * acc_dd));
            let gm = 0.5 * psym * acc_d;
            gmu.data_mut()[3 * c..3 * c + 3].copy_from_slice(gm.as_slice());
        }
        vec![gmu, gprec, gld]
    }
}

struct KlDivergence;

impl Op for KlDivergence {
    fn name(&self) -> &'static str {
        "kl_divergence"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (p, lq) = (inputs[0], inputs[1]);
        let g = grad.item();
        let mut gp = Tensor::zeros_like(p);
        let mut glq = Tensor::zeros_like(lq);
        for (i, (&pv, &lv)) in p.data().iter().zip(lq.data()).enumerate() {
            if pv >= KL_PROB_FLOOR {
                gp.data_mut()[i] = g * (pv.ln() - lv + 1.0);
                glq.data_mut()[i] = -g * pv;
            }
        }
        vec![gp, glq]
    }
}

struct MatrixNorms {
    scale: f64,
}

impl Op for MatrixNorms {
    fn name(&self) -> &'static str {
        "matrix_norms"
    }
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut gin = Tensor::zeros_like(inputs[0]);
        for (k, (gi, a)) in gin
            .data_mut()
            .chunks_exact_mut(9)
            .zip(inputs[0].data().chunks_exact(9))
            .enumerate()
        {
            let nrm = output.data()[k];
            if nrm > 0.0 {
                let c = grad.data()[k] * self.scale / nrm;
                for (o, &v) in gi.iter_mut().zip(a) {
                    *o = c * v;
                }
            }
        }
        vec![gin]
    }
}

struct PairwiseDistances;

impl Op for PairwiseDistances {
    fn name(&self) -> &'static str {
        "pairwise_distances"
    }
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mu = inputs[0];
        let k = mu.shape()[0];
        let mut gin = Tensor::zeros_like(mu);
        let mut p = 0;
        for a in 0..k {
            for b in a + 1..k {
                let d = output.data()[p];
                if d > 0.0 {
                    let u = (vec3(&mu.data()[3 * a..]) - vec3(&mu.data()[3 * b..])) * (grad.data()[p] / d);
                    for ax in 0..3 {
                        gin.data_mut()[3 * a + ax] += u[ax];
                        gin.data_mut()[3 * b + ax] -= u[ax];
                    }
                }
                p += 1;
            }
        }
        vec![gin]
    }
}

impl Tape {
    /// Per-channel softmax over the spatial axes of `[K, nz, ny, nx]`.
    pub fn spatial_softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let shape = self.value(logits).shape().to_vec();
        let grid = stack_grid("spatial_softmax", &shape)?;
        let n = grid.len();
        let out = Tensor::new(shape, keypoints::softmax_channels(self.value(logits).data(), n));
        Ok(self.record(SpatialSoftmax { n }, &[logits], out))
    }

    /// `[K, nz, ny, nx]` → `[K, 3]` first moments.
    pub fn center_of_mass(&mut self, features: NodeId, grid: &Grid) -> Result<NodeId> {
        let f = self.value(features);
        let k = f.shape().first().copied().unwrap_or(0);
        expect_shape("center_of_mass", f.shape(), &field_shape(k, grid))?;
        let mut out = Vec::with_capacity(3 * k);
        for ch in f.data().chunks_exact(grid.len()) {
            out.extend_from_slice(keypoints::first_moment(ch, grid).as_slice());
        }
        let out = Tensor::new([k, 3], out);
        Ok(self.record(CenterOfMass { grid: *grid }, &[features], out))
    }

    /// `[K, nz, ny, nx]`, `[K, 3]` → `[K, 3, 3]` symmetrised second moments.
    pub fn covariance(&mut self, features: NodeId, mu: NodeId, grid: &Grid) -> Result<NodeId> {
        let f = self.value(features);
        let k = f.shape().first().copied().unwrap_or(0);
        expect_shape("covariance", f.shape(), &field_shape(k, grid))?;
        expect_shape("covariance", self.value(mu).shape(), &[k, 3])?;
        let m = self.value(mu);
        let mut out = Tensor::zeros([k, 3, 3]);
        for (c, ch) in f.data().chunks_exact(grid.len()).enumerate() {
            let s = keypoints::second_moment(ch, grid, &vec3(&m.data()[3 * c..]));
            write_mat3(&mut out.data_mut()[9 * c..9 * c + 9], &s);
        }
        Ok(self.record(Covariance { grid: *grid }, &[features, mu], out))
    }

    /// Log-density of `N(μ_k, P_k⁻¹)` over the grid, `[K, nz, ny, nx]`.
    /// `logdet` is `log|Σ_k|`. With `normalise`, each channel's log-sum-exp is
    /// subtracted.
    pub fn gaussian_log_density(
        &mut self,
        mu: NodeId,
        precision: NodeId,
        logdet: NodeId,
        grid: &Grid,
        normalise: bool,
    ) -> Result<NodeId> {
        let k = self.value(mu).shape().first().copied().unwrap_or(0);
        expect_shape("gaussian_log_density", self.value(mu).shape(), &[k, 3])?;
        expect_shape("gaussian_log_density", self.value(precision).shape(), &[k, 3, 3])?;
        expect_shape("gaussian_log_density", self.value(logdet).shape(), &[k])?;
        let mut out = Vec::with_capacity(k * grid.len());
        for c in 0..k {
            let m = vec3(&self.value(mu).data()[3 * c..]);
            let p = mat3(&self.value(precision).data()[9 * c..]);
            let ld = self.value(logdet).data()[c];
            out.extend(keypoints::gaussian_log_density(&m, &p, ld, grid, normalise));
        }
        let out = Tensor::new(field_shape(k, grid), out);
        Ok(self.record(
            GaussianLogDensity {
                grid: *grid,
                normalise,
            },
            &[mu, precision, logdet],
            out,
        ))
    }

    /// Scalar `Σ p (ln p − log_q)`, skipping entries with `p` below the floor.
    pub fn kl_divergence(&mut self, p: NodeId, log_q: NodeId) -> Result<NodeId> {
        let (pv, lq) = (self.value(p), self.value(log_q));
        expect_shape("kl_divergence", lq.shape(), pv.shape())?;
        let out = Tensor::scalar(keypoints::kl_sum(pv.data(), lq.data()));
        Ok(self.record(KlDivergence, &[p, log_q], out))
    }

    /// `[K, 3, 3]` → `[K]` with entries `sqrt(scale · Σ a²)`.
    pub fn matrix_norms(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        let v = self.value(a);
        let k = v.shape().first().copied().unwrap_or(0);
        expect_shape("matrix_norms", v.shape(), &[k, 3, 3])?;
        let out: Vec<f64> = v
            .data()
            .chunks_exact(9)
            .map(|m| (scale * m.iter().map(|x| x * x).sum::<f64>()).sqrt())
            .collect();
        Ok(self.record(MatrixNorms { scale }, &[a], Tensor::new([k], out)))
    }

    /// `[K, 3]` → `[K(K−1)/2]` Euclidean distances, pairs `(a, b)` with `a < b`
    /// in lexicographic order.
    pub fn pairwise_distances(&mut self, mu: NodeId) -> Result<NodeId> {
        let v = self.value(mu);
        let k = v.shape().first().copied().unwrap_or(0);
        expect_shape("pairwise_distances", v.shape(), &[k, 3])?;
        let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        for a in 0..k {
            for b in a + 1..k {
                out.push((vec3(&v.data()[3 * a..]) - vec3(&v.data()[3 * b..])).norm());
            }
        }
        let n = out.len();
        Ok(self.record(PairwiseDistances, &[mu], Tensor::new([n], out)))
    }
}
