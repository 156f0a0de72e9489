//! Probabilistic keypoints from feature maps, and the three spatial
//! regularisers on them.
//!
//! A feature channel is turned into a distribution over voxels with a spatial
//! softmax; its first and second moments give the keypoint location `μ` and
//! spread `Σ`. The regularisers are
//!
//! * KL divergence between each channel and the Gaussian with the same
//!   moments (shape: one compact blob per channel),
//! * a norm of each covariance (precision),
//! * a pairwise repulsion between keypoint locations (diversity).

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{FeatureStack, Grid, PointCloud, Vec3};

/// Ridge added to every covariance before the Gaussian is evaluated.
pub const SIGMA_RIDGE: f64 = 1e-4;
/// Probabilities below this contribute nothing to the KL sum.
pub const KL_PROB_FLOOR: f64 = 1e-30;
const NORMALISED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub mu: Vec3,
    pub sigma: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_var: f64,
    pub lambda_rep: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 1.0,
            lambda_var: 1e-2,
            lambda_rep: 1e-3,
            tau: 1e-1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_kl, self.lambda_var, self.lambda_rep];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {ws:?}")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// How the Gaussian reference in the KL term is discretised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Gaussian renormalised over the grid; the KL is a true discrete KL ≥ 0.
    #[default]
    Normalised,
    /// Continuous normal density at voxel centres; can go negative.
    Density,
}

/// Covariance norm used by the precision regulariser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarNorm {
    /// `sqrt(mean of the 9 squared entries)`, i.e. Frobenius / 3.
    #[default]
    Rms,
    Frobenius,
}

impl VarNorm {
    pub(crate) fn scale(self) -> f64 {
        match self {
            VarNorm::Rms => 1.0 / 9.0,
            VarNorm::Frobenius => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "sim")]
    pub l_sim: f64,
    #[serde(rename = "kl")]
    pub l_kl: f64,
    #[serde(rename = "var")]
    pub l_var: f64,
    #[serde(rename = "rep")]
    pub l_rep: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// kernels shared by the plain functions and the graph ops

pub(crate) fn softmax_channels(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for ch in logits.chunks_exact(n) {
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(ch.iter().map(|&r| (r - max).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `Σ_X X·f(X)` without any normalisation check.
pub(crate) fn first_moment(f: &[f64], grid: &Grid) -> Vec3 {
    let [nx, ny, nz] = grid.dims();
    let mut m = [0.0; 3];
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            let mut row = 0.0;
            let mut row_x = 0.0;
            for i in 0..nx {
                let v = f[idx];
                row += v;
                row_x += v * i as f64;
                idx += 1;
            }
            m[0] += row_x;
            m[1] += row * j as f64;
            m[2] += row * k as f64;
        }
    }
    Vec3::new(m[0], m[1], m[2])
}

/// `Σ_X f(X)(X−μ)(X−μ)ᵀ`, symmetrised.
pub(crate) fn second_moment(f: &[f64], grid: &Grid, mu: &Vec3) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for (n, &v) in f.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let d = grid.coordinate(n) - mu;
        s += v * d * d.transpose();
    }
    (s + s.transpose()) * 0.5
}

/// Log-density of `N(μ, P⁻¹)` at every voxel, with `log|Σ| = logdet`. In
/// normalised mode the log-sum-exp over the grid is subtracted.
pub(crate) fn gaussian_log_density(
    mu: &Vec3,
    precision: &Matrix3<f64>,
    logdet: f64,
    grid: &Grid,
    normalise: bool,
) -> Vec<f64> {
    let c = -1.5 * (2.0 * PI).ln() - 0.5 * logdet;
    let mut out: Vec<f64> = (0..grid.len())
        .map(|n| {
            let d = grid.coordinate(n) - mu;
            c - 0.5 * (d.transpose() * precision * d)[(0, 0)]
        })
        .collect();
    if normalise {
        let lse = log_sum_exp(&out);
        out.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `Σ p (ln p − log_q)` over entries with `p ≥ KL_PROB_FLOOR`.
pub(crate) fn kl_sum(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pv, _)| pv >= KL_PROB_FLOOR)
        .map(|(&pv, &lq)| pv * (pv.ln() - lq))
        .sum()
}

pub(crate) fn softplus_neg(x: f64) -> f64 {
    // −ln σ(x) = ln(1 + e^{−x})
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn ridged(sigma: &Matrix3<f64>) -> Matrix3<f64> {
    sigma + Matrix3::identity() * SIGMA_RIDGE
}

fn check_normalised(f: &[f64], channel: usize) -> Result<()> {
    let sum: f64 = f.iter().sum();
    if (sum - 1.0).abs() > NORMALISED_TOL || f.iter().any(|&v| v < 0.0) {
        return Err(Error::NotNormalised { channel, sum });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plain API

/// Per-channel spatial softmax with max subtraction.
pub fn normalize_features(raw: &FeatureStack) -> FeatureStack {
    let grid = *raw.grid();
    let data = softmax_channels(raw.data(), grid.len());
    FeatureStack::new(grid, raw.channels(), data).expect("shape preserved")
}

pub fn center_of_mass(f: &[f64], grid: &Grid) -> Result<Vec3> {
    if f.len() != grid.len() {
        return Err(Error::shape("center_of_mass", format!("{} values for grid {:?}", f.len(), grid.dims())));
    }
    check_normalised(f, 0)?;
    Ok(first_moment(f, grid))
}

pub fn covariance(f: &[f64], grid: &Grid, mu: &Vec3) -> Result<Matrix3<f64>> {
    if f.len() != grid.len() {
        return Err(Error::shape("covariance", format!("{} values for grid {:?}", f.len(), grid.dims())));
    }
    check_normalised(f, 0)?;
    Ok(second_moment(f, grid, mu))
}

/// Moments of every channel of a normalised stack.
pub fn keypoints_from_features(features: &FeatureStack) -> Result<Vec<Keypoint>> {
    let grid = features.grid();
    features
        .channel_iter()
        .enumerate()
        .map(|(k, f)| {
            check_normalised(f, k)?;
            let mu = first_moment(f, grid);
            let sigma = second_moment(f, grid, &mu);
            Ok(Keypoint { mu, sigma })
        })
        .collect()
}

pub fn point_cloud(kps: &[Keypoint]) -> PointCloud {
    PointCloud::new(kps.iter().map(|kp| kp.mu).collect())
}

/// Gaussian with covariance `sigma + εI` sampled at voxel centres.
pub fn discretized_gaussian(mu: &Vec3, sigma: &Matrix3<f64>, grid: &Grid, mode: KlMode) -> Vec<f64> {
    let s = ridged(sigma);
    let precision = s.try_inverse().expect("ridged covariance is invertible");
    let logdet = s.determinant().ln();
    gaussian_log_density(mu, &precision, logdet, grid, mode == KlMode::Normalised)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Unscaled `Σ_X F_k (ln F_k − ln N_k)` for each channel.
pub fn kl_per_channel(features: &FeatureStack, kps: &[Keypoint], mode: KlMode) -> Result<Vec<f64>> {
    if kps.len() != features.channels() {
        return Err(Error::shape(
            "loss_kl",
            format!("{} keypoints for {} channels", kps.len(), features.channels()),
        ));
    }
    let grid = features.grid();
    Ok(features
        .channel_iter()
        .zip(kps)
        .map(|(f, kp)| {
            let s = ridged(&kp.sigma);
            let precision = s.try_inverse().expect("ridged covariance is invertible");
            let log_q = gaussian_log_density(&kp.mu, &precision, s.determinant().ln(), grid, mode == KlMode::Normalised);
            kl_sum(f, &log_q)
        })
        .collect())
}

/// KL regulariser with its `1/K` and `1/|Ω|` prefactors.
pub fn loss_kl(features: &FeatureStack, kps: &[Keypoint], mode: KlMode) -> Result<f64> {
    let per = kl_per_channel(features, kps, mode)?;
    let v = per.iter().sum::<f64>() / (per.len() as f64 * features.grid().len() as f64);
    if mode == KlMode::Density && v < 0.0 {
        log::warn!("density-mode KL is negative ({v:.4e}); expected for sharply peaked features");
    }
    Ok(v)
}

pub fn loss_var(kps: &[Keypoint], norm: VarNorm) -> f64 {
    if kps.is_empty() {
        return 0.0;
    }
    let s = norm.scale();
    kps.iter()
        .map(|kp| (s * kp.sigma.iter().map(|v| v * v).sum::<f64>()).sqrt())
        .sum::<f64>()
        / kps.len() as f64
}

/// Mean over unordered pairs of `−ln σ(‖μ_k − μ_k'‖ / τ)`.
pub fn loss_rep(mus: &PointCloud, tau: f64) -> f64 {
    let k = mus.len();
    if k < 2 {
        log::warn!("repulsion loss needs at least two keypoints, got {k}; returning 0");
        return 0.0;
    }
    let mut acc = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            acc += softplus_neg((mus.points[a] - mus.points[b]).norm() / tau);
        }
    }
    2.0 * acc / (k * (k - 1)) as f64
}

pub fn total_loss(sim: f64, kl: f64, var: f64, rep: f64, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("sim", sim), ("kl", kl), ("var", var), ("rep", rep)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm {
                what: format!("loss term `{name}` ({v})"),
            });
        }
    }
    Ok(LossReport {
        l_sim: sim,
        l_kl: kl,
        l_var: var,
        l_rep: rep,
        total: sim + w.lambda_kl * kl + w.lambda_var * var + w.lambda_rep * rep,
    })
}

/// Maximum eigenvalue of a (symmetric) covariance.
pub fn spectral_norm(sigma: &Matrix3<f64>) -> f64 {
    sigma.symmetric_eigenvalues().max()
}

// ---------------------------------------------------------------------------
// graph construction

/// Settings that shape the regulariser graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulariserOptions {
    pub kl_mode: KlMode,
    pub var_norm: VarNorm,
    pub tau: f64,
    pub detach_gaussian_params: bool,
}

/// Nodes produced for one feature stack.
#[derive(Debug, Clone, Copy)]
pub struct KeypointNodes {
    /// Normalised features `[K, nz, ny, nx]`.
    pub features: NodeId,
    /// `[K, 3]`.
    pub mu: NodeId,
    /// `[K, 3, 3]`.
    pub sigma: NodeId,
}

/// Softmax and moments of a logit stack `[K, nz, ny, nx]`.
pub fn keypoint_nodes(tape: &mut Tape, logits: NodeId, grid: &Grid) -> Result<KeypointNodes> {
    let features = tape.spatial_softmax(logits)?;
    let mu = tape.center_of_mass(features, grid)?;
    let sigma = tape.covariance(features, mu, grid)?;
    Ok(KeypointNodes { features, mu, sigma })
}

/// Scalar KL node (with prefactors).
pub fn kl_node(tape: &mut Tape, kp: &KeypointNodes, grid: &Grid, opts: &RegulariserOptions) -> Result<NodeId> {
    let k = tape.value(kp.mu).shape()[0];
    let (mu, sigma) = if opts.detach_gaussian_params {
        (tape.detach(kp.mu), tape.detach(kp.sigma))
    } else {
        (kp.mu, kp.sigma)
    };
    let mut ridge = Tensor::zeros([k, 3, 3]);
    for c in 0..k {
        for a in 0..3 {
            ridge.data_mut()[c * 9 + a * 4] = SIGMA_RIDGE;
        }
    }
    let ridge = tape.constant(ridge);
    let s = tape.add(sigma, ridge)?;
    let precision = tape.inverse3(s)?;
    let logdet = tape.logdet3(s)?;
    let log_q = tape.gaussian_log_density(mu, precision, logdet, grid, opts.kl_mode == KlMode::Normalised)?;
    let kl = tape.kl_divergence(kp.features, log_q)?;
    Ok(tape.scale(kl, 1.0 / (k as f64 * grid.len() as f64)))
}

pub fn var_node(tape: &mut Tape, sigma: NodeId, norm: VarNorm) -> Result<NodeId> {
    let norms = tape.matrix_norms(sigma, norm.scale())?;
    Ok(tape.mean(norms))
}

pub fn rep_node(tape: &mut Tape, mu: NodeId, tau: f64) -> Result<NodeId> {
    let d = tape.pairwise_distances(mu)?;
    if tape.value(d).is_empty() {
        log::warn!("repulsion loss needs at least two keypoints; returning 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let x = tape.scale(d, 1.0 / tau);
    let s = tape.sigmoid(x);
    let l = tape.ln(s);
    let m = tape.mean(l);
    Ok(tape.scale(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn delta(grid: &Grid, at: [usize; 3]) -> Vec<f64> {
        let mut f = vec![0.0; grid.len()];
        f[grid.index(at[0], at[1], at[2])] = 1.0;
        f
    }

    fn uniform(grid: &Grid) -> Vec<f64> {
        vec![1.0 / grid.len() as f64; grid.len()]
    }

    #[test]
    fn softmax_zero_logits_uniform() {
        let g = Grid::cube(2).unwrap();
        let fs = normalize_features(&FeatureStack::new(g, 1, vec![0.0; 8]).unwrap());
        assert!(fs.data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn softmax_saturates() {
        let g = Grid::cube(2).unwrap();
        let mut raw = vec![0.0; 8];
        raw[3] = 1000.0;
        let fs = normalize_features(&FeatureStack::new(g, 1, raw).unwrap());
        assert!((fs.data()[3] - 1.0).abs() < 1e-15);
        assert!(fs.data().iter().enumerate().all(|(i, &v)| i == 3 || v < 1e-300));
    }

    #[test]
    fn softmax_random_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([5, 4, 6]).unwrap();
        let raw: Vec<f64> = (0..3 * g.len()).map(|_| rng.random_range(-20.0..20.0)).collect();
        let fs = normalize_features(&FeatureStack::new(g, 3, raw).unwrap());
        for ch in fs.channel_iter() {
            assert!((ch.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(ch.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn com_of_delta_uniform_and_spikes() {
        let g = Grid::new([5, 5, 5]).unwrap();
        assert_eq!(center_of_mass(&delta(&g, [2, 3, 4]), &g).unwrap(), Vec3::new(2.0, 3.0, 4.0));
        let g3 = Grid::cube(3).unwrap();
        let c = center_of_mass(&uniform(&g3), &g3).unwrap();
        assert!((c - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
        let mut f = vec![0.0; g3.len()];
        f[g3.index(0, 0, 0)] = 0.5;
        f[g3.index(2, 0, 0)] = 0.5;
        assert_eq!(center_of_mass(&f, &g3).unwrap(), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn com_rejects_unnormalised() {
        let g = Grid::cube(2).unwrap();
        assert!(matches!(
            center_of_mass(&[0.5; 8], &g),
            Err(Error::NotNormalised { .. })
        ));
    }

    #[test]
    fn covariance_examples() {
        let g = Grid::new([5, 5, 5]).unwrap();
        let f = delta(&g, [1, 2, 3]);
        let mu = center_of_mass(&f, &g).unwrap();
        assert_eq!(covariance(&f, &g, &mu).unwrap(), Matrix3::zeros());

        let g3 = Grid::cube(3).unwrap();
        let u = uniform(&g3);
        let mu = center_of_mass(&u, &g3).unwrap();
        let s = covariance(&u, &g3, &mu).unwrap();
        assert!((s - Matrix3::identity() * (2.0 / 3.0)).amax() < 1e-12);

        let g1 = Grid::new([3, 1, 1]).unwrap();
        let u = uniform(&g1);
        let mu = center_of_mass(&u, &g1).unwrap();
        let s = covariance(&u, &g1, &mu).unwrap();
        assert!((s - Matrix3::from_diagonal(&Vec3::new(2.0 / 3.0, 0.0, 0.0))).amax() < 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        let g = Grid::cube(11).unwrap();
        let mu = Vec3::new(5.0, 5.0, 5.0);
        let id = Matrix3::identity();
        let q = discretized_gaussian(&mu, &id, &g, KlMode::Normalised);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let centre = q[g.index(5, 5, 5)];
        for nb in [[4, 5, 5], [6, 5, 5], [5, 4, 5], [5, 6, 5], [5, 5, 4], [5, 5, 6]] {
            assert!(centre > q[g.index(nb[0], nb[1], nb[2])]);
        }
        let d = discretized_gaussian(&mu, &id, &g, KlMode::Density);
        let expect = (2.0 * PI).powf(-1.5) * (1.0f64 + 1e-4).powf(-1.5);
        assert!((d[g.index(5, 5, 5)] - expect).abs() < 1e-12);
        assert!((expect - 0.06349).abs() < 1e-5);
    }

    #[test]
    fn kl_zero_on_own_gaussian() {
        let g = Grid::cube(13).unwrap();
        let sigma = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.8);
        let q = discretized_gaussian(&Vec3::new(6.2, 5.7, 6.4), &sigma, &g, KlMode::Normalised);
        let fs = FeatureStack::new(g, 1, q).unwrap();
        let kps = keypoints_from_features(&fs).unwrap();
        let inner = kl_per_channel(&fs, &kps, KlMode::Normalised).unwrap()[0];
        assert!(inner.abs() < 1e-6, "inner KL {inner}");
        assert!(inner >= -1e-9);
    }

    #[test]
    fn kl_positive_for_uniform() {
        let g = Grid::cube(5).unwrap();
        let fs = FeatureStack::new(g, 1, uniform(&g)).unwrap();
        let kps = keypoints_from_features(&fs).unwrap();
        assert!(loss_kl(&fs, &kps, KlMode::Normalised).unwrap() > 0.0);
    }

    #[test]
    fn var_examples() {
        let z = Keypoint {
            mu: Vec3::zeros(),
            sigma: Matrix3::zeros(),
        };
        assert_eq!(loss_var(&[z, z], VarNorm::Rms), 0.0);
        let kp = Keypoint {
            mu: Vec3::zeros(),
            sigma: Matrix3::identity() * 4.0,
        };
        assert!((loss_var(&[kp], VarNorm::Rms) - 4.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((loss_var(&[kp], VarNorm::Frobenius) - 4.0 * 3f64.sqrt()).abs() < 1e-12);
        let scaled = Keypoint {
            sigma: kp.sigma * 2.5,
            ..kp
        };
        assert!((loss_var(&[scaled], VarNorm::Rms) - 2.5 * loss_var(&[kp], VarNorm::Rms)).abs() < 1e-12);
    }

    #[test]
    fn rep_examples() {
        let two = |d: f64| PointCloud::new(vec![Vec3::zeros(), Vec3::new(d, 0.0, 0.0)]);
        assert!((loss_rep(&two(0.0), 0.1) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_rep(&two(0.1), 0.1) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        let side = 1.0;
        let tri = PointCloud::new(vec![
            Vec3::zeros(),
            Vec3::new(side, 0.0, 0.0),
            Vec3::new(side / 2.0, side * 3f64.sqrt() / 2.0, 0.0),
        ]);
        let pair = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss_rep(&tri, 0.1) - pair).abs() < 1e-15);
        assert!((pair - 4.54e-5).abs() < 1e-7);
        assert_eq!(loss_rep(&PointCloud::new(vec![Vec3::zeros()]), 0.1), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let r = total_loss(0.5, 4.0, 5.0, 0.7, &w).unwrap();
        assert!((r.total - 4.5507).abs() < 1e-12);
        let zero = LossWeights {
            lambda_kl: 0.0,
            lambda_var: 0.0,
            lambda_rep: 0.0,
            tau: 0.1,
        };
        assert_eq!(total_loss(0.3, 9.0, 9.0, 9.0, &zero).unwrap().total, 0.3);
        let d = total_loss(1.0, 8.0, 10.0, 1.4, &w).unwrap();
        assert!((d.total - 2.0 * r.total).abs() < 1e-12);
        match total_loss(0.1, f64::NAN, 0.0, 0.0, &w) {
            Err(Error::NonFiniteTerm { what }) => assert!(what.contains("kl")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_serialises_with_short_names() {
        let r = total_loss(0.5, 4.0, 5.0, 0.7, &LossWeights::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        for key in ["sim", "kl", "var", "rep", "total"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
