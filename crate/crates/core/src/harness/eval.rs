use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::align::{self, AffineTransform, FitOptions, RigidTransform};
use crate::error::{Error, Result};
use crate::field::{FeatureStack, PointCloud};
use crate::keypoints::{self, Keypoint, KlMode};
use crate::model::{self, FeatureExtractor};
use crate::synth::{SynthPair, TransformKind};
use crate::warp::{self, SimilarityKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub kind: TransformKind,
    pub kl_mode: KlMode,
    pub fit: FitOptions,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.transform.kind,
            kl_mode: cfg.kl_mode,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub arm: String,
    pub rotation_error_deg: Summary,
    pub translation_error_vox: Summary,
    /// Max-entry error of the estimated 4×4 matrix.
    pub matrix_error: Summary,
    pub feature_kl: Summary,
    pub spectral_norm: Summary,
    pub mean_point_distance_vox: Summary,
    /// MSE between fixed and the moving volume resampled by the estimate.
    pub realigned_mse: Summary,
    /// Pairs whose fit was degenerate and fell back to the identity estimate.
    pub fallbacks: usize,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [
            self.rotation_error_deg,
            self.translation_error_vox,
            self.matrix_error,
            self.feature_kl,
            self.spectral_norm,
            self.mean_point_distance_vox,
            self.realigned_mse,
        ]
        .iter()
        .all(|s| s.mean.is_finite() && s.sd.is_finite())
    }
}

/// Keypoints predicted for one pair, plus the fixed-volume features the
/// regulariser metrics are computed on.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub fixed: Vec<Keypoint>,
    pub moving: Vec<Keypoint>,
    pub fixed_features: FeatureStack,
}

pub fn predict(model: &FeatureExtractor, pair: &SynthPair) -> Result<Prediction> {
    let (fixed_features, fixed) = model::keypoints(model, &pair.fixed)?;
    let (_, moving) = model::keypoints(model, &pair.moving)?;
    Ok(Prediction {
        fixed,
        moving,
        fixed_features,
    })
}

/// Stand-in predictor that returns the true blob centres, with features set
/// to the matching discretised Gaussians.
pub fn oracle_prediction(pair: &SynthPair, blob_covariances: &[nalgebra::Matrix3<f64>]) -> Result<Prediction> {
    let grid = *pair.fixed.grid();
    let n = pair.fixed_centres.len();
    if n != blob_covariances.len() || n != pair.moving_centres.len() {
        return Err(Error::shape("oracle_prediction", "centre and covariance counts differ"));
    }
    let fixed: Vec<Keypoint> = pair
        .fixed_centres
        .points
        .iter()
        .zip(blob_covariances)
        .map(|(mu, sigma)| Keypoint { mu: *mu, sigma: *sigma })
        .collect();
    let moving = pair
        .moving_centres
        .points
        .iter()
        .zip(&fixed)
        .map(|(mu, k)| Keypoint { mu: *mu, sigma: k.sigma })
        .collect();
    let data = fixed
        .iter()
        .flat_map(|k| keypoints::discretized_gaussian(&k.mu, &k.sigma, &grid, KlMode::Normalised))
        .collect();
    Ok(Prediction {
        fixed,
        moving,
        fixed_features: FeatureStack::new(grid, n, data)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub rotation_error_deg: f64,
    pub translation_error_vox: f64,
    pub matrix_error: f64,
    pub feature_kl: f64,
    pub spectral_norm: f64,
    pub mean_point_distance_vox: f64,
    pub realigned_mse: f64,
    pub fell_back: bool,
}

/// Mean of `‖μ_k − μ_k'‖` over all pairs `k' < k`.
pub fn mean_point_distance(cloud: &PointCloud) -> f64 {
    let p = &cloud.points;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..p.len() {
        for j in 0..i {
            sum += (p[i] - p[j]).norm();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn estimate(pred: &Prediction, opts: &EvalOptions) -> Result<(AffineTransform, bool)> {
    let m = keypoints::point_cloud(&pred.moving);
    let f = keypoints::point_cloud(&pred.fixed);
    let fit = match opts.kind {
        TransformKind::Rigid => align::fit_rigid_with(&m, &f, &opts.fit).map(|r| r.to_affine()),
        TransformKind::Affine => align::fit_affine_with(&m, &f, &opts.fit),
    };
    match fit {
        Ok(t) => Ok((t, false)),
        Err(Error::Degenerate(_) | Error::Coplanar { .. }) => Ok((AffineTransform::identity(), true)),
        Err(e) => Err(e),
    }
}

pub fn pair_metrics(pair: &SynthPair, pred: &Prediction, opts: &EvalOptions) -> Result<PairMetrics> {
    let (est, fell_back) = estimate(pred, opts)?;
    let est_r = RigidTransform::from_affine(&est);
    let gt_r = RigidTransform::from_affine(&pair.gt);
    let (rotation_error_deg, translation_error_vox) = match opts.kind {
        TransformKind::Rigid => (align::rotation_error(&est_r, &gt_r), align::translation_error(&est_r, &gt_r)),
        TransformKind::Affine => (0.0, (est.offset() - pair.gt.offset()).norm()),
    };
    let moved = warp::resample(&pair.moving, &est)?;
    let spectral = pred.fixed.iter().map(|k| keypoints::spectral_norm(&k.sigma)).sum::<f64>() / pred.fixed.len() as f64;
    Ok(PairMetrics {
        rotation_error_deg,
        translation_error_vox,
        matrix_error: est.max_abs_diff(&pair.gt),
        feature_kl: keypoints::loss_kl(&pred.fixed_features, &pred.fixed, opts.kl_mode)?,
        spectral_norm: spectral,
        mean_point_distance_vox: mean_point_distance(&keypoints::point_cloud(&pred.fixed)),
        realigned_mse: warp::similarity(&pair.fixed, &moved, SimilarityKind::Mse)?,
        fell_back,
    })
}

pub fn summarise(arm: &str, per_pair: &[PairMetrics]) -> MetricsRow {
    let col = |f: fn(&PairMetrics) -> f64| Summary::of(&per_pair.iter().map(f).collect::<Vec<_>>());
    MetricsRow {
        arm: arm.to_string(),
        rotation_error_deg: col(|m| m.rotation_error_deg),
        translation_error_vox: col(|m| m.translation_error_vox),
        matrix_error: col(|m| m.matrix_error),
        feature_kl: col(|m| m.feature_kl),
        spectral_norm: col(|m| m.spectral_norm),
        mean_point_distance_vox: col(|m| m.mean_point_distance_vox),
        realigned_mse: col(|m| m.realigned_mse),
        fallbacks: per_pair.iter().filter(|m| m.fell_back).count(),
    }
}

/// Metrics for any keypoint predictor over `pairs`.
pub fn evaluate_with(
    pairs: &[SynthPair],
    opts: &EvalOptions,
    arm: &str,
    mut predictor: impl FnMut(usize, &SynthPair) -> Result<Prediction>,
) -> Result<MetricsRow> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let per_pair = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| pair_metrics(p, &predictor(i, p)?, opts))
        .collect::<Result<Vec<_>>>()?;
    let fallbacks = per_pair.iter().filter(|m| m.fell_back).count();
    if fallbacks > 0 {
        log::warn!("{arm}: {fallbacks} of {} pairs had a degenerate fit; identity used", pairs.len());
    }
    Ok(summarise(arm, &per_pair))
}

pub fn evaluate(model: &FeatureExtractor, pairs: &[SynthPair], opts: &EvalOptions, arm: &str) -> Result<MetricsRow> {
    evaluate_with(pairs, opts, arm, |_, p| predict(model, p))
}

pub const RIGID_HEADER: &str =
    "arm,rot_err_mean,rot_err_sd,trans_err_mean,trans_err_sd,kl_mean,kl_sd,specnorm_mean,specnorm_sd,pointdist_mean,pointdist_sd";
pub const AFFINE_HEADER: &str =
    "arm,matrix_err_mean,matrix_err_sd,trans_err_mean,trans_err_sd,kl_mean,kl_sd,specnorm_mean,specnorm_sd,pointdist_mean,pointdist_sd";

/// CSV table; the affine task reports matrix error in place of rotation error.
pub fn metrics_csv(rows: &[MetricsRow], kind: TransformKind) -> String {
    let mut out = String::new();
    out.push_str(match kind {
        TransformKind::Rigid => RIGID_HEADER,
        TransformKind::Affine => AFFINE_HEADER,
    });
    out.push('\n');
    for r in rows {
        let first = match kind {
            TransformKind::Rigid => r.rotation_error_deg,
            TransformKind::Affine => r.matrix_error,
        };
        let cols = [
            first,
            r.translation_error_vox,
            r.feature_kl,
            r.spectral_norm,
            r.mean_point_distance_vox,
        ];
        out.push_str(&r.arm);
        for s in cols {
            out.push_str(&format!(",{},{}", s.mean, s.sd));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Vec3;
    use crate::model::ModelConfig;
    use crate::synth::{self, SceneSpec, TransformSpec};

    fn pair(seed: u64, noise: f64) -> (SynthPair, Vec<nalgebra::Matrix3<f64>>) {
        let scene = SceneSpec {
            seed,
            noise_sigma: noise,
            ..Default::default()
        };
        let p = synth::generate_pair(&scene, &TransformSpec { seed, ..Default::default() }).unwrap();
        let covs = synth::render_scene(&scene).unwrap().blobs.iter().map(|b| b.covariance).collect();
        (p, covs)
    }

    fn rigid() -> EvalOptions {
        EvalOptions {
            kind: TransformKind::Rigid,
            kl_mode: KlMode::Normalised,
            fit: FitOptions::default(),
        }
    }

    #[test]
    fn oracle_recovers_rotation() {
        let pairs: Vec<_> = (0..3).map(|s| pair(s, 0.01)).collect();
        let set: Vec<SynthPair> = pairs.iter().map(|p| p.0.clone()).collect();
        let row = evaluate_with(&set, &rigid(), "oracle", |i, p| oracle_prediction(p, &pairs[i].1)).unwrap();
        assert!(row.rotation_error_deg.mean < 1e-6, "{}", row.rotation_error_deg.mean);
        assert!(row.translation_error_vox.mean < 1e-8);
        assert!(row.feature_kl.mean.abs() < 1e-6);
        assert_eq!(row.fallbacks, 0);
    }

    #[test]
    fn uniform_features_give_grid_spread() {
        let (p, _) = pair(1, 0.01);
        let zero = FeatureExtractor::zeros(ModelConfig::default()).unwrap();
        let row = evaluate(&zero, std::slice::from_ref(&p), &rigid(), "zero").unwrap();
        assert!((row.spectral_norm.mean - (24.0f64 * 24.0 - 1.0) / 12.0).abs() < 1e-9);
        assert!(row.mean_point_distance_vox.mean.abs() < 1e-12);
        // coincident keypoints: degenerate fit, identity fallback
        assert_eq!(row.fallbacks, 1);
        assert!(row.is_finite());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.sd, 1.0);
        assert_eq!(Summary::of(&[5.0]).sd, 0.0);
    }

    #[test]
    fn point_distance_of_triangle() {
        let c = PointCloud::new(vec![Vec3::zeros(), Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 4.0, 0.0)]);
        assert!((mean_point_distance(&c) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let row = summarise("baseline", &[]);
        let csv = metrics_csv(&[row], TransformKind::Rigid);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), RIGID_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 11);
    }

    #[test]
    fn evaluation_is_pure() {
        let (p, _) = pair(2, 0.01);
        let m = model::init_parameters(&ModelConfig::default()).unwrap();
        let a = evaluate(&m, std::slice::from_ref(&p), &rigid(), "a").unwrap();
        let b = evaluate(&m, std::slice::from_ref(&p), &rigid(), "a").unwrap();
        assert_eq!(a, b);
    }
}
