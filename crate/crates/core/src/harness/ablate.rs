use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::data;
use super::eval::{self, EvalOptions, MetricsRow};
use super::train;
use crate::error::{Error, Result};
use crate::keypoints::LossWeights;

/// The five weight patterns: similarity only, each regulariser pair added in
/// turn, and the full objective.
pub fn arms(w: &LossWeights) -> [(&'static str, LossWeights); 5] {
    let with = |kl: bool, var: bool, rep: bool| LossWeights {
        lambda_kl: if kl { w.lambda_kl } else { 0.0 },
        lambda_var: if var { w.lambda_var } else { 0.0 },
        lambda_rep: if rep { w.lambda_rep } else { 0.0 },
        tau: w.tau,
    };
    [
        ("baseline", with(false, false, false)),
        ("kl", with(true, false, false)),
        ("var", with(false, true, false)),
        ("kl_var", with(true, true, false)),
        ("full", with(true, true, true)),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<MetricsRow>,
    pub eval_hash: String,
    /// Metrics of the untrained model on the same evaluation set.
    pub initial: MetricsRow,
}

#[derive(Serialize)]
struct EvalManifest<'a> {
    eval_seed: u64,
    eval_pairs: usize,
    sha256: &'a str,
}

/// Trains every arm from the same initialisation and data seeds, evaluates
/// on one shared held-out set, and writes `metrics.csv` (plus per-arm run
/// directories) under `out_dir`.
pub fn ablate(base: &TrainConfig, out_dir: Option<&Path>) -> Result<AblationResult> {
    base.validate()?;
    let pairs = data::eval_set(base)?;
    let eval_hash = data::eval_set_hash(&pairs);
    let opts = EvalOptions::from_config(base);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = EvalManifest {
            eval_seed: base.eval_seed,
            eval_pairs: base.eval_pairs,
            sha256: &eval_hash,
        };
        let path = dir.join("eval_manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    }
    let init = crate::model::init_parameters(&base.model)?;
    let initial = eval::evaluate(&init, &pairs, &opts, "init")?;

    let mut rows = Vec::with_capacity(5);
    for (name, weights) in arms(&base.weights) {
        let cfg = TrainConfig { weights, ..base.clone() };
        let arm_dir = out_dir.map(|d| d.join(name));
        let started = std::time::Instant::now();
        let outcome = train::train(&cfg, arm_dir.as_deref())?;
        let row = eval::evaluate(&outcome.model, &pairs, &opts, name)?;
        log::info!(
            "arm {name}: {} steps in {:.1}s, rot err {:.3}°, spectral norm {:.3}, kl {:.4}, point dist {:.3}",
            cfg.steps,
            started.elapsed().as_secs_f64(),
            row.rotation_error_deg.mean,
            row.spectral_norm.mean,
            row.feature_kl.mean,
            row.mean_point_distance_vox.mean
        );
        if let Some(dir) = &arm_dir {
            let path = dir.join("metrics.json");
            fs::write(&path, serde_json::to_string_pretty(&row)?).map_err(|e| Error::io(&path, e))?;
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.csv");
        fs::write(&path, eval::metrics_csv(&rows, base.transform.kind)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(AblationResult {
        rows,
        eval_hash,
        initial,
    })
}
