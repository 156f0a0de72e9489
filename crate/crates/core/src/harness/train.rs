use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data;
use super::eval::{self, EvalOptions, MetricsRow};
use super::optim::Adam;
use crate::align::FitOptions;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::keypoints::{self, KlMode, LossReport, LossWeights, RegulariserOptions, VarNorm};
use crate::model::{self, FeatureExtractor};
use crate::synth::{SynthPair, TransformKind};
use crate::warp::{self, SimilarityKind};

/// Everything the per-pair objective needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub kl_mode: KlMode,
    pub var_norm: VarNorm,
    pub similarity: SimilarityKind,
    pub kind: TransformKind,
    pub detach_gaussian_params: bool,
    pub fit: FitOptions,
}

impl ObjectiveOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            weights: cfg.weights,
            kl_mode: cfg.kl_mode,
            var_norm: cfg.var_norm,
            similarity: cfg.similarity,
            kind: cfg.transform.kind,
            detach_gaussian_params: cfg.detach_gaussian_params,
            fit: FitOptions::default(),
        }
    }
}

/// Nodes of the objective for one pair.
#[derive(Debug, Clone, Copy)]
pub struct PairTerms {
    pub sim: NodeId,
    pub kl: NodeId,
    pub var: NodeId,
    pub rep: NodeId,
    /// Weighted sum; only terms with non-zero weight are connected.
    pub total: NodeId,
    pub transform: NodeId,
}

/// Records forward → normalise → moments → fit → resample → losses for one
/// pair. Regularisers are averaged over the fixed and moving stacks.
pub fn pair_objective(
    tape: &mut Tape,
    model: &FeatureExtractor,
    params: &[NodeId],
    pair: &SynthPair,
    opts: &ObjectiveOptions,
) -> Result<PairTerms> {
    let grid = *pair.fixed.grid();
    let fixed = tape.constant(warp::volume_tensor(&pair.fixed));
    let moving = tape.constant(warp::volume_tensor(&pair.moving));
    let logits_f = model.forward_on_tape(tape, params, fixed)?;
    let logits_m = model.forward_on_tape(tape, params, moving)?;
    let kp_f = keypoints::keypoint_nodes(tape, logits_f, &grid)?;
    let kp_m = keypoints::keypoint_nodes(tape, logits_m, &grid)?;

    let transform = match opts.kind {
        TransformKind::Rigid => tape.fit_rigid(kp_m.mu, kp_f.mu, &opts.fit)?,
        TransformKind::Affine => tape.fit_affine(kp_m.mu, kp_f.mu, &opts.fit)?,
    };
    let moved = tape.warp(moving, transform)?;
    let sim = tape.similarity(fixed, moved, opts.similarity)?;

    let reg = RegulariserOptions {
        kl_mode: opts.kl_mode,
        var_norm: opts.var_norm,
        tau: opts.weights.tau,
        detach_gaussian_params: opts.detach_gaussian_params,
    };
    let kl_f = keypoints::kl_node(tape, &kp_f, &grid, &reg)?;
    let kl_m = keypoints::kl_node(tape, &kp_m, &grid, &reg)?;
    let kl = tape.combine(&[(kl_f, 0.5), (kl_m, 0.5)])?;
    let var_f = keypoints::var_node(tape, kp_f.sigma, opts.var_norm)?;
    let var_m = keypoints::var_node(tape, kp_m.sigma, opts.var_norm)?;
    let var = tape.combine(&[(var_f, 0.5), (var_m, 0.5)])?;
    let rep_f = keypoints::rep_node(tape, kp_f.mu, opts.weights.tau)?;
    let rep_m = keypoints::rep_node(tape, kp_m.mu, opts.weights.tau)?;
    let rep = tape.combine(&[(rep_f, 0.5), (rep_m, 0.5)])?;

    let w = &opts.weights;
    let mut terms = vec![(sim, 1.0)];
    for (node, weight) in [(kl, w.lambda_kl), (var, w.lambda_var), (rep, w.lambda_rep)] {
        if weight != 0.0 {
            terms.push((node, weight));
        }
    }
    let total = tape.combine(&terms)?;
    Ok(PairTerms {
        sim,
        kl,
        var,
        rep,
        total,
        transform,
    })
}

fn report(tape: &Tape, t: &PairTerms, w: &LossWeights) -> Result<LossReport> {
    keypoints::total_loss(tape.scalar(t.sim), tape.scalar(t.kl), tape.scalar(t.var), tape.scalar(t.rep), w)
}

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::Degenerate(_) | Error::Coplanar { .. })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FeatureExtractor,
    pub losses: Vec<StepLog>,
    pub skipped_steps: Vec<usize>,
    /// `(step, metrics)` for every periodic evaluation.
    pub evaluations: Vec<(usize, MetricsRow)>,
}

enum StepResult {
    Done(StepLog, Vec<Tensor>),
    Skipped(String),
}

fn step_gradients(model: &FeatureExtractor, cfg: &TrainConfig, opts: &ObjectiveOptions, step: usize) -> Result<StepResult> {
    let mut tape = Tape::new();
    let params = model.parameter_nodes(&mut tape);
    let mut totals = Vec::with_capacity(cfg.batch);
    let mut sums = [0.0; 5];
    for b in 0..cfg.batch {
        let pair = data::training_pair(cfg, (step * cfg.batch + b) as u64)?;
        let terms = match pair_objective(&mut tape, model, &params, &pair, opts) {
            Ok(t) => t,
            Err(e) if is_degenerate(&e) => return Ok(StepResult::Skipped(e.to_string())),
            Err(e) => return Err(e),
        };
        let r = report(&tape, &terms, &cfg.weights).map_err(|e| Error::TrainingAborted {
            step,
            reason: e.to_string(),
        })?;
        for (s, v) in sums.iter_mut().zip([r.l_sim, r.l_kl, r.l_var, r.l_rep, r.total]) {
            *s += v;
        }
        totals.push((terms.total, 1.0 / cfg.batch as f64));
    }
    let n = cfg.batch as f64;
    let loss = LossReport {
        l_sim: sums[0] / n,
        l_kl: sums[1] / n,
        l_var: sums[2] / n,
        l_rep: sums[3] / n,
        total: sums[4] / n,
    };
    let root = tape.combine(&totals)?;
    let grads = tape.backward(root).map_err(|e| match e {
        Error::NanGradient { .. } => Error::TrainingAborted {
            step,
            reason: e.to_string(),
        },
        other => other,
    })?;
    let grads: Vec<Tensor> = params.iter().map(|&p| grads.get_or_zeros(&tape, p)).collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::TrainingAborted {
            step,
            reason: "non-finite parameter gradient".into(),
        });
    }
    Ok(StepResult::Done(StepLog { step, loss }, grads))
}

/// Trains from the seeded initialisation. With `out_dir`, writes
/// `config.json`, `losses.jsonl` and the final checkpoint; on abort the
/// last good parameters are checkpointed before the error is returned.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model::init_parameters(&cfg.model)?;
    let opts = ObjectiveOptions::from_config(cfg);
    let mut adam = Adam::new(cfg.optimizer);

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            cfg.save(dir.join("config.json"))?;
            let path = dir.join("losses.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let eval_pairs = if cfg.eval_every > 0 { data::eval_set(cfg)? } else { Vec::new() };
    let eval_opts = EvalOptions::from_config(cfg);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped = Vec::new();
    let mut evaluations = Vec::new();
    let max_skipped = cfg.max_skip_fraction * cfg.steps as f64;
    for step in 0..cfg.steps {
        let result = match step_gradients(&model, cfg, &opts, step) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    model.save(dir)?;
                }
                return Err(e);
            }
        };
        match result {
            StepResult::Done(entry, grads) => {
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("losses.jsonl", e))?;
                }
                adam.step(model.parameters_mut(), &grads);
                losses.push(entry);
            }
            StepResult::Skipped(reason) => {
                log::warn!("step {step}: skipped ({reason})");
                skipped.push(step);
                if skipped.len() as f64 > max_skipped {
                    if let Some(dir) = out_dir {
                        model.save(dir)?;
                    }
                    return Err(Error::TrainingAborted {
                        step,
                        reason: format!("{} degenerate steps exceed the allowed fraction {}", skipped.len(), cfg.max_skip_fraction),
                    });
                }
            }
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let row = eval::evaluate(&model, &eval_pairs, &eval_opts, "train")?;
            log::info!("step {}: rot err {:.3}°", step + 1, row.rotation_error_deg.mean);
            evaluations.push((step + 1, row));
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io("losses.jsonl", e))?;
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        skipped_steps: skipped,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::SceneSpec;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 1,
            model: ModelConfig {
                hidden_channels: 2,
                depth: 1,
                k: 4,
                seed: 0,
            },
            scene: SceneSpec {
                dims: [12, 12, 12],
                n_blobs: 4,
                margin: 2.0,
                eig_max: 3.0,
                ..Default::default()
            },
            eval_pairs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keeps_initialisation() {
        let cfg = TrainConfig { steps: 0, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, Some(dir.path())).unwrap();
        assert_eq!(out.model, model::init_parameters(&cfg.model).unwrap());
        assert_eq!(FeatureExtractor::load(dir.path()).unwrap(), out.model);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn zero_weights_reduce_to_similarity() {
        let mut cfg = tiny_config();
        cfg.weights.lambda_kl = 0.0;
        cfg.weights.lambda_var = 0.0;
        cfg.weights.lambda_rep = 0.0;
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.losses.len() + out.skipped_steps.len(), 3);
        for l in &out.losses {
            assert_eq!(l.loss.total, l.loss.l_sim);
        }
    }

    #[test]
    fn writes_loss_log_and_is_deterministic() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train(&cfg, Some(a.path())).unwrap();
        let rb = train(&cfg, Some(b.path())).unwrap();
        assert_eq!(ra.model, rb.model);
        let la = fs::read_to_string(a.path().join("losses.jsonl")).unwrap();
        assert_eq!(la, fs::read_to_string(b.path().join("losses.jsonl")).unwrap());
        let first: serde_json::Value = serde_json::from_str(la.lines().next().unwrap()).unwrap();
        for key in ["step", "sim", "kl", "var", "rep", "total"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(a.path().join("config.json").exists());
    }

    #[test]
    fn persistent_degeneracy_fails_the_run() {
        // an empty scene gives spatially constant logits, so every keypoint
        // sits at the grid centre and the fit is degenerate
        let mut cfg = tiny_config();
        cfg.steps = 10;
        cfg.scene.intensity_min = 0.0;
        cfg.scene.intensity_max = 0.0;
        cfg.scene.noise_sigma = 0.0;
        let opts = ObjectiveOptions::from_config(&cfg);
        let m = model::init_parameters(&cfg.model).unwrap();
        assert!(matches!(step_gradients(&m, &cfg, &opts, 0).unwrap(), StepResult::Skipped(_)));
        let err = train(&cfg, None).unwrap_err();
        assert!(matches!(err, Error::TrainingAborted { step: 0, .. }), "{err}");
    }
}
