//! Finite-difference verification of every graph op and of the full
//! training objective on small seeded instances.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{pair_objective, ObjectiveOptions};
use crate::align::{FitOptions, RigidTransform};
use crate::autodiff::{grad_check_multi, NodeId, Tape, Tensor};
use crate::error::Result;
use crate::field::{Grid, Vec3};
use crate::keypoints::{KlMode, LossWeights, VarNorm};
use crate::model::{self, ModelConfig};
use crate::synth::{self, SceneSpec, TransformKind, TransformSpec};
use crate::warp::SimilarityKind;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const COMPOSED_LOSS: &str = "composed_loss";

type CaseFn = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub op: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values of magnitude in `[0.2, 1]` with random sign, away from kinks at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect(),
    )
}

fn spd(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(9 * k);
    for _ in 0..k {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let m = a * a.transpose() + Matrix3::identity();
        data.extend(m.transpose().iter().copied());
    }
    Tensor::new([k, 3, 3], data)
}

/// Contracts any output with fixed random weights so the root is scalar.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.is_empty() {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn smooth_volume(dims: [usize; 3]) -> Tensor {
    let [nx, ny, nz] = dims;
    let c = Vec3::new(nx as f64 - 1.0, ny as f64 - 1.0, nz as f64 - 1.0) / 2.0;
    let grid = Grid::new(dims).expect("non-zero dims");
    let data = grid
        .coordinates()
        .iter()
        .map(|x| {
            let d = x - c;
            (-d.norm_squared() / 6.0).exp() + 0.1 * (0.7 * x.x + 0.3 * x.y).sin()
        })
        .collect();
    Tensor::new([nz, ny, nx], data)
}

/// One case per registered op, in a fixed order.
pub fn op_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let grid = Grid::cube(4).expect("valid grid");
    let k = 3;
    let mut cases = Vec::new();

    let (a, b) = (uniform(&mut rng, &[5], -1.0, 1.0), uniform(&mut rng, &[5], -1.0, 1.0));
    cases.push(case("add", vec![a.clone(), b.clone()], |t, x| {
        let y = t.add(x[0], x[1])?;
        weighted_sum(t, y, 1)
    }));
    cases.push(case("sub", vec![a.clone(), b.clone()], |t, x| {
        let y = t.sub(x[0], x[1])?;
        weighted_sum(t, y, 2)
    }));
    cases.push(case("mul", vec![a.clone(), b.clone()], |t, x| {
        let y = t.mul(x[0], x[1])?;
        weighted_sum(t, y, 3)
    }));
    cases.push(case("scale", vec![a.clone()], |t, x| {
        let y = t.scale(x[0], 1.7);
        weighted_sum(t, y, 4)
    }));
    cases.push(case("combine", vec![a.clone(), b.clone()], |t, x| {
        let y = t.combine(&[(x[0], 0.3), (x[1], -1.2)])?;
        weighted_sum(t, y, 5)
    }));
    cases.push(case("exp", vec![a.clone()], |t, x| {
        let y = t.exp(x[0]);
        weighted_sum(t, y, 6)
    }));
    cases.push(case("log", vec![uniform(&mut rng, &[5], 0.5, 2.0)], |t, x| {
        let y = t.ln(x[0]);
        weighted_sum(t, y, 7)
    }));
    cases.push(case("sqrt", vec![uniform(&mut rng, &[5], 0.5, 2.0)], |t, x| {
        let y = t.sqrt(x[0]);
        weighted_sum(t, y, 8)
    }));
    cases.push(case("sigmoid", vec![uniform(&mut rng, &[5], -3.0, 3.0)], |t, x| {
        let y = t.sigmoid(x[0]);
        weighted_sum(t, y, 9)
    }));
    cases.push(case("leaky_relu", vec![off_zero(&mut rng, &[8])], |t, x| {
        let y = t.leaky_relu(x[0], 0.01);
        weighted_sum(t, y, 10)
    }));
    cases.push(case("sum", vec![a.clone()], |t, x| {
        let y = t.sum(x[0]);
        let z = t.mul(y, y)?;
        Ok(t.sum(z))
    }));
    cases.push(case("mean", vec![a], |t, x| {
        let y = t.mean(x[0]);
        let z = t.exp(y);
        Ok(t.sum(z))
    }));
    cases.push(case(
        "conv3d",
        vec![
            uniform(&mut rng, &[2, 4, 3, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
        |t, x| {
            let y = t.conv3d(x[0], x[1], x[2])?;
            weighted_sum(t, y, 11)
        },
    ));
    let logits = uniform(&mut rng, &[k, 4, 4, 4], -1.0, 1.0);
    cases.push(case("spatial_softmax", vec![logits.clone()], |t, x| {
        let y = t.spatial_softmax(x[0])?;
        weighted_sum(t, y, 12)
    }));
    cases.push(case("center_of_mass", vec![logits.clone()], move |t, x| {
        let f = t.spatial_softmax(x[0])?;
        let y = t.center_of_mass(f, &grid)?;
        weighted_sum(t, y, 13)
    }));
    let mu = uniform(&mut rng, &[k, 3], 0.5, 2.5);
    cases.push(case("covariance", vec![logits.clone(), mu.clone()], move |t, x| {
        let f = t.spatial_softmax(x[0])?;
        let y = t.covariance(f, x[1], &grid)?;
        weighted_sum(t, y, 14)
    }));
    let precision = spd(&mut rng, k);
    let logdet = uniform(&mut rng, &[k], -0.5, 0.5);
    cases.push(case(
        "gaussian_log_density",
        vec![mu.clone(), precision.clone(), logdet],
        move |t, x| {
            let y = t.gaussian_log_density(x[0], x[1], x[2], &grid, true)?;
            weighted_sum(t, y, 15)
        },
    ));
    cases.push(case(
        "kl_divergence",
        vec![logits, uniform(&mut rng, &[k, 4, 4, 4], -6.0, -3.0)],
        |t, x| {
            let p = t.spatial_softmax(x[0])?;
            let y = t.kl_divergence(p, x[1])?;
            weighted_sum(t, y, 16)
        },
    ));
    cases.push(case("matrix_norms", vec![uniform(&mut rng, &[k, 3, 3], -1.0, 1.0)], |t, x| {
        let y = t.matrix_norms(x[0], 1.0 / 9.0)?;
        weighted_sum(t, y, 17)
    }));
    cases.push(case("pairwise_distances", vec![uniform(&mut rng, &[4, 3], 0.0, 3.0)], |t, x| {
        let y = t.pairwise_distances(x[0])?;
        weighted_sum(t, y, 18)
    }));
    cases.push(case("inverse3", vec![spd(&mut rng, k)], |t, x| {
        let y = t.inverse3(x[0])?;
        weighted_sum(t, y, 19)
    }));
    cases.push(case("logdet3", vec![spd(&mut rng, k)], |t, x| {
        let y = t.logdet3(x[0])?;
        weighted_sum(t, y, 20)
    }));

    let moving = uniform(&mut rng, &[6, 3], 0.0, 5.0);
    let r = RigidTransform::from_axis_angle(&Vec3::new(0.3, -1.0, 0.5), 0.4, Vec3::new(0.5, -0.2, 1.0));
    let fixed_pts: Vec<f64> = moving
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let q = r.apply(&Vec3::new(p[0], p[1], p[2]));
            [q.x + rng.random_range(-0.1..0.1), q.y + rng.random_range(-0.1..0.1), q.z + rng.random_range(-0.1..0.1)]
        })
        .collect();
    let fixed = Tensor::new([6, 3], fixed_pts);
    cases.push(case("fit_rigid", vec![moving.clone(), fixed.clone()], |t, x| {
        let y = t.fit_rigid(x[0], x[1], &FitOptions::default())?;
        weighted_sum(t, y, 21)
    }));
    cases.push(case("fit_affine", vec![moving, fixed], |t, x| {
        let y = t.fit_affine(x[0], x[1], &FitOptions::default())?;
        weighted_sum(t, y, 22)
    }));

    // the bottom row of a homogeneous matrix is fixed, so only the top
    // twelve entries of the leaf reach the op
    let t0 = RigidTransform::from_axis_angle(&Vec3::new(1.0, 0.4, -0.3), 0.12, Vec3::new(0.31, 0.17, -0.23)).to_affine();
    cases.push(case("warp", vec![smooth_volume([6, 5, 4]), Tensor::new([4, 4], t0.to_flat())], |t, x| {
        let mut mask = vec![1.0; 16];
        mask[12..].fill(0.0);
        let mut bottom = vec![0.0; 16];
        bottom[15] = 1.0;
        let mask = t.constant(Tensor::new([4, 4], mask));
        let bottom = t.constant(Tensor::new([4, 4], bottom));
        let top = t.mul(x[1], mask)?;
        let m = t.add(top, bottom)?;
        let y = t.warp(x[0], m)?;
        weighted_sum(t, y, 23)
    }));
    let (va, vb) = (uniform(&mut rng, &[3, 4, 5], -1.0, 1.0), uniform(&mut rng, &[3, 4, 5], -1.0, 1.0));
    cases.push(case("mse", vec![va.clone(), vb.clone()], |t, x| t.mse(x[0], x[1])));
    cases.push(case("ncc", vec![va, vb], |t, x| t.ncc(x[0], x[1])));
    cases
}

pub fn registered_ops() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Full objective on a 6³ pair, differentiated with respect to every model
/// parameter.
pub fn composed_case() -> Result<GradCase> {
    let scene = SceneSpec {
        dims: [6, 6, 6],
        n_blobs: 3,
        margin: 1.0,
        eig_min: 0.6,
        eig_max: 1.5,
        seed: 11,
        ..Default::default()
    };
    let tspec = TransformSpec {
        max_rotation_deg: 10.0,
        max_translation_vox: 0.5,
        seed: 11,
        ..Default::default()
    };
    let pair = synth::generate_pair(&scene, &tspec)?;
    let cfg = ModelConfig {
        hidden_channels: 2,
        depth: 1,
        k: 4,
        seed: 3,
    };
    let model = model::init_parameters(&cfg)?;
    let opts = ObjectiveOptions {
        weights: LossWeights::default(),
        kl_mode: KlMode::Normalised,
        var_norm: VarNorm::Rms,
        similarity: SimilarityKind::Mse,
        kind: TransformKind::Rigid,
        detach_gaussian_params: false,
        fit: FitOptions::default(),
    };
    let inputs = model.parameters().into_iter().cloned().collect();
    Ok(GradCase {
        name: COMPOSED_LOSS,
        inputs,
        f: Box::new(move |tape, params| Ok(pair_objective(tape, &model, params, &pair, &opts)?.total)),
    })
}

pub fn run_case(c: &GradCase) -> Result<GradCheckRow> {
    let report = grad_check_multi(&c.f, &c.inputs, GRADCHECK_STEP, GRADCHECK_TOL)?;
    Ok(GradCheckRow {
        op: c.name.to_string(),
        max_rel_err: report.max_rel_err,
        pass: report.passed,
    })
}

/// One row per registered op, then the composed objective.
pub fn gradcheck_all() -> Result<Vec<GradCheckRow>> {
    let mut rows = op_cases().iter().map(run_case).collect::<Result<Vec<_>>>()?;
    rows.push(run_case(&composed_case()?)?);
    Ok(rows)
}

pub fn gradcheck_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("op,max_rel_err,pass\n");
    for r in rows {
        out.push_str(&format!("{},{:.3e},{}\n", r.op, r.max_rel_err, r.pass));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_records_its_op() {
        for c in op_cases() {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = c.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            (c.f)(&mut tape, &ids).unwrap();
            let found = (0..tape.len()).any(|i| {
                let id = crate::autodiff::NodeId(i);
                tape.op_name(id) == c.name
            });
            assert!(found, "case {} does not record its op", c.name);
        }
    }

    #[test]
    fn op_names_are_unique() {
        let mut names = registered_ops();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
