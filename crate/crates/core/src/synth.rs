//! Seeded synthetic volumes: mixtures of anisotropic Gaussian blobs on a zero
//! background, paired with ground-truth rigid or affine transforms.
//!
//! Ground truth follows the alignment convention: `gt` maps moving coordinates
//! into fixed space, so `moving = resample(fixed, gt⁻¹)` and
//! `resample(moving, gt)` re-aligns the moving content to the fixed volume.
//! Sampled transforms act about the grid centre.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{self, AffineTransform};
use crate::error::{Error, Result};
use crate::field::{self, Grid, PointCloud, Vec3, Volume};
use crate::warp;

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Blob centres stay at least this many voxels from every face, in both
    /// volumes of a pair.
    pub margin: f64,
    /// Range of the blob covariance eigenvalues, in voxels².
    pub eig_min: f64,
    pub eig_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            n_blobs: 6,
            intensity_min: 0.2,
            intensity_max: 1.0,
            margin: 4.0,
            eig_min: 1.0,
            eig_max: 6.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let grid = Grid::new(self.dims)?;
        let half = grid.dims().iter().map(|&n| (n as f64 - 1.0) / 2.0).fold(f64::INFINITY, f64::min);
        if self.n_blobs == 0 {
            return Err(Error::Config("n_blobs must be ≥ 1".into()));
        }
        if !(0.0 <= self.intensity_min && self.intensity_min <= self.intensity_max) {
            return Err(Error::Config("intensity range must satisfy 0 ≤ min ≤ max".into()));
        }
        if !(0.0 < self.eig_min && self.eig_min <= self.eig_max) {
            return Err(Error::Config("eigenvalue range must satisfy 0 < min ≤ max".into()));
        }
        if !(self.margin >= 0.0 && self.margin < half) {
            return Err(Error::Config(format!("margin {} leaves no interior", self.margin)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    #[default]
    Rigid,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub max_rotation_deg: f64,
    /// Radius of the ball the translation is drawn from.
    pub max_translation_vox: f64,
    /// Per-axis log-scale drawn from `±max_log_scale` (affine only).
    pub max_log_scale: f64,
    /// Off-diagonal shear entries drawn from `±max_shear` (affine only).
    pub max_shear: f64,
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            kind: TransformKind::Rigid,
            max_rotation_deg: 30.0,
            max_translation_vox: 4.0,
            max_log_scale: 0.2,
            max_shear: 0.1,
            seed: 0,
        }
    }
}

impl TransformSpec {
    /// Spec that always yields the identity.
    pub fn identity(kind: TransformKind, seed: u64) -> Self {
        Self {
            kind,
            max_rotation_deg: 0.0,
            max_translation_vox: 0.0,
            max_log_scale: 0.0,
            max_shear: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.max_rotation_deg, self.max_translation_vox, self.max_log_scale, self.max_shear];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!("transform ranges must be finite and ≥ 0: {v:?}")));
        }
        if self.max_rotation_deg > 180.0 {
            return Err(Error::Config("max_rotation_deg must be ≤ 180".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub centre: Vec3,
    pub covariance: Matrix3<f64>,
    pub intensity: f64,
}

impl Blob {
    fn value(&self, precision: &Matrix3<f64>, x: &Vec3) -> f64 {
        let d = x - self.centre;
        self.intensity * (-0.5 * d.dot(&(precision * d))).exp()
    }
}

/// Noiseless rendered scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub volume: Volume,
    pub blobs: Vec<Blob>,
}

impl Scene {
    pub fn centres(&self) -> PointCloud {
        PointCloud::new(self.blobs.iter().map(|b| b.centre).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Volume,
    pub moving: Volume,
    /// Maps moving coordinates into fixed space.
    pub gt: AffineTransform,
    /// Blob centres in fixed coordinates.
    pub fixed_centres: PointCloud,
    /// The same blob centres in moving coordinates (`gt⁻¹` applied).
    pub moving_centres: PointCloud,
}

#[derive(Debug, Clone)]
pub struct SeriesFrame {
    pub volume: Volume,
    /// Maps this frame's coordinates into frame 0.
    pub gt_to_first: AffineTransform,
    pub centres: PointCloud,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniform random rotation matrix for blob orientation.
fn random_orientation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    // density of the rotation angle for the uniform measure on SO(3) is
    // (1 − cos θ)/π; sample it by rejection
    let angle = loop {
        let t: f64 = rng.random_range(0.0..PI);
        let u: f64 = rng.random_range(0.0..2.0);
        if u <= 1.0 - t.cos() {
            break t;
        }
    };
    Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).into_inner()
}

fn sample_blobs(spec: &SceneSpec, grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let c = grid.center();
    let [nx, ny, nz] = grid.dims();
    let lo = Vec3::repeat(spec.margin);
    let hi = Vec3::new(nx as f64 - 1.0, ny as f64 - 1.0, nz as f64 - 1.0) - lo;
    (0..spec.n_blobs)
        .map(|_| {
            let centre = Vec3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            // pull towards the middle so moderate transforms keep blobs inside
            let centre = c + 0.75 * (centre - c);
            let q = random_orientation(rng);
            let eig = Matrix3::from_diagonal(&Vec3::new(
                rng.random_range(spec.eig_min..=spec.eig_max),
                rng.random_range(spec.eig_min..=spec.eig_max),
                rng.random_range(spec.eig_min..=spec.eig_max),
            ));
            let covariance = q * eig * q.transpose();
            let intensity = rng.random_range(spec.intensity_min..=spec.intensity_max);
            Blob {
                centre,
                covariance: (covariance + covariance.transpose()) * 0.5,
                intensity,
            }
        })
        .collect()
}

fn render_blobs(grid: &Grid, blobs: &[Blob]) -> Result<Volume> {
    let precisions: Vec<Matrix3<f64>> = blobs
        .iter()
        .map(|b| b.covariance.try_inverse().ok_or(Error::Singular { det: b.covariance.determinant() }))
        .collect::<Result<_>>()?;
    Volume::from_fn(*grid, |x| blobs.iter().zip(&precisions).map(|(b, p)| b.value(p, &x)).sum())
}

/// Renders the noiseless scene for `spec.seed`.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = sample_blobs(spec, &grid, &mut rng);
    Ok(Scene {
        volume: render_blobs(&grid, &blobs)?,
        blobs,
    })
}

/// Draws one transform about `centre`: axis uniform on the sphere, angle
/// uniform in `[0, max]`, translation uniform in a ball.
pub fn sample_transform(spec: &TransformSpec, centre: &Vec3, rng: &mut ChaCha8Rng) -> AffineTransform {
    let axis = unit_vector(rng);
    let max_angle = spec.max_rotation_deg.to_radians();
    let angle = if max_angle > 0.0 { rng.random_range(0.0..=max_angle) } else { 0.0 };
    let rotation = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).into_inner();
    let translation = if spec.max_translation_vox > 0.0 {
        let dir = unit_vector(rng);
        let r = spec.max_translation_vox * rng.random_range(0.0f64..=1.0).cbrt();
        dir * r
    } else {
        Vec3::zeros()
    };
    let linear = match spec.kind {
        TransformKind::Rigid => rotation,
        TransformKind::Affine => {
            let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
            let scale = Matrix3::from_diagonal(&Vec3::new(
                sym(spec.max_log_scale).exp(),
                sym(spec.max_log_scale).exp(),
                sym(spec.max_log_scale).exp(),
            ));
            let mut shear = Matrix3::identity();
            shear[(0, 1)] = sym(spec.max_shear);
            shear[(0, 2)] = sym(spec.max_shear);
            shear[(1, 2)] = sym(spec.max_shear);
            rotation * scale * shear
        }
    };
    let offset = centre + translation - linear * centre;
    AffineTransform::from_linear_translation(&linear, &offset)
}

fn inside(grid: &Grid, p: &Vec3, margin: f64) -> bool {
    let [nx, ny, nz] = grid.dims();
    let hi = [nx as f64 - 1.0, ny as f64 - 1.0, nz as f64 - 1.0];
    (0..3).all(|a| p[a] >= margin && p[a] <= hi[a] - margin)
}

fn add_noise(v: Volume, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    if sigma == 0.0 {
        return Ok(v);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let grid = *v.grid();
    let data = v.into_data().into_iter().map(|x| x + normal.sample(rng)).collect();
    Volume::new(grid, data)
}

/// `length` frames; frame 0 is the reference with identity ground truth and
/// every later frame carries its transform into frame 0.
pub fn generate_series(scene: &SceneSpec, tspec: &TransformSpec, length: usize) -> Result<Vec<SeriesFrame>> {
    if length < 2 {
        return Err(Error::Config(format!("series length must be ≥ 2, got {length}")));
    }
    tspec.validate()?;
    let rendered = render_scene(scene)?;
    let grid = *rendered.volume.grid();
    let centres = rendered.centres();
    let mut t_rng = ChaCha8Rng::seed_from_u64(tspec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed);
    noise_rng.set_stream(1);

    let mut frames = Vec::with_capacity(length);
    frames.push(SeriesFrame {
        volume: add_noise(rendered.volume.clone(), scene.noise_sigma, &mut noise_rng)?,
        gt_to_first: AffineTransform::identity(),
        centres: centres.clone(),
    });
    for frame in 1..length {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let gt = sample_transform(tspec, &grid.center(), &mut t_rng);
            let inv = align::invert(&gt)?;
            let moved: Vec<Vec3> = centres.points.iter().map(|p| align::apply_point(&inv, p)).collect();
            if moved.iter().all(|p| inside(&grid, p, scene.margin)) {
                accepted = Some((gt, inv, moved));
                break;
            }
        }
        let (gt, inv, moved) = accepted.ok_or_else(|| {
            Error::Degenerate(format!(
                "frame {frame}: no transform within {MAX_ATTEMPTS} draws keeps the content inside the margin"
            ))
        })?;
        let clean = warp::resample(&rendered.volume, &inv)?;
        frames.push(SeriesFrame {
            volume: add_noise(clean, scene.noise_sigma, &mut noise_rng)?,
            gt_to_first: gt,
            centres: PointCloud::new(moved),
        });
    }
    Ok(frames)
}

/// Fixed/moving pair with the transform that maps moving onto fixed.
pub fn generate_pair(scene: &SceneSpec, tspec: &TransformSpec) -> Result<SynthPair> {
    let mut frames = generate_series(scene, tspec, 2)?.into_iter();
    let first = frames.next().expect("two frames");
    let second = frames.next().expect("two frames");
    Ok(SynthPair {
        fixed: first.volume,
        moving: second.volume,
        gt: second.gt_to_first,
        fixed_centres: first.centres,
        moving_centres: second.centres,
    })
}

/// Transform from frame `i` into frame `i − 1`.
pub fn consecutive_transform(frames: &[SeriesFrame], i: usize) -> Result<AffineTransform> {
    let prev = align::invert(&frames[i - 1].gt_to_first)?;
    Ok(align::compose(&prev, &frames[i].gt_to_first))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub gt_to_reference: [[f64; 4]; 4],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: SceneSpec,
    pub transform: TransformSpec,
    pub reference: String,
    pub volumes: Vec<ManifestEntry>,
}

/// Writes every frame as `frame_NNN.{json,raw}` plus `manifest.json`.
pub fn write_series(dir: impl AsRef<Path>, scene: &SceneSpec, tspec: &TransformSpec, frames: &[SeriesFrame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut volumes = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let stem = format!("frame_{i:03}");
        field::save_volume(&f.volume, dir.join(&stem))?;
        volumes.push(ManifestEntry {
            file: format!("{stem}.json"),
            gt_to_reference: f.gt_to_first.to_rows(),
        });
    }
    let manifest = Manifest {
        scene: *scene,
        transform: *tspec,
        reference: volumes[0].file.clone(),
        volumes,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Writes `fixed`, `moving` and `gt.json` plus `manifest.json`.
pub fn write_pair(dir: impl AsRef<Path>, scene: &SceneSpec, tspec: &TransformSpec, pair: &SynthPair) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    field::save_volume(&pair.fixed, dir.join("fixed"))?;
    field::save_volume(&pair.moving, dir.join("moving"))?;
    pair.gt.save(dir.join("gt.json"))?;
    let manifest = Manifest {
        scene: *scene,
        transform: *tspec,
        reference: "fixed.json".into(),
        volumes: vec![
            ManifestEntry {
                file: "fixed.json".into(),
                gt_to_reference: AffineTransform::identity().to_rows(),
            },
            ManifestEntry {
                file: "moving.json".into(),
                gt_to_reference: pair.gt.to_rows(),
            },
        ],
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}
