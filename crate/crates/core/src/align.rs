//! Closed-form alignment of corresponding point clouds, transform algebra, and
//! transform error metrics.
//!
//! All transforms map *moving* coordinates to *fixed* coordinates:
//! `fixed_k ≈ T · moving_k`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector4};

use crate::error::{Error, Result};
use crate::field::{load_matrix_json, save_matrix_json, PointCloud, Vec3};

/// 4×4 homogeneous matrix with last row `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Config(format!(
                "affine matrix last row must be (0,0,0,1), got {:?}",
                last.iter().collect::<Vec<_>>()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTerm {
                what: "affine matrix entry".into(),
            });
        }
        Ok(Self { matrix })
    }

    /// Builds from the top three rows, forcing the last row.
    pub fn from_linear_translation(linear: &Matrix3<f64>, translation: &Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Self { matrix: m }
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self::from_linear_translation(&Matrix3::identity(), &t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn offset(&self) -> Vec3 {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    /// Row-major 16 values, the layout used by the differentiation graph.
    pub fn to_flat(&self) -> Vec<f64> {
        self.to_rows().iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != 16 {
            return Err(Error::shape("AffineTransform", format!("{} values", flat.len())));
        }
        Self::new(Matrix4::from_row_slice(flat))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_matrix_json(&self.to_rows(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_rows(&load_matrix_json(path)?)
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        (self.matrix - other.matrix).amax()
    }
}

/// Proper rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() == 0.0 || angle_rad == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad).into_inner()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform::from_linear_translation(&self.rotation, &self.translation)
    }

    /// Projects the linear block of an affine transform onto this type without
    /// re-orthonormalising.
    pub fn from_affine(t: &AffineTransform) -> Self {
        Self {
            rotation: t.linear(),
            translation: t.offset(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

pub fn compose(a: &AffineTransform, b: &AffineTransform) -> AffineTransform {
    // last rows multiply to (0,0,0,1) exactly
    AffineTransform {
        matrix: a.matrix * b.matrix,
    }
}

pub fn invert(t: &AffineTransform) -> Result<AffineTransform> {
    let lin = t.linear();
    let det = lin.determinant();
    if det.abs() <= 1e-12 {
        return Err(Error::Singular { det });
    }
    let inv = lin.try_inverse().ok_or(Error::Singular { det })?;
    Ok(AffineTransform::from_linear_translation(&inv, &(-(inv * t.offset()))))
}

pub fn apply_point(t: &AffineTransform, p: &Vec3) -> Vec3 {
    let h = t.matrix * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

/// Degeneracy thresholds for the fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Rigid fit fails when σ₂ < ratio · σ₁ of the cross-covariance.
    pub rigid_singular_ratio: f64,
    /// Affine fit fails when the homogeneous moving matrix has a condition
    /// number at or above this.
    pub affine_max_condition: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rigid_singular_ratio: 1e-9,
            affine_max_condition: 1e8,
        }
    }
}

fn check_pair(moving: &[Vec3], fixed: &[Vec3], min: usize, what: &str) -> Result<()> {
    if moving.len() != fixed.len() {
        return Err(Error::shape(
            "fit",
            format!("cloud sizes differ: {} vs {}", moving.len(), fixed.len()),
        ));
    }
    if moving.len() < min {
        return Err(Error::Degenerate(format!(
            "{what} fit needs at least {min} points, got {}",
            moving.len()
        )));
    }
    if moving.iter().chain(fixed).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteTerm {
            what: "point coordinate".into(),
        });
    }
    Ok(())
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
}

/// `Σ (f_k − f̄)(m_k − m̄)ᵀ`
fn cross_covariance(moving: &[Vec3], fixed: &[Vec3], m_bar: &Vec3, f_bar: &Vec3) -> Matrix3<f64> {
    moving
        .iter()
        .zip(fixed)
        .fold(Matrix3::zeros(), |acc, (m, f)| acc + (f - f_bar) * (m - m_bar).transpose())
}

/// Determinant-corrected SVD (Kabsch) solution of
/// `argmin_{R ∈ SO(3), t} Σ ‖f_k − R m_k − t‖²`.
pub fn fit_rigid(moving: &PointCloud, fixed: &PointCloud) -> Result<RigidTransform> {
    fit_rigid_with(moving, fixed, &FitOptions::default())
}

pub fn fit_rigid_with(moving: &PointCloud, fixed: &PointCloud, opts: &FitOptions) -> Result<RigidTransform> {
    let (m, f) = (&moving.points, &fixed.points);
    check_pair(m, f, 3, "rigid")?;
    let m_bar = centroid(m);
    let f_bar = centroid(f);
    let c = cross_covariance(m, f, &m_bar, &f_bar);
    let svd = c.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    // negated so that NaN counts as degenerate
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(s[order[0]] > 0.0) || s[order[1]] < opts.rigid_singular_ratio * s[order[0]] {
        return Err(Error::Degenerate(format!(
            "rigid fit: cross-covariance singular values {:.3e}, {:.3e}, {:.3e}",
            s[order[0]], s[order[1]], s[order[2]]
        )));
    }
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[order[2]] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    Ok(RigidTransform {
        rotation,
        translation: f_bar - rotation * m_bar,
    })
}

/// Gradients of a scalar loss through [`fit_rigid`].
///
/// `g_rot` and `g_trans` are the loss gradients with respect to the fitted
/// rotation and translation. Returns gradients for the moving and fixed points.
pub(crate) fn fit_rigid_vjp(
    moving: &[Vec3],
    fixed: &[Vec3],
    fit: &RigidTransform,
    g_rot: &Matrix3<f64>,
    g_trans: &Vec3,
) -> (Vec<Vec3>, Vec<Vec3>) {
    const GAP_GUARD: f64 = 1e-6;
    let k = moving.len() as f64;
    let r = fit.rotation;
    let m_bar = centroid(moving);
    let f_bar = centroid(fixed);
    let c = cross_covariance(moving, fixed, &m_bar, &f_bar);

    // t = f̄ − R m̄
    let g_r = g_rot - g_trans * m_bar.transpose();
    let g_fbar = *g_trans;
    let g_mbar = -(r.transpose() * g_trans);

    // Perturbing C moves R along R[ω]× with (tr(M)I − M) ω = vee(RᵀdC − dCᵀR),
    // M = RᵀC symmetric at the optimum. Hence C̄ = R [P⁻¹ vee(RᵀḠ − ḠᵀR)]×.
    let mm = r.transpose() * c;
    let mm = (mm + mm.transpose()) * 0.5;
    let p = Matrix3::identity() * mm.trace() - mm;
    let a = r.transpose() * g_r - g_r.transpose() * r;
    let g_vee = Vec3::new(a[(2, 1)], a[(0, 2)], a[(1, 0)]);
    let eig = p.symmetric_eigen();
    let mut h = Vec3::zeros();
    for i in 0..3 {
        let lam = eig.eigenvalues[i];
        let lam = if lam.abs() < GAP_GUARD { lam + GAP_GUARD } else { lam };
        let v = eig.eigenvectors.column(i);
        h += v * (v.dot(&g_vee) / lam);
    }
    let g_c = r * h.cross_matrix();

    let mut g_m: Vec<Vec3> = moving.iter().zip(fixed).map(|(_, f)| g_c.transpose() * (f - f_bar)).collect();
    let mut g_f: Vec<Vec3> = moving.iter().map(|m| g_c * (m - m_bar)).collect();
    let mean_m = centroid(&g_m);
    let mean_f = centroid(&g_f);
    for g in &mut g_m {
        *g += g_mbar / k - mean_m;
    }
    for g in &mut g_f {
        *g += g_fbar / k - mean_f;
    }
    (g_m, g_f)
}

fn homogeneous(points: &[Vec3]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(4, points.len(), |r, c| if r < 3 { points[c][r] } else { 1.0 })
}

/// Least-squares affine fit `T = F Mᵀ (M Mᵀ)⁻¹` with `M` the homogeneous
/// moving points (4×K) and `F` the fixed points (3×K).
pub fn fit_affine(moving: &PointCloud, fixed: &PointCloud) -> Result<AffineTransform> {
    fit_affine_with(moving, fixed, &FitOptions::default())
}

pub fn fit_affine_with(moving: &PointCloud, fixed: &PointCloud, opts: &FitOptions) -> Result<AffineTransform> {
    let (m, f) = (&moving.points, &fixed.points);
    check_pair(m, f, 4, "affine")?;
    let (a_inv, _) = affine_normal_inverse(m, opts)?;
    let mh = homogeneous(m);
    let fm = nalgebra::DMatrix::from_fn(3, f.len(), |r, c| f[c][r]);
    let t3 = fm * mh.transpose() * a_inv;
    let mut mat = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            mat[(r, c)] = t3[(r, c)];
        }
    }
    Ok(AffineTransform { matrix: mat })
}

/// `(M Mᵀ)⁻¹` and the condition number of `M`.
fn affine_normal_inverse(m: &[Vec3], opts: &FitOptions) -> Result<(Matrix4<f64>, f64)> {
    let mh = homogeneous(m);
    let a: Matrix4<f64> = {
        let p = &mh * mh.transpose();
        Matrix4::from_fn(|r, c| p[(r, c)])
    };
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(condition < opts.affine_max_condition) {
        return Err(Error::Coplanar { condition });
    }
    let inv = a.try_inverse().ok_or(Error::Coplanar { condition })?;
    Ok((inv, condition))
}

/// Gradients through [`fit_affine`]; `g` is the loss gradient with respect to
/// the 4×4 output (only the top three rows matter).
pub(crate) fn fit_affine_vjp(moving: &[Vec3], fixed: &[Vec3], fit: &AffineTransform, g: &Matrix4<f64>) -> (Vec<Vec3>, Vec<Vec3>) {
    let (b, _) = affine_normal_inverse(moving, &FitOptions {
        affine_max_condition: f64::INFINITY,
        ..FitOptions::default()
    })
    .expect("validated in forward");
    let mut g3 = *g;
    g3.set_row(3, &nalgebra::RowVector4::zeros());
    let mut t3 = *fit.matrix();
    t3.set_row(3, &nalgebra::RowVector4::zeros());
    // H = T₃ᵀ G₃ B, padded to 4×4 with zero rows
    let h = t3.transpose() * g3 * b;
    let hs = h + h.transpose();
    let gb = g3 * b; // rows 0..3 hold G₃B
    let bgt = b * g3.transpose(); // 4×4, columns 0..3 hold B G₃ᵀ
    let mut g_m = Vec::with_capacity(moving.len());
    let mut g_f = Vec::with_capacity(moving.len());
    for (mp, fp) in moving.iter().zip(fixed) {
        let mh = Vector4::new(mp.x, mp.y, mp.z, 1.0);
        let fh = Vector4::new(fp.x, fp.y, fp.z, 0.0);
        let gf = gb * mh;
        let gm = bgt * fh - hs * mh;
        g_f.push(Vec3::new(gf.x, gf.y, gf.z));
        g_m.push(Vec3::new(gm.x, gm.y, gm.z));
    }
    (g_m, g_f)
}

/// Geodesic angle of `R_est R_gtᵀ` in degrees.
pub fn rotation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let rel = est.rotation * gt.rotation.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near 0; recover the angle from the skew part there
    let skew = (rel - rel.transpose()) * 0.5;
    let sin = Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]).norm();
    sin.atan2(cos).to_degrees()
}

/// `‖t_est − t_gt‖₂` in voxels.
pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI), Vec3::zeros()).rotation
    }

    fn cloud(rng: &mut ChaCha8Rng, k: usize) -> PointCloud {
        PointCloud::new((0..k).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect())
    }

    fn transformed(c: &PointCloud, f: impl Fn(&Vec3) -> Vec3) -> PointCloud {
        PointCloud::new(c.points.iter().map(f).collect())
    }

    #[test]
    fn rigid_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cloud(&mut rng, 6);
        let t = fit_rigid(&c, &c).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn rigid_quarter_turn_about_z() {
        let moving = PointCloud::new(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::zeros(),
        ]);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let shift = Vec3::new(1.0, 2.0, 3.0);
        let fixed = transformed(&moving, |p| rz * p + shift);
        let t = fit_rigid(&moving, &fixed).unwrap();
        assert!((t.rotation - rz).amax() < 1e-9);
        assert!((t.translation - shift).norm() < 1e-9);
        let residual: f64 = moving.points.iter().zip(&fixed.points).map(|(m, f)| (t.apply(m) - f).norm_squared()).sum();
        assert!(residual < 1e-18);
    }

    #[test]
    fn rigid_random_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let moving = cloud(&mut rng, 8);
        let gt = RigidTransform {
            rotation: random_rotation(&mut rng),
            translation: Vec3::new(2.0, -1.0, 0.5),
        };
        let fixed = transformed(&moving, |p| gt.apply(p));
        let est = fit_rigid(&moving, &fixed).unwrap();
        assert!(rotation_error(&est, &gt) < 1e-6);
    }

    #[test]
    fn rigid_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let moving = cloud(&mut rng, 7);
        let mirror = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let fixed = transformed(&moving, |p| mirror * p);
        let t = fit_rigid(&moving, &fixed).unwrap();
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).amax() < 1e-9);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rigid_collinear_is_degenerate() {
        let moving = PointCloud::new((0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect());
        let fixed = moving.clone();
        assert!(matches!(fit_rigid(&moving, &fixed), Err(Error::Degenerate(_))));
        let coincident = PointCloud::new(vec![Vec3::new(1.0, 1.0, 1.0); 4]);
        assert!(matches!(fit_rigid(&coincident, &coincident), Err(Error::Degenerate(_))));
    }

    #[test]
    fn affine_identity_and_recovery() {
        let moving = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ]);
        let t = fit_affine(&moving, &moving).unwrap();
        assert!((t.matrix() - Matrix4::identity()).amax() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let moving = cloud(&mut rng, 10);
        let lin = Matrix3::new(1.2, 0.1, -0.05, 0.0, 0.9, 0.08, 0.03, -0.1, 1.1);
        let gt = AffineTransform::from_linear_translation(&lin, &Vec3::new(0.5, -2.0, 1.0));
        let fixed = transformed(&moving, |p| apply_point(&gt, p));
        let est = fit_affine(&moving, &fixed).unwrap();
        assert!(est.max_abs_diff(&gt) < 1e-8);
        assert_eq!(est.matrix().row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn affine_coplanar_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flat = PointCloud::new((0..8).map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0)).collect());
        match fit_affine(&flat, &flat) {
            Err(Error::Coplanar { condition }) => assert!(condition >= 1e8),
            other => panic!("expected coplanar error, got {other:?}"),
        }
    }

    #[test]
    fn transform_algebra() {
        assert_eq!(invert(&AffineTransform::identity()).unwrap(), AffineTransform::identity());
        let t = AffineTransform::translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(apply_point(&t, &Vec3::zeros()), Vec3::new(1.0, 2.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let lin = random_rotation(&mut rng) * Matrix3::from_diagonal(&Vec3::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)));
            let a = AffineTransform::from_linear_translation(&lin, &Vec3::new(rng.random_range(-3.0..3.0), 1.0, -2.0));
            let b = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vec3::new(0.3, -0.7, 2.0),
            }
            .to_affine();
            let p = Vec3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let back = apply_point(&invert(&a).unwrap(), &apply_point(&a, &p));
            assert!((back - p).norm() < 1e-9);
            let lhs = apply_point(&compose(&a, &b), &p);
            let rhs = apply_point(&a, &apply_point(&b, &p));
            assert!((lhs - rhs).norm() < 1e-9);
        }
        let singular = AffineTransform::from_linear_translation(&Matrix3::zeros(), &Vec3::zeros());
        assert!(matches!(invert(&singular), Err(Error::Singular { .. })));
    }

    #[test]
    fn error_metrics() {
        let gt = RigidTransform::identity();
        assert_eq!(rotation_error(&gt, &gt), 0.0);
        let est = RigidTransform::from_axis_angle(&Vec3::z(), 10f64.to_radians(), Vec3::zeros());
        assert!((rotation_error(&est, &gt) - 10.0).abs() < 1e-9);
        let shifted = RigidTransform {
            translation: Vec3::new(0.0, 3.0, 4.0),
            ..gt
        };
        assert_eq!(translation_error(&shifted, &gt), 5.0);
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..100 {
            let a = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vec3::zeros(),
            };
            let b = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vec3::zeros(),
            };
            assert!((rotation_error(&a, &b) - rotation_error(&b, &a)).abs() < 1e-9);
            let e = rotation_error(&a, &b);
            assert!((0.0..=180.0).contains(&e));
        }
    }

    #[test]
    fn affine_rejects_bad_last_row() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(AffineTransform::new(m).is_err());
    }
}
