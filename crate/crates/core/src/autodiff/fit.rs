//! Closed-form point-set fits as graph ops. Both produce a row-major `[4, 4]`
//! homogeneous matrix.

use nalgebra::{Matrix3, Matrix4};

use super::tape::{NodeId, Op, Tape};
use super::Tensor;
use crate::align::{self, AffineTransform, FitOptions, RigidTransform};
use crate::error::{Error, Result};
use crate::field::{PointCloud, Vec3};

fn clouds(op: &'static str, tape: &Tape, moving: NodeId, fixed: NodeId) -> Result<(PointCloud, PointCloud)> {
    let (m, f) = (tape.value(moving), tape.value(fixed));
    let k = m.shape().first().copied().unwrap_or(0);
    if m.shape() != [k, 3] || f.shape() != [k, 3] {
        return Err(Error::shape(op, format!("moving {:?}, fixed {:?}", m.shape(), f.shape())));
    }
    Ok((PointCloud::from_flat(m.data()), PointCloud::from_flat(f.data())))
}

fn flatten(points: &[Vec3]) -> Tensor {
    Tensor::new([points.len(), 3], points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

struct FitRigid {
    fit: RigidTransform,
}

impl Op for FitRigid {
    fn name(&self) -> &'static str {
        "fit_rigid"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = Matrix4::from_row_slice(grad.data());
        let g_rot: Matrix3<f64> = g.fixed_view::<3, 3>(0, 0).into_owned();
        let g_trans: Vec3 = g.fixed_view::<3, 1>(0, 3).into_owned();
        let m = PointCloud::from_flat(inputs[0].data());
        let f = PointCloud::from_flat(inputs[1].data());
        let (gm, gf) = align::fit_rigid_vjp(&m.points, &f.points, &self.fit, &g_rot, &g_trans);
        vec![flatten(&gm), flatten(&gf)]
    }
}

struct FitAffine {
    fit: AffineTransform,
}

impl Op for FitAffine {
    fn name(&self) -> &'static str {
        "fit_affine"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = Matrix4::from_row_slice(grad.data());
        let m = PointCloud::from_flat(inputs[0].data());
        let f = PointCloud::from_flat(inputs[1].data());
        let (gm, gf) = align::fit_affine_vjp(&m.points, &f.points, &self.fit, &g);
        vec![flatten(&gm), flatten(&gf)]
    }
}

impl Tape {
    /// Rigid fit mapping `moving` `[K, 3]` onto `fixed` `[K, 3]`.
    pub fn fit_rigid(&mut self, moving: NodeId, fixed: NodeId, opts: &FitOptions) -> Result<NodeId> {
        let (m, f) = clouds("fit_rigid", self, moving, fixed)?;
        let fit = align::fit_rigid_with(&m, &f, opts)?;
        let out = Tensor::new([4, 4], fit.to_affine().to_flat());
        Ok(self.record(FitRigid { fit }, &[moving, fixed], out))
    }

    /// Least-squares affine fit mapping `moving` onto `fixed`.
    pub fn fit_affine(&mut self, moving: NodeId, fixed: NodeId, opts: &FitOptions) -> Result<NodeId> {
        let (m, f) = clouds("fit_affine", self, moving, fixed)?;
        let fit = align::fit_affine_with(&m, &f, opts)?;
        let out = Tensor::new([4, 4], fit.to_flat());
        Ok(self.record(FitAffine { fit }, &[moving, fixed], out))
    }
}
