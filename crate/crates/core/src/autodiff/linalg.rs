//! Batched 3×3 inverse and log-determinant.

use super::spatial::{mat3, write_mat3};
use super::tape::{NodeId, Op, Tape};
use super::Tensor;
use crate::error::{Error, Result};

const MIN_DET: f64 = 1e-300;

fn batch_len(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape {
        [k, 3, 3] => Ok(*k),
        _ => Err(Error::shape(op, format!("expected [K, 3, 3], got {shape:?}"))),
    }
}

struct Inverse3;

impl Op for Inverse3 {
    fn name(&self) -> &'static str {
        "inverse3"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  Ā = −A⁻ᵀ Ḡ A⁻ᵀ
        let mut gin = Tensor::zeros_like(output);
        for (k, gi) in gin.data_mut().chunks_exact_mut(9).enumerate() {
            let bt = mat3(&output.data()[9 * k..]).transpose();
            let g = mat3(&grad.data()[9 * k..]);
            write_mat3(gi, &(-(bt * g * bt)));
        }
        vec![gin]
    }
}

struct LogDet3;

impl Op for LogDet3 {
    fn name(&self) -> &'static str {
        "logdet3"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut gin = Tensor::zeros_like(inputs[0]);
        for (k, gi) in gin.data_mut().chunks_exact_mut(9).enumerate() {
            let a = mat3(&inputs[0].data()[9 * k..]);
            let inv_t = a.try_inverse().expect("checked at record time").transpose();
            write_mat3(gi, &(inv_t * grad.data()[k]));
        }
        vec![gin]
    }
}

impl Tape {
    pub fn inverse3(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let k = batch_len("inverse3", v.shape())?;
        let mut out = Tensor::zeros([k, 3, 3]);
        for c in 0..k {
            let m = mat3(&v.data()[9 * c..]);
            let det = m.determinant();
            let inv = m
                .try_inverse()
                .filter(|_| det.abs() > MIN_DET)
                .ok_or(Error::Singular { det })?;
            write_mat3(&mut out.data_mut()[9 * c..9 * c + 9], &inv);
        }
        Ok(self.record(Inverse3, &[a], out))
    }

    /// `log det A` per batch entry; requires a positive determinant.
    pub fn logdet3(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let k = batch_len("logdet3", v.shape())?;
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let det = mat3(&v.data()[9 * c..]).determinant();
            if det <= MIN_DET {
                return Err(Error::Singular { det });
            }
            out.push(det.ln());
        }
        Ok(self.record(LogDet3, &[a], Tensor::new([k], out)))
    }
}
