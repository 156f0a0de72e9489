//! Elementwise arithmetic, transcendental functions, and reductions.

use super::tape::{NodeId, Op, Tape};
use super::Tensor;
use crate::error::{Error, Result};

struct Add;
struct Sub;
struct Mul;
struct Scale(f64);
struct Combine(Vec<f64>);
struct Exp;
struct Log;
struct Sqrt;
struct Sigmoid;
struct LeakyRelu(f64);
struct Sum;
struct Mean;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.clone(), grad.clone()]
    }
}

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.clone(), grad.map(|g| -g)]
    }
}

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![
            zip_map(grad, inputs[1], |g, b| g * b),
            zip_map(grad, inputs[0], |g, a| g * a),
        ]
    }
}

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.map(|g| g * self.0)]
    }
}

impl Op for Combine {
    fn name(&self) -> &'static str {
        "combine"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        self.0.iter().map(|&c| grad.map(|g| g * c)).collect()
    }
}

impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![zip_map(grad, output, |g, y| g * y)]
    }
}

impl Op for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![zip_map(grad, inputs[0], |g, x| g / x)]
    }
}

impl Op for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        // subgradient 0 at the origin
        vec![zip_map(grad, output, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })]
    }
}

impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![zip_map(grad, output, |g, s| g * s * (1.0 - s))]
    }
}

impl Op for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let alpha = self.0;
        vec![zip_map(grad, inputs[0], |g, x| if x > 0.0 { g } else { alpha * g })]
    }
}

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![Tensor::full(inputs[0].shape().to_vec(), grad.item())]
    }
}

impl Op for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = inputs[0].len() as f64;
        vec![Tensor::full(inputs[0].shape().to_vec(), grad.item() / n)]
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(Add, &[a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(Sub, &[a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(Mul, &[a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.record(Scale(c), &[a], v)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("combine", "no terms"));
        };
        let mut out = Tensor::zeros_like(self.value(first));
        for &(id, c) in terms {
            self.same_shape("combine", first, id)?;
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(id).data()) {
                *o += c * x;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let coeffs = terms.iter().map(|t| t.1).collect();
        Ok(self.record(Combine(coeffs), &ids, out))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.record(Exp, &[a], v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.record(Log, &[a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.record(Sqrt, &[a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.record(Sigmoid, &[a], v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.record(LeakyRelu(alpha), &[a], v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.record(Sum, &[a], v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.record(Mean, &[a], v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_root_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.scalar(s), 14.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new([2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn nan_gradient_names_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1], vec![0.0]));
        let l = tape.ln(x); // -inf, gradient 1/0 = inf is fine but 0 * inf is NaN
        let z = tape.constant(Tensor::new([1], vec![0.0]));
        let m = tape.mul(l, z).unwrap();
        let s = tape.sum(m);
        match tape.backward(s) {
            Err(Error::NanGradient { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected NaN error, got {other:?}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unused_leaf_reads_as_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::new([2], vec![1.0, 1.0]));
        let y = tape.scale(x, 3.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get_or_zeros(&tape, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + 3x at x = 2 → dy/dx = 2x + 3 = 7
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.combine(&[(sq, 1.0), (x, 3.0)]).unwrap();
        assert_eq!(tape.scalar(y), 10.0);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn stable_sigmoid() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
