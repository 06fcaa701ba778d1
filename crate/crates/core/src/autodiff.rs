//! Gradients and Hessian-vector products of scalar programs.
//!
//! A [`Program`] records its loss onto a [`Graph`] given a flat parameter
//! leaf. Gradients come from one reverse pass; Hessian-vector products from a
//! second reverse pass through the recorded gradient, seeded with `v`.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("parameter vector has dimension {actual}, program expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite {what} at layer {layer:?}")]
    NonFinite { layer: Option<usize>, what: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A scalar loss over a flat parameter vector and a batch.
///
/// Recording must be pure: equal parameters and batch produce a bit-identical
/// tape.
pub trait Program {
    type Batch: ?Sized;

    /// Number of parameters.
    fn dim(&self) -> usize;

    /// Records the loss as a scalar node, reading parameters from `params`.
    fn record(&self, g: &mut Graph, params: Var, batch: &Self::Batch) -> Result<Var, AutodiffError>;

    /// Layer owning parameter `index`, used to locate non-finite gradients.
    fn layer_of(&self, _index: usize) -> Option<usize> {
        None
    }
}

fn check_dim<P: Program + ?Sized>(program: &P, len: usize) -> Result<(), AutodiffError> {
    if program.dim() != len {
        return Err(AutodiffError::Dimension {
            expected: program.dim(),
            actual: len,
        });
    }
    Ok(())
}

fn finite_loss(value: f64) -> Result<f64, AutodiffError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AutodiffError::NonFinite {
            layer: None,
            what: format!("loss {value}"),
        })
    }
}

fn check_gradient<P: Program + ?Sized>(program: &P, g: &[f64], what: &str) -> Result<(), AutodiffError> {
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(AutodiffError::NonFinite {
            layer: program.layer_of(i),
            what: format!("{what} entry {i}"),
        });
    }
    Ok(())
}

/// Loss value only.
pub fn evaluate<P: Program + ?Sized>(program: &P, params: &[f64], batch: &P::Batch) -> Result<f64, AutodiffError> {
    check_dim(program, params.len())?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(params.to_vec()));
    let loss = program.record(&mut g, p, batch)?;
    finite_loss(g.value(loss).item())
}

/// A recorded loss with its gradient kept on the tape, ready for repeated
/// Hessian-vector products at a fixed point.
pub struct HessianOperator {
    graph: Graph,
    params: Var,
    grad: Option<Var>,
    loss: f64,
    gradient: Vec<f64>,
    base_len: usize,
}

impl HessianOperator {
    pub fn new<P: Program + ?Sized>(program: &P, params: &[f64], batch: &P::Batch) -> Result<Self, AutodiffError> {
        check_dim(program, params.len())?;
        let mut graph = Graph::new();
        let p = graph.param(Tensor::vector(params.to_vec()));
        let loss_var = program.record(&mut graph, p, batch)?;
        let loss = finite_loss(graph.value(loss_var).item())?;
        let one = graph.constant(Tensor::scalar(1.0));
        let grad = graph.backward(&[(loss_var, one)], &[p])[0];
        let gradient = match grad {
            Some(gv) => graph.value(gv).data().to_vec(),
            None => vec![0.0; params.len()],
        };
        check_gradient(program, &gradient, "gradient")?;
        let base_len = graph.len();
        Ok(HessianOperator {
            graph,
            params: p,
            grad,
            loss,
            gradient,
            base_len,
        })
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    /// `H v` by reverse-differentiating `<grad, v>`.
    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        if v.len() != self.dim() {
            return Err(AutodiffError::Dimension {
                expected: self.dim(),
                actual: v.len(),
            });
        }
        let Some(grad) = self.grad else {
            return Ok(vec![0.0; v.len()]);
        };
        let seed = self.graph.constant(Tensor::vector(v.to_vec()));
        let hv = self.graph.backward(&[(grad, seed)], &[self.params])[0];
        let out = match hv {
            Some(h) => self.graph.value(h).data().to_vec(),
            None => vec![0.0; v.len()],
        };
        self.graph.truncate(self.base_len);
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite {
                layer: None,
                what: format!("hessian-vector product entry {i}"),
            });
        }
        Ok(out)
    }
}

/// Loss and gradient from one forward and one reverse pass.
pub fn value_and_grad<P: Program + ?Sized>(
    program: &P,
    params: &[f64],
    batch: &P::Batch,
) -> Result<(f64, Vec<f64>), AutodiffError> {
    let op = HessianOperator::new(program, params, batch)?;
    Ok((op.loss, op.gradient))
}

/// Gradient of the loss with respect to `params`.
pub fn grad<P: Program + ?Sized>(program: &P, params: &[f64], batch: &P::Batch) -> Result<Vec<f64>, AutodiffError> {
    value_and_grad(program, params, batch).map(|(_, g)| g)
}

/// Hessian-vector product `H v` at `params`.
pub fn hvp<P: Program + ?Sized>(
    program: &P,
    params: &[f64],
    batch: &P::Batch,
    v: &[f64],
) -> Result<Vec<f64>, AutodiffError> {
    HessianOperator::new(program, params, batch)?.apply(v)
}

/// Central-difference gradient. Reference oracle for tests and `gradcheck`.
pub fn finite_diff_grad<P: Program + ?Sized>(
    program: &P,
    params: &[f64],
    batch: &P::Batch,
    step: f64,
) -> Result<Vec<f64>, AutodiffError> {
    if !(step > 0.0) {
        return Err(AutodiffError::Invalid(format!("step must be positive, got {step}")));
    }
    let mut w = params.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + step;
        let up = evaluate(program, &w, batch)?;
        w[i] = orig - step;
        let down = evaluate(program, &w, batch)?;
        w[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Max over entries of `|a - b| / max(1, |a|, |b|)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Test and demo programs with closed-form derivatives.
pub mod programs {
    use super::*;

    /// `½ wᵀ A w` for a dense symmetric `A` (row-major, `n × n`).
    pub struct Quadratic {
        n: usize,
        a: Vec<f64>,
    }

    impl Quadratic {
        pub fn new(n: usize, a: Vec<f64>) -> Self {
            assert_eq!(a.len(), n * n);
            Quadratic { n, a }
        }

        pub fn identity(n: usize) -> Self {
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                a[i * n + i] = 1.0;
            }
            Self::new(n, a)
        }

        pub fn diagonal(d: &[f64]) -> Self {
            let n = d.len();
            let mut a = vec![0.0; n * n];
            for (i, &x) in d.iter().enumerate() {
                a[i * n + i] = x;
            }
            Self::new(n, a)
        }
    }

    impl Program for Quadratic {
        type Batch = ();

        fn dim(&self) -> usize {
            self.n
        }

        fn record(&self, g: &mut Graph, params: Var, _: &()) -> Result<Var, AutodiffError> {
            let n = self.n;
            let a = g.constant(Tensor::raw(vec![n, n], self.a.clone()));
            let w = g.reshape(params, vec![n, 1]);
            let aw = g.matmul(a, w, false, false);
            let q = g.dot(w, aw);
            Ok(g.scale(q, 0.5))
        }
    }

    /// A loss that ignores its parameters.
    pub struct Constant {
        pub n: usize,
        pub value: f64,
    }

    impl Program for Constant {
        type Batch = ();

        fn dim(&self) -> usize {
            self.n
        }

        fn record(&self, g: &mut Graph, _params: Var, _: &()) -> Result<Var, AutodiffError> {
            Ok(g.constant(Tensor::scalar(self.value)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::programs::*;
    use super::*;

    #[test]
    fn grad_of_half_norm_is_identity() {
        let g = grad(&Quadratic::identity(2), &[3.0, -2.0], &()).unwrap();
        assert_eq!(g, vec![3.0, -2.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let p = Constant { n: 3, value: 4.2 };
        assert_eq!(grad(&p, &[1.0, 2.0, 3.0], &()).unwrap(), vec![0.0; 3]);
        assert_eq!(hvp(&p, &[1.0, 2.0, 3.0], &(), &[1.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hvp_identity_returns_v() {
        let v = [0.3, -1.7, 2.0];
        let hv = hvp(&Quadratic::identity(3), &[1.0, 1.0, 1.0], &(), &v).unwrap();
        assert_eq!(hv, v.to_vec());
    }

    #[test]
    fn hvp_diagonal_quadratic() {
        let hv = hvp(&Quadratic::diagonal(&[3.0, 1.0]), &[0.5, 0.25], &(), &[1.0, 1.0]).unwrap();
        assert_eq!(hv, vec![3.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = grad(&Quadratic::identity(2), &[1.0], &()).unwrap_err();
        assert_eq!(err, AutodiffError::Dimension { expected: 2, actual: 1 });
        let err = hvp(&Quadratic::identity(2), &[1.0, 1.0], &(), &[1.0]).unwrap_err();
        assert!(matches!(err, AutodiffError::Dimension { .. }));
    }

    struct Square;
    impl Program for Square {
        type Batch = ();
        fn dim(&self) -> usize {
            1
        }
        fn record(&self, g: &mut Graph, p: Var, _: &()) -> Result<Var, AutodiffError> {
            Ok(g.dot(p, p))
        }
    }

    #[test]
    fn finite_difference_of_scalar_square() {
        let fd = finite_diff_grad(&Square, &[1.0], &(), 1e-4).unwrap();
        assert!((fd[0] - 2.0).abs() < 1e-7);
        assert!(finite_diff_grad(&Square, &[1.0], &(), 0.0).is_err());
        let c = Constant { n: 2, value: 1.0 };
        assert_eq!(finite_diff_grad(&c, &[0.0, 0.0], &(), 1e-3).unwrap(), vec![0.0, 0.0]);
    }

    struct Exploding;
    impl Program for Exploding {
        type Batch = ();
        fn dim(&self) -> usize {
            1
        }
        fn record(&self, g: &mut Graph, p: Var, _: &()) -> Result<Var, AutodiffError> {
            let e = g.exp(p);
            Ok(g.sum(e))
        }
        fn layer_of(&self, _: usize) -> Option<usize> {
            Some(4)
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let err = grad(&Exploding, &[1e6], &()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
    }

    #[test]
    fn evaluation_is_bit_identical() {
        let q = Quadratic::new(2, vec![2.0, 0.3, 0.3, 1.0]);
        let a = value_and_grad(&q, &[0.1, 0.7], &()).unwrap();
        let b = value_and_grad(&q, &[0.1, 0.7], &()).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
