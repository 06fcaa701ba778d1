//! Softmax cross-entropy, the activation-norm penalty and the client
//! objective `CE + zeta * penalty`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Program};
use crate::data::Batch;
use crate::graph::{Graph, Var};
use crate::model::{record_forward, ActivationCapture, Layout, ModelError, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("label tensor shape {labels:?} does not match logits {logits:?}")]
    Shape { logits: Vec<usize>, labels: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    OutOfRange { label: usize, classes: usize },
}

/// Activation-norm regularization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub zeta: f64,
    /// Also penalize the logits of the final layer.
    #[serde(default)]
    pub include_logits: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            zeta: 0.0,
            include_logits: false,
        }
    }
}

impl RegConfig {
    pub fn with_zeta(zeta: f64) -> Self {
        RegConfig {
            zeta,
            ..Self::default()
        }
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Integer labels from a one-hot `[B, C]` tensor.
pub fn labels_from_one_hot(one_hot: &Tensor) -> Result<Vec<usize>, LabelError> {
    let [b, c] = one_hot.shape()[..] else {
        return Err(LabelError::Shape {
            logits: Vec::new(),
            labels: one_hot.shape().to_vec(),
        });
    };
    (0..b)
        .map(|row| {
            let r = &one_hot.data()[row * c..(row + 1) * c];
            let ones: Vec<usize> = (0..c).filter(|&j| r[j] == 1.0).collect();
            let zeros = r.iter().filter(|&&x| x == 0.0).count();
            if ones.len() == 1 && zeros == c - 1 {
                Ok(ones[0])
            } else {
                Err(LabelError::NotOneHot { row })
            }
        })
        .collect()
}

/// Records the batch-mean cross-entropy of `logits: [B, C]`.
pub fn record_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let [b, c] = g.shape(logits)[..] else {
        panic!("logits must be [B, C]");
    };
    assert_eq!(b, labels.len());
    let ls = g.log_softmax(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = g.gather(ls, idx.into(), vec![b]);
    let total = g.sum(picked);
    g.scale(total, -1.0 / b as f64)
}

/// Mean over the batch of `-log softmax(z)[true class]`.
pub fn cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<f64, LabelError> {
    if logits.shape().len() != 2 || logits.shape() != one_hot.shape() {
        return Err(LabelError::Shape {
            logits: logits.shape().to_vec(),
            labels: one_hot.shape().to_vec(),
        });
    }
    let labels = labels_from_one_hot(one_hot)?;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let ce = record_cross_entropy(&mut g, z, &labels);
    Ok(g.value(ce).item())
}

fn mean_square(t: &Tensor) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        t.sum_of_squares() / t.len() as f64
    }
}

/// Sum over penalized layers of the mean-square activation entry.
///
/// Penalized tensors are the inputs of parameterized layers after the first
/// (the first layer's input is the data), plus the logits when
/// `include_logits` is set.
pub fn man_penalty(capture: &ActivationCapture, cfg: &RegConfig) -> f64 {
    let mut total = 0.0;
    for e in capture.entries.iter().filter(|e| e.ordinal >= 1) {
        total += mean_square(&e.activation);
    }
    if cfg.include_logits {
        total += mean_square(&capture.logits);
    }
    total
}

fn record_mean_square(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len().max(1);
    let sq = g.dot(x, x);
    g.scale(sq, 1.0 / n as f64)
}

/// Graph version of [`man_penalty`]; `None` when nothing is penalized.
pub fn record_man_penalty(g: &mut Graph, captures: &[(usize, Var)], logits: Var, cfg: &RegConfig) -> Option<Var> {
    let mut total: Option<Var> = None;
    let mut terms: Vec<Var> = captures.iter().filter(|(o, _)| *o >= 1).map(|&(_, v)| v).collect();
    if cfg.include_logits {
        terms.push(logits);
    }
    for v in terms {
        let t = record_mean_square(g, v);
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    total
}

pub(crate) fn model_error(e: ModelError) -> AutodiffError {
    match e {
        ModelError::NonFinite { layer } => AutodiffError::NonFinite {
            layer: Some(layer),
            what: "activations".into(),
        },
        other => AutodiffError::Invalid(other.to_string()),
    }
}

/// Loss components evaluated together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub ce: f64,
    pub man: f64,
    pub total: f64,
}

/// The client objective `CE + zeta * penalty` as a differentiable program.
#[derive(Debug, Clone)]
pub struct ClientObjective<'a> {
    pub spec: &'a ModelSpec,
    pub layout: &'a Layout,
    pub reg: RegConfig,
}

struct Recorded {
    ce: Var,
    man: Option<Var>,
    total: Var,
}

impl<'a> ClientObjective<'a> {
    pub fn new(spec: &'a ModelSpec, layout: &'a Layout, reg: RegConfig) -> Self {
        ClientObjective { spec, layout, reg }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), AutodiffError> {
        if batch.labels.is_empty() {
            return Err(AutodiffError::EmptyBatch);
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(AutodiffError::Invalid(
                LabelError::OutOfRange {
                    label: y,
                    classes: self.spec.num_classes,
                }
                .to_string(),
            ));
        }
        Ok(())
    }

    fn record_terms(&self, g: &mut Graph, params: Var, batch: &Batch, want_man: bool) -> Result<Recorded, AutodiffError> {
        self.check_batch(batch)?;
        let x = g.constant(batch.inputs.clone());
        let trace = record_forward(self.spec, self.layout, g, params, x, true).map_err(model_error)?;
        let ce = record_cross_entropy(g, trace.logits, &batch.labels);
        let penalize = self.reg.zeta != 0.0;
        let man = if penalize || want_man {
            record_man_penalty(g, &trace.captures, trace.logits, &self.reg)
        } else {
            None
        };
        let total = match man {
            Some(m) if penalize => {
                let weighted = g.scale(m, self.reg.zeta);
                g.add(ce, weighted)
            }
            _ => ce,
        };
        Ok(Recorded { ce, man, total })
    }

    /// CE, penalty and total at `params`; `total` is bit-identical to the
    /// program's loss.
    pub fn terms(&self, params: &[f64], batch: &Batch) -> Result<ObjectiveTerms, AutodiffError> {
        if params.len() != self.layout.dim {
            return Err(AutodiffError::Dimension {
                expected: self.layout.dim,
                actual: params.len(),
            });
        }
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(params.to_vec()));
        let r = self.record_terms(&mut g, p, batch, true)?;
        let terms = ObjectiveTerms {
            ce: g.value(r.ce).item(),
            man: r.man.map_or(0.0, |m| g.value(m).item()),
            total: g.value(r.total).item(),
        };
        if !terms.total.is_finite() {
            return Err(AutodiffError::NonFinite {
                layer: None,
                what: format!("loss {}", terms.total),
            });
        }
        Ok(terms)
    }
}

impl Program for ClientObjective<'_> {
    type Batch = Batch;

    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn record(&self, g: &mut Graph, params: Var, batch: &Batch) -> Result<Var, AutodiffError> {
        Ok(self.record_terms(g, params, batch, false)?.total)
    }

    fn layer_of(&self, index: usize) -> Option<usize> {
        self.layout.layer_of(index)
    }
}
