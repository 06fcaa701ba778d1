//! Multiplication counts of a forward pass with and without the
//! activation-norm penalty. Additions and nonlinearities are not counted.

use serde::{Deserialize, Serialize};

use crate::model::{LayerKind, ModelError, ModelSpec};

/// Shape of one convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvQuery {
    pub batch: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub h_out: u64,
    pub w_out: u64,
    pub k1: u64,
    pub k2: u64,
}

/// `N_b * C_o * H_o * W_o * C_i * K1 * K2`.
pub fn conv_cost(q: &ConvQuery) -> u64 {
    q.batch * q.c_out * q.h_out * q.w_out * q.c_in * q.k1 * q.k2
}

/// One square per output activation: `N_b * H_o * W_o * C_o`.
pub fn conv_reg_cost(q: &ConvQuery) -> u64 {
    q.batch * q.h_out * q.w_out * q.c_out
}

/// `N_b * d_i * d_o`.
pub fn fc_cost(batch: u64, d_in: u64, d_out: u64) -> u64 {
    batch * d_in * d_out
}

/// `N_b * d_o`.
pub fn fc_reg_cost(batch: u64, d_out: u64) -> u64 {
    batch * d_out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: usize,
    pub kind: LayerKind,
    pub base: u64,
    pub regularizer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch: u64,
    pub rows: Vec<CostRow>,
    pub total_base: u64,
    pub total_regularizer: u64,
    /// `total_regularizer / total_base`, zero for an empty model.
    pub overhead: f64,
    /// Forward cost of two gradient passes per step, as in SAM variants.
    pub sam_total: u64,
}

/// Per-layer counts for every parameterized layer of `spec`.
pub fn model_cost_report(spec: &ModelSpec, batch: u64) -> Result<CostReport, ModelError> {
    let layout = spec.layout()?;
    let rows: Vec<CostRow> = layout
        .slots
        .iter()
        .map(|s| {
            let (base, regularizer) = match s.kind {
                LayerKind::FullyConnected => {
                    let (d_out, d_in) = (s.weight_shape[0] as u64, s.weight_shape[1] as u64);
                    (fc_cost(batch, d_in, d_out), fc_reg_cost(batch, d_out))
                }
                LayerKind::Conv2d => {
                    let q = ConvQuery {
                        batch,
                        c_in: s.weight_shape[1] as u64,
                        c_out: s.weight_shape[0] as u64,
                        h_out: s.output_shape[1] as u64,
                        w_out: s.output_shape[2] as u64,
                        k1: s.weight_shape[2] as u64,
                        k2: s.weight_shape[3] as u64,
                    };
                    (conv_cost(&q), conv_reg_cost(&q))
                }
            };
            CostRow {
                layer: s.layer,
                kind: s.kind,
                base,
                regularizer,
            }
        })
        .collect();
    Ok(report_from_rows(batch, rows))
}

/// Totals over already computed rows.
pub fn report_from_rows(batch: u64, rows: Vec<CostRow>) -> CostReport {
    let total_base: u64 = rows.iter().map(|r| r.base).sum();
    let total_regularizer: u64 = rows.iter().map(|r| r.regularizer).sum();
    CostReport {
        batch,
        overhead: if total_base == 0 {
            0.0
        } else {
            total_regularizer as f64 / total_base as f64
        },
        sam_total: 2 * total_base,
        rows,
        total_base,
        total_regularizer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_cifar_conv() {
        let q = ConvQuery {
            batch: 50,
            c_in: 3,
            c_out: 64,
            h_out: 28,
            w_out: 28,
            k1: 5,
            k2: 5,
        };
        assert_eq!(conv_cost(&q), 188_160_000);
        assert_eq!(conv_reg_cost(&q), 2_508_800);
        assert_eq!(conv_cost(&q), 75 * conv_reg_cost(&q));
    }

    #[test]
    fn unit_kernel_counts_outputs() {
        let q = ConvQuery {
            batch: 2,
            c_in: 1,
            c_out: 3,
            h_out: 4,
            w_out: 5,
            k1: 1,
            k2: 1,
        };
        assert_eq!(conv_cost(&q), 2 * 3 * 4 * 5);
        assert_eq!(conv_cost(&q), conv_reg_cost(&q));
    }

    #[test]
    fn fc_examples() {
        assert_eq!(fc_cost(50, 1600, 384), 30_720_000);
        assert_eq!(fc_reg_cost(50, 384), 19_200);
        assert_eq!(fc_cost(7, 1, 9), fc_reg_cost(7, 9));
    }

    #[test]
    fn empty_rows_give_zero_totals() {
        let r = report_from_rows(50, Vec::new());
        assert_eq!((r.total_base, r.total_regularizer, r.overhead), (0, 0, 0.0));
    }

    #[test]
    fn cifar_report() {
        let r = model_cost_report(&ModelSpec::cifar100(), 50).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!((r.rows[0].base, r.rows[0].regularizer), (188_160_000, 2_508_800));
        assert_eq!((r.rows[1].base, r.rows[1].regularizer), (50 * 64 * 10 * 10 * 64 * 25, 50 * 64 * 100));
        assert_eq!((r.rows[2].base, r.rows[2].regularizer), (30_720_000, 19_200));
        assert_eq!(r.rows[3].base, 50 * 384 * 192);
        assert_eq!(r.rows[4].base, 50 * 192 * 100);
        assert!(r.overhead < 0.02);
        assert_eq!(r.sam_total, 2 * r.total_base);
    }
}
