mod common;

use common::*;
use flatfed_core::autodiff::{evaluate, HessianOperator};
use flatfed_core::curvature::{
    activation_bound_report, curvature_report, exact_hessian, finite_diff_hessian, gershgorin_report, hutchinson_trace,
    kronecker_check, layer_blocks, logit_hessian, power_iteration_top, topk_eigenvalues, CurvatureOptions,
};
use flatfed_core::data::{iid_partition, Batch};
use flatfed_core::fed::{AlgoConfig, Algorithm, Federation};
use flatfed_core::model::{forward, ModelSpec};
use flatfed_core::objective::{ClientObjective, RegConfig};
use flatfed_core::Rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;

fn eig(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn ce_hessian(spec: &ModelSpec, params: &[f64], batch: &Batch) -> DMatrix<f64> {
    let layout = spec.layout().unwrap();
    let obj = ClientObjective::new(spec, &layout, RegConfig::default());
    exact_hessian(&obj, params, batch, 400).unwrap().matrix
}

fn single(batch: &Batch, i: usize) -> Batch {
    Batch {
        inputs: batch.inputs.slice_leading(i, i + 1),
        labels: vec![batch.labels[i]],
    }
}

/// Random symmetric matrix with eigenvalues `spectrum` in a random basis.
fn with_spectrum(spectrum: &[f64], rng: &mut Rng) -> DMatrix<f64> {
    let n = spectrum.len();
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    &q * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * q.transpose()
}

#[test]
fn dense_hessian_agrees_with_gradient_differences() {
    for spec in [ModelSpec::mlp(&[4, 5, 3]), tiny_cnn()] {
        let layout = spec.layout().unwrap();
        let obj = ClientObjective::new(&spec, &layout, RegConfig::with_zeta(0.2));
        let p = params(&spec, 1);
        let batch = random_batch(&spec, 3, 1);
        let exact = exact_hessian(&obj, &p.values, &batch, 400).unwrap();
        let fd = finite_diff_hessian(&obj, &p.values, &batch, 1e-5).unwrap();
        assert!((&exact.matrix - &fd).amax() < 1e-6);
        assert!(exact.asymmetry < 1e-12);
        assert_eq!(exact.loss, evaluate(&obj, &p.values, &batch).unwrap());
    }
}

#[test]
fn batch_hessian_is_mean_of_sample_hessians() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    let p = params(&spec, 5);
    let batch = random_batch(&spec, 4, 5);
    let full = ce_hessian(&spec, &p.values, &batch);
    let mut mean = DMatrix::zeros(full.nrows(), full.ncols());
    for i in 0..4 {
        mean += ce_hessian(&spec, &p.values, &single(&batch, i)) / 4.0;
    }
    assert!((&full - &mean).amax() < 1e-12);
}

#[test]
fn output_layer_logit_hessian_is_softmax_covariance() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    for seed in 0..5 {
        let p = params(&spec, seed);
        let batch = random_batch(&spec, 1, seed);
        let m = logit_hessian(&spec, &p, &batch.inputs, batch.labels[0], 1, 400).unwrap();
        let (logits, _) = forward(&spec, &p, &batch.inputs, false).unwrap();
        let z = logits.data();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let prob: Vec<f64> = e.iter().map(|v| v / s).collect();
        let expected = DMatrix::from_fn(3, 3, |i, j| if i == j { prob[i] } else { 0.0 } - prob[i] * prob[j]);
        assert!((&m.matrix - &expected).amax() < 1e-12, "seed {seed}");
    }
}

#[test]
fn fc_weight_blocks_factor_as_kronecker_products() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    for seed in 0..10 {
        let p = params(&spec, seed);
        let batch = random_batch(&spec, 3, seed + 100);
        for i in 0..3 {
            for ordinal in 0..2 {
                let r = kronecker_check(&spec, &p, &single(&batch, i).inputs, batch.labels[i], ordinal, 400).unwrap();
                assert!(r.residual < 1e-8, "seed {seed} sample {i} ordinal {ordinal}: {:e}", r.residual);
                assert!(r.eigen_identity_error < 1e-8, "seed {seed}: {:e}", r.eigen_identity_error);
            }
        }
    }
}

#[test]
fn block_intervals_contain_spectrum() {
    let spec = ModelSpec::mlp(&[3, 4, 4, 2]);
    let layout = spec.layout().unwrap();
    let blocks = layer_blocks(&layout);
    let mut points: Vec<Vec<f64>> = (0..10).map(|s| params(&spec, s).values).collect();
    let train = mixture(2, 3, 20, 0.5, 4);
    let plan = iid_partition(train.len(), 1, train.len(), &mut Rng::new(0)).unwrap();
    let algo = AlgoConfig { participation_fraction: 1.0, batch_size: 8, ..AlgoConfig::new(Algorithm::FedAvg) };
    let mut fed = Federation::new(spec.clone(), algo, train.clone(), None, &plan, points[0].clone(), 1).unwrap();
    fed.run(10).unwrap();
    points.push(fed.global().to_vec());
    for (k, w) in points.iter().enumerate() {
        let h = ce_hessian(&spec, w, &train.all());
        let report = gershgorin_report(&h, &blocks);
        assert!(report.contains_all(1e-8), "point {k}: margin {:e}", report.margin);
        let oracle = eig(&h);
        assert!(max_abs_diff(&oracle, &report.eigenvalues) < 1e-10);
        for iv in &report.intervals {
            assert!(iv.radius <= iv.loose_radius + 1e-12);
        }
    }
}

#[test]
fn activation_bounds_hold_for_fc_and_conv() {
    for (spec, ordinals) in [(ModelSpec::mlp(&[4, 5, 3]), vec![1]), (tiny_cnn(), vec![1, 2])] {
        for seed in 0..10 {
            let p = params(&spec, seed);
            for b in [1, 4] {
                let batch = random_batch(&spec, b, seed + 7);
                for &ordinal in &ordinals {
                    let r = activation_bound_report(&spec, &p, &batch, ordinal, 400).unwrap();
                    assert!(r.holds(), "seed {seed} B {b} ordinal {ordinal}: residual {:e}", r.residual);
                    assert!(r.unfolded_residual >= -1e-8);
                    let dense = eig(&hessian_weight_block(&spec, &p.values, &batch, ordinal));
                    assert!((dense.last().unwrap() - r.lambda_max).abs() < 1e-9);
                }
            }
        }
    }
}

fn hessian_weight_block(spec: &ModelSpec, w: &[f64], batch: &Batch, ordinal: usize) -> DMatrix<f64> {
    let layout = spec.layout().unwrap();
    let r = layout.slots[ordinal].weight.clone();
    ce_hessian(spec, w, batch).view((r.start, r.start), (r.len(), r.len())).into_owned()
}

#[test]
fn top_eigenvalue_is_subadditive_over_clients() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    for seed in 0..10 {
        let p = params(&spec, seed);
        let hs: Vec<DMatrix<f64>> = (0..5)
            .map(|k| ce_hessian(&spec, &p.values, &random_batch(&spec, 3, seed * 10 + k)))
            .collect();
        let mean = hs.iter().fold(DMatrix::zeros(p.dim(), p.dim()), |acc, h| acc + h) / 5.0;
        let lhs = *eig(&mean).last().unwrap();
        let rhs = hs.iter().map(|h| *eig(h).last().unwrap()).sum::<f64>() / 5.0;
        assert!(lhs <= rhs + 1e-8, "seed {seed}: {lhs} > {rhs}");
    }
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut rng = Rng::new(31);
    for trial in 0..10 {
        let mut spectrum: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        spectrum[0] = 3.0 + trial as f64 * 0.1;
        spectrum[1] = 2.5;
        spectrum[2] = 2.0;
        let mut a = with_spectrum(&spectrum, &mut rng);
        let top = *eig(&a).last().unwrap();
        let pair = power_iteration_top(&mut a, 2000, 1e-12, &mut rng).unwrap();
        assert!((pair.value - top).abs() <= 1e-6 * top.abs(), "trial {trial}");
        let k = topk_eigenvalues(&mut a, 3, 5000, 1e-12, &mut rng).unwrap();
        for (pair, want) in k.iter().zip([spectrum[0], 2.5, 2.0]) {
            assert!((pair.value - want).abs() <= 1e-6 * want, "trial {trial}: {} vs {want}", pair.value);
        }
    }
}

#[test]
fn hutchinson_is_within_three_standard_errors() {
    let mut rng = Rng::new(32);
    for trial in 0..10 {
        let spectrum: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut a = with_spectrum(&spectrum, &mut rng);
        let exact = a.trace();
        let est = hutchinson_trace(&mut a, 500, &mut rng).unwrap();
        assert!((est.estimate - exact).abs() <= 3.0 * est.stderr, "trial {trial}: {} vs {exact}", est.estimate);
        assert!(est.stderr < 0.05 * exact.abs());
    }
}

#[test]
fn report_estimates_agree_with_dense_summary() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    let p = params(&spec, 3);
    let batch = random_batch(&spec, 8, 3);
    let opts = CurvatureOptions { probes: 400, ..CurvatureOptions::default() };
    let r = curvature_report(&spec, &p, &batch, &opts, &mut Rng::new(1)).unwrap();
    let dense = r.dense.as_ref().unwrap();
    assert!(!r.negative_dominant);
    assert!((r.top_eigenvalues[0] - dense.top_eigenvalue).abs() < 1e-6 * dense.top_eigenvalue);
    assert!((r.trace.estimate - dense.trace).abs() <= 3.0 * r.trace.stderr);
    assert_eq!(r.bounds.len(), 1);
    let again = curvature_report(&spec, &p, &batch, &opts, &mut Rng::new(1)).unwrap();
    assert_eq!(r, again);
    let layout = spec.layout().unwrap();
    let obj = ClientObjective::new(&spec, &layout, RegConfig::default());
    assert_eq!(HessianOperator::new(&obj, &p.values, &batch).unwrap().loss(), r.loss);
}
