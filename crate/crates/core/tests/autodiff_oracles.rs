mod common;

use common::*;
use flatfed_core::autodiff::{finite_diff_grad, grad, hvp, max_relative_error, value_and_grad};
use flatfed_core::cost::{conv_cost, ConvQuery};
use flatfed_core::curvature::exact_hessian;
use flatfed_core::data::Batch;
use flatfed_core::model::{conv2d_instrumented, forward, LayerSpec, ModelSpec, ParamVector};
use flatfed_core::objective::{ClientObjective, RegConfig};
use flatfed_core::{Rng, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

/// Loss and gradient of a one-hidden-layer ReLU MLP with biases, written
/// out by hand. The penalty is the mean square of the hidden activations.
fn manual_mlp(p: &ParamVector, batch: &Batch, zeta: f64) -> (f64, Vec<f64>) {
    let s0 = &p.layout.slots[0];
    let s1 = &p.layout.slots[1];
    let (hid, d_in) = (s0.weight_shape[0], s0.weight_shape[1]);
    let c = s1.weight_shape[0];
    let w = &p.values;
    let w1 = |o: usize, i: usize| w[s0.weight.start + o * d_in + i];
    let b1 = |o: usize| w[s0.bias.as_ref().unwrap().start + o];
    let w2 = |o: usize, i: usize| w[s1.weight.start + o * hid + i];
    let b2 = |o: usize| w[s1.bias.as_ref().unwrap().start + o];
    let n = batch.len();
    let x = batch.inputs.data();
    let mut g = vec![0.0; w.len()];
    let mut ce = 0.0;
    let mut sq = 0.0;
    for s in 0..n {
        let xs = &x[s * d_in..(s + 1) * d_in];
        let z1: Vec<f64> = (0..hid).map(|o| b1(o) + (0..d_in).map(|i| w1(o, i) * xs[i]).sum::<f64>()).collect();
        let h: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let z2: Vec<f64> = (0..c).map(|o| b2(o) + (0..hid).map(|i| w2(o, i) * h[i]).sum::<f64>()).collect();
        let m = z2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z2.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let y = batch.labels[s];
        ce += lse - z2[y];
        sq += h.iter().map(|v| v * v).sum::<f64>();
        let dz2: Vec<f64> = (0..c)
            .map(|o| ((z2[o] - lse).exp() - if o == y { 1.0 } else { 0.0 }) / n as f64)
            .collect();
        let mut dh = vec![0.0; hid];
        for o in 0..c {
            for i in 0..hid {
                g[s1.weight.start + o * hid + i] += dz2[o] * h[i];
                dh[i] += w2(o, i) * dz2[o];
            }
            g[s1.bias.as_ref().unwrap().start + o] += dz2[o];
        }
        for i in 0..hid {
            dh[i] += zeta * 2.0 * h[i] / (n * hid) as f64;
            let dz1 = if z1[i] > 0.0 { dh[i] } else { 0.0 };
            for j in 0..d_in {
                g[s0.weight.start + i * d_in + j] += dz1 * xs[j];
            }
            g[s0.bias.as_ref().unwrap().start + i] += dz1;
        }
    }
    (ce / n as f64 + zeta * sq / (n * hid) as f64, g)
}

#[test]
fn mlp_gradient_matches_hand_backprop() {
    let spec = ModelSpec::mlp(&[4, 5, 3]);
    let layout = spec.layout().unwrap();
    for seed in 0..10 {
        let p = params(&spec, seed);
        let batch = random_batch(&spec, 6, seed);
        for zeta in [0.0, 0.3] {
            let obj = ClientObjective::new(&spec, &layout, RegConfig::with_zeta(zeta));
            let (loss, g) = value_and_grad(&obj, &p.values, &batch).unwrap();
            let (loss_ref, g_ref) = manual_mlp(&p, &batch, zeta);
            assert!((loss - loss_ref).abs() < 1e-12, "seed {seed}: {loss} vs {loss_ref}");
            assert!(max_relative_error(&g, &g_ref) < 1e-12, "seed {seed} zeta {zeta}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for (spec, zeta) in [(ModelSpec::mlp(&[4, 5, 3]), 0.2), (tiny_cnn(), 0.0), (tiny_cnn(), 0.2)] {
        let layout = spec.layout().unwrap();
        let obj = ClientObjective::new(&spec, &layout, RegConfig::with_zeta(zeta));
        for seed in 0..10 {
            let p = params(&spec, seed);
            let batch = random_batch(&spec, 4, seed);
            let g = grad(&obj, &p.values, &batch).unwrap();
            let fd = finite_diff_grad(&obj, &p.values, &batch, 1e-6).unwrap();
            let err = max_relative_error(&g, &fd);
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }
}

/// For softmax regression the Hessian is `mean_s (diag(p) - p p^T) (x) [x; 1][x; 1]^T`.
#[test]
fn softmax_regression_hessian_closed_form() {
    let spec = ModelSpec::mlp(&[3, 4]);
    let layout = spec.layout().unwrap();
    let obj = ClientObjective::new(&spec, &layout, RegConfig::default());
    let slot = &layout.slots[0];
    let (c, d_in) = (4, 3);
    for seed in 0..5 {
        let p = params(&spec, seed);
        let batch = random_batch(&spec, 5, seed);
        let h = exact_hessian(&obj, &p.values, &batch, 100).unwrap().matrix;
        let (logits, _) = forward(&spec, &p, &batch.inputs, false).unwrap();
        let idx = |o: usize, i: Option<usize>| match i {
            Some(i) => slot.weight.start + o * d_in + i,
            None => slot.bias.as_ref().unwrap().start + o,
        };
        let mut expected = vec![0.0; layout.dim * layout.dim];
        for s in 0..batch.len() {
            let z = &logits.data()[s * c..(s + 1) * c];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            let prob: Vec<f64> = e.iter().map(|v| v / tot).collect();
            let x = &batch.inputs.data()[s * d_in..(s + 1) * d_in];
            let feat = |i: Option<usize>| i.map_or(1.0, |i| x[i]);
            let feats: Vec<Option<usize>> = (0..d_in).map(Some).chain([None]).collect();
            for o in 0..c {
                for q in 0..c {
                    let mo = if o == q { prob[o] } else { 0.0 } - prob[o] * prob[q];
                    for &i in &feats {
                        for &j in &feats {
                            expected[idx(o, i) * layout.dim + idx(q, j)] += mo * feat(i) * feat(j) / batch.len() as f64;
                        }
                    }
                }
            }
        }
        let got: Vec<f64> = (0..layout.dim)
            .flat_map(|r| (0..layout.dim).map(move |col| (r, col)))
            .map(|(r, col)| h[(r, col)])
            .collect();
        assert!(max_abs_diff(&got, &expected) < 1e-12, "seed {seed}");
    }
}

#[test]
fn hvp_matches_gradient_differences() {
    for spec in [ModelSpec::mlp(&[4, 5, 3]), tiny_cnn()] {
        let layout = spec.layout().unwrap();
        let obj = ClientObjective::new(&spec, &layout, RegConfig::with_zeta(0.1));
        for seed in 0..5 {
            let p = params(&spec, seed);
            let batch = random_batch(&spec, 3, seed);
            let mut rng = Rng::new(seed).child(7);
            let v: Vec<f64> = (0..layout.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hv = hvp(&obj, &p.values, &batch, &v).unwrap();
            let eps = 1e-5;
            let shifted = |sign: f64| -> Vec<f64> { p.values.iter().zip(&v).map(|(w, d)| w + sign * eps * d).collect() };
            let up = grad(&obj, &shifted(1.0), &batch).unwrap();
            let down = grad(&obj, &shifted(-1.0), &batch).unwrap();
            let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            assert!(max_relative_error(&hv, &fd) < 1e-6, "seed {seed}");
        }
    }
}

fn direct_conv(x: &[f64], dims: [usize; 4], kernel: &[f64], kdims: [usize; 4], bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let [o, _, k1, k2] = kdims;
    let ho = (h + 2 * pad - k1) / stride + 1;
    let wo = (w + 2 * pad - k2) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias[oc];
                    for ci in 0..c {
                        for ky in 0..k1 {
                            for kx in 0..k2 {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += kernel[((oc * c + ci) * k1 + ky) * k2 + kx]
                                        * x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_paths_agree(
        b in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, w in 3usize..8, k1 in 1usize..4, k2 in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(k1 <= h + 2 * pad && k2 <= w + 2 * pad);
        let ho = (h + 2 * pad - k1) / stride + 1;
        let wo = (w + 2 * pad - k2) / stride + 1;
        let spec = ModelSpec {
            input_shape: vec![c, h, w],
            layers: vec![
                LayerSpec::Conv2d { c_in: c, c_out: o, k1, k2, stride, padding: pad, bias: true },
                LayerSpec::Flatten,
            ],
            num_classes: o * ho * wo,
        };
        let p = params(&spec, seed);
        let mut rng = Rng::new(seed).child(1);
        let p = ParamVector::from_values(&spec, p.values.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let slot = &p.layout.slots[0];
        let kernel = &p.values[slot.weight.clone()];
        let bias = &p.values[slot.bias.clone().unwrap()];
        let expected = direct_conv(&x, [b, c, h, w], kernel, [o, c, k1, k2], bias, stride, pad);

        let input = Tensor::new(vec![b, c, h, w], x).unwrap();
        let (logits, _) = forward(&spec, &p, &input, false).unwrap();
        prop_assert!(max_abs_diff(logits.data(), &expected) < 1e-12);

        let kt = Tensor::new(vec![o, c, k1, k2], kernel.to_vec()).unwrap();
        let (inst, count) = conv2d_instrumented(&input, &kt, Some(bias), stride, pad).unwrap();
        prop_assert!(max_abs_diff(inst.data(), &expected) < 1e-12);
        let q = ConvQuery { batch: b as u64, c_in: c as u64, c_out: o as u64, h_out: ho as u64, w_out: wo as u64, k1: k1 as u64, k2: k2 as u64 };
        prop_assert_eq!(count, conv_cost(&q));
    }

    #[test]
    fn hvp_is_linear(seed in 0u64..500, a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let spec = ModelSpec::mlp(&[3, 4, 2]);
        let layout = spec.layout().unwrap();
        let obj = ClientObjective::new(&spec, &layout, RegConfig::with_zeta(0.1));
        let p = params(&spec, seed);
        let batch = random_batch(&spec, 3, seed);
        let mut rng = Rng::new(seed).child(3);
        let u: Vec<f64> = (0..layout.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..layout.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + c * y).collect();
        let hu = hvp(&obj, &p.values, &batch, &u).unwrap();
        let hv = hvp(&obj, &p.values, &batch, &v).unwrap();
        let hm = hvp(&obj, &p.values, &batch, &mix).unwrap();
        let combo: Vec<f64> = hu.iter().zip(&hv).map(|(x, y)| a * x + c * y).collect();
        prop_assert!(max_abs_diff(&hm, &combo) < 1e-10);
    }
}

/// Each captured layer input equals the output of the network cut just
/// before that layer.
#[test]
fn capture_matches_prefix_network() {
    for (spec, cut) in [(ModelSpec::mlp(&[4, 5, 3]), 2), (tiny_cnn(), 2), (tiny_cnn(), 5)] {
        let p = params(&spec, 11);
        let batch = random_batch(&spec, 3, 11);
        let (_, cap) = forward(&spec, &p, &batch.inputs, true).unwrap();
        let cap = cap.unwrap();
        let mut layers = spec.layers[..cut].to_vec();
        if !matches!(layers.last(), Some(LayerSpec::Flatten)) && spec.input_shape.len() > 1 {
            layers.push(LayerSpec::Flatten);
        }
        let entry = cap.entries.iter().find(|e| e.layer == cut).unwrap();
        let width = entry.activation.len() / batch.len();
        let prefix = ModelSpec {
            input_shape: spec.input_shape.clone(),
            layers,
            num_classes: width,
        };
        let pl = prefix.layout().unwrap();
        let pp = ParamVector::from_values(&prefix, p.values[..pl.dim].to_vec()).unwrap();
        let (out, _) = forward(&prefix, &pp, &batch.inputs, false).unwrap();
        assert_eq!(bits(out.data()), bits(entry.activation.data()), "cut {cut}");
    }
}
