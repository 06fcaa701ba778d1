#![allow(dead_code)]

use flatfed_core::data::{synth_mixture, Batch, Dataset};
use flatfed_core::model::{build, LayerSpec, ModelSpec, ParamVector};
use flatfed_core::{Rng, Tensor};
use rand::Rng as _;

/// Conv(1→2, 2×2) → ReLU → Conv(2→2, 2×2) → ReLU → Flatten → FC(8, 3) on 1×4×4 inputs.
pub fn tiny_cnn() -> ModelSpec {
    ModelSpec {
        input_shape: vec![1, 4, 4],
        layers: vec![
            LayerSpec::conv(1, 2, 2),
            LayerSpec::Relu,
            LayerSpec::conv(2, 2, 2),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::fc(8, 3),
        ],
        num_classes: 3,
    }
}

/// Initialized parameters with small random biases. Zero biases can put a
/// pre-activation exactly on the ReLU kink (a patch of all-zero inputs),
/// where finite differences and reverse mode legitimately disagree.
pub fn params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut p = build(spec, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed).child(98);
    for slot in p.layout.slots.clone() {
        if let Some(b) = slot.bias {
            for v in &mut p.values[b] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    p
}

/// Random inputs of the model's shape with labels cycling through classes.
pub fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed).child(99);
    let per: usize = spec.input_shape.iter().product();
    let data: Vec<f64> = (0..n * per).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    Batch {
        inputs: Tensor::new(shape, data).unwrap(),
        labels: (0..n).map(|i| (i + seed as usize) % spec.num_classes).collect(),
    }
}

pub fn mixture(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Dataset {
    synth_mixture(classes, dim, per_class, spread, &mut Rng::new(seed)).unwrap()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
