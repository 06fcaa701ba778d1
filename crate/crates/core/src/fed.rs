//! Federated rounds: client sampling, local SGD under FedAvg, FedDyn, FedDC,
//! FedSAM and FedASAM (each optionally with the activation penalty), server
//! aggregation and per-round metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad, AutodiffError, Program};
use crate::data::{Batch, Dataset, PartitionPlan};
use crate::model::{forward, Layout, ModelSpec, ParamVector};
use crate::objective::{model_error, ClientObjective, RegConfig};
use crate::rng::{label, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("round {round}, client {client:?}: {source}")]
    Client {
        round: usize,
        client: Option<usize>,
        source: AutodiffError,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl FedError {
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            FedError::Client {
                source: AutodiffError::NonFinite { .. },
                ..
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedDyn,
    FedDc,
    FedSam,
    FedAsam,
}

fn d_lr0() -> f64 {
    0.1
}
fn d_decay() -> f64 {
    0.998
}
fn d_epochs() -> usize {
    5
}
fn d_batch() -> usize {
    50
}
fn d_clip() -> f64 {
    10.0
}
fn d_alpha() -> f64 {
    0.01
}
fn d_sam_rho() -> f64 {
    0.05
}
fn d_asam_rho() -> f64 {
    0.5
}
fn d_asam_eta() -> f64 {
    0.2
}
fn d_participation() -> f64 {
    0.1
}

/// Training hyperparameters. Defaults are the CIFAR-100 settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_decay")]
    pub lr_decay_per_round: f64,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_clip")]
    pub clip_threshold: f64,
    #[serde(default = "d_alpha")]
    pub feddyn_alpha: f64,
    /// Weight of the drift penalty in FedDC's local objective.
    #[serde(default = "d_alpha")]
    pub feddc_alpha: f64,
    #[serde(default = "d_sam_rho")]
    pub sam_rho: f64,
    #[serde(default = "d_asam_rho")]
    pub asam_rho: f64,
    #[serde(default = "d_asam_eta")]
    pub asam_eta: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_participation")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub rounds: usize,
    /// Weight client models by shard size instead of a plain mean.
    #[serde(default)]
    pub weighted_aggregation: bool,
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        AlgoConfig {
            algorithm,
            reg: RegConfig::default(),
            lr0: d_lr0(),
            lr_decay_per_round: d_decay(),
            local_epochs: d_epochs(),
            batch_size: d_batch(),
            clip_threshold: d_clip(),
            feddyn_alpha: d_alpha(),
            feddc_alpha: d_alpha(),
            sam_rho: d_sam_rho(),
            asam_rho: d_asam_rho(),
            asam_eta: d_asam_eta(),
            weight_decay: 0.0,
            participation_fraction: d_participation(),
            rounds: 0,
            weighted_aggregation: false,
        }
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr0 * self.lr_decay_per_round.powi(round as i32)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay_per_round > 0.0 && self.lr_decay_per_round <= 1.0) {
            return err(format!("lr_decay_per_round must be in (0, 1], got {}", self.lr_decay_per_round));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return err(format!(
                "participation_fraction must be in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.clip_threshold > 0.0) {
            return err(format!("clip_threshold must be positive, got {}", self.clip_threshold));
        }
        if !(self.reg.zeta >= 0.0 && self.reg.zeta.is_finite()) {
            return err(format!("zeta must be non-negative, got {}", self.reg.zeta));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        match self.algorithm {
            Algorithm::FedDyn if !(self.feddyn_alpha > 0.0) => {
                err(format!("feddyn_alpha must be positive, got {}", self.feddyn_alpha))
            }
            Algorithm::FedDc if !(self.feddc_alpha >= 0.0) => {
                err(format!("feddc_alpha must be non-negative, got {}", self.feddc_alpha))
            }
            Algorithm::FedSam if !(self.sam_rho > 0.0) => err(format!("sam_rho must be positive, got {}", self.sam_rho)),
            Algorithm::FedAsam if !(self.asam_rho > 0.0 && self.asam_eta >= 0.0) => err(format!(
                "asam_rho must be positive and asam_eta non-negative, got {} and {}",
                self.asam_rho, self.asam_eta
            )),
            _ => Ok(()),
        }
    }
}

/// Per-client data and persistent correction terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    /// FedDyn linear correction, starts at zero.
    pub grad_correction: Vec<f64>,
    /// FedDC local drift, starts at zero.
    pub drift: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, dim: usize) -> Self {
        ClientState {
            id,
            indices,
            grad_correction: vec![0.0; dim],
            drift: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub params: Vec<f64>,
    /// Number of completed rounds.
    pub round: usize,
    /// FedDyn server accumulator, starts at zero.
    pub feddyn_h: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Objective (CE + zeta * penalty) of the new global model on the union
    /// of client shards.
    pub train_loss: f64,
    pub ce_term: f64,
    pub man_term: f64,
    pub accuracy: f64,
    /// Norm of the full-shard objective gradient at the new global model.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// The stream a client uses for shuffling in a given round.
pub fn client_stream(seed: u64, round: usize, client: usize) -> Rng {
    Rng::new(seed).stream(&[label::ROUND, round as u64, label::CLIENT, client as u64])
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` to norm `threshold` when it is longer. Returns the norm
/// before clipping.
pub fn clip_gradient(g: &mut [f64], threshold: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > threshold {
        let s = threshold / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    norm
}

/// Gradient at the sharpness-aware perturbed point. SAM ascends along
/// `rho * g / |g|`; ASAM (`asam_eta` set) scales by `T = |w| + eta` and
/// ascends along `rho * T^2 g / |T g|`. A zero gradient is returned as is.
pub fn sam_perturbed_gradient<P: Program + ?Sized>(
    program: &P,
    w: &[f64],
    batch: &P::Batch,
    rho: f64,
    asam_eta: Option<f64>,
) -> Result<Vec<f64>, AutodiffError> {
    let g = grad(program, w, batch)?;
    let perturbed: Vec<f64> = match asam_eta {
        None => {
            let n = l2_norm(&g);
            if n == 0.0 {
                return Ok(g);
            }
            w.iter().zip(&g).map(|(wi, gi)| wi + rho * gi / n).collect()
        }
        Some(eta) => {
            let t: Vec<f64> = w.iter().map(|wi| wi.abs() + eta).collect();
            let n = g.iter().zip(&t).map(|(gi, ti)| (ti * gi).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Ok(g);
            }
            w.iter()
                .zip(&g)
                .zip(&t)
                .map(|((wi, gi), ti)| wi + rho * ti * ti * gi / n)
                .collect()
        }
    };
    grad(program, &perturbed, batch)
}

/// Everything a local update needs besides the client itself.
#[derive(Debug, Clone, Copy)]
pub struct LocalContext<'a> {
    pub spec: &'a ModelSpec,
    pub layout: &'a Layout,
    pub algo: &'a AlgoConfig,
    pub data: &'a Dataset,
}

impl LocalContext<'_> {
    pub fn objective(&self) -> ClientObjective<'_> {
        ClientObjective::new(self.spec, self.layout, self.algo.reg)
    }
}

/// Gradient of the client objective for one mini-batch under the
/// configured algorithm, before clipping.
fn step_gradient(
    ctx: &LocalContext,
    w: &[f64],
    w_start: &[f64],
    client: &ClientState,
    batch: &Batch,
) -> Result<Vec<f64>, AutodiffError> {
    let algo = ctx.algo;
    let obj = ctx.objective();
    let mut g = match algo.algorithm {
        Algorithm::FedSam => sam_perturbed_gradient(&obj, w, batch, algo.sam_rho, None)?,
        Algorithm::FedAsam => sam_perturbed_gradient(&obj, w, batch, algo.asam_rho, Some(algo.asam_eta))?,
        _ => grad(&obj, w, batch)?,
    };
    match algo.algorithm {
        Algorithm::FedDyn => {
            let a = algo.feddyn_alpha;
            for i in 0..g.len() {
                g[i] += a * (w[i] - w_start[i]) - client.grad_correction[i];
            }
        }
        Algorithm::FedDc if algo.feddc_alpha != 0.0 => {
            let a = algo.feddc_alpha;
            for i in 0..g.len() {
                g[i] += a * (w[i] + client.drift[i] - w_start[i]);
            }
        }
        _ => {}
    }
    if algo.weight_decay != 0.0 {
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi += algo.weight_decay * wi;
        }
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(AutodiffError::NonFinite {
            layer: ctx.layout.layer_of(i),
            what: format!("gradient entry {i}"),
        });
    }
    Ok(g)
}

/// Runs `local_epochs` passes of shuffled mini-batch SGD from `w_start`
/// on the client's shard, with per-step norm clipping and learning rate
/// `lr0 * decay^round`. The last batch of an epoch may be smaller.
pub fn local_sgd_update(
    ctx: &LocalContext,
    w_start: &[f64],
    client: &ClientState,
    round: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, AutodiffError> {
    if client.indices.is_empty() {
        return Err(AutodiffError::EmptyBatch);
    }
    let lr = ctx.algo.lr_at(round);
    let mut w = w_start.to_vec();
    let mut order = client.indices.clone();
    for _ in 0..ctx.algo.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(ctx.algo.batch_size) {
            let batch = ctx.data.batch(chunk);
            let mut g = step_gradient(ctx, &w, w_start, client, &batch)?;
            clip_gradient(&mut g, ctx.algo.clip_threshold);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
        }
    }
    Ok(w)
}

/// Elementwise mean, summed in the given order.
pub fn aggregate_mean(models: &[&[f64]]) -> Result<Vec<f64>, FedError> {
    aggregate_weighted(models, None)
}

/// Mean weighted by `weights` (normalized), or plain mean when `None`.
pub fn aggregate_weighted(models: &[&[f64]], weights: Option<&[f64]>) -> Result<Vec<f64>, FedError> {
    let Some(first) = models.first() else {
        return Err(FedError::Shape("no models to aggregate".into()));
    };
    let d = first.len();
    if let Some(m) = models.iter().find(|m| m.len() != d) {
        return Err(FedError::Shape(format!("model of dimension {} among dimension {d}", m.len())));
    }
    match weights {
        None => {
            let mut sum = first.to_vec();
            for m in &models[1..] {
                for (s, x) in sum.iter_mut().zip(m.iter()) {
                    *s += x;
                }
            }
            let k = models.len() as f64;
            Ok(sum.into_iter().map(|s| s / k).collect())
        }
        Some(w) => {
            if w.len() != models.len() {
                return Err(FedError::Shape("weight count differs from model count".into()));
            }
            let total: f64 = w.iter().sum();
            let mut out = vec![0.0; d];
            for (m, wk) in models.iter().zip(w) {
                for (o, x) in out.iter_mut().zip(m.iter()) {
                    *o += wk / total * x;
                }
            }
            Ok(out)
        }
    }
}

/// Fraction of samples whose argmax logit (lowest index on ties) equals the
/// label.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64, AutodiffError> {
    let n = data.len();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(512) {
        let batch = data.batch(chunk);
        let (logits, _) = forward(spec, params, &batch.inputs, false).map_err(model_error)?;
        let c = spec.num_classes;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Number of clients drawn per round: `ceil(fraction * n)`, at least one.
pub fn clients_per_round(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Draws the round's participants without replacement, sorted ascending.
pub fn sample_clients(n: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let k = clients_per_round(fraction, n);
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// A full simulation: server, clients, data and algorithm.
#[derive(Debug, Clone)]
pub struct Federation {
    spec: ModelSpec,
    layout: Layout,
    algo: AlgoConfig,
    train: Dataset,
    test: Option<Dataset>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    parallel: bool,
    union: Vec<usize>,
}

impl Federation {
    pub fn new(
        spec: ModelSpec,
        algo: AlgoConfig,
        train: Dataset,
        test: Option<Dataset>,
        plan: &PartitionPlan,
        init: Vec<f64>,
        seed: u64,
    ) -> Result<Self, FedError> {
        algo.validate()?;
        let layout = spec.layout().map_err(|e| ConfigError(e.to_string()))?;
        if init.len() != layout.dim {
            return Err(FedError::Shape(format!(
                "initial parameters have dimension {}, model needs {}",
                init.len(),
                layout.dim
            )));
        }
        if train.sample_shape() != spec.input_shape.as_slice() {
            return Err(FedError::Shape(format!(
                "data samples {:?} do not match model input {:?}",
                train.sample_shape(),
                spec.input_shape
            )));
        }
        plan.validate(train.len()).map_err(|e| ConfigError(e.to_string()))?;
        if plan.assignments.iter().any(|a| a.is_empty()) {
            return Err(ConfigError("every client needs at least one sample".into()).into());
        }
        let clients: Vec<ClientState> = plan
            .assignments
            .iter()
            .enumerate()
            .map(|(k, idx)| ClientState::new(k, idx.clone(), layout.dim))
            .collect();
        let mut union: Vec<usize> = plan.assignments.concat();
        union.sort_unstable();
        let dim = layout.dim;
        Ok(Federation {
            spec,
            layout,
            algo,
            train,
            test,
            clients,
            server: ServerState {
                params: init,
                round: 0,
                feddyn_h: vec![0.0; dim],
                seed,
            },
            parallel: false,
            union,
        })
    }

    /// Run selected clients on the rayon pool. Results do not depend on it.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn algo(&self) -> &AlgoConfig {
        &self.algo
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> Option<&Dataset> {
        self.test.as_ref()
    }

    pub fn global(&self) -> &[f64] {
        &self.server.params
    }

    pub fn global_params(&self) -> ParamVector {
        ParamVector {
            values: self.server.params.clone(),
            layout: self.layout.clone(),
        }
    }

    /// All samples held by some client, in index order.
    pub fn train_batch(&self) -> Batch {
        self.train.batch(&self.union)
    }

    pub fn objective(&self) -> ClientObjective<'_> {
        ClientObjective::new(&self.spec, &self.layout, self.algo.reg)
    }

    /// One communication round.
    pub fn run_round(&mut self) -> Result<RoundRecord, FedError> {
        let started = Instant::now();
        let t = self.server.round;
        let seed = self.server.seed;
        let mut sample_rng = Rng::new(seed).stream(&[label::ROUND, t as u64, label::SAMPLE]);
        let selected = sample_clients(self.clients.len(), self.algo.participation_fraction, &mut sample_rng);

        let ctx = LocalContext {
            spec: &self.spec,
            layout: &self.layout,
            algo: &self.algo,
            data: &self.train,
        };
        let w_start = &self.server.params;
        let clients = &self.clients;
        let run_one = |&k: &usize| -> Result<Vec<f64>, FedError> {
            let mut rng = client_stream(seed, t, k);
            local_sgd_update(&ctx, w_start, &clients[k], t, &mut rng).map_err(|source| FedError::Client {
                round: t,
                client: Some(k),
                source,
            })
        };
        let results: Vec<Vec<f64>> = if self.parallel {
            selected.par_iter().map(run_one).collect::<Result<_, _>>()?
        } else {
            selected.iter().map(run_one).collect::<Result<_, _>>()?
        };

        let w_prev = self.server.params.clone();
        let n_total = self.clients.len() as f64;
        let weights: Option<Vec<f64>> = self
            .algo
            .weighted_aggregation
            .then(|| selected.iter().map(|&k| self.clients[k].indices.len() as f64).collect());
        let new_params = match self.algo.algorithm {
            Algorithm::FedDyn => {
                let a = self.algo.feddyn_alpha;
                for (&k, wk) in selected.iter().zip(&results) {
                    let c = &mut self.clients[k].grad_correction;
                    for i in 0..c.len() {
                        c[i] -= a * (wk[i] - w_prev[i]);
                    }
                }
                let h = &mut self.server.feddyn_h;
                for wk in &results {
                    for i in 0..h.len() {
                        h[i] -= a / n_total * (wk[i] - w_prev[i]);
                    }
                }
                let refs: Vec<&[f64]> = results.iter().map(Vec::as_slice).collect();
                let mean = aggregate_weighted(&refs, weights.as_deref())?;
                mean.iter().zip(&self.server.feddyn_h).map(|(m, hi)| m - hi / a).collect()
            }
            Algorithm::FedDc => {
                let mut shifted = Vec::with_capacity(results.len());
                for (&k, wk) in selected.iter().zip(&results) {
                    let h = &mut self.clients[k].drift;
                    for i in 0..h.len() {
                        h[i] += wk[i] - w_prev[i];
                    }
                    shifted.push(wk.iter().zip(h.iter()).map(|(w, h)| w + h).collect::<Vec<f64>>());
                }
                let refs: Vec<&[f64]> = shifted.iter().map(Vec::as_slice).collect();
                aggregate_weighted(&refs, weights.as_deref())?
            }
            _ => {
                let refs: Vec<&[f64]> = results.iter().map(Vec::as_slice).collect();
                aggregate_weighted(&refs, weights.as_deref())?
            }
        };
        if let Some(i) = new_params.iter().position(|x| !x.is_finite()) {
            return Err(FedError::Client {
                round: t,
                client: None,
                source: AutodiffError::NonFinite {
                    layer: self.layout.layer_of(i),
                    what: format!("aggregated parameter {i}"),
                },
            });
        }
        self.server.params = new_params;
        self.server.round += 1;

        let ctx_err = |source| FedError::Client {
            round: t,
            client: None,
            source,
        };
        let batch = self.train_batch();
        let obj = self.objective();
        let terms = obj.terms(&self.server.params, &batch).map_err(ctx_err)?;
        let grad_norm = l2_norm(&grad(&obj, &self.server.params, &batch).map_err(ctx_err)?);
        let accuracy = match &self.test {
            Some(test) => evaluate(&self.spec, &self.global_params(), test).map_err(ctx_err)?,
            None => f64::NAN,
        };
        Ok(RoundRecord {
            round: t,
            selected,
            train_loss: terms.total,
            ce_term: terms.ce,
            man_term: terms.man,
            accuracy,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `rounds` rounds and returns their records.
    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundRecord>, FedError> {
        (0..rounds).map(|_| self.run_round()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::programs::Quadratic;
    use crate::data::{iid_partition, synth_mixture};
    use crate::model::build;

    fn setup(algo: AlgoConfig, clients: usize) -> Federation {
        let train = synth_mixture(3, 4, 20, 0.5, &mut Rng::new(1)).unwrap();
        let test = synth_mixture(3, 4, 10, 0.5, &mut Rng::new(2)).unwrap();
        let plan = iid_partition(train.len(), clients, train.len() / clients, &mut Rng::new(3)).unwrap();
        let spec = ModelSpec::mlp(&[4, 6, 3]);
        let init = build(&spec, &mut Rng::new(4)).unwrap().values;
        Federation::new(spec, algo, train, Some(test), &plan, init, 42).unwrap()
    }

    fn quick(algorithm: Algorithm) -> AlgoConfig {
        AlgoConfig {
            local_epochs: 1,
            batch_size: 8,
            participation_fraction: 0.5,
            ..AlgoConfig::new(algorithm)
        }
    }

    #[test]
    fn sam_on_scalar_quadratic() {
        let q = Quadratic::diagonal(&[2.0]);
        let g = sam_perturbed_gradient(&q, &[1.0], &(), 0.1, None).unwrap();
        assert!((g[0] - 2.0 * 1.1).abs() < 1e-15);
        let unit = Quadratic::diagonal(&[1.0]);
        let g = sam_perturbed_gradient(&unit, &[1.0], &(), 1e-9, None).unwrap();
        assert!((g[0] - 1.0).abs() <= 1e-9 + 1e-16);
        let g = sam_perturbed_gradient(&q, &[0.0], &(), 0.1, None).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn asam_with_large_eta_follows_sam() {
        let q = Quadratic::diagonal(&[1.0, 3.0, 0.5]);
        let w = [0.3, -0.2, 0.7];
        let eta = 1e8;
        let sam = sam_perturbed_gradient(&q, &w, &(), 0.05, None).unwrap();
        // T = eta uniformly, so the ASAM step equals SAM with radius rho * eta
        let asam = sam_perturbed_gradient(&q, &w, &(), 0.05 / eta, Some(eta)).unwrap();
        for (a, b) in sam.iter().zip(&asam) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_gradient(&mut g, 1.0), 5.0);
        assert!(l2_norm(&g) <= 1.0 + 1e-12);
        let mut small = vec![0.1, 0.1];
        clip_gradient(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_mean(&[&[0.0, 2.0], &[2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
        let v = [0.3, -1.7, 2.5];
        assert_eq!(aggregate_mean(&[&v, &v, &v]).unwrap(), v.to_vec());
        assert!(aggregate_mean(&[&[1.0], &[1.0, 2.0]]).is_err());
        assert!(aggregate_mean(&[]).is_err());
        let w = aggregate_weighted(&[&[0.0], &[3.0]], Some(&[1.0, 2.0])).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_size_and_order() {
        assert_eq!(clients_per_round(0.1, 100), 10);
        assert_eq!(clients_per_round(0.15, 10), 2);
        assert_eq!(clients_per_round(0.01, 5), 1);
        let s = sample_clients(20, 0.5, &mut Rng::new(0));
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_epochs_and_zero_lr_keep_start() {
        let fed = setup(quick(Algorithm::FedAvg), 2);
        for algo in [
            AlgoConfig { local_epochs: 0, ..quick(Algorithm::FedAvg) },
            AlgoConfig { lr0: 0.0, ..quick(Algorithm::FedSam) },
        ] {
            let ctx = LocalContext {
                spec: fed.spec(),
                layout: fed.layout(),
                algo: &algo,
                data: fed.train(),
            };
            let w = local_sgd_update(&ctx, fed.global(), &fed.clients[0], 0, &mut Rng::new(1)).unwrap();
            assert_eq!(w, fed.global());
        }
    }

    #[test]
    fn feddyn_requires_positive_alpha() {
        let algo = AlgoConfig {
            feddyn_alpha: 0.0,
            ..AlgoConfig::new(Algorithm::FedDyn)
        };
        assert!(algo.validate().is_err());
    }

    #[test]
    fn rounds_are_reproducible_and_parallel_safe() {
        for algorithm in [Algorithm::FedAvg, Algorithm::FedDyn, Algorithm::FedDc, Algorithm::FedAsam] {
            let mut a = setup(quick(algorithm), 4);
            let mut b = setup(quick(algorithm), 4);
            b.set_parallel(true);
            for _ in 0..2 {
                let ra = a.run_round().unwrap();
                let rb = b.run_round().unwrap();
                assert_eq!(ra.selected, rb.selected);
                assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            }
            assert_eq!(a.global(), b.global());
        }
    }

    #[test]
    fn uniform_model_accuracy_is_class_zero_share() {
        let fed = setup(quick(Algorithm::FedAvg), 2);
        let zero = ParamVector::zeros(fed.spec()).unwrap();
        let test = fed.test().unwrap();
        let share = test.labels().iter().filter(|&&y| y == 0).count() as f64 / test.len() as f64;
        assert_eq!(evaluate(fed.spec(), &zero, test).unwrap(), share);
    }
}
