//! 1-vs-All cross-entropy training with sparse Adagrad.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CategoryMap, FilterIndex, Triple, TripleStore};
use crate::error::{KgError, Result};
use crate::eval::{self, TiePolicy};
use crate::grad::{GradBlock, Gradients};
use crate::model::{ModelKind, ModelParams};
use crate::regularizer::{EpsilonState, Regularizer, RegularizerKind, RegularizerSpec};
use crate::rng;

/// Loss `logsumexp(scores) - scores[target]` and its gradient
/// `softmax(scores) - one_hot(target)`.
pub fn cross_entropy_loss(scores: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut grad = scores.to_vec();
    let loss = cross_entropy_in_place(&mut grad, target);
    (loss, grad)
}

/// Overwrites `scores` with the cross-entropy gradient and returns the loss.
pub fn cross_entropy_in_place(scores: &mut [f64], target: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_target = scores[target] - max;
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        z += *s;
    }
    let loss = z.ln() - shifted_target;
    for s in scores.iter_mut() {
        *s /= z;
    }
    scores[target] -= 1.0;
    loss
}

/// One Adagrad step: `acc += g²`, `param -= lr · g / (√acc + eps)`.
pub fn adagrad_update(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, eps: f64) -> Result<()> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(KgError::NonFinite(format!("gradient coordinate {i} is {}", grad[i])));
    }
    for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub regularizer: RegularizerSpec,
    /// Evaluate on the validation split every this many epochs (0 disables).
    pub eval_every: usize,
    pub adagrad_eps: f64,
    /// Stop after this many evaluations without a new best valid MRR.
    pub early_stopping_patience: Option<usize>,
    pub tie_policy: TiePolicy,
    /// Worker threads for the loss gradient; above 1 the summation order
    /// changes, so results match single-threaded runs only to rounding.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::ComplEx,
            dim: 32,
            batch_size: 100,
            learning_rate: 0.1,
            epochs: 50,
            seed: 0,
            regularizer: RegularizerSpec::default(),
            eval_every: 0,
            adagrad_eps: 1e-10,
            early_stopping_patience: None,
            tie_policy: TiePolicy::Mean,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KgError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(KgError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(KgError::Config("batch_size must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(KgError::Config("dim must be >= 1".into()));
        }
        if !(self.adagrad_eps > 0.0) {
            return Err(KgError::Config("adagrad_eps must be > 0".into()));
        }
        if self.threads == 0 {
            return Err(KgError::Config("threads must be >= 1".into()));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(KgError::Config("early_stopping_patience must be >= 1".into()));
        }
        self.regularizer.validate()?;
        self.regularizer.check_model(self.model)
    }
}

/// Per-parameter-block squared-gradient sums.
#[derive(Clone, Debug)]
pub struct AdagradState {
    pub accumulators: Vec<Vec<f64>>,
}

impl AdagradState {
    pub fn new(params: &ModelParams) -> Self {
        AdagradState {
            accumulators: params.blocks().iter().map(|&b| vec![0.0; params.block(b).len()]).collect(),
        }
    }

    /// Updates only the rows touched in `grads`; everything else, including
    /// accumulators, stays as is. Checks all gradients before changing anything.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        eps_state: Option<&mut EpsilonState>,
        lr: f64,
        adagrad_eps: f64,
    ) -> Result<()> {
        let blocks = params.blocks();
        for &b in &blocks {
            check_finite(grads.block(b), b)?;
        }
        if eps_state.is_some() {
            check_finite(&grads.epsilon, "epsilon")?;
        }
        for (&b, acc) in blocks.iter().zip(&mut self.accumulators) {
            let g = grads.block(b);
            let w = g.width();
            let data = params.block_mut(b);
            for &row in g.touched_rows() {
                let range = row * w..(row + 1) * w;
                adagrad_update(&mut data[range.clone()], g.row_or_zero(row), &mut acc[range], lr, adagrad_eps)?;
            }
        }
        if let Some(state) = eps_state {
            for &r in grads.epsilon.touched_rows() {
                let mut v = [state.get(r).unwrap_or(0.0)];
                adagrad_update(
                    &mut v,
                    grads.epsilon.row_or_zero(r),
                    &mut state.accumulators[r..r + 1],
                    lr,
                    adagrad_eps,
                )?;
                state.set(r, v[0]);
            }
        }
        Ok(())
    }
}

fn check_finite(g: &GradBlock, what: impl std::fmt::Debug) -> Result<()> {
    for &row in g.touched_rows() {
        if g.row_or_zero(row).iter().any(|v| !v.is_finite()) {
            return Err(KgError::NonFinite(format!("gradient of {what:?} row {row}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub regularizer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid: Option<ValidMetrics>,
    /// Excluded from serialization so that history files are reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Valid MRR of the last evaluated epoch.
    pub fn final_valid_mrr(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.valid.as_ref().map(|v| v.mrr))
    }

    pub fn best_valid_mrr(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.valid.as_ref().map(|v| v.mrr)).reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Learned ER thresholds, present only when an active ER regularizer ran.
    pub epsilon: Option<EpsilonState>,
    pub history: TrainHistory,
}

/// Cross-entropy over all tails for each triple in `chunk`, accumulating
/// `scale · ∂loss` into `grads`. Returns the summed loss.
fn loss_and_grads(params: &ModelParams, chunk: &[Triple], scale: f64, grads: &mut Gradients) -> Result<f64> {
    let mut scores = vec![0.0; params.n_entities()];
    let mut q = vec![0.0; params.dim()];
    let mut total = 0.0;
    for t in chunk {
        params.query_into(t.head, t.relation, &mut q);
        params.scores_from_query(&q, &mut scores);
        let loss = cross_entropy_in_place(&mut scores, t.tail);
        if !loss.is_finite() {
            return Err(KgError::NonFinite(format!("loss {loss} on triple {t:?}")));
        }
        total += loss;
        for s in scores.iter_mut() {
            *s *= scale;
        }
        params.tails_backward(t.head, t.relation, &q, &scores, grads);
    }
    Ok(total)
}

/// Mean cross-entropy over `batch`, accumulating its gradient into `grads`.
pub fn batch_loss(params: &ModelParams, batch: &[Triple], grads: &mut Gradients) -> Result<f64> {
    if batch.is_empty() {
        return Err(KgError::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    Ok(loss_and_grads(params, batch, scale, grads)? * scale)
}

pub fn train(config: &TrainConfig, store: &TripleStore, categories: Option<&CategoryMap>) -> Result<TrainOutput> {
    config.validate()?;
    if store.train.is_empty() {
        return Err(KgError::Empty("training split"));
    }
    let mut params = ModelParams::init(
        config.model,
        store.n_entities(),
        store.n_relations(),
        config.dim,
        rng::derive(config.seed, &[0]),
    )?;
    let reg = Regularizer::new(config.regularizer.clone(), categories, &store.train);
    let uses_epsilon = reg.is_active() && config.regularizer.kind == RegularizerKind::Er;
    let mut epsilon = uses_epsilon.then(|| EpsilonState::new(store.n_relations()));
    // FRO/N3/DURA never touch thresholds
    let mut no_epsilon = EpsilonState::new(0);
    let mut optimizer = AdagradState::new(&params);
    let mut grads = Gradients::for_params(&params);
    let mut workers: Vec<Gradients> = (1..config.threads).map(|_| Gradients::for_params(&params)).collect();
    let filter = (config.eval_every > 0 && !store.valid.is_empty()).then(|| FilterIndex::build(store));
    let lambda = config.regularizer.lambda;

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..store.train.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(rng::derive(config.seed, &[1, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut n_batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| store.train[i]));
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let loss = if workers.is_empty() {
                loss_and_grads(&params, &batch, scale, &mut grads)?
            } else {
                parallel_loss(&params, &batch, scale, &mut grads, &mut workers)?
            } * scale;
            if !loss.is_finite() {
                return Err(KgError::NonFinite(format!("loss {loss} at epoch {epoch} batch {b}")));
            }
            let penalty = if reg.is_active() {
                let seed = rng::derive(config.seed, &[2, epoch as u64, b as u64]);
                let eps = epsilon.as_mut().unwrap_or(&mut no_epsilon);
                reg.apply(&params, &batch, eps, &mut grads, lambda, seed)?
            } else {
                0.0
            };
            if !penalty.is_finite() {
                return Err(KgError::NonFinite(format!("penalty {penalty} at epoch {epoch} batch {b}")));
            }
            optimizer
                .step(&mut params, &grads, epsilon.as_mut(), config.learning_rate, config.adagrad_eps)
                .map_err(|e| KgError::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
            params.project_constraints();
            loss_sum += loss;
            reg_sum += penalty;
            n_batches += 1;
        }

        let last = epoch + 1 == config.epochs;
        let valid = match &filter {
            Some(f) if (epoch + 1) % config.eval_every == 0 || last => {
                let r = eval::evaluate(&params, &store.valid, f, config.tie_policy)?;
                Some(ValidMetrics {
                    mrr: r.mrr,
                    hits1: r.hits1,
                    hits10: r.hits10,
                })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n_batches as f64,
            regularizer: reg_sum / n_batches as f64,
            valid,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        match &record.valid {
            Some(v) => info!(
                "epoch {} loss {:.5} reg {:.5} valid mrr {:.4}",
                record.epoch, record.train_loss, record.regularizer, v.mrr
            ),
            None => debug!("epoch {} loss {:.5} reg {:.5}", record.epoch, record.train_loss, record.regularizer),
        }
        let mrr = record.valid.as_ref().map(|v| v.mrr);
        history.records.push(record);
        if let (Some(patience), Some(mrr)) = (config.early_stopping_patience, mrr) {
            if mrr > best {
                best = mrr;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience && !last {
                    info!("early stop after epoch {}", epoch + 1);
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutput {
        params,
        epsilon,
        history,
    })
}

/// Splits the batch into contiguous chunks, one per thread, and merges the
/// per-chunk gradients into `grads` in chunk order.
fn parallel_loss(
    params: &ModelParams,
    batch: &[Triple],
    scale: f64,
    grads: &mut Gradients,
    workers: &mut [Gradients],
) -> Result<f64> {
    let n = workers.len() + 1;
    let chunk = batch.len().div_ceil(n);
    let mut parts = batch.chunks(chunk);
    let first = parts.next().unwrap_or(&[]);
    let rest: Vec<&[Triple]> = parts.collect();
    let results: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .zip(&rest)
            .map(|(g, part)| {
                s.spawn(move || {
                    g.clear();
                    loss_and_grads(params, part, scale, g)
                })
            })
            .collect();
        let mut out = vec![loss_and_grads(params, first, scale, grads)];
        out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        out
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    for g in workers.iter().take(rest.len()) {
        grads.add_from(g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::regularizer::ErMode;

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy_loss(&[0.0; 4], 1);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy_loss(&[100.0, 0.0, 0.0], 0);
        assert!(l < 1e-40);
        let (l, g) = cross_entropy_loss(&[1.0, 2.0, 3.0], 2);
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.40761).abs() < 1e-5);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn adagrad_examples() {
        let mut p = [1.0];
        let mut acc = [0.0];
        adagrad_update(&mut p, &[0.0], &mut acc, 0.1, 1e-10).unwrap();
        assert_eq!((p[0], acc[0]), (1.0, 0.0));
        adagrad_update(&mut p, &[2.0], &mut acc, 0.1, 1e-10).unwrap();
        assert_eq!(acc[0], 4.0);
        assert!((p[0] - 0.9).abs() < 1e-9);
        let mut q = [0.5];
        adagrad_update(&mut q, &[-3.0], &mut [0.0], 0.2, 0.0).unwrap();
        assert!((q[0] - 0.7).abs() < 1e-15);
        assert!(adagrad_update(&mut q, &[f64::NAN], &mut [0.0], 0.2, 0.0).is_err());
    }

    fn toy_store() -> TripleStore {
        let mut v = Vocab::new();
        for n in ["a", "b", "c"] {
            v.intern_entity(n);
        }
        v.intern_relation("r");
        TripleStore::new(vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)], vec![], vec![], v).unwrap()
    }

    fn initial_loss(config: &TrainConfig, store: &TripleStore) -> f64 {
        let p = ModelParams::init(config.model, 3, 1, config.dim, rng::derive(config.seed, &[0])).unwrap();
        let mut g = Gradients::for_params(&p);
        loss_and_grads(&p, &store.train, 0.5, &mut g).unwrap() * 0.5
    }

    #[test]
    fn one_epoch_lowers_loss() {
        let store = toy_store();
        for model in [ModelKind::ComplEx, ModelKind::DistMult, ModelKind::TransE] {
            let config = TrainConfig {
                model,
                dim: 4,
                batch_size: 2,
                epochs: 2,
                ..TrainConfig::default()
            };
            let out = train(&config, &store, None).unwrap();
            let before = initial_loss(&config, &store);
            let after = out.history.records[1].train_loss;
            assert!(after < before, "{model}: {before} -> {after}");
        }
    }

    #[test]
    fn zero_lambda_er_matches_none() {
        let store = toy_store();
        let base = TrainConfig {
            dim: 4,
            batch_size: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        let er = TrainConfig {
            regularizer: RegularizerSpec::er(0.0, ErMode::Joint),
            ..base.clone()
        };
        let a = train(&base, &store, None).unwrap();
        let b = train(&er, &store, None).unwrap();
        assert_eq!(
            crate::checkpoint::encode(&a.params, a.epsilon.as_ref()),
            crate::checkpoint::encode(&b.params, b.epsilon.as_ref())
        );
    }

    #[test]
    fn invalid_configs() {
        let store = toy_store();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&bad, &store, None), Err(KgError::Config(_))));
        }
    }

    #[test]
    fn accumulators_nondecreasing() {
        let p0 = ModelParams::init(ModelKind::DistMult, 3, 1, 2, 1).unwrap();
        let mut p = p0.clone();
        let mut state = AdagradState::new(&p);
        let store = toy_store();
        let mut prev = state.accumulators.clone();
        for _ in 0..5 {
            let mut g = Gradients::for_params(&p);
            loss_and_grads(&p, &store.train, 0.5, &mut g).unwrap();
            state.step(&mut p, &g, None, 0.1, 1e-10).unwrap();
            for (a, b) in state.accumulators.iter().flatten().zip(prev.iter().flatten()) {
                assert!(a >= b);
            }
            prev = state.accumulators.clone();
        }
    }
}
