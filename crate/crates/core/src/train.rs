//! 1-N training: label smoothing, binary cross-entropy over all entities,
//! Adam with bias correction and exponential learning-rate decay.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, FilterIndex, Split, Triple};
use crate::error::{Error, Result};
use crate::eval::{self, TiePolicy};
use crate::model::{self, Gradients, ModelConfig, ModelParams, Query, TRAINABLE};
use crate::tensor::{self, Matrix, Mode, RunningStats};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Compute validation MRR every this many epochs; 0 disables validation.
    pub valid_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_decay: 0.995,
            batch_size: 128,
            epochs: 500,
            label_smoothing: 0.1,
            seed: 0,
            valid_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay {} not in (0, 1]",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        check_smoothing(self.label_smoothing)
    }
}

fn check_smoothing(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "label smoothing {eps} not in [0, 1)"
        )));
    }
    Ok(())
}

/// `(1 - ε) · y + ε / n`.
pub fn smooth_labels(y: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_smoothing(epsilon)?;
    let prior = epsilon / y.len() as f64;
    Ok(y.iter().map(|&v| (1.0 - epsilon) * v + prior).collect())
}

/// Groups training triples by `(head, relation)` in first-seen order.
pub fn group_queries(triples: &[Triple]) -> Vec<Query> {
    let mut seen = std::collections::HashSet::new();
    triples
        .iter()
        .map(|t| (t.head, t.relation))
        .filter(|q| seen.insert(*q))
        .collect()
}

/// Multi-hot 1-N targets: row `b` has a one at every tail known for query `b`.
pub fn build_targets(queries: &[Query], known: &FilterIndex, num_entities: usize) -> Matrix {
    let mut y = Matrix::zeros(queries.len(), num_entities);
    for (b, &(h, r)) in queries.iter().enumerate() {
        for &t in known.tails(h, r) {
            y[(b, t)] = 1.0;
        }
    }
    y
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Step {
    /// Mean over rows of the per-row mean BCE.
    pub loss: f64,
    pub grads: Gradients,
    pub running_stats: Option<[RunningStats; 3]>,
}

/// Loss and gradients for a batch of queries against (already smoothed)
/// targets. Dropout masks sampled in the forward pass are reused in the
/// backward pass, so the gradient is exact for the sampled network.
pub fn forward_backward(
    params: &ModelParams,
    config: &ModelConfig,
    queries: &[Query],
    targets: &Matrix,
    mode: Mode,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Step> {
    if queries.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if targets.shape() != (queries.len(), params.num_entities()) {
        return Err(Error::Shape(format!(
            "targets {:?} for {} queries over {} entities",
            targets.shape(),
            queries.len(),
            params.num_entities()
        )));
    }
    let fwd = model::forward(params, config, queries, mode, rng)?;
    let rows = queries.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(queries.len(), params.num_entities());
    for b in 0..queries.len() {
        let (l, g) = tensor::bce_with_logits(fwd.scores.row(b), targets.row(b))?;
        loss += l;
        for (o, g) in grad.row_mut(b).iter_mut().zip(g) {
            *o = g / rows;
        }
    }
    let grads = model::backward(params, config, &fwd.cache, &grad)?;
    Ok(Step {
        loss: loss / rows,
        grads,
        running_stats: fwd.running_stats,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment accumulators for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = TRAINABLE
            .iter()
            .map(|name| {
                params
                    .tensors()
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .map_or(0, |(_, _, d)| d.len())
            })
            .collect();
        Self::new(&sizes)
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Shape(format!("adam tensor {i} shape mismatch")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to every trainable tensor of `params`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut Adam,
    lr: f64,
) -> Result<()> {
    let mut slots = params.trainable_mut();
    state.step(&mut slots, &grads.slots(), lr)
}

/// `learning_rate · lr_decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.learning_rate * config.lr_decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub valid_mrr: Option<f64>,
    pub wall_clock: Duration,
}

impl EpochRecord {
    /// Tab-separated log line: epoch, lr, mean loss and, when computed,
    /// validation MRR. Wall-clock time is left out so logs are reproducible.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:.8e}\t{:.10}", self.epoch, self.lr, self.mean_loss);
        if let Some(m) = self.valid_mrr {
            s.push_str(&format!("\t{m:.6}"));
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn log(&self) -> String {
        self.epochs.iter().map(|e| e.log_line() + "\n").collect()
    }

    /// Everything but wall-clock time, for determinism comparisons.
    pub fn same_run_as(&self, other: &TrainReport) -> bool {
        self.log() == other.log()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub report: TrainReport,
    /// Parameters at the epoch with the highest validation MRR.
    pub best: Option<BestEpoch>,
}

#[derive(Debug, Clone)]
pub struct BestEpoch {
    pub epoch: usize,
    pub valid_mrr: f64,
    pub params: ModelParams,
}

/// Splits a shuffled epoch into 1-N batches, each deduplicated to distinct
/// `(head, relation)` queries. With batch norm a batch needs at least two
/// queries, so a short batch is folded into its predecessor.
fn epoch_batches(triples: &[Triple], batch_size: usize, min_rows: usize) -> Vec<Vec<Query>> {
    let mut batches: Vec<Vec<Query>> = Vec::new();
    for chunk in triples.chunks(batch_size) {
        let q = group_queries(chunk);
        match batches.last_mut() {
            Some(prev) if q.len() < min_rows || prev.len() < min_rows => merge_into(prev, &q),
            _ => batches.push(q),
        }
    }
    batches
}

fn merge_into(batch: &mut Vec<Query>, extra: &[Query]) {
    for q in extra {
        if !batch.contains(q) {
            batch.push(*q);
        }
    }
}

/// Trains from a fresh seeded initialization.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(dataset, model_config, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after each completed epoch.
pub fn train_with(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    config.validate()?;
    if !dataset.reciprocal_added() {
        return Err(Error::State(
            "training expects reciprocal relations to be added".into(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::Logic("training split is empty".into()));
    }
    let n_e = dataset.num_entities();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model::init_params(model_config, n_e, dataset.num_relations(), &mut rng)?;
    let mut adam = Adam::for_params(&params);
    let known = FilterIndex::from_triples(&dataset.train);
    let filter = FilterIndex::build(dataset);
    let min_rows = if model_config.batchnorm { 2 } else { 1 };
    if group_queries(&dataset.train).len() < min_rows {
        return Err(Error::Shape(
            "batch norm needs at least two distinct training queries".into(),
        ));
    }

    let mut order = dataset.train.clone();
    let mut report = TrainReport::default();
    let mut best: Option<BestEpoch> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for queries in epoch_batches(&order, config.batch_size, min_rows) {
            let hard = build_targets(&queries, &known, n_e);
            let mut targets = Matrix::zeros(queries.len(), n_e);
            for b in 0..queries.len() {
                let s = smooth_labels(hard.row(b), config.label_smoothing)?;
                targets.row_mut(b).copy_from_slice(&s);
            }
            let step = forward_backward(
                &params,
                model_config,
                &queries,
                &targets,
                Mode::Train,
                Some(&mut rng),
            )?;
            if !step.loss.is_finite() || !step.grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss or gradient at epoch {epoch}"
                )));
            }
            adam_step(&mut params, &step.grads, &mut adam, lr)?;
            if let Some(stats) = step.running_stats {
                params.apply_running_stats(stats);
            }
            loss_sum += step.loss;
            batches += 1;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let valid_mrr = if config.valid_every > 0
            && !dataset.valid.is_empty()
            && ((epoch + 1) % config.valid_every == 0 || epoch + 1 == config.epochs)
        {
            let scorer = eval::ModelScorer::new(&params, model_config);
            let (r, _) = eval::evaluate(
                &scorer,
                dataset,
                Split::Valid,
                &filter,
                TiePolicy::Optimistic,
            )?;
            if best.as_ref().is_none_or(|b| r.mrr > b.valid_mrr) {
                best = Some(BestEpoch {
                    epoch,
                    valid_mrr: r.mrr,
                    params: params.clone(),
                });
            }
            Some(r.mrr)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / batches as f64,
            valid_mrr,
            wall_clock: start.elapsed(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(TrainOutcome {
        params,
        optimizer: adam,
        report,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_values() {
        let y = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(smooth_labels(&y, 0.0).unwrap(), y);
        assert_eq!(
            smooth_labels(&y, 0.1).unwrap(),
            vec![0.925, 0.025, 0.025, 0.025]
        );
        let multi = [1.0, 1.0, 0.0, 1.0, 0.0];
        let s: f64 = smooth_labels(&multi, 0.2).unwrap().iter().sum();
        assert!((s - (3.0 * 0.8 + 0.2)).abs() < 1e-12);
        assert!(smooth_labels(&y, 1.0).is_err());
        assert!(smooth_labels(&y, -0.1).is_err());
    }

    #[test]
    fn smoothing_bounds() {
        let y = [1.0, 0.0, 1.0];
        let eps = 0.3;
        for v in smooth_labels(&y, eps).unwrap() {
            assert!(v >= eps / 3.0 - 1e-15 && v <= 1.0 - eps + eps / 3.0 + 1e-15);
        }
    }

    #[test]
    fn targets_from_train() {
        let train = [
            Triple::new(0, 0, 1),
            Triple::new(0, 0, 2),
            Triple::new(1, 0, 0),
        ];
        let known = FilterIndex::from_triples(&train);
        let q = group_queries(&train);
        assert_eq!(q, vec![(0, 0), (1, 0)]);
        let y = build_targets(&q, &known, 3);
        assert_eq!(y.row(0), &[0.0, 1.0, 1.0]);
        assert_eq!(y.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!(adam.step(&mut [&mut p], &[&[1.0, 2.0]], 0.1).is_err());
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut adam = Adam::new(&[1]);
        let mut x = vec![1.0];
        let mut prev = x[0] * x[0];
        for _ in 0..10 {
            let g = 2.0 * x[0];
            adam.step(&mut [&mut x], &[&[g]], 0.05).unwrap();
            let f = x[0] * x[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let mut c = TrainConfig {
            learning_rate: 0.001,
            lr_decay: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c), lr_at(57, &c));
        c.lr_decay = 0.99;
        assert!((lr_at(2, &c) - 0.0009801).abs() < 1e-15);
        let seq: Vec<f64> = (0..20).map(|e| lr_at(e, &c)).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn short_batches_are_folded() {
        let triples: Vec<Triple> = (0..5).map(|i| Triple::new(i, 0, 0)).collect();
        let b = epoch_batches(&triples, 2, 2);
        assert_eq!(b, vec![vec![(0, 0), (1, 0)], vec![(2, 0), (3, 0), (4, 0)]]);
        let b = epoch_batches(&triples, 2, 1);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord {
            epoch: 3,
            lr: 0.001,
            mean_loss: 0.5,
            valid_mrr: Some(0.25),
            wall_clock: Duration::from_secs(1),
        };
        let line = r.log_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], "3");
        assert_eq!(fields[3], "0.250000");
    }
}
