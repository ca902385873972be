//! Minibatch training shared by every task.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TrainRng, Var};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::metrics::MetricMeans;
use crate::optim::{schedule_lr, Adam};
use crate::params::ParamStore;

/// A model trainable by [`fit`].
pub trait Task {
    type Example;

    /// Scalar loss of one example. Dropout is active when `rng` is given.
    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &Self::Example,
        rng: TrainRng<'_>,
    ) -> Result<Var>;

    fn evaluate(&self, store: &ParamStore, data: &[Self::Example]) -> Result<MetricMeans>;
}

/// Everything besides the parameters needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
}

impl TrainState {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            adam: Adam::new(store, cfg.adam),
            rng,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: u32,
    pub loss: f64,
    pub metrics: MetricMeans,
}

/// Mean loss over one pass, accumulating gradients into `store`.
fn run_batch<T: Task>(
    task: &T,
    store: &mut ParamStore,
    batch: &[&T::Example],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let r: TrainRng<'_> = match rng.as_deref_mut() {
            Some(r) => Some(r),
            None => None,
        };
        let loss = task.loss(&mut g, store, ex, r)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value}")));
        }
        total += value;
        let scaled = g.scale(loss, scale)?;
        let grads = g.backward(scaled)?;
        store.accumulate(&grads);
    }
    Ok(total * scale)
}

/// Trains from `state.epoch` up to `cfg.epochs`, logging one
/// `epoch=<e> loss=<v>` line and the evaluation metrics per epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit<T, F>(
    task: &T,
    store: &mut ParamStore,
    state: &mut TrainState,
    train: &[T::Example],
    test: &[T::Example],
    cfg: &RunConfig,
    log: &mut dyn Write,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    T: Task,
    F: FnMut(&ParamStore, &TrainState, &EpochReport) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let batches = train.len().div_ceil(cfg.batch_size);
    let mut reports = Vec::new();
    while (state.epoch as usize) < cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&T::Example> = chunk.iter().map(|&i| &train[i]).collect();
            store.zero_grad();
            let rng = cfg.dropout.then_some(&mut state.rng);
            loss_sum += run_batch(task, store, &batch, rng)? * batch.len() as f64;
            let lr = schedule_lr(
                &cfg.schedule,
                state.epoch as f64 + b as f64 / batches as f64,
            );
            state.adam.step(store, lr)?;
        }
        store.zero_grad();
        state.epoch += 1;
        let report = EpochReport {
            epoch: state.epoch,
            loss: loss_sum / train.len() as f64,
            metrics: task.evaluate(store, test)?,
        };
        writeln!(log, "epoch={} loss={}", report.epoch, report.loss)?;
        write!(log, "{}", report.metrics.report())?;
        on_epoch(store, state, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
