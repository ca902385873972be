//! Planted counting task over the five views: how many views contain an
//! object of the queried class. Summing gated view vectors preserves the
//! count, a softmax-weighted average across views does not.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Linear;
use crate::autodiff::{Graph, TrainRng, Var};
use crate::error::Result;
use crate::fusion::xe_loss;
use crate::harness::config::RunConfig;
use crate::harness::instruct::{World, CLASSES, FEATURES, OBJECTS, VIEWS};
use crate::harness::train::{fit, Task, TrainState};
use crate::hierview::{argmax, HierarchicalAttention, ViewFusion};
use crate::metrics::MetricMeans;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CountExample {
    /// `K·N×F`, view-major.
    pub objects: Tensor,
    /// 1-based queried class.
    pub class: usize,
    pub count: usize,
}

pub fn generate(seed: u64, n: usize) -> Vec<CountExample> {
    let world = World::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let class = rng.random_range(1..=CLASSES);
            let count = rng.random_range(0..=VIEWS);
            let holders = sample(&mut rng, VIEWS, count).into_vec();
            let mut feats = Vec::with_capacity(VIEWS * OBJECTS * FEATURES);
            for k in 0..VIEWS {
                let slot = holders.contains(&k).then(|| rng.random_range(0..OBJECTS));
                for o in 0..OBJECTS {
                    let c = if Some(o) == slot {
                        class
                    } else {
                        let c = rng.random_range(1..CLASSES);
                        if c >= class {
                            c + 1
                        } else {
                            c
                        }
                    };
                    feats.extend(world.feature(c, k, &mut rng));
                }
            }
            CountExample {
                objects: Tensor::new(&[VIEWS * OBJECTS, FEATURES], feats)
                    .expect("consistent shape"),
                class,
                count,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CountModel {
    pub query: ParamId,
    pub objects: Linear,
    pub views: HierarchicalAttention,
    pub hidden: Linear,
    pub out: Linear,
}

impl CountModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        mode: ViewFusion,
        rng: &mut R,
    ) -> Self {
        let mut views = HierarchicalAttention::new(store, "count.views", VIEWS, d, rng);
        views.mode = mode;
        Self {
            query: store.add("count.query", Tensor::randn(&[CLASSES, d], 1.0, rng)),
            objects: Linear::new(store, "count.objects", FEATURES, d, rng),
            views,
            hidden: Linear::new(store, "count.hidden", 2 * d, d, rng),
            out: Linear::new(store, "count.out", d, VIEWS + 1, rng),
        }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, ex: &CountExample) -> Result<Var> {
        let table = g.param(store, self.query);
        let s = g.gather_rows(table, &[ex.class - 1])?;
        let x = g.constant(ex.objects.clone())?;
        let x = self.objects.forward(g, store, x)?;
        let views = (0..VIEWS)
            .map(|k| g.slice_rows(x, k * OBJECTS, OBJECTS))
            .collect::<Result<Vec<_>>>()?;
        let conf = vec![vec![1.0; OBJECTS]; VIEWS];
        let v = self.views.forward(g, store, &views, &conf, s)?;
        let h = g.concat_cols(&[v, s])?;
        let h = self.hidden.forward(g, store, h)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }
}

impl Task for CountModel {
    type Example = CountExample;

    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &CountExample,
        _rng: TrainRng<'_>,
    ) -> Result<Var> {
        let z = self.logits(g, store, ex)?;
        xe_loss(g, z, &[ex.count])
    }

    fn evaluate(&self, store: &ParamStore, data: &[CountExample]) -> Result<MetricMeans> {
        let mut hits = 0usize;
        for ex in data {
            let mut g = Graph::new();
            let z = self.logits(&mut g, store, ex)?;
            hits += usize::from(argmax(g.value(z).data()) == Some(ex.count));
        }
        let mut m = MetricMeans::default();
        m.add("count_acc", hits as f64 / data.len().max(1) as f64);
        Ok(m)
    }
}

/// Test accuracy of a counting model trained with `mode` under `cfg`.
pub fn train_count(
    cfg: &RunConfig,
    mode: ViewFusion,
    train: &[CountExample],
    test: &[CountExample],
) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = CountModel::new(&mut store, cfg.d, mode, &mut rng);
    let mut state = TrainState::new(&store, cfg);
    let reports = fit(
        &model,
        &mut store,
        &mut state,
        train,
        test,
        cfg,
        &mut std::io::sink(),
        |_, _, _| Ok(()),
    )?;
    Ok(reports
        .last()
        .and_then(|r| r.metrics.mean("count_acc"))
        .unwrap_or(0.0))
}
