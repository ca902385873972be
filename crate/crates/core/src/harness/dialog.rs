//! Dialog-style retrieval task with a planted question -> history -> image
//! pointer chain, its rule-based oracles, and the LTMI ranking model.
//!
//! Each example holds `K` image entities (raw feature plus a one-hot slot),
//! `T` history rounds (one-hot round id plus a one-hot pointer to an entity)
//! and a question naming one round. The gold answer is the feature of the
//! entity that round points to, among `C` noisy candidates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{Linear, NormParams};
use crate::autodiff::{Graph, TrainRng, Var};
use crate::decoders::{discriminative_loss, discriminative_scores, one_hot, Summarizer};
use crate::error::{Error, Result};
use crate::harness::records::{field, index_field, Record};
use crate::hierview::argmax;
use crate::ltmi::LtmiStack;
use crate::metrics::{ranking_metrics, MetricMeans};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ENTITIES: usize = 8;
pub const FEATURES: usize = 16;
pub const ROUNDS: usize = 4;
pub const CANDIDATES: usize = 10;
pub const NOISE: f64 = 0.1;
pub const MAGIC: &[u8; 4] = b"MIDG";

#[derive(Clone, Debug, PartialEq)]
pub struct DialogExample {
    /// `K×(F+K)`.
    pub image: Tensor,
    /// `1×T`.
    pub question: Tensor,
    /// `T×(T+K)`.
    pub history: Tensor,
    /// `C×F`.
    pub candidates: Tensor,
    pub gold: usize,
}

impl DialogExample {
    pub fn to_record(&self) -> Record {
        vec![
            ("image".into(), self.image.clone()),
            ("question".into(), self.question.clone()),
            ("history".into(), self.history.clone()),
            ("candidates".into(), self.candidates.clone()),
            ("gold".into(), Tensor::scalar(self.gold as f64)),
        ]
    }

    pub fn from_record(rec: &Record) -> Result<Self> {
        let ex = Self {
            image: field(rec, "image")?.clone(),
            question: field(rec, "question")?.clone(),
            history: field(rec, "history")?.clone(),
            candidates: field(rec, "candidates")?.clone(),
            gold: index_field(rec, "gold")?,
        };
        let shapes = [
            (ex.image.shape(), [ENTITIES, FEATURES + ENTITIES]),
            (ex.question.shape(), [1, ROUNDS]),
            (ex.history.shape(), [ROUNDS, ROUNDS + ENTITIES]),
            (ex.candidates.shape(), [CANDIDATES, FEATURES]),
        ];
        if shapes.iter().any(|(s, e)| *s != e) || ex.gold >= CANDIDATES {
            return Err(Error::Data("dialog example has unexpected shapes".into()));
        }
        Ok(ex)
    }
}

/// Generates `n` examples from `rng`.
pub fn generate<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<DialogExample> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    (0..n)
        .map(|_| {
            let feats: Vec<Vec<f64>> = (0..ENTITIES)
                .map(|_| (0..FEATURES).map(|_| unit.sample(rng)).collect())
                .collect();
            let mut image = Tensor::zeros(&[ENTITIES, FEATURES + ENTITIES]);
            for (i, f) in feats.iter().enumerate() {
                for (c, &v) in f.iter().enumerate() {
                    image.set(i, c, v);
                }
                image.set(i, FEATURES + i, 1.0);
            }
            let pointers = sample(rng, ENTITIES, ROUNDS).into_vec();
            let mut history = Tensor::zeros(&[ROUNDS, ROUNDS + ENTITIES]);
            for (t, &k) in pointers.iter().enumerate() {
                history.set(t, t, 1.0);
                history.set(t, ROUNDS + k, 1.0);
            }
            let j = rng.random_range(0..ROUNDS);
            let mut question = Tensor::zeros(&[1, ROUNDS]);
            question.set(0, j, 1.0);
            let target = pointers[j];
            let mut rows: Vec<Vec<f64>> = std::iter::once(target)
                .chain((0..ENTITIES).filter(|&i| i != target))
                .map(|i| feats[i].iter().map(|v| v + noise.sample(rng)).collect())
                .collect();
            for _ in ENTITIES..CANDIDATES {
                rows.push((0..FEATURES).map(|_| unit.sample(rng)).collect());
            }
            // rows[0] is the gold answer
            let order = sample(rng, CANDIDATES, CANDIDATES).into_vec();
            let gold_at = order.iter().position(|&src| src == 0).unwrap_or(0);
            let shuffled: Vec<Vec<f64>> = order.iter().map(|&src| rows[src].clone()).collect();
            let flat: Vec<f64> = shuffled.into_iter().flatten().collect();
            DialogExample {
                image,
                question,
                history,
                candidates: Tensor::new(&[CANDIDATES, FEATURES], flat).expect("consistent shape"),
                gold: gold_at,
            }
        })
        .collect()
}

/// Train and test splits drawn from one seeded stream.
pub fn generate_splits(
    seed: u64,
    train: usize,
    test: usize,
) -> (Vec<DialogExample>, Vec<DialogExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = generate(train, &mut rng);
    let b = generate(test, &mut rng);
    (a, b)
}

fn nearest_candidate(ex: &DialogExample, entity: usize) -> usize {
    let f = &ex.image.row_slice(entity)[..FEATURES];
    let neg_dist: Vec<f64> = (0..CANDIDATES)
        .map(|c| {
            -ex.candidates
                .row_slice(c)
                .iter()
                .zip(f)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    argmax(&neg_dist).unwrap_or(0)
}

/// Follows question -> round -> entity and picks the nearest candidate.
pub fn pointer_oracle(ex: &DialogExample) -> usize {
    let j = argmax(ex.question.data()).unwrap_or(0);
    let k = argmax(&ex.history.row_slice(j)[ROUNDS..]).unwrap_or(0);
    nearest_candidate(ex, k)
}

/// Same rule without access to the history: the round's pointer is unknown,
/// so it guesses the entity whose slot equals the round id.
pub fn blinded_oracle(ex: &DialogExample) -> usize {
    let j = argmax(ex.question.data()).unwrap_or(0);
    nearest_candidate(ex, j)
}

/// Slot and round ids share one embedding table each across utilities, so a
/// pointer token and the entity it names start out aligned.
#[derive(Clone, Debug)]
pub struct DialogModel {
    pub utilities: usize,
    pub slots: ParamId,
    pub rounds: ParamId,
    pub feature: Linear,
    pub norms: Vec<NormParams>,
    pub stack: LtmiStack,
    pub summaries: Vec<Summarizer>,
    pub context: Linear,
    pub answer: Linear,
}

pub const UTILITY_NAMES: [&str; 3] = ["image", "question", "history"];

impl DialogModel {
    /// `utilities` is 3 for the full model and 2 for the model without history.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        utilities: usize,
        d: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(2..=3).contains(&utilities) {
            return Err(Error::Config(format!(
                "dialog model takes 2 or 3 utilities, got {utilities}"
            )));
        }
        let names = &UTILITY_NAMES[..utilities];
        let norms = names
            .iter()
            .map(|n| NormParams::new(store, &format!("embed.{n}.ln"), d))
            .collect();
        let stack = LtmiStack::new(store, "ltmi", names, layers, d, heads, rng)?;
        let summaries = names
            .iter()
            .map(|n| Summarizer::new(store, &format!("summary.{n}"), d, rng))
            .collect();
        Ok(Self {
            utilities,
            slots: store.add("embed.slots", Tensor::randn(&[ENTITIES, d], 1.0, rng)),
            rounds: store.add("embed.rounds", Tensor::randn(&[ROUNDS, d], 1.0, rng)),
            feature: Linear::new(store, "embed.feature", FEATURES, d, rng),
            norms,
            stack,
            summaries,
            context: Linear::new(store, "context", utilities * d, d, rng),
            answer: Linear::new(store, "answer", FEATURES, d, rng),
        })
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, ex: &DialogExample) -> Result<Vec<Var>> {
        let slots = g.param(store, self.slots);
        let rounds = g.param(store, self.rounds);
        let image = g.constant(ex.image.clone())?;
        let f = g.slice_cols(image, 0, FEATURES)?;
        let f = self.feature.forward(g, store, f)?;
        let s = g.slice_cols(image, FEATURES, ENTITIES)?;
        let s = g.matmul(s, slots)?;
        let v = g.add(f, s)?;
        let q = g.constant(ex.question.clone())?;
        let q = g.matmul(q, rounds)?;
        let mut raw = vec![v, q];
        if self.utilities == 3 {
            let h = g.constant(ex.history.clone())?;
            let t = g.slice_cols(h, 0, ROUNDS)?;
            let t = g.matmul(t, rounds)?;
            let k = g.slice_cols(h, ROUNDS, ENTITIES)?;
            let k = g.matmul(k, slots)?;
            raw.push(g.add(t, k)?);
        }
        raw.iter()
            .zip(&self.norms)
            .map(|(&x, n)| n.forward(g, store, x))
            .collect()
    }

    /// Log-probabilities over the candidates, `1×C`.
    pub fn log_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &DialogExample,
        rng: TrainRng<'_>,
    ) -> Result<Var> {
        let feats = self.embed(g, store, ex)?;
        let out = self.stack.forward(g, store, &feats, rng)?;
        let sums = self
            .summaries
            .iter()
            .zip(&out)
            .map(|(s, &u)| s.forward(g, store, u))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&sums)?;
        let c = self.context.forward(g, store, cat)?;
        let cands = g.constant(ex.candidates.clone())?;
        let a = self.answer.forward(g, store, cands)?;
        discriminative_scores(g, a, c)
    }
}

impl crate::harness::train::Task for DialogModel {
    type Example = DialogExample;

    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &DialogExample,
        rng: TrainRng<'_>,
    ) -> Result<Var> {
        let p = self.log_probs(g, store, ex, rng)?;
        discriminative_loss(g, p, &one_hot(CANDIDATES, ex.gold)?)
    }

    fn evaluate(&self, store: &ParamStore, data: &[DialogExample]) -> Result<MetricMeans> {
        let mut means = MetricMeans::default();
        for ex in data {
            let mut g = Graph::new();
            let p = self.log_probs(&mut g, store, ex, None)?;
            let m = ranking_metrics(g.value(p).data(), Some(ex.gold), None)?;
            means.add_all(&m);
        }
        Ok(means)
    }
}
