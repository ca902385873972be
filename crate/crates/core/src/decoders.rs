//! Answer scoring for candidate ranking: utility summaries, discriminative
//! and generative decoders, and their losses.

use rand::Rng;

use crate::attention::Linear;
use crate::autodiff::{Graph, Var};
use crate::encoders::{lstm_cell, LstmParams};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `Σ_i a_i u_i` with `a = softmax(ReLU(U·W1 + b1)·W2 + b2)` over the rows of `U`.
pub fn summarize_utility(g: &mut Graph, u: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let k = g.value(u).dims2()?.0;
    if k == 0 {
        return Err(dim_err!("cannot summarize an empty utility"));
    }
    let h = g.matmul(u, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let s = g.matmul(h, w2)?;
    let s = g.add_row(s, b2)?;
    let st = g.transpose(s)?;
    let a = g.softmax_rows(st)?;
    g.matmul(a, u)
}

#[derive(Clone, Debug)]
pub struct Summarizer {
    pub l1: Linear,
    pub l2: Linear,
}

impl Summarizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{prefix}.l1"), d, d, rng),
            l2: Linear::new(store, &format!("{prefix}.l2"), d, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let w1 = g.param(store, self.l1.w);
        let b1 = g.param(store, self.l1.b);
        let w2 = g.param(store, self.l2.w);
        let b2 = g.param(store, self.l2.b);
        summarize_utility(g, u, w1, b1, w2, b2)
    }
}

/// `log_softmax(a_iᵀ c)` over the `C×d` candidate encodings; returns `1×C`.
pub fn discriminative_scores(g: &mut Graph, candidates: Var, c: Var) -> Result<Var> {
    let (_, d) = g.value(candidates).dims2()?;
    let (r, dc) = g.value(c).dims2()?;
    if r != 1 || dc != d {
        return Err(dim_err!("context {r}x{dc} for candidates of width {d}"));
    }
    let at = g.transpose(candidates)?;
    let s = g.matmul(c, at)?;
    g.log_softmax_rows(s)
}

/// `−Σ_i y_i p_i` for a one-hot or dense relevance target.
pub fn discriminative_loss(g: &mut Graph, log_probs: Var, target: &[f64]) -> Result<Var> {
    let (_, c) = g.value(log_probs).dims2()?;
    if target.len() != c {
        return Err(dim_err!(
            "{c} candidates but target of length {}",
            target.len()
        ));
    }
    let y = g.constant(Tensor::row(target))?;
    let prod = g.mul(log_probs, y)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0)
}

/// One-hot target of length `c` at `gold`.
pub fn one_hot(c: usize, gold: usize) -> Result<Vec<f64>> {
    if gold >= c {
        return Err(Error::Data(format!(
            "gold index {gold} outside {c} candidates"
        )));
    }
    let mut y = vec![0.0; c];
    y[gold] = 1.0;
    Ok(y)
}

/// LSTM language model scoring candidate answers given a context vector.
#[derive(Clone, Debug)]
pub struct GenerativeDecoder {
    pub embed: ParamId,
    pub lstm: LstmParams,
    pub out: Linear,
    pub sos: usize,
}

impl GenerativeDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        embed: usize,
        d: usize,
        sos: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: store.add(
                format!("{prefix}.embed"),
                Tensor::randn(&[vocab, embed], 1.0, rng),
            ),
            lstm: LstmParams::new(store, &format!("{prefix}.lstm"), embed, d, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d, vocab, rng),
            sos,
        }
    }

    /// `Σ_n log p(w_n | SOS, w_1..w_{n-1})` of one candidate, as a `1×1` node.
    pub fn log_likelihood(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &[usize],
        c: Var,
    ) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::Data("empty candidate answer".into()));
        }
        let table = g.param(store, self.embed);
        let vocab = g.value(table).dims2()?.0;
        if let Some(&w) = words
            .iter()
            .chain(std::iter::once(&self.sos))
            .find(|&&w| w >= vocab)
        {
            return Err(Error::Data(format!(
                "token id {w} outside vocabulary of {vocab}"
            )));
        }
        let mut h = c;
        let mut cell = g.constant(Tensor::zeros(&[1, self.lstm.hidden]))?;
        let mut prev = self.sos;
        let mut picks = Vec::with_capacity(words.len());
        for &w in words {
            let x = g.gather_rows(table, &[prev])?;
            (h, cell) = lstm_cell(g, store, &self.lstm, x, h, cell)?;
            let logits = self.out.forward(g, store, h)?;
            let lp = g.log_softmax_rows(logits)?;
            picks.push(g.pick(lp, &[(0, w)])?);
            prev = w;
        }
        g.add_many(&picks)
    }

    /// Scores of every candidate as a `1×C` node.
    pub fn scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        candidates: &[Vec<usize>],
        c: Var,
    ) -> Result<Var> {
        if candidates.is_empty() {
            return Err(dim_err!("no candidates"));
        }
        let s = candidates
            .iter()
            .map(|w| self.log_likelihood(g, store, w, c))
            .collect::<Result<Vec<_>>>()?;
        if s.len() == 1 {
            Ok(s[0])
        } else {
            g.concat_cols(&s)
        }
    }
}

/// `L_D + L_G`, unweighted.
pub fn multitask_loss(g: &mut Graph, ld: Var, lg: Var) -> Result<Var> {
    g.add(ld, lg)
}

/// Elementwise mean of two probability vectors.
pub fn average_distributions(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(dim_err!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        ));
    }
    Ok(p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect())
}
