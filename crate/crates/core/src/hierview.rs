//! Decision layer for instruction following over several egocentric views:
//! per-view and cross-view attention, the instruction selector, the
//! two-stage instruction decoder, and the action and mask decoders.

use rand::Rng;

use crate::attention::{scaled_dot_attention, AttentionParams, Linear};
use crate::autodiff::{Graph, Var};
use crate::encoders::{lstm_cell, LstmParams};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Object features and detector confidences of every view at one step.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub views: Vec<Tensor>,
    pub confidences: Vec<Vec<f64>>,
}

impl ViewBundle {
    pub fn new(views: Vec<Tensor>, confidences: Vec<Vec<f64>>) -> Result<Self> {
        if views.is_empty() {
            return Err(dim_err!("a view bundle needs at least one view"));
        }
        if views.len() != confidences.len() {
            return Err(dim_err!(
                "{} views but {} confidence lists",
                views.len(),
                confidences.len()
            ));
        }
        for (v, c) in views.iter().zip(&confidences) {
            let (n, _) = v.dims2()?;
            if n == 0 || n != c.len() {
                return Err(dim_err!(
                    "view with {n} objects and {} confidences",
                    c.len()
                ));
            }
            if c.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Data("confidence outside [0, 1]".into()));
            }
        }
        Ok(Self { views, confidences })
    }
}

/// `Σ_n softmax_n(v_nᵀ W_s s) · ρ_n · v_n` for a `N×d` view and a `1×d` guide.
pub fn per_view_attend(
    g: &mut Graph,
    view: Var,
    confidences: &[f64],
    s: Var,
    ws: Var,
) -> Result<Var> {
    let (n, d) = g.value(view).dims2()?;
    if n == 0 {
        return Err(dim_err!("view without objects"));
    }
    if confidences.len() != n {
        return Err(dim_err!(
            "{n} objects but {} confidences",
            confidences.len()
        ));
    }
    let sw = g.value(s).dims2()?.1;
    if sw != d {
        return Err(dim_err!("guide width {sw} vs view width {d}"));
    }
    let wst = g.transpose(ws)?;
    let guide = g.matmul(s, wst)?;
    let vt = g.transpose(view)?;
    let scores = g.matmul(guide, vt)?;
    let alpha = g.softmax_rows(scores)?;
    let rho = g.constant(Tensor::row(confidences))?;
    let weights = g.mul(alpha, rho)?;
    g.matmul(weights, view)
}

/// How view vectors are weighted when fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewFusion {
    /// Independent sigmoid gate per view.
    Gated,
    /// Softmax across views, kept for comparison.
    Softmax,
}

/// `Σ_k σ(v_kᵀ W_g s) v_k`; returns the fused `1×d` vector and the `1×K` weights.
pub fn gated_view_fusion(
    g: &mut Graph,
    views: &[Var],
    s: Var,
    wg: Var,
    mode: ViewFusion,
) -> Result<(Var, Var)> {
    if views.is_empty() {
        return Err(dim_err!("no view vectors to fuse"));
    }
    let stacked = if views.len() == 1 {
        views[0]
    } else {
        g.concat_rows(views)?
    };
    let wgt = g.transpose(wg)?;
    let guide = g.matmul(s, wgt)?;
    let st = g.transpose(stacked)?;
    let scores = g.matmul(guide, st)?;
    let weights = match mode {
        ViewFusion::Gated => g.sigmoid(scores)?,
        ViewFusion::Softmax => g.softmax_rows(scores)?,
    };
    Ok((g.matmul(weights, stacked)?, weights))
}

/// Per-view guide matrices `W_s^k` and the cross-view gate matrix `W_g`.
#[derive(Clone, Debug)]
pub struct HierarchicalAttention {
    pub ws: Vec<ParamId>,
    pub wg: ParamId,
    pub mode: ViewFusion,
}

impl HierarchicalAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        views: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let ws = (0..views)
            .map(|k| store.add(format!("{prefix}.ws{k}"), Tensor::randn(&[d, d], std, rng)))
            .collect();
        let wg = store.add(format!("{prefix}.wg"), Tensor::randn(&[d, d], std, rng));
        Self {
            ws,
            wg,
            mode: ViewFusion::Gated,
        }
    }

    /// Attends within every view, then fuses across views; `views[k]` is a `N×d` node.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[Var],
        confidences: &[Vec<f64>],
        s: Var,
    ) -> Result<Var> {
        if views.len() != self.ws.len() || confidences.len() != views.len() {
            return Err(dim_err!(
                "attention built for {} views, got {}",
                self.ws.len(),
                views.len()
            ));
        }
        let mut vecs = Vec::with_capacity(views.len());
        for (k, (&v, rho)) in views.iter().zip(confidences).enumerate() {
            let ws = g.param(store, self.ws[k]);
            vecs.push(per_view_attend(g, v, rho, s, ws)?);
        }
        let wg = g.param(store, self.wg);
        Ok(gated_view_fusion(g, &vecs, s, wg, self.mode)?.0)
    }
}

/// Outcome of [`InstructionState::advance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Stay,
    /// Moved on to the given (1-based) instruction.
    Next(usize),
    /// Every instruction is complete; the episode has ended.
    Terminal,
}

/// Current instruction pointer `m` (1-based) over `L` instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstructionState {
    m: usize,
    len: usize,
}

impl InstructionState {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(
                "an episode needs at least one instruction".into(),
            ));
        }
        Ok(Self { m: 1, len })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_terminal(&self) -> bool {
        self.m > self.len
    }

    /// Increments `m` when the previous action distribution peaks at `complete`.
    pub fn advance(&mut self, p_a_prev: &[f64], complete: usize) -> Advance {
        if self.is_terminal() {
            return Advance::Terminal;
        }
        if argmax(p_a_prev) != Some(complete) {
            return Advance::Stay;
        }
        self.m += 1;
        if self.is_terminal() {
            Advance::Terminal
        } else {
            Advance::Next(self.m)
        }
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Action and object LSTMs predicting the current instruction's
/// manipulation action and target class.
#[derive(Clone, Debug)]
pub struct TwoStageDecoder {
    pub actions: usize,
    pub objects: usize,
    pub embed_a: ParamId,
    pub embed_o: ParamId,
    pub lstm_a: LstmParams,
    pub lstm_o: LstmParams,
    pub out_a: Linear,
    pub out_o: Linear,
    /// Logits of the constant distributions forwarded for navigation actions.
    pub nav_a: ParamId,
    pub nav_o: ParamId,
    pub is_nav: Vec<bool>,
}

/// Recurrent state of a [`TwoStageDecoder`].
#[derive(Clone, Copy, Debug)]
pub struct TwoStageState {
    pub h_a: Var,
    pub c_a: Var,
    pub h_o: Var,
    pub c_o: Var,
    pub prev_a: Option<usize>,
    pub prev_o: Option<usize>,
}

/// One step of the two-stage decoder.
#[derive(Clone, Copy, Debug)]
pub struct TwoStageOutput {
    pub logits_a: Var,
    pub logits_o: Var,
    pub p_a: Var,
    pub p_o: Var,
    /// Distributions passed on to the action decoder.
    pub fwd_a: Var,
    pub fwd_o: Var,
    pub navigation: bool,
}

impl TwoStageDecoder {
    /// `is_nav[a]` marks navigation actions among the `N_a` instruction actions.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        is_nav: Vec<bool>,
        objects: usize,
        embed: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let actions = is_nav.len();
        Self {
            actions,
            objects,
            embed_a: store.add(
                format!("{prefix}.embed_a"),
                Tensor::randn(&[actions, embed], 1.0, rng),
            ),
            embed_o: store.add(
                format!("{prefix}.embed_o"),
                Tensor::randn(&[objects, embed], 1.0, rng),
            ),
            lstm_a: LstmParams::new(store, &format!("{prefix}.lstm_a"), embed, d, rng),
            lstm_o: LstmParams::new(store, &format!("{prefix}.lstm_o"), embed, d, rng),
            out_a: Linear::new(store, &format!("{prefix}.out_a"), d, actions, rng),
            out_o: Linear::new(store, &format!("{prefix}.out_o"), d, objects, rng),
            nav_a: store.add(format!("{prefix}.nav_a"), Tensor::zeros(&[1, actions])),
            nav_o: store.add(format!("{prefix}.nav_o"), Tensor::zeros(&[1, objects])),
            is_nav,
        }
    }

    /// Hidden states set to the instruction encoding, cells to zero.
    pub fn reset(&self, g: &mut Graph, s: Var) -> Result<TwoStageState> {
        let d = g.value(s).dims2()?.1;
        if d != self.lstm_a.hidden {
            return Err(dim_err!(
                "instruction width {d}, decoder width {}",
                self.lstm_a.hidden
            ));
        }
        let zero = g.constant(Tensor::zeros(&[1, d]))?;
        Ok(TwoStageState {
            h_a: s,
            c_a: zero,
            h_o: s,
            c_o: zero,
            prev_a: None,
            prev_o: None,
        })
    }

    fn input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: ParamId,
        prev: Option<usize>,
        width: usize,
    ) -> Result<Var> {
        match prev {
            Some(i) => {
                let t = g.param(store, table);
                g.gather_rows(t, &[i])
            }
            None => g.constant(Tensor::zeros(&[1, width])),
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &mut TwoStageState,
    ) -> Result<TwoStageOutput> {
        let xa = self.input(g, store, self.embed_a, state.prev_a, self.lstm_a.input)?;
        let xo = self.input(g, store, self.embed_o, state.prev_o, self.lstm_o.input)?;
        (state.h_a, state.c_a) = lstm_cell(g, store, &self.lstm_a, xa, state.h_a, state.c_a)?;
        (state.h_o, state.c_o) = lstm_cell(g, store, &self.lstm_o, xo, state.h_o, state.c_o)?;
        let logits_a = self.out_a.forward(g, store, state.h_a)?;
        let logits_o = self.out_o.forward(g, store, state.h_o)?;
        let p_a = g.softmax_rows(logits_a)?;
        let p_o = g.softmax_rows(logits_o)?;
        let a = argmax(g.value(p_a).data()).unwrap_or(0);
        let o = argmax(g.value(p_o).data()).unwrap_or(0);
        state.prev_a = Some(a);
        state.prev_o = Some(o);
        let navigation = self.is_nav[a];
        let (fwd_a, fwd_o) = if navigation {
            let na = g.param(store, self.nav_a);
            let no = g.param(store, self.nav_o);
            (g.softmax_rows(na)?, g.softmax_rows(no)?)
        } else {
            (p_a, p_o)
        };
        Ok(TwoStageOutput {
            logits_a,
            logits_o,
            p_a,
            p_o,
            fwd_a,
            fwd_o,
            navigation,
        })
    }
}

/// LSTM over `[v; s; p^ia; p^io]` emitting logits over `N_a + 1` actions.
#[derive(Clone, Debug)]
pub struct ActionDecoder {
    pub lstm: LstmParams,
    pub out: Linear,
}

impl ActionDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        actions: usize,
        objects: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lstm: LstmParams::new(
                store,
                &format!("{prefix}.lstm"),
                2 * d + actions + objects,
                d,
                rng,
            ),
            out: Linear::new(store, &format!("{prefix}.out"), d, actions + 1, rng),
        }
    }

    /// Returns the new `(h, c)` and the action logits.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: Var,
        s: Var,
        p_ia: Var,
        p_io: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var)> {
        let x = g.concat_cols(&[v, s, p_ia, p_io])?;
        let (h, c) = lstm_cell(g, store, &self.lstm, x, h, c)?;
        let logits = self.out.forward(g, store, h)?;
        Ok((h, c, logits))
    }
}

/// Relation-aware candidate scoring: `p_n = σ(gᵀ W_m v̂_n)` where `v̂` adds
/// `ReLU(affine(SelfAttention(v)))` to the candidates.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub attn: AttentionParams,
    pub affine: Linear,
    pub wm: ParamId,
}

impl MaskDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        guide: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), d, 1, rng)?,
            affine: Linear::new(store, &format!("{prefix}.affine"), d, d, rng),
            wm: store.add(
                format!("{prefix}.wm"),
                Tensor::randn(&[guide, d], (1.0 / guide as f64).sqrt(), rng),
            ),
        })
    }

    /// Pre-sigmoid scores `1×N` for `N×d` candidates and a `1×guide` vector.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        candidates: Var,
        guide: Var,
    ) -> Result<Var> {
        let n = g.value(candidates).dims2()?.0;
        if n == 0 {
            return Err(dim_err!("no mask candidates"));
        }
        let a = crate::attention::multi_head_attention(
            g, store, &self.attn, candidates, candidates, candidates, None,
        )?;
        let a = self.affine.forward(g, store, a)?;
        let a = g.relu(a)?;
        let vhat = g.add(candidates, a)?;
        let wm = g.param(store, self.wm);
        let gw = g.matmul(guide, wm)?;
        let vt = g.transpose(vhat)?;
        g.matmul(gw, vt)
    }

    /// Candidate probabilities and the chosen index.
    pub fn select(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        candidates: Var,
        guide: Var,
    ) -> Result<(Var, usize)> {
        let z = self.logits(g, store, candidates, guide)?;
        let p = g.sigmoid(z)?;
        let chosen = argmax(g.value(z).data()).unwrap_or(0);
        Ok((p, chosen))
    }
}

/// Single-head scaled-dot self-attention without projections, exposed for
/// checking the mask decoder's relation step.
pub fn plain_self_attention(g: &mut Graph, x: Var) -> Result<Var> {
    scaled_dot_attention(g, x, x, x, None)
}

/// Collapses runs of the same navigation action to one occurrence.
pub fn simplify_nav_sequence<F: Fn(usize) -> bool>(actions: &[usize], is_nav: F) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(actions.len());
    for &a in actions {
        if is_nav(a) && out.last() == Some(&a) {
            continue;
        }
        out.push(a);
    }
    out
}

/// Binary cross-entropy of `1×N` logits against a one-hot target at `gold`,
/// summed over candidates.
pub fn bce_with_logits(g: &mut Graph, logits: Var, gold: usize) -> Result<Var> {
    let n = g.value(logits).dims2()?.1;
    if gold >= n {
        return Err(Error::Data(format!(
            "gold mask {gold} outside {n} candidates"
        )));
    }
    // softplus(z) - y·z, with softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
    let pos = g.relu(logits)?;
    let a = g.abs(logits)?;
    let na = g.scale(a, -1.0)?;
    let e = g.exp(na)?;
    let e1 = g.add_scalar(e, 1.0)?;
    let lg = g.log(e1)?;
    let sp = g.add(pos, lg)?;
    let total = g.sum(sp)?;
    let picked = g.pick(logits, &[(0, gold)])?;
    g.sub(total, picked)
}

/// The three summed terms of the imitation loss.
#[derive(Clone, Copy, Debug)]
pub struct LwitLoss {
    pub total: Var,
    pub mask: Var,
    pub action: Var,
    pub aux: Var,
}

/// `L_mask + L_action + L_aux`. `mask` pairs mask logits with the gold
/// candidate; `aux` pairs two-stage logits (`T×N`) with their gold streams.
pub fn lwit_loss(
    g: &mut Graph,
    mask: &[(Var, usize)],
    action_logits: Var,
    gold_actions: &[usize],
    aux: &[(Var, Vec<usize>)],
) -> Result<LwitLoss> {
    let zero = g.constant(Tensor::scalar(0.0))?;
    let mut mask_terms = vec![zero];
    for &(z, gold) in mask {
        mask_terms.push(bce_with_logits(g, z, gold)?);
    }
    let mask_loss = g.add_many(&mask_terms)?;
    let rows = g.value(action_logits).dims2()?.0;
    if rows != gold_actions.len() {
        return Err(Error::Data(format!(
            "{rows} action steps but {} gold actions",
            gold_actions.len()
        )));
    }
    let action = crate::fusion::xe_loss(g, action_logits, gold_actions)?;
    let mut aux_terms = vec![zero];
    for (z, gold) in aux {
        let r = g.value(*z).dims2()?.0;
        if r != gold.len() {
            return Err(Error::Data(format!(
                "{r} auxiliary steps but {} gold labels",
                gold.len()
            )));
        }
        aux_terms.push(crate::fusion::xe_loss(g, *z, gold)?);
    }
    let aux_loss = g.add_many(&aux_terms)?;
    let total = g.add_many(&[mask_loss, action, aux_loss])?;
    Ok(LwitLoss {
        total,
        mask: mask_loss,
        action,
        aux: aux_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplify_worked_example() {
        let nav = |a: usize| a < 3;
        // 0 RotateLeft, 1 MoveAhead, 2 RotateRight, 5 Pickup
        assert_eq!(simplify_nav_sequence(&[0, 1, 1, 1, 2], nav), vec![0, 1, 2]);
        assert_eq!(simplify_nav_sequence(&[0, 1, 2], nav), vec![0, 1, 2]);
        assert_eq!(simplify_nav_sequence(&[5, 5, 1, 1], nav), vec![5, 5, 1]);
    }

    #[test]
    fn selector_state_machine() {
        let mut st = InstructionState::new(4).unwrap();
        let complete = [0.1, 0.2, 0.7];
        let other = [0.6, 0.2, 0.2];
        for _ in 0..50 {
            assert_eq!(st.advance(&other, 2), Advance::Stay);
        }
        assert_eq!(st.m(), 1);
        for m in 2..=4 {
            assert_eq!(st.advance(&complete, 2), Advance::Next(m));
        }
        assert_eq!(st.advance(&complete, 2), Advance::Terminal);
        assert!(st.is_terminal());
        assert_eq!(st.advance(&other, 2), Advance::Terminal);
        assert!(InstructionState::new(0).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(&[0.3, -1.2, 2.5])).unwrap();
        let l = bce_with_logits(&mut g, z, 1).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = -(1.0 - s(0.3)).ln() - s(-1.2).ln() - (1.0 - s(2.5)).ln();
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }
}
