//! LSTM cell, bidirectional sequence encoders for the question and history
//! utilities, and the image-utility constructor.

use rand::Rng;

use crate::attention::{sinusoidal_pe, Linear, NormParams};
use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::fusion::BBox;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default token-embedding width.
pub const EMBED_WIDTH: usize = 300;

/// Number of bins each box coordinate is discretized into.
pub const COORD_BINS: usize = 600;

/// Gate order used by every per-gate array: input, forget, output, cell.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let sx = (1.0 / input.max(1) as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        let wx = GATES.map(|k| {
            store.add(
                format!("{prefix}.wx_{k}"),
                Tensor::randn(&[input, hidden], sx, rng),
            )
        });
        let wh = GATES.map(|k| {
            store.add(
                format!("{prefix}.wh_{k}"),
                Tensor::randn(&[hidden, hidden], sh, rng),
            )
        });
        let b = GATES.map(|k| store.add(format!("{prefix}.b_{k}"), Tensor::zeros(&[1, hidden])));
        Self {
            input,
            hidden,
            wx,
            wh,
            b,
        }
    }
}

/// One step: `i,f,o = σ(xW_x + hW_h + b)`, `g = tanh(...)`,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`. Rows are `1×·`.
pub fn lstm_cell(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xw = g.value(x).dims2()?.1;
    if xw != p.input {
        return Err(dim_err!("LSTM input width {xw}, expected {}", p.input));
    }
    for v in [h, c] {
        let w = g.value(v).dims2()?.1;
        if w != p.hidden {
            return Err(dim_err!("LSTM state width {w}, expected {}", p.hidden));
        }
    }
    let mut pre = [x; 4];
    for (k, slot) in pre.iter_mut().enumerate() {
        let wx = g.param(store, p.wx[k]);
        let wh = g.param(store, p.wh[k]);
        let b = g.param(store, p.b[k]);
        let a = g.matmul(x, wx)?;
        let bh = g.matmul(h, wh)?;
        let s = g.add(a, bh)?;
        *slot = g.add_row(s, b)?;
    }
    let i = g.sigmoid(pre[0])?;
    let f = g.sigmoid(pre[1])?;
    let o = g.sigmoid(pre[2])?;
    let cand = g.tanh(pre[3])?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_new = g.add(fc, ig)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs a unidirectional LSTM from zero state over `xs`, returning every hidden state.
pub fn lstm_run(g: &mut Graph, store: &ParamStore, p: &LstmParams, xs: &[Var]) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(&[1, p.hidden]))?;
    let mut c = h;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_cell(g, store, p, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Forward and backward passes; both outputs are indexed by position.
pub fn bilstm(
    g: &mut Graph,
    store: &ParamStore,
    fwd: &LstmParams,
    bwd: &LstmParams,
    xs: &[Var],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let f = lstm_run(g, store, fwd, xs)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut b = lstm_run(g, store, bwd, &rev)?;
    b.reverse();
    Ok((f, b))
}

/// Token embedding, two bidirectional LSTM layers, projection to `d`,
/// positional embedding and layer norm.
#[derive(Clone, Debug)]
pub struct UtilityEncoder {
    pub d: usize,
    pub embed: ParamId,
    pub layers: [(LstmParams, LstmParams); 2],
    pub proj: Linear,
    pub norm: NormParams,
}

impl UtilityEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        embed_width: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let embed = store.add(
            format!("{prefix}.embed"),
            Tensor::randn(&[vocab, embed_width], 1.0, rng),
        );
        let l1 = (
            LstmParams::new(store, &format!("{prefix}.l1f"), embed_width, d, rng),
            LstmParams::new(store, &format!("{prefix}.l1b"), embed_width, d, rng),
        );
        let l2 = (
            LstmParams::new(store, &format!("{prefix}.l2f"), 2 * d, d, rng),
            LstmParams::new(store, &format!("{prefix}.l2b"), 2 * d, d, rng),
        );
        Self {
            d,
            embed,
            layers: [l1, l2],
            proj: Linear::new(store, &format!("{prefix}.proj"), 2 * d, d, rng),
            norm: NormParams::new(store, &format!("{prefix}.ln"), d),
        }
    }

    fn embed_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let table = g.param(store, self.embed);
        let vocab = g.value(table).dims2()?.0;
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!(
                "token id {t} outside vocabulary of {vocab}"
            )));
        }
        tokens.iter().map(|&t| g.gather_rows(table, &[t])).collect()
    }

    /// Top-layer forward and backward states for every position.
    fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let xs = self.embed_tokens(g, store, tokens)?;
        let (f1, b1) = bilstm(g, store, &self.layers[0].0, &self.layers[0].1, &xs)?;
        let mid = f1
            .iter()
            .zip(&b1)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        bilstm(g, store, &self.layers[1].0, &self.layers[1].1, &mid)
    }

    fn finish(&self, g: &mut Graph, store: &ParamStore, rows: &[Var]) -> Result<Var> {
        let stacked = g.concat_rows(rows)?;
        let proj = self.proj.forward(g, store, stacked)?;
        let pe = g.constant(sinusoidal_pe(rows.len(), self.d)?)?;
        let sum = g.add(proj, pe)?;
        self.norm.forward(g, store, sum)
    }

    /// `N×d` question utility, one row per token.
    pub fn encode_question(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<Var> {
        let (f, b) = self.run(g, store, tokens)?;
        let rows = f
            .iter()
            .zip(&b)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        self.finish(g, store, &rows)
    }

    /// `T×d` history utility, one row per round, from the forward state at
    /// the last token and the backward state at the first token.
    pub fn encode_history(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rounds: &[Vec<usize>],
    ) -> Result<Var> {
        if rounds.is_empty() {
            return Err(Error::Data("history has no rounds".into()));
        }
        let mut rows = Vec::with_capacity(rounds.len());
        for round in rounds {
            let (f, b) = self.run(g, store, round)?;
            let last = *f.last().ok_or_else(|| Error::Data("empty round".into()))?;
            rows.push(g.concat_cols(&[last, b[0]])?);
        }
        self.finish(g, store, &rows)
    }
}

/// Two-layer perceptron `ReLU(xW1 + b1)W2 + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{prefix}.l1"), input, hidden, rng),
            l2: Linear::new(store, &format!("{prefix}.l2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// `v = LN(LN(MLP(raw)) + Σ_j LN(MLP(E_j[bin_j])))` over the four box corners.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub d: usize,
    pub feat_mlp: Mlp,
    pub feat_norm: NormParams,
    pub coord_tables: [ParamId; 4],
    pub coord_mlp: Mlp,
    pub coord_norm: NormParams,
    pub out_norm: NormParams,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        raw: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let coord_tables = ["x1", "y1", "x2", "y2"].map(|n| {
            store.add(
                format!("{prefix}.coord_{n}"),
                Tensor::randn(&[COORD_BINS, d], 1.0, rng),
            )
        });
        Self {
            d,
            feat_mlp: Mlp::new(store, &format!("{prefix}.feat"), raw, d, d, rng),
            feat_norm: NormParams::new(store, &format!("{prefix}.feat_ln"), d),
            coord_tables,
            coord_mlp: Mlp::new(store, &format!("{prefix}.coord"), d, d, d, rng),
            coord_norm: NormParams::new(store, &format!("{prefix}.coord_ln"), d),
            out_norm: NormParams::new(store, &format!("{prefix}.ln"), d),
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        boxes: &[BBox],
    ) -> Result<Var> {
        let k = g.value(features).dims2()?.0;
        if k == 0 {
            return Err(dim_err!("image utility needs at least one region"));
        }
        if boxes.len() != k {
            return Err(dim_err!("{k} regions but {} boxes", boxes.len()));
        }
        let bins = boxes
            .iter()
            .map(coordinate_bins)
            .collect::<Result<Vec<_>>>()?;
        let vf = self.feat_mlp.forward(g, store, features)?;
        let vf = self.feat_norm.forward(g, store, vf)?;
        let mut terms = Vec::with_capacity(4);
        for (j, &table) in self.coord_tables.iter().enumerate() {
            let t = g.param(store, table);
            let idx: Vec<usize> = bins.iter().map(|b| b[j]).collect();
            let e = g.gather_rows(t, &idx)?;
            let e = self.coord_mlp.forward(g, store, e)?;
            terms.push(self.coord_norm.forward(g, store, e)?);
        }
        let vb = g.add_many(&terms)?;
        let v = g.add(vf, vb)?;
        self.out_norm.forward(g, store, v)
    }
}

/// Bin indices of `(x1, y1, x2, y2)`; coordinates must lie in `[0, 1]`.
pub fn coordinate_bins(b: &BBox) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for (o, v) in out.iter_mut().zip([b.x1, b.y1, b.x2, b.y2]) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("box coordinate {v} outside [0, 1]")));
        }
        *o = ((v * COORD_BINS as f64) as usize).min(COORD_BINS - 1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_cell_scalar_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 1, 1, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0)).unwrap();
        let h0 = g.constant(Tensor::scalar(0.0)).unwrap();
        let (h, c) = lstm_cell(&mut g, &store, &p, x, h0, h0).unwrap();
        assert_eq!((g.value(h).data()[0], g.value(c).data()[0]), (0.0, 0.0));
        let c1 = g.constant(Tensor::scalar(1.0)).unwrap();
        let (h, c) = lstm_cell(&mut g, &store, &p, x, h0, c1).unwrap();
        assert!((g.value(c).data()[0] - 0.5).abs() < 1e-15);
        assert!((g.value(h).data()[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((g.value(h).data()[0] - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn coordinate_bins_clamp_and_reject() {
        let b = BBox::new(0.0, 0.5, 0.999, 1.0).unwrap();
        assert_eq!(coordinate_bins(&b).unwrap(), [0, 300, 599, 599]);
        let bad = BBox::new(-0.1, 0.0, 0.5, 0.5).unwrap();
        assert!(matches!(coordinate_bins(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_token_and_empty_round_are_data_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = UtilityEncoder::new(&mut store, "q", 5, 4, 4, &mut rng);
        let mut g = Graph::new();
        assert!(matches!(
            enc.encode_question(&mut g, &store, &[1, 5]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            enc.encode_history(&mut g, &store, &[vec![1], vec![]]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            enc.encode_history(&mut g, &store, &[]),
            Err(Error::Data(_))
        ));
    }
}
