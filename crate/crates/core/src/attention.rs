//! Scaled dot-product and multi-head attention, the position-wise FFN,
//! causal masks and sinusoidal positional embeddings.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive value placed on disallowed query/key pairs before the softmax.
pub const MASKED: f64 = -1e30;

/// Boolean attention mask; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(dim_err!("mask {rows}x{cols} with {} entries", allow.len()));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Additive bias: 0 where allowed, [`MASKED`] elsewhere.
    fn bias(&self) -> Result<Tensor> {
        for i in 0..self.rows {
            if !(0..self.cols).any(|j| self.allows(i, j)) {
                return Err(Error::DegenerateMask(i));
            }
        }
        let data = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED })
            .collect();
        Tensor::new(&[self.rows, self.cols], data)
    }
}

/// Lower-triangular mask: position `i` may attend `j` iff `j <= i`.
pub fn causal_mask(t: usize) -> Result<Mask> {
    if t == 0 {
        return Err(dim_err!("causal mask of length 0"));
    }
    let allow = (0..t * t).map(|k| k % t <= k / t).collect();
    Mask::new(t, t, allow)
}

/// `softmax(QKᵀ/√dk)·V`; returns the output and the attention weights.
pub fn scaled_dot_attention_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let (m, dk) = g.value(q).dims2()?;
    let (n, dk2) = g.value(k).dims2()?;
    let (n2, _) = g.value(v).dims2()?;
    if dk != dk2 {
        return Err(dim_err!("query width {dk} vs key width {dk2}"));
    }
    if n != n2 {
        return Err(dim_err!("{n} keys but {n2} values"));
    }
    if n == 0 {
        return Err(dim_err!("attention over zero keys"));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(mask) = mask {
        if mask.dims() != (m, n) {
            return Err(dim_err!("mask {:?} for {m}x{n} scores", mask.dims()));
        }
        let bias = g.constant(mask.bias()?)?;
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    scaled_dot_attention_weights(g, q, k, v, mask).map(|(out, _)| out)
}

/// Learnable multi-head attention weights. Per-head projections are kept as
/// separate `d×d_H` matrices; there are no projection biases.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dh = head_width(d, heads)?;
        let std = (1.0 / d as f64).sqrt();
        let mut proj = |kind: &str, rng: &mut R| -> Vec<ParamId> {
            (0..heads)
                .map(|h| {
                    store.add(
                        format!("{prefix}.w{kind}.{h}"),
                        Tensor::randn(&[d, dh], std, rng),
                    )
                })
                .collect()
        };
        let wq = proj("q", rng);
        let wk = proj("k", rng);
        let wv = proj("v", rng);
        let wo = store.add(format!("{prefix}.wo"), Tensor::randn(&[d, d], std, rng));
        Ok(Self {
            d,
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// `4·d²` learnable scalars.
    pub fn param_count(d: usize) -> usize {
        4 * d * d
    }

    pub fn projections(&self, g: &mut Graph, store: &ParamStore) -> HeadProjections {
        let mut vars =
            |ids: &[ParamId]| ids.iter().map(|&id| g.param(store, id)).collect::<Vec<_>>();
        let wq = vars(&self.wq);
        let wk = vars(&self.wk);
        let wv = vars(&self.wv);
        HeadProjections {
            wq,
            wk,
            wv,
            wo: Some(g.param(store, self.wo)),
        }
    }
}

/// Per-head projection nodes already placed on a graph. `wo: None` means the
/// identity output map.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Option<Var>,
}

pub fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// `Concat(head_1..head_H)·W_O` with `head_h = Attention(QW_Q[h], KW_K[h], VW_V[h])`.
pub fn multi_head_with(
    g: &mut Graph,
    proj: &HeadProjections,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let heads = proj.wq.len();
    if heads == 0 || proj.wk.len() != heads || proj.wv.len() != heads {
        return Err(dim_err!("inconsistent head projections"));
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.matmul(q, proj.wq[h])?;
        let kh = g.matmul(k, proj.wk[h])?;
        let vh = g.matmul(v, proj.wv[h])?;
        outs.push(scaled_dot_attention(g, qh, kh, vh, mask)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    match proj.wo {
        Some(wo) => g.matmul(cat, wo),
        None => Ok(cat),
    }
}

pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        let w = g.value(x).dims2()?.1;
        if w != params.d {
            return Err(dim_err!("{name} width {w}, attention width {}", params.d));
        }
    }
    let proj = params.projections(g, store);
    multi_head_with(g, &proj, q, k, v, mask)
}

/// Position-wise feed-forward weights.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        dff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), Tensor::he_normal(d, dff, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, dff])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::randn(&[dff, d], (1.0 / dff as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn param_count(d: usize, dff: usize) -> usize {
        d * dff + dff + dff * d + d
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        ffn(g, x, w1, b1, w2, b2)
    }
}

/// `ReLU(xW1 + b1)W2 + b2`.
pub fn ffn(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// Sinusoidal positional embedding table of shape `t×d`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional embedding width {d} must be even"
        )));
    }
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Layer-norm gain and bias, initialized to ones and zeros.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Affine map `xW + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]))
            .unwrap();
        let k = g.constant(Tensor::from_rows(&[&[0.3, 0.1]])).unwrap();
        let v = g.constant(Tensor::from_rows(&[&[7.0, -1.0, 2.0]])).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(eval(&g, out), vec![7.0, -1.0, 2.0, 7.0, -1.0, 2.0]);
    }

    #[test]
    fn identical_keys_give_value_mean() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
        let k = g
            .constant(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]))
            .unwrap();
        let v = g
            .constant(Tensor::from_rows(&[&[1.0], &[2.0], &[6.0]]))
            .unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert!((eval(&g, out)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_hand_case() {
        // weights = softmax([1/sqrt2, 0])
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, 0.0]])).unwrap();
        let kv = g.constant(Tensor::eye(2)).unwrap();
        let out = scaled_dot_attention(&mut g, q, kv, kv, None).unwrap();
        let o = eval(&g, out);
        let e = (1.0 / 2f64.sqrt()).exp();
        assert!((o[0] - e / (1.0 + e)).abs() < 1e-12, "{o:?}");
        assert!((o[0] - 0.669_761_549).abs() < 1e-9);
        assert!((o[1] - 0.330_238_451).abs() < 1e-9);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::eye(2)).unwrap();
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            scaled_dot_attention(&mut g, x, x, x, Some(&mask)),
            Err(Error::DegenerateMask(1))
        ));
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let k = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            scaled_dot_attention(&mut g, q, k, k, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn causal_mask_patterns() {
        assert_eq!(
            causal_mask(1).unwrap(),
            Mask::new(1, 1, vec![true]).unwrap()
        );
        let m = causal_mask(3).unwrap();
        let expect = [
            [true, false, false],
            [true, true, false],
            [true, true, true],
        ];
        for (i, row) in expect.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                assert_eq!(m.allows(i, j), a);
            }
        }
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn sinusoidal_values() {
        let pe = sinusoidal_pe(4, 6).unwrap();
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 0) - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_pe(2, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_zero_weights_return_bias() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))
            .unwrap();
        let w1 = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b1 = g.constant(Tensor::row(&[1.0, -1.0, 0.5])).unwrap();
        let w2 = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b2 = g.constant(Tensor::row(&[0.25, -4.0])).unwrap();
        let out = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_eq!(eval(&g, out), vec![0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn ffn_zero_input_nonpositive_b1() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let w1 = g
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))
            .unwrap();
        let b1 = g.constant(Tensor::row(&[-1.0, 0.0])).unwrap();
        let w2 = g
            .constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]))
            .unwrap();
        let b2 = g.constant(Tensor::row(&[0.5, 1.5])).unwrap();
        let out = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_eq!(eval(&g, out), vec![0.5, 1.5]);
    }

    #[test]
    fn ffn_two_by_two_hand_case() {
        // x=[1,-1]; xW1+b1 = [1-3+0.5, 2-4-0.5] = [-1.5, -2.5] -> relu 0 ... use other x
        // x=[2,1]: xW1 = [2+3, 4+4] = [5, 8]; +b1 [0.5,-0.5] -> [5.5, 7.5]
        // h W2 = [5.5*1 + 7.5*0, 5.5*(-1) + 7.5*2] = [5.5, 9.5]; +b2 [1, 0] -> [6.5, 9.5]
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[2.0, 1.0])).unwrap();
        let w1 = g
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))
            .unwrap();
        let b1 = g.constant(Tensor::row(&[0.5, -0.5])).unwrap();
        let w2 = g
            .constant(Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 2.0]]))
            .unwrap();
        let b2 = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
        let out = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_eq!(eval(&g, out), vec![6.5, 9.5]);
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionParams::new(&mut store, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
        let p = AttentionParams::new(&mut store, "b", 512, 4, &mut rng).unwrap();
        assert_eq!(p.head_width(), 128);
        assert_eq!(store.count(), AttentionParams::param_count(512));
    }

    #[test]
    fn mha_output_shape_and_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AttentionParams::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = check_param_gradients(&store, |g, s| {
            let xv = g.constant(x.clone())?;
            let yv = g.constant(y.clone())?;
            let out = multi_head_attention(g, s, &params, xv, yv, yv, None)?;
            assert_eq!(g.value(out).shape(), &[3, 4]);
            let wv = g.constant(w.clone())?;
            let p = g.mul(out, wv)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
