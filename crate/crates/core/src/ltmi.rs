//! Lightweight attention over many utilities, the naive multi-utility
//! Transformer it replaces, and parameter accounting for both.

use rand::Rng;

use crate::attention::{
    head_width, scaled_dot_attention, AttentionParams, FfnParams, HeadProjections, NormParams,
};
use crate::autodiff::{Graph, TrainRng, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Dropout applied to the aggregation output inside every block.
pub const BLOCK_DROPOUT: f64 = 0.1;

/// Selects the contiguous coordinate slice of head `h` (1-based) out of `H`.
pub fn frozen_projection(h: usize, heads: usize, d: usize) -> Result<Tensor> {
    let dh = head_width(d, heads)?;
    if h == 0 || h > heads {
        return Err(Error::Config(format!("head index {h} outside 1..={heads}")));
    }
    let mut t = Tensor::zeros(&[d, dh]);
    for i in 0..dh {
        t.set((h - 1) * dh + i, i, 1.0);
    }
    Ok(t)
}

/// Frozen projections for every head, as constants, with an identity output map.
pub fn frozen_projections(g: &mut Graph, heads: usize, d: usize) -> Result<HeadProjections> {
    let mut wq = Vec::with_capacity(heads);
    for h in 1..=heads {
        wq.push(g.constant(frozen_projection(h, heads, d)?)?);
    }
    Ok(HeadProjections {
        wk: wq.clone(),
        wv: wq.clone(),
        wq,
        wo: None,
    })
}

/// `Ā_Y(X)`: per-head attention over coordinate slices with the identity
/// output map. `pads` (a `2×d` node) is appended to the keys and values only.
pub fn simplified_attention(
    g: &mut Graph,
    x: Var,
    y: Var,
    pads: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    let (_, dy) = g.value(y).dims2()?;
    if d != dy {
        return Err(dim_err!("target width {d} vs source width {dy}"));
    }
    let dh = head_width(d, heads)?;
    let mem = match pads {
        Some(p) => {
            let pw = g.value(p).dims2()?.1;
            if pw != d {
                return Err(dim_err!("pad width {pw} vs source width {d}"));
            }
            g.concat_rows(&[y, p])?
        }
        None => y,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(x, h * dh, dh)?;
        let kv = g.slice_cols(mem, h * dh, dh)?;
        outs.push(scaled_dot_attention(g, q, kv, kv, None)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// A utility placed on a graph: its canonical position, features and pads.
#[derive(Clone, Copy, Debug)]
pub struct UtilityVar {
    pub index: usize,
    pub features: Var,
    pub pads: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LtmiBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: NormParams,
    pub heads: usize,
    pub arity: usize,
}

impl LtmiBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        arity: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        head_width(d, heads)?;
        if arity == 0 {
            return Err(Error::Config("a block needs at least one utility".into()));
        }
        Ok(Self {
            w: store.add(format!("{prefix}.w"), Tensor::he_normal(arity * d, d, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, d])),
            norm: NormParams::new(store, &format!("{prefix}.ln"), d),
            heads,
            arity,
        })
    }

    pub fn param_count(arity: usize, d: usize) -> usize {
        arity * d * d + d + 2 * d
    }
}

/// `LayerNorm(ReLU([Ā_X(X), Ā_Y1(X), ...]·W + b) + X)`.
///
/// Sources are reordered by canonical index, so the caller's order does not
/// matter. Dropout is active only when `rng` is given.
pub fn ltmi_block(
    g: &mut Graph,
    store: &ParamStore,
    block: &LtmiBlock,
    target: &UtilityVar,
    sources: &[UtilityVar],
    rng: TrainRng<'_>,
) -> Result<Var> {
    if sources.len() + 1 != block.arity {
        return Err(dim_err!(
            "block built for {} utilities, got {}",
            block.arity,
            sources.len() + 1
        ));
    }
    let x = target.features;
    let d = g.value(x).dims2()?.1;
    let mut ordered: Vec<&UtilityVar> = sources.iter().collect();
    ordered.sort_by_key(|u| u.index);
    if ordered.windows(2).any(|w| w[0].index == w[1].index)
        || ordered.iter().any(|u| u.index == target.index)
    {
        return Err(Error::Config("duplicate utility among block inputs".into()));
    }
    let mut parts = vec![simplified_attention(g, x, x, target.pads, block.heads)?];
    for src in ordered {
        let w = g.value(src.features).dims2()?.1;
        if w != d {
            return Err(dim_err!("source width {w} vs target width {d}"));
        }
        parts.push(simplified_attention(
            g,
            x,
            src.features,
            src.pads,
            block.heads,
        )?);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)?
    };
    let w = g.param(store, block.w);
    let b = g.param(store, block.b);
    let lin = g.matmul(cat, w)?;
    let lin = g.add_row(lin, b)?;
    let lin = match rng {
        Some(r) => g.dropout(lin, BLOCK_DROPOUT, true, r)?,
        None => lin,
    };
    let act = g.relu(lin)?;
    let res = g.add(act, x)?;
    block.norm.forward(g, store, res)
}

#[derive(Clone, Debug)]
pub struct LtmiLayer {
    pub blocks: Vec<LtmiBlock>,
}

impl LtmiLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        utilities: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if utilities == 0 {
            return Err(Error::Config("a layer needs at least one utility".into()));
        }
        let blocks = (0..utilities)
            .map(|u| {
                LtmiBlock::new(
                    store,
                    &format!("{prefix}.block{u}"),
                    utilities,
                    d,
                    heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

/// Updates every utility from the pre-layer values. `utils[u].index` must be `u`.
pub fn ltmi_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LtmiLayer,
    utils: &[UtilityVar],
    mut rng: TrainRng<'_>,
) -> Result<Vec<UtilityVar>> {
    if utils.is_empty() {
        return Err(Error::Config("a layer needs at least one utility".into()));
    }
    if utils.len() != layer.blocks.len() {
        return Err(dim_err!(
            "layer has {} blocks, got {} utilities",
            layer.blocks.len(),
            utils.len()
        ));
    }
    let mut out = Vec::with_capacity(utils.len());
    for (u, block) in layer.blocks.iter().enumerate() {
        let sources: Vec<UtilityVar> = utils
            .iter()
            .filter(|s| s.index != utils[u].index)
            .copied()
            .collect();
        let features = ltmi_block(g, store, block, &utils[u], &sources, rng.as_deref_mut())?;
        out.push(UtilityVar {
            features,
            ..utils[u]
        });
    }
    Ok(out)
}

/// `L` stacked layers over `U` named utilities with pads shared across stacks.
#[derive(Clone, Debug)]
pub struct LtmiStack {
    pub names: Vec<String>,
    pub d: usize,
    pub heads: usize,
    pub pads: Vec<ParamId>,
    pub layers: Vec<LtmiLayer>,
}

impl LtmiStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        names: &[&str],
        layers: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("no utilities".into()));
        }
        head_width(d, heads)?;
        let pads = names
            .iter()
            .map(|n| {
                store.add(
                    format!("{prefix}.pad.{n}"),
                    Tensor::randn(&[2, d], 1.0, rng),
                )
            })
            .collect();
        let layers = (0..layers)
            .map(|l| {
                LtmiLayer::new(
                    store,
                    &format!("{prefix}.layer{l}"),
                    names.len(),
                    d,
                    heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            d,
            heads,
            pads,
            layers,
        })
    }

    /// Runs every layer; `features[u]` belongs to utility `names[u]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Var],
        mut rng: TrainRng<'_>,
    ) -> Result<Vec<Var>> {
        if features.len() != self.names.len() {
            return Err(dim_err!(
                "{} utilities declared, {} given",
                self.names.len(),
                features.len()
            ));
        }
        let mut utils: Vec<UtilityVar> = features
            .iter()
            .enumerate()
            .map(|(index, &f)| UtilityVar {
                index,
                features: f,
                pads: Some(g.param(store, self.pads[index])),
            })
            .collect();
        for layer in &self.layers {
            utils = ltmi_layer(g, store, layer, &utils, rng.as_deref_mut())?;
        }
        Ok(utils.into_iter().map(|u| u.features).collect())
    }
}

/// One post-norm Transformer block attending a target to one source.
#[derive(Clone, Debug)]
pub struct NaiveBlock {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl NaiveBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), d, heads, rng)?,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), d, 4 * d, rng),
            norm1: NormParams::new(store, &format!("{prefix}.ln1"), d),
            norm2: NormParams::new(store, &format!("{prefix}.ln2"), d),
        })
    }

    pub fn param_count(d: usize) -> usize {
        AttentionParams::param_count(d) + FfnParams::param_count(d, 4 * d) + 4 * d
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let a = crate::attention::multi_head_attention(g, store, &self.attn, x, y, y, None)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, h)?;
        let o = g.add(h, f)?;
        self.norm2.forward(g, store, o)
    }
}

/// `U²` Transformer blocks: for each target, one self block and one cross
/// block per other utility. The block outputs of a target are averaged.
#[derive(Clone, Debug)]
pub struct NaiveExtensionLayer {
    pub utilities: usize,
    /// `blocks[target][source]`.
    pub blocks: Vec<Vec<NaiveBlock>>,
}

impl NaiveExtensionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        utilities: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if utilities == 0 {
            return Err(Error::Config("a layer needs at least one utility".into()));
        }
        let mut blocks = Vec::with_capacity(utilities);
        for t in 0..utilities {
            let row = (0..utilities)
                .map(|s| NaiveBlock::new(store, &format!("{prefix}.t{t}.s{s}"), d, heads, rng))
                .collect::<Result<_>>()?;
            blocks.push(row);
        }
        Ok(Self { utilities, blocks })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Vec<Var>> {
        if features.len() != self.utilities {
            return Err(dim_err!(
                "{} utilities expected, got {}",
                self.utilities,
                features.len()
            ));
        }
        let mut out = Vec::with_capacity(self.utilities);
        for (t, row) in self.blocks.iter().enumerate() {
            let parts = row
                .iter()
                .enumerate()
                .map(|(s, b)| b.forward(g, store, features[t], features[s]))
                .collect::<Result<Vec<_>>>()?;
            let sum = g.add_many(&parts)?;
            out.push(g.scale(sum, 1.0 / parts.len() as f64)?);
        }
        Ok(out)
    }
}

/// Which architecture [`count_parameters`] should account for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Ltmi,
    Naive,
}

/// Learnable scalars of `layers` stacked layers over `u` utilities of width `d`.
///
/// LTMI counts each block's aggregation weight, bias and layer norm, plus two
/// pad vectors per utility shared by all stacks. The naive layer counts
/// Q/K/V/O, a `4d` FFN with biases and two layer norms per block.
pub fn count_parameters(kind: LayerKind, u: usize, d: usize, layers: usize) -> usize {
    match kind {
        LayerKind::Ltmi => layers * u * LtmiBlock::param_count(u, d) + u * 2 * d,
        LayerKind::Naive => layers * u * u * NaiveBlock::param_count(d),
    }
}
