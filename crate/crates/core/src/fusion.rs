//! Caption-generator layer fusing grid and region features, and the
//! captioning and box-regression losses.

use rand::Rng;

use crate::attention::{
    causal_mask, multi_head_attention, AttentionParams, FfnParams, Linear, NormParams,
};
use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;

/// Order of the two cross-attention sub-layers of the sequential design.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    GridFirst,
    RegionFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionDesign {
    Concat,
    Sequential(Order),
    Parallel,
}

/// Gate activation of the parallel design. `Identity` fixes both gates at one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Sigmoid,
    Identity,
}

fn check_width(g: &Graph, v: Var, d: usize, what: &str) -> Result<()> {
    let w = g.value(v).dims2()?.1;
    if w != d {
        return Err(dim_err!("{what} width {w}, expected {d}"));
    }
    Ok(())
}

fn nonempty(g: &Graph, v: Var) -> Result<bool> {
    Ok(g.value(v).dims2()?.0 > 0)
}

/// Cross-attention with keys and values `[grid; region]`. Either source may
/// have zero rows, but not both.
pub fn concat_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttentionParams,
    words: Var,
    grid: Var,
    region: Var,
) -> Result<Var> {
    for (v, what) in [(words, "word"), (grid, "grid"), (region, "region")] {
        check_width(g, v, params.d, what)?;
    }
    let parts: Vec<Var> = [grid, region]
        .into_iter()
        .filter(|&v| nonempty(g, v).unwrap_or(false))
        .collect();
    let kv = match parts.as_slice() {
        [] => return Err(dim_err!("no visual features to attend")),
        [one] => *one,
        _ => g.concat_rows(&parts)?,
    };
    multi_head_attention(g, store, params, words, kv, kv, None)
}

/// Cross-attention over `first`, residual and norm, then over `second`,
/// residual and norm.
#[allow(clippy::too_many_arguments)]
pub fn sequential_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    first_attn: &AttentionParams,
    first_norm: &NormParams,
    second_attn: &AttentionParams,
    second_norm: &NormParams,
    words: Var,
    first: Var,
    second: Var,
) -> Result<Var> {
    let a = multi_head_attention(g, store, first_attn, words, first, first, None)?;
    let h = g.add(words, a)?;
    let h = first_norm.forward(g, store, h)?;
    let b = multi_head_attention(g, store, second_attn, h, second, second, None)?;
    let o = g.add(h, b)?;
    second_norm.forward(g, store, o)
}

/// Parameters of the parallel design's two gates, each mapping `[a; x']` (2d) to d.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub grid: Linear,
    pub region: Linear,
    pub mode: GateMode,
}

/// Returns the fused output and the two gate activations `(c^g, c^r)`.
#[allow(clippy::too_many_arguments)]
pub fn parallel_cross_attention_gates(
    g: &mut Graph,
    store: &ParamStore,
    grid_attn: &AttentionParams,
    region_attn: &AttentionParams,
    gates: &GateParams,
    norm: &NormParams,
    x: Var,
    grid: Var,
    region: Var,
) -> Result<(Var, Var, Var)> {
    let ag = multi_head_attention(g, store, grid_attn, x, grid, grid, None)?;
    let ar = multi_head_attention(g, store, region_attn, x, region, region, None)?;
    let (cg, cr) = match gates.mode {
        GateMode::Sigmoid => {
            let zg = g.concat_cols(&[ag, x])?;
            let zg = gates.grid.forward(g, store, zg)?;
            let zr = g.concat_cols(&[ar, x])?;
            let zr = gates.region.forward(g, store, zr)?;
            (g.sigmoid(zg)?, g.sigmoid(zr)?)
        }
        GateMode::Identity => {
            let ones = g.constant(crate::tensor::Tensor::full(g.value(x).shape(), 1.0))?;
            (ones, ones)
        }
    };
    let gg = g.mul(cg, ag)?;
    let gr = g.mul(cr, ar)?;
    let sum = g.add_many(&[gg, gr, x])?;
    Ok((norm.forward(g, store, sum)?, cg, cr))
}

#[allow(clippy::too_many_arguments)]
pub fn parallel_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    grid_attn: &AttentionParams,
    region_attn: &AttentionParams,
    gates: &GateParams,
    norm: &NormParams,
    x: Var,
    grid: Var,
    region: Var,
) -> Result<Var> {
    parallel_cross_attention_gates(
        g,
        store,
        grid_attn,
        region_attn,
        gates,
        norm,
        x,
        grid,
        region,
    )
    .map(|r| r.0)
}

/// One caption-generator layer: masked self-attention, the chosen
/// dual-feature cross-attention, and a feed-forward sub-layer.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub design: FusionDesign,
    pub d: usize,
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    /// Grid attention; the single shared attention of the concat design.
    pub grid_attn: AttentionParams,
    pub region_attn: Option<AttentionParams>,
    pub grid_norm: NormParams,
    pub region_norm: Option<NormParams>,
    pub gates: Option<GateParams>,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
}

impl FusionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        design: FusionDesign,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = AttentionParams::new(store, &format!("{prefix}.self"), d, heads, rng)?;
        let self_norm = NormParams::new(store, &format!("{prefix}.self_ln"), d);
        let grid_attn = AttentionParams::new(store, &format!("{prefix}.grid"), d, heads, rng)?;
        let grid_norm = NormParams::new(store, &format!("{prefix}.grid_ln"), d);
        let (region_attn, region_norm) = match design {
            FusionDesign::Concat => (None, None),
            FusionDesign::Sequential(_) => (
                Some(AttentionParams::new(
                    store,
                    &format!("{prefix}.region"),
                    d,
                    heads,
                    rng,
                )?),
                Some(NormParams::new(store, &format!("{prefix}.region_ln"), d)),
            ),
            FusionDesign::Parallel => (
                Some(AttentionParams::new(
                    store,
                    &format!("{prefix}.region"),
                    d,
                    heads,
                    rng,
                )?),
                None,
            ),
        };
        let gates = (design == FusionDesign::Parallel).then(|| GateParams {
            grid: Linear::new(store, &format!("{prefix}.gate_g"), 2 * d, d, rng),
            region: Linear::new(store, &format!("{prefix}.gate_r"), 2 * d, d, rng),
            mode: GateMode::Sigmoid,
        });
        Ok(Self {
            design,
            d,
            self_attn,
            self_norm,
            grid_attn,
            region_attn,
            grid_norm,
            region_norm,
            gates,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), d, 4 * d, rng),
            ffn_norm: NormParams::new(store, &format!("{prefix}.ffn_ln"), d),
        })
    }

    /// `words` is `T×d`; self-attention is causal.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: Var,
        grid: Var,
        region: Var,
    ) -> Result<Var> {
        check_width(g, words, self.d, "word")?;
        let t = g.value(words).dims2()?.0;
        let mask = causal_mask(t)?;
        let s = multi_head_attention(g, store, &self.self_attn, words, words, words, Some(&mask))?;
        let x = g.add(words, s)?;
        let x = self.self_norm.forward(g, store, x)?;
        let missing = || Error::Config("fusion layer is missing parameters for its design".into());
        let fused = match self.design {
            FusionDesign::Concat => {
                let a = concat_cross_attention(g, store, &self.grid_attn, x, grid, region)?;
                let h = g.add(x, a)?;
                self.grid_norm.forward(g, store, h)?
            }
            FusionDesign::Sequential(order) => {
                let ra = self.region_attn.as_ref().ok_or_else(missing)?;
                let rn = self.region_norm.as_ref().ok_or_else(missing)?;
                match order {
                    Order::GridFirst => sequential_cross_attention(
                        g,
                        store,
                        &self.grid_attn,
                        &self.grid_norm,
                        ra,
                        rn,
                        x,
                        grid,
                        region,
                    )?,
                    Order::RegionFirst => sequential_cross_attention(
                        g,
                        store,
                        ra,
                        rn,
                        &self.grid_attn,
                        &self.grid_norm,
                        x,
                        region,
                        grid,
                    )?,
                }
            }
            FusionDesign::Parallel => {
                let ra = self.region_attn.as_ref().ok_or_else(missing)?;
                let gates = self.gates.as_ref().ok_or_else(missing)?;
                parallel_cross_attention(
                    g,
                    store,
                    &self.grid_attn,
                    ra,
                    gates,
                    &self.grid_norm,
                    x,
                    grid,
                    region,
                )?
            }
        };
        let f = self.ffn.forward(g, store, fused)?;
        let o = g.add(fused, f)?;
        self.ffn_norm.forward(g, store, o)
    }
}

/// `−Σ_t log softmax(logits_t)[gold_t]`.
pub fn xe_loss(g: &mut Graph, logits: Var, gold: &[usize]) -> Result<Var> {
    let (t, v) = g.value(logits).dims2()?;
    if t != gold.len() {
        return Err(dim_err!("{t} logit rows for {} gold tokens", gold.len()));
    }
    if let Some(&bad) = gold.iter().find(|&&w| w >= v) {
        return Err(Error::Data(format!(
            "gold token {bad} outside vocabulary of {v}"
        )));
    }
    let lp = g.log_softmax_rows(logits)?;
    let idx: Vec<(usize, usize)> = gold.iter().enumerate().map(|(r, &c)| (r, c)).collect();
    let picked = g.pick(lp, &idx)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Self-critical loss with the mean reward as baseline. Each sample is a
/// token sequence and its `1×1` log-probability node.
pub fn self_critical_loss<F>(g: &mut Graph, samples: &[(Vec<usize>, Var)], reward: F) -> Result<Var>
where
    F: Fn(&[usize]) -> f64,
{
    if samples.is_empty() {
        return Err(Error::Config(
            "self-critical loss needs at least one sample".into(),
        ));
    }
    let rewards: Vec<f64> = samples.iter().map(|(w, _)| reward(w)).collect();
    let k = samples.len() as f64;
    let baseline = rewards.iter().sum::<f64>() / k;
    let terms = samples
        .iter()
        .zip(&rewards)
        .map(|((_, lp), r)| g.scale(*lp, -(r - baseline) / k))
        .collect::<Result<Vec<_>>>()?;
    g.add_many(&terms)
}

/// Axis-aligned box given by its corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Data(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLoss {
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;

pub fn box_loss(b: &BBox, bhat: &BBox) -> Result<BoxLoss> {
    b.validate()?;
    bhat.validate()?;
    let l1 = (b.x1 - bhat.x1).abs()
        + (b.y1 - bhat.y1).abs()
        + (b.x2 - bhat.x2).abs()
        + (b.y2 - bhat.y2).abs();
    let iw = (b.x2.min(bhat.x2) - b.x1.max(bhat.x1)).max(0.0);
    let ih = (b.y2.min(bhat.y2) - b.y1.max(bhat.y1)).max(0.0);
    let inter = iw * ih;
    let union = b.area() + bhat.area() - inter;
    let enclose = (b.x2.max(bhat.x2) - b.x1.min(bhat.x1)) * (b.y2.max(bhat.y2) - b.y1.min(bhat.y1));
    let giou = 1.0 - (inter / union - (enclose - union) / enclose);
    Ok(BoxLoss {
        l1,
        giou,
        total: L1_WEIGHT * l1 + GIOU_WEIGHT * giou,
    })
}
