//! Finite-difference sweep over every tape op and every parameterized layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    causal_mask, multi_head_attention, scaled_dot_attention, AttentionParams, FfnParams,
};
use crate::autodiff::{Graph, Var};
use crate::decoders::{
    discriminative_loss, discriminative_scores, one_hot, GenerativeDecoder, Summarizer,
};
use crate::encoders::{bilstm, lstm_cell, ImageEncoder, LstmParams, UtilityEncoder};
use crate::error::Result;
use crate::fusion::{self_critical_loss, xe_loss, BBox, FusionDesign, FusionLayer, Order};
use crate::gradcheck::{check_gradients, check_param_gradients, GradReport};
use crate::hierview::{
    bce_with_logits, lwit_loss, ActionDecoder, HierarchicalAttention, MaskDecoder, TwoStageDecoder,
    ViewFusion,
};
use crate::ltmi::{simplified_attention, LtmiStack, NaiveExtensionLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type Check = (&'static str, GradReport);

const D: usize = 4;
const H: usize = 2;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(&[r, c], data).expect("consistent shape")
}

/// Contracts `x` with fixed pseudo-random weights into a scalar.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.value(x).shape(), 1.0, &mut rng);
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn op<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> Result<Check>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = check_gradients(&inputs, |g, v| {
        let out = f(g, v)?;
        probe(g, out, 99)
    })?;
    Ok((name, r))
}

fn ops(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let a = rand_t(rng, 3, 4);
    let b = rand_t(rng, 3, 4);
    let m = rand_t(rng, 4, 2);
    let row = rand_t(rng, 1, 4);
    let col = rand_t(rng, 3, 1);
    let pos = Tensor::new(&[3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let kink = away_from_zero(rng, 3, 4);
    let gap = Tensor::new(
        &[3, 4],
        b.data().iter().map(|v| v + 0.3 * v.signum()).collect(),
    )?;
    let far = Tensor::new(
        &[3, 4],
        a.data()
            .iter()
            .zip(gap.data())
            .map(|(x, y)| x + 0.5 + (y - x).abs())
            .collect(),
    )?;
    Ok(vec![
        op("matmul", vec![a.clone(), m.clone()], |g, v| {
            g.matmul(v[0], v[1])
        })?,
        op("transpose", vec![a.clone()], |g, v| g.transpose(v[0]))?,
        op("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?,
        op("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?,
        op("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))?,
        op("maximum", vec![far.clone(), gap.clone()], |g, v| {
            g.maximum(v[0], v[1])
        })?,
        op("minimum", vec![far.clone(), gap.clone()], |g, v| {
            g.minimum(v[0], v[1])
        })?,
        op("add_row", vec![a.clone(), row.clone()], |g, v| {
            g.add_row(v[0], v[1])
        })?,
        op("mul_col", vec![a.clone(), col.clone()], |g, v| {
            g.mul_col(v[0], v[1])
        })?,
        op("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7))?,
        op("add_scalar", vec![a.clone()], |g, v| {
            g.add_scalar(v[0], 0.3)
        })?,
        op("relu", vec![kink.clone()], |g, v| g.relu(v[0]))?,
        op("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]))?,
        op("tanh", vec![a.clone()], |g, v| g.tanh(v[0]))?,
        op("exp", vec![a.clone()], |g, v| g.exp(v[0]))?,
        op("log", vec![pos.clone()], |g, v| g.log(v[0]))?,
        op("abs", vec![kink.clone()], |g, v| g.abs(v[0]))?,
        op("softmax_rows", vec![a.clone()], |g, v| g.softmax_rows(v[0]))?,
        op("log_softmax_rows", vec![a.clone()], |g, v| {
            g.log_softmax_rows(v[0])
        })?,
        op(
            "layer_norm",
            vec![a.clone(), row.clone(), rand_t(rng, 1, 4)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        )?,
        op("slice_cols", vec![a.clone()], |g, v| {
            g.slice_cols(v[0], 1, 2)
        })?,
        op("slice_rows", vec![a.clone()], |g, v| {
            g.slice_rows(v[0], 1, 2)
        })?,
        op("concat_cols", vec![a.clone(), col.clone()], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        })?,
        op("concat_rows", vec![a.clone(), row.clone()], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        })?,
        op("gather_rows", vec![a.clone()], |g, v| {
            g.gather_rows(v[0], &[2, 0, 2])
        })?,
        op("pick", vec![a.clone()], |g, v| {
            g.pick(v[0], &[(0, 1), (2, 3), (0, 1)])
        })?,
        op("sum", vec![a.clone()], |g, v| g.sum(v[0]))?,
        op("mean", vec![a.clone()], |g, v| g.mean(v[0]))?,
        op("sum_rows", vec![a.clone()], |g, v| g.sum_rows(v[0]))?,
        op("sum_cols", vec![a.clone()], |g, v| g.sum_cols(v[0]))?,
        op("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]))?,
        op(
            "add_many",
            vec![a.clone(), b.clone(), pos.clone()],
            |g, v| g.add_many(v),
        )?,
    ])
}

/// Registers `t` as a parameter so layer inputs are checked alongside weights.
fn input(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    store.add(format!("input.{name}"), t)
}

fn layer<F>(name: &'static str, store: &ParamStore, f: F) -> Result<Check>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let r = check_param_gradients(store, |g, s| {
        let out = f(g, s)?;
        if g.value(out).len() == 1 {
            Ok(out)
        } else {
            probe(g, out, 7)
        }
    })?;
    Ok((name, r))
}

fn attention_layers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();

    let qkv = [rand_t(rng, 3, D), rand_t(rng, 4, D), rand_t(rng, 4, D)];
    out.push(op("scaled_dot_attention", qkv.to_vec(), |g, v| {
        scaled_dot_attention(g, v[0], v[1], v[2], None)
    })?);
    out.push(op("causal_attention", vec![qkv[0].clone(); 3], |g, v| {
        scaled_dot_attention(g, v[0], v[1], v[2], Some(&causal_mask(3)?))
    })?);
    out.push(op(
        "simplified_attention",
        vec![qkv[0].clone(), qkv[1].clone(), rand_t(rng, 2, D)],
        |g, v| simplified_attention(g, v[0], v[1], Some(v[2]), H),
    )?);

    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "mha", D, H, rng)?;
    let x = input(&mut s, "x", qkv[0].clone());
    let y = input(&mut s, "y", qkv[1].clone());
    out.push(layer("multi_head_attention", &s, |g, s| {
        let (x, y) = (g.param(s, x), g.param(s, y));
        multi_head_attention(g, s, &p, x, y, y, None)
    })?);

    let mut s = ParamStore::new();
    let f = FfnParams::new(&mut s, "ffn", D, 2 * D, rng);
    let x = input(&mut s, "x", qkv[0].clone());
    out.push(layer("ffn", &s, |g, s| {
        let x = g.param(s, x);
        f.forward(g, s, x)
    })?);
    Ok(out)
}

fn utility_layers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let names = ["a", "b", "c"];
    let mut s = ParamStore::new();
    let stack = LtmiStack::new(&mut s, "ltmi", &names, 2, D, H, rng)?;
    let xs: Vec<ParamId> = [2, 3, 1]
        .iter()
        .enumerate()
        .map(|(i, &r)| input(&mut s, names[i], rand_t(rng, r, D)))
        .collect();
    out.push(layer("ltmi_stack", &s, |g, s| {
        let feats: Vec<Var> = xs.iter().map(|&x| g.param(s, x)).collect();
        let ys = stack.forward(g, s, &feats, None)?;
        let ys = ys
            .iter()
            .map(|&y| g.sum_rows(y))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&ys)
    })?);

    let mut s = ParamStore::new();
    let naive = NaiveExtensionLayer::new(&mut s, "naive", 2, D, H, rng)?;
    let xs: Vec<ParamId> = [2, 3]
        .iter()
        .enumerate()
        .map(|(i, &r)| input(&mut s, names[i], rand_t(rng, r, D)))
        .collect();
    out.push(layer("naive_extension", &s, |g, s| {
        let feats: Vec<Var> = xs.iter().map(|&x| g.param(s, x)).collect();
        let ys = naive.forward(g, s, &feats)?;
        g.concat_rows(&ys)
    })?);

    let mut s = ParamStore::new();
    let sm = Summarizer::new(&mut s, "sum", D, rng);
    let u = input(&mut s, "u", rand_t(rng, 3, D));
    let c = input(&mut s, "cands", rand_t(rng, 5, D));
    out.push(layer("summarizer_discriminative", &s, |g, s| {
        let u = g.param(s, u);
        let ctx = sm.forward(g, s, u)?;
        let cands = g.param(s, c);
        let p = discriminative_scores(g, cands, ctx)?;
        discriminative_loss(g, p, &one_hot(5, 2)?)
    })?);

    let mut s = ParamStore::new();
    let gen = GenerativeDecoder::new(&mut s, "gen", 6, 3, D, 0, rng);
    let c = input(&mut s, "c", rand_t(rng, 1, D));
    out.push(layer("generative_decoder", &s, |g, s| {
        let c = g.param(s, c);
        gen.scores(g, s, &[vec![1, 2], vec![3, 4, 5]], c)
    })?);
    Ok(out)
}

fn fusion_layers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let designs = [
        ("fusion_concat", FusionDesign::Concat),
        (
            "fusion_sequential_grid_first",
            FusionDesign::Sequential(Order::GridFirst),
        ),
        (
            "fusion_sequential_region_first",
            FusionDesign::Sequential(Order::RegionFirst),
        ),
        ("fusion_parallel", FusionDesign::Parallel),
    ];
    for (name, design) in designs {
        let mut s = ParamStore::new();
        let l = FusionLayer::new(&mut s, "fusion", design, D, H, rng)?;
        let w = input(&mut s, "words", rand_t(rng, 3, D));
        let gr = input(&mut s, "grid", rand_t(rng, 4, D));
        let rg = input(&mut s, "region", rand_t(rng, 2, D));
        out.push(layer(name, &s, |g, s| {
            let (w, gr, rg) = (g.param(s, w), g.param(s, gr), g.param(s, rg));
            let h = l.forward(g, s, w, gr, rg)?;
            xe_loss(g, h, &[0, 3, 1])
        })?);
    }

    out.push(op(
        "self_critical_loss",
        vec![rand_t(rng, 1, 3)],
        |g, v| {
            let lp = g.log_softmax_rows(v[0])?;
            let samples = (0..3)
                .map(|i| Ok((vec![i], g.pick(lp, &[(0, i)])?)))
                .collect::<Result<Vec<_>>>()?;
            self_critical_loss(g, &samples, |w: &[usize]| w[0] as f64 * 0.7)
        },
    )?);
    Ok(out)
}

fn encoder_layers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut s = ParamStore::new();
    let p = LstmParams::new(&mut s, "lstm", 3, D, rng);
    let x = input(&mut s, "x", rand_t(rng, 1, 3));
    let h = input(&mut s, "h", rand_t(rng, 1, D));
    let c = input(&mut s, "c", rand_t(rng, 1, D));
    out.push(layer("lstm_cell", &s, |g, s| {
        let (x, h, c) = (g.param(s, x), g.param(s, h), g.param(s, c));
        let (h, c) = lstm_cell(g, s, &p, x, h, c)?;
        g.concat_cols(&[h, c])
    })?);

    let mut s = ParamStore::new();
    let f = LstmParams::new(&mut s, "fwd", 3, D, rng);
    let b = LstmParams::new(&mut s, "bwd", 3, D, rng);
    let xs: Vec<ParamId> = (0..3)
        .map(|i| input(&mut s, &format!("x{i}"), rand_t(rng, 1, 3)))
        .collect();
    out.push(layer("bilstm", &s, |g, s| {
        let xs: Vec<Var> = xs.iter().map(|&x| g.param(s, x)).collect();
        let (hf, hb) = bilstm(g, s, &f, &b, &xs)?;
        let all: Vec<Var> = hf.into_iter().chain(hb).collect();
        g.concat_rows(&all)
    })?);

    let mut s = ParamStore::new();
    let enc = UtilityEncoder::new(&mut s, "utility", 7, 3, D, rng);
    out.push(layer("utility_encoder", &s, |g, s| {
        let q = enc.encode_question(g, s, &[1, 4, 2])?;
        let r = enc.encode_history(g, s, &[vec![3, 5], vec![6]])?;
        g.concat_rows(&[q, r])
    })?);

    let mut s = ParamStore::new();
    let enc = ImageEncoder::new(&mut s, "image", 3, D, rng);
    let feats = input(&mut s, "features", rand_t(rng, 2, 3));
    let boxes = [
        BBox::new(0.1, 0.2, 0.5, 0.9)?,
        BBox::new(0.0, 0.0, 1.0, 1.0)?,
    ];
    out.push(layer("image_encoder", &s, |g, s| {
        let f = g.param(s, feats);
        enc.encode(g, s, f, &boxes)
    })?);
    Ok(out)
}

fn hierview_layers(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, mode) in [
        ("hierarchical_gated", ViewFusion::Gated),
        ("hierarchical_softmax", ViewFusion::Softmax),
    ] {
        let mut s = ParamStore::new();
        let mut ha = HierarchicalAttention::new(&mut s, "views", 3, D, rng);
        ha.mode = mode;
        let views: Vec<ParamId> = (0..3)
            .map(|k| input(&mut s, &format!("v{k}"), rand_t(rng, 2, D)))
            .collect();
        let q = input(&mut s, "s", rand_t(rng, 1, D));
        let conf = vec![vec![0.9, 0.3], vec![0.5, 1.0], vec![0.2, 0.7]];
        out.push(layer(name, &s, |g, s| {
            let vs: Vec<Var> = views.iter().map(|&v| g.param(s, v)).collect();
            let q = g.param(s, q);
            ha.forward(g, s, &vs, &conf, q)
        })?);
    }

    let (na, no) = (4, 3);
    let mut s = ParamStore::new();
    let ts = TwoStageDecoder::new(
        &mut s,
        "two_stage",
        vec![true, true, false, false],
        no,
        3,
        D,
        rng,
    );
    let act = ActionDecoder::new(&mut s, "action", D, na, no, rng);
    let mask = MaskDecoder::new(&mut s, "mask", D, D + na + no, rng)?;
    let instr = input(&mut s, "s", rand_t(rng, 1, D));
    let v = input(&mut s, "v", rand_t(rng, 1, D));
    let objs = input(&mut s, "objects", rand_t(rng, 3, D));
    out.push(layer("instruction_decoders", &s, |g, s| {
        let sv = g.param(s, instr);
        let vv = g.param(s, v);
        let ov = g.param(s, objs);
        let mut st = ts.reset(g, sv)?;
        let mut h = sv;
        let mut c = g.constant(Tensor::zeros(&[1, D]))?;
        let mut rows = Vec::new();
        let mut aux_a = Vec::new();
        let mut aux_o = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..2 {
            let o = ts.step(g, s, &mut st)?;
            aux_a.push(o.logits_a);
            aux_o.push(o.logits_o);
            let (h2, c2, z) = act.step(g, s, vv, sv, o.fwd_a, o.fwd_o, h, c)?;
            (h, c) = (h2, c2);
            rows.push(z);
            let guide = g.concat_cols(&[sv, o.fwd_a, o.fwd_o])?;
            masks.push((mask.logits(g, s, ov, guide)?, 1));
        }
        let logits = g.concat_rows(&rows)?;
        let za = g.concat_rows(&aux_a)?;
        let zo = g.concat_rows(&aux_o)?;
        let aux = [(za, vec![2, 0]), (zo, vec![1, 2])];
        Ok(lwit_loss(g, &masks, logits, &[2, na], &aux)?.total)
    })?);

    out.push(op("bce_with_logits", vec![rand_t(rng, 1, 4)], |g, v| {
        bce_with_logits(g, v[0], 2)
    })?);
    Ok(out)
}

/// Runs every check with a fixed seed.
pub fn gradcheck_sweep() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut all = ops(&mut rng)?;
    all.extend(attention_layers(&mut rng)?);
    all.extend(utility_layers(&mut rng)?);
    all.extend(fusion_layers(&mut rng)?);
    all.extend(encoder_layers(&mut rng)?);
    all.extend(hierview_layers(&mut rng)?);
    Ok(all)
}
