use miat::attention::{
    multi_head_attention, multi_head_with, scaled_dot_attention, AttentionParams, LN_EPS,
};
use miat::autodiff::Graph;
use miat::ltmi::{
    count_parameters, frozen_projection, frozen_projections, ltmi_block, simplified_attention,
    LayerKind, LtmiBlock, LtmiStack, UtilityVar,
};
use miat::params::ParamStore;
use miat::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn attention_oracle(q: &Mat, kv: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = kv
                .iter()
                .map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..kv[0].len())
                .map(|c| e.iter().zip(kv).map(|(w, r)| w / z * r[c]).sum())
                .collect()
        })
        .collect()
}

/// Per-head attention on coordinate slices, pads appended to the memory.
fn simplified_oracle(x: &Mat, y: &Mat, pads: Option<&Mat>, heads: usize) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let mut mem = y.clone();
    if let Some(p) = pads {
        mem.extend(p.iter().cloned());
    }
    let mut out: Mat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let o = attention_oracle(&cols(x, h * dh, dh), &cols(&mem, h * dh, dh));
        for (r, row) in out.iter_mut().zip(o) {
            r.extend(row);
        }
    }
    out
}

fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .map(|v| (v - mean) / (var + LN_EPS).sqrt())
        .collect()
}

fn block_oracle(
    x: &Mat,
    x_pads: &Mat,
    sources: &[(Mat, Mat)],
    w: &Mat,
    b: &[f64],
    heads: usize,
) -> Mat {
    let mut parts = vec![simplified_oracle(x, x, Some(x_pads), heads)];
    for (y, p) in sources {
        parts.push(simplified_oracle(x, y, Some(p), heads));
    }
    (0..x.len())
        .map(|r| {
            let cat: Vec<f64> = parts.iter().flat_map(|p| p[r].clone()).collect();
            let pre: Vec<f64> = (0..b.len())
                .map(|j| {
                    (cat.iter().zip(w).map(|(c, wr)| c * wr[j]).sum::<f64>() + b[j]).max(0.0)
                        + x[r][j]
                })
                .collect();
            layer_norm(&pre)
        })
        .collect()
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    a.data()
        .iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn parameter_counts_for_three_utilities() {
    let ltmi = count_parameters(LayerKind::Ltmi, 3, 512, 1);
    let naive = count_parameters(LayerKind::Naive, 3, 512, 1);
    assert_eq!(ltmi, 2_366_976);
    assert_eq!(naive, 28_353_024);
    assert!((ltmi as f64 / naive as f64) < 0.1);
    assert_eq!(count_parameters(LayerKind::Ltmi, 1, 2, 1), 14);
}

#[test]
fn only_aggregation_norms_and_pads_are_learnable() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    LtmiStack::new(&mut store, "s", &["a", "b"], 2, 4, 2, &mut rng).unwrap();
    for (_, name, _) in store.iter() {
        let ok = name.contains(".pad.")
            || name.ends_with(".w")
            || name.ends_with(".b")
            || name.contains(".ln.");
        assert!(ok, "unexpected parameter {name}");
    }
    assert_eq!(store.count(), count_parameters(LayerKind::Ltmi, 2, 4, 2));

    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true).unwrap();
    let y = g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng)).unwrap();
    let o = simplified_attention(&mut g, x, y, None, 2).unwrap();
    let loss = g.sum(o).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.params().count(), 0);
}

#[test]
fn simplified_matches_frozen_multi_head_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for heads in [1, 2, 4] {
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let p = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, yv, pv) = (
            g.constant(x).unwrap(),
            g.constant(y).unwrap(),
            g.constant(p).unwrap(),
        );
        let simple = simplified_attention(&mut g, xv, yv, Some(pv), heads).unwrap();
        let mem = g.concat_rows(&[yv, pv]).unwrap();
        let proj = frozen_projections(&mut g, heads, 8).unwrap();
        let full = multi_head_with(&mut g, &proj, xv, mem, mem, None).unwrap();
        assert!(g.value(simple).max_abs_diff(g.value(full)) < 1e-12);
    }
}

#[test]
fn learnable_attention_initialised_to_frozen_values_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let params = AttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    for h in 0..2 {
        let f = frozen_projection(h + 1, 2, 4).unwrap();
        *store.get_mut(params.wq[h]) = f.clone();
        *store.get_mut(params.wk[h]) = f.clone();
        *store.get_mut(params.wv[h]) = f;
    }
    *store.get_mut(params.wo) = Tensor::eye(4);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let y = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x).unwrap(), g.constant(y).unwrap());
    let learn = multi_head_attention(&mut g, &store, &params, xv, yv, yv, None).unwrap();
    let simple = simplified_attention(&mut g, xv, yv, None, 2).unwrap();
    assert!(bits_equal(g.value(learn), g.value(simple)));
}

#[test]
fn one_head_without_pads_is_scaled_dot_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
    let y = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
    let a = simplified_attention(&mut g, x, y, None, 1).unwrap();
    let b = scaled_dot_attention(&mut g, x, y, y, None).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn hand_computed_single_utility_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let block = LtmiBlock::new(&mut store, "b", 1, 2, 1, &mut rng).unwrap();
    *store.get_mut(block.w) = Tensor::eye(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, 0.0]])).unwrap();
    let t = UtilityVar {
        index: 0,
        features: x,
        pads: None,
    };
    let o = ltmi_block(&mut g, &store, &block, &t, &[], None).unwrap();
    let s = 1.0 / (1.0 + LN_EPS).sqrt();
    assert!(g.value(o).max_abs_diff(&Tensor::from_rows(&[&[s, -s]])) < 1e-12);
}

#[test]
fn single_utility_stack_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let stack = LtmiStack::new(&mut store, "s", &["only"], 3, 4, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng)).unwrap();
    let out = stack.forward(&mut g, &store, &[x], None).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(g.value(out[0]).shape(), &[5, 4]);
    assert!(g.value(out[0]).data().iter().all(|v| v.is_finite()));
}

proptest! {
    #[test]
    fn simplified_attention_matches_oracle(heads in prop::sample::select(vec![1usize, 2, 4]), n in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[m, 4], 1.0, &mut rng);
        let p = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let want = simplified_oracle(&to_mat(&x), &to_mat(&y), Some(&to_mat(&p)), heads);
        let mut g = Graph::new();
        let (xv, yv, pv) = (g.constant(x).unwrap(), g.constant(y).unwrap(), g.constant(p).unwrap());
        let o = simplified_attention(&mut g, xv, yv, Some(pv), heads).unwrap();
        prop_assert!(max_diff(g.value(o), &want) < 1e-12);
    }

    #[test]
    fn block_matches_oracle_and_ignores_source_order(u in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = LtmiBlock::new(&mut store, "b", u, 4, 2, &mut rng).unwrap();
        *store.get_mut(block.b) = Tensor::randn(&[1, 4], 0.5, &mut rng);
        let feats: Vec<Tensor> = (0..u).map(|i| Tensor::randn(&[i + 1, 4], 1.0, &mut rng)).collect();
        let pads: Vec<Tensor> = (0..u).map(|_| Tensor::randn(&[2, 4], 1.0, &mut rng)).collect();

        let mut g = Graph::new();
        let utils: Vec<UtilityVar> = (0..u)
            .map(|i| UtilityVar {
                index: i,
                features: g.constant(feats[i].clone()).unwrap(),
                pads: Some(g.constant(pads[i].clone()).unwrap()),
            })
            .collect();
        let mut sources = utils[1..].to_vec();
        let a = ltmi_block(&mut g, &store, &block, &utils[0], &sources, None).unwrap();
        sources.shuffle(&mut rng);
        sources.reverse();
        let b = ltmi_block(&mut g, &store, &block, &utils[0], &sources, None).unwrap();
        prop_assert!(bits_equal(g.value(a), g.value(b)));

        let src: Vec<(Mat, Mat)> = (1..u).map(|i| (to_mat(&feats[i]), to_mat(&pads[i]))).collect();
        let want = block_oracle(
            &to_mat(&feats[0]),
            &to_mat(&pads[0]),
            &src,
            &to_mat(store.get(block.w)),
            store.get(block.b).data(),
            2,
        );
        prop_assert!(max_diff(g.value(a), &want) < 1e-10);
    }
}
