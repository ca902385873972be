use miat::attention::Linear;
use miat::attention::{multi_head_attention, AttentionParams, NormParams, LN_EPS};
use miat::autodiff::Graph;
use miat::error::Error;
use miat::fusion::{
    box_loss, concat_cross_attention, parallel_cross_attention_gates, self_critical_loss,
    sequential_cross_attention, xe_loss, BBox, FusionDesign, FusionLayer, GateMode, GateParams,
    Order,
};
use miat::params::ParamStore;
use miat::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 4;

struct Parallel {
    store: ParamStore,
    grid: AttentionParams,
    region: AttentionParams,
    gates: GateParams,
    norm: NormParams,
}

fn parallel(mode: GateMode, rng: &mut ChaCha8Rng) -> Parallel {
    let mut store = ParamStore::new();
    let grid = AttentionParams::new(&mut store, "g", D, 2, rng).unwrap();
    let region = AttentionParams::new(&mut store, "r", D, 2, rng).unwrap();
    let gates = GateParams {
        grid: Linear::new(&mut store, "cg", 2 * D, D, rng),
        region: Linear::new(&mut store, "cr", 2 * D, D, rng),
        mode,
    };
    let norm = NormParams::new(&mut store, "ln", D);
    Parallel {
        store,
        grid,
        region,
        gates,
        norm,
    }
}

fn layer_norm_rows(t: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .map(|v| (v - mean) / (var + LN_EPS).sqrt())
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&refs)
}

fn scalar(g: &Graph, v: miat::autodiff::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn identity_gates_reduce_to_normalised_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = parallel(GateMode::Identity, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let grid = g.constant(Tensor::randn(&[5, D], 1.0, &mut rng)).unwrap();
    let region = g.constant(Tensor::randn(&[2, D], 1.0, &mut rng)).unwrap();
    let (out, cg, cr) = parallel_cross_attention_gates(
        &mut g, &p.store, &p.grid, &p.region, &p.gates, &p.norm, x, grid, region,
    )
    .unwrap();
    assert!(g
        .value(cg)
        .data()
        .iter()
        .chain(g.value(cr).data())
        .all(|&c| c == 1.0));
    let ag = multi_head_attention(&mut g, &p.store, &p.grid, x, grid, grid, None).unwrap();
    let ar = multi_head_attention(&mut g, &p.store, &p.region, x, region, region, None).unwrap();
    let sum = g.add_many(&[ag, ar, x]).unwrap();
    let want = layer_norm_rows(g.value(sum));
    assert!(g.value(out).max_abs_diff(&want) < 1e-12);
}

#[test]
fn zero_gate_weights_open_gates_halfway() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = parallel(GateMode::Sigmoid, &mut rng);
    for id in [p.gates.grid.w, p.gates.region.w] {
        *p.store.get_mut(id) = Tensor::zeros(&[2 * D, D]);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let grid = g.constant(Tensor::randn(&[4, D], 1.0, &mut rng)).unwrap();
    let region = g.constant(Tensor::randn(&[4, D], 1.0, &mut rng)).unwrap();
    let (_, cg, cr) = parallel_cross_attention_gates(
        &mut g, &p.store, &p.grid, &p.region, &p.gates, &p.norm, x, grid, region,
    )
    .unwrap();
    assert!(g
        .value(cg)
        .data()
        .iter()
        .chain(g.value(cr).data())
        .all(|&c| c == 0.5));
}

#[test]
fn sequential_orders_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let a = AttentionParams::new(&mut store, "a", D, 2, &mut rng).unwrap();
    let b = AttentionParams::new(&mut store, "b", D, 2, &mut rng).unwrap();
    let na = NormParams::new(&mut store, "na", D);
    let nb = NormParams::new(&mut store, "nb", D);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let grid = g.constant(Tensor::randn(&[4, D], 1.0, &mut rng)).unwrap();
    let region = g.constant(Tensor::randn(&[2, D], 1.0, &mut rng)).unwrap();
    let gf = sequential_cross_attention(&mut g, &store, &a, &na, &b, &nb, x, grid, region).unwrap();
    let rf = sequential_cross_attention(&mut g, &store, &b, &nb, &a, &na, x, region, grid).unwrap();
    assert!(g.value(gf).max_abs_diff(g.value(rf)) > 1e-3);

    let mut store = ParamStore::new();
    let first = FusionLayer::new(
        &mut store,
        "f",
        FusionDesign::Sequential(Order::GridFirst),
        D,
        2,
        &mut rng,
    )
    .unwrap();
    let mut second = first.clone();
    second.design = FusionDesign::Sequential(Order::RegionFirst);
    let grid = g.value(grid).clone();
    let region = g.value(region).clone();
    let mut g = Graph::new();
    let grid = g.constant(grid).unwrap();
    let region = g.constant(region).unwrap();
    let w = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let o1 = first.forward(&mut g, &store, w, grid, region).unwrap();
    let o2 = second.forward(&mut g, &store, w, grid, region).unwrap();
    assert!(g.value(o1).max_abs_diff(g.value(o2)) > 1e-3);
}

#[test]
fn concat_design_accepts_an_empty_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", D, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let empty = g.constant(Tensor::zeros(&[0, D])).unwrap();
    let region = g.constant(Tensor::randn(&[2, D], 1.0, &mut rng)).unwrap();
    let a = concat_cross_attention(&mut g, &store, &attn, x, empty, region).unwrap();
    let b = multi_head_attention(&mut g, &store, &attn, x, region, region, None).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    assert!(matches!(
        concat_cross_attention(&mut g, &store, &attn, x, empty, empty),
        Err(Error::Dimension(_))
    ));

    let mut store = ParamStore::new();
    let layer = FusionLayer::new(&mut store, "f", FusionDesign::Concat, D, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, D], 1.0, &mut rng)).unwrap();
    let empty = g.constant(Tensor::zeros(&[0, D])).unwrap();
    let region = g.constant(Tensor::randn(&[2, D], 1.0, &mut rng)).unwrap();
    let out = layer.forward(&mut g, &store, x, empty, region).unwrap();
    assert_eq!(g.value(out).shape(), &[3, D]);
    assert!(g.value(out).is_finite());
}

#[test]
fn every_design_is_causal_over_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let designs = [
        FusionDesign::Concat,
        FusionDesign::Sequential(Order::GridFirst),
        FusionDesign::Sequential(Order::RegionFirst),
        FusionDesign::Parallel,
    ];
    for design in designs {
        let mut store = ParamStore::new();
        let layer = FusionLayer::new(&mut store, "f", design, D, 2, &mut rng).unwrap();
        let words = Tensor::randn(&[4, D], 1.0, &mut rng);
        let grid = Tensor::randn(&[3, D], 1.0, &mut rng);
        let region = Tensor::randn(&[2, D], 1.0, &mut rng);
        let run = |w: &Tensor| {
            let mut g = Graph::new();
            let w = g.constant(w.clone()).unwrap();
            let gr = g.constant(grid.clone()).unwrap();
            let re = g.constant(region.clone()).unwrap();
            let o = layer.forward(&mut g, &store, w, gr, re).unwrap();
            g.value(o).clone()
        };
        let base = run(&words);
        let mut moved = words.clone();
        for c in 0..D {
            moved.set(3, c, -5.0 + c as f64);
        }
        let out = run(&moved);
        for r in 0..3 {
            let same = base
                .row_slice(r)
                .iter()
                .zip(out.row_slice(r))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{design:?} row {r} saw a future word");
        }
        assert!(base.row_slice(3) != out.row_slice(3));
    }
}

#[test]
fn xe_closed_forms_and_gradient() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[3, 7]), true).unwrap();
    let l = xe_loss(&mut g, logits, &[0, 3, 6]).unwrap();
    assert!((scalar(&g, l) - 5.8377).abs() < 1e-4);
    let grads = g.backward(l).unwrap();
    let grad = grads.get(logits).unwrap();
    for (i, v) in grad.iter().enumerate() {
        let (r, c) = (i / 7, i % 7);
        let gold = [0, 3, 6][r] == c;
        let want = 1.0 / 7.0 - if gold { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-12);
    }
    let sharp = g
        .constant(Tensor::from_rows(&[&[800.0, 0.0], &[0.0, 800.0]]))
        .unwrap();
    let l = xe_loss(&mut g, sharp, &[0, 1]).unwrap();
    assert!(scalar(&g, l).abs() < 1e-12);
    assert!(matches!(
        xe_loss(&mut g, sharp, &[0]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn self_critical_examples() {
    let mut g = Graph::new();
    let lps = [-0.5, -1.0, -2.0, -0.25];
    let vars: Vec<_> = lps
        .iter()
        .map(|&v| g.leaf(Tensor::scalar(v), true).unwrap())
        .collect();
    let samples: Vec<(Vec<usize>, _)> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| (vec![i], v))
        .collect();
    let reward = |w: &[usize]| [1.0, 0.0, 2.0, 1.0][w[0]];
    let loss = self_critical_loss(&mut g, &samples, reward).unwrap();
    let want: f64 = lps
        .iter()
        .zip([0.0, -1.0, 1.0, 0.0])
        .map(|(lp, adv)| -adv * lp / 4.0)
        .sum();
    assert!((scalar(&g, loss) - want).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    for (v, adv) in vars.iter().zip([0.0, -1.0, 1.0, 0.0]) {
        assert!((grads.get(*v).unwrap()[0] + adv / 4.0).abs() < 1e-12);
    }
}

#[test]
fn box_loss_reference_pair() {
    let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    let l = box_loss(&a, &b).unwrap();
    assert!((l.l1 - 4.0).abs() < 1e-12);
    assert!((l.giou - 1.5).abs() < 1e-12);
    assert!((l.total - 23.0).abs() < 1e-12);
    let nested = box_loss(&BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), &a).unwrap();
    assert!((nested.giou - 0.75).abs() < 1e-12);
    assert!(matches!(BBox::new(1.0, 0.0, 0.0, 1.0), Err(Error::Data(_))));
    assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.01..10.0f64, 0.01..10.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = box_loss(&a, &b).unwrap();
        let ba = box_loss(&b, &a).unwrap();
        prop_assert!((ab.giou - ba.giou).abs() < 1e-12);
        prop_assert!(ab.giou >= -1e-12 && ab.giou <= 2.0 + 1e-12);
        prop_assert!(box_loss(&a, &a).unwrap().total.abs() < 1e-12);
    }
}
