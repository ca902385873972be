use miat::autodiff::Graph;
use miat::encoders::{
    bilstm, coordinate_bins, lstm_cell, lstm_run, ImageEncoder, LstmParams, UtilityEncoder,
    COORD_BINS,
};
use miat::error::Error;
use miat::fusion::BBox;
use miat::params::ParamStore;
use miat::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM step over the stored gate matrices.
fn cell_oracle(
    store: &ParamStore,
    p: &LstmParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let pre: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            let (wx, wh, b) = (store.get(p.wx[k]), store.get(p.wh[k]), store.get(p.b[k]));
            (0..p.hidden)
                .map(|j| {
                    let a: f64 = x.iter().enumerate().map(|(i, v)| v * wx.get(i, j)).sum();
                    let r: f64 = h.iter().enumerate().map(|(i, v)| v * wh.get(i, j)).sum();
                    a + r + b.get(0, j)
                })
                .collect()
        })
        .collect();
    let c_new: Vec<f64> = (0..p.hidden)
        .map(|j| sig(pre[1][j]) * c[j] + sig(pre[0][j]) * pre[3][j].tanh())
        .collect();
    let h_new = (0..p.hidden)
        .map(|j| sig(pre[2][j]) * c_new[j].tanh())
        .collect();
    (h_new, c_new)
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn zero_weights_halve_the_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let p = LstmParams::new(&mut store, "l", 3, 2, &mut rng);
    zero_all(&mut store);
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, -2.0, 3.0])).unwrap();
    let h = g.constant(Tensor::row(&[0.3, 0.7])).unwrap();
    let c = g.constant(Tensor::row(&[2.0, -4.0])).unwrap();
    let (h1, c1) = lstm_cell(&mut g, &store, &p, x, h, c).unwrap();
    assert_eq!(g.value(c1).data(), &[1.0, -2.0]);
    let want = [0.5 * 1f64.tanh(), 0.5 * (-2f64).tanh()];
    assert!(g.value(h1).max_abs_diff(&Tensor::row(&want)) < 1e-15);

    let zero = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let (h0, c0) = lstm_cell(&mut g, &store, &p, x, zero, zero).unwrap();
    assert!(g
        .value(h0)
        .data()
        .iter()
        .chain(g.value(c0).data())
        .all(|&v| v == 0.0));
}

#[test]
fn sequence_run_matches_step_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let p = LstmParams::new(&mut store, "l", 3, 4, &mut rng);
    let xs: Vec<Tensor> = (0..6)
        .map(|_| Tensor::randn(&[1, 3], 1.0, &mut rng))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
    let hs = lstm_run(&mut g, &store, &p, &vars).unwrap();
    let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
    for (x, v) in xs.iter().zip(hs) {
        (h, c) = cell_oracle(&store, &p, x.data(), &h, &c);
        assert!(g.value(v).max_abs_diff(&Tensor::row(&h)) < 1e-12);
    }
}

#[test]
fn tied_bilstm_mirrors_on_palindromes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let p = LstmParams::new(&mut store, "l", 3, 4, &mut rng);
    let half: Vec<Tensor> = (0..3)
        .map(|_| Tensor::randn(&[1, 3], 1.0, &mut rng))
        .collect();
    let seq: Vec<Tensor> = half
        .iter()
        .chain(half.iter().rev().skip(1))
        .cloned()
        .collect();
    let mut g = Graph::new();
    let xs: Vec<_> = seq.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
    let (f, b) = bilstm(&mut g, &store, &p, &p, &xs).unwrap();
    let n = xs.len();
    for t in 0..n {
        let (a, z) = (g.value(f[t]), g.value(b[n - 1 - t]));
        assert!(a
            .data()
            .iter()
            .zip(z.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn utility_encoder_shapes_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = UtilityEncoder::new(&mut store, "q", 10, 6, 8, &mut rng);
    let mut g = Graph::new();
    let q = enc.encode_question(&mut g, &store, &[1, 4, 9, 2]).unwrap();
    assert_eq!(g.value(q).shape(), &[4, 8]);
    let h = enc
        .encode_history(&mut g, &store, &[vec![1, 2], vec![3], vec![4, 5, 6]])
        .unwrap();
    assert_eq!(g.value(h).shape(), &[3, 8]);
    assert!(matches!(
        enc.encode_question(&mut g, &store, &[]),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        enc.encode_question(&mut g, &store, &[10]),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        enc.encode_history(&mut g, &store, &[]),
        Err(Error::Data(_))
    ));
}

#[test]
fn image_encoder_shapes_and_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, "v", 5, 8, &mut rng);
    let boxes = [
        BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        BBox::new(0.25, 0.5, 0.5, 0.75).unwrap(),
    ];
    let mut g = Graph::new();
    let f = g.constant(Tensor::randn(&[2, 5], 1.0, &mut rng)).unwrap();
    let v = enc.encode(&mut g, &store, f, &boxes).unwrap();
    assert_eq!(g.value(v).shape(), &[2, 8]);
    assert!(matches!(
        enc.encode(&mut g, &store, f, &boxes[..1]),
        Err(Error::Dimension(_))
    ));

    assert_eq!(
        coordinate_bins(&boxes[0]).unwrap(),
        [0, 0, COORD_BINS - 1, COORD_BINS - 1]
    );
    assert_eq!(coordinate_bins(&boxes[1]).unwrap(), [150, 300, 300, 450]);
    let outside = BBox::new(-0.1, 0.0, 0.5, 0.5).unwrap();
    assert!(matches!(coordinate_bins(&outside), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn cell_matches_oracle(input in 1usize..5, hidden in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", input, hidden, &mut rng);
        for k in 0..4 {
            *store.get_mut(p.b[k]) = Tensor::randn(&[1, hidden], 1.0, &mut rng);
        }
        let x = Tensor::randn(&[1, input], 1.0, &mut rng);
        let h = Tensor::randn(&[1, hidden], 1.0, &mut rng);
        let c = Tensor::randn(&[1, hidden], 1.0, &mut rng);
        let (hw, cw) = cell_oracle(&store, &p, x.data(), h.data(), c.data());
        let mut g = Graph::new();
        let (xv, hv, cv) = (g.constant(x).unwrap(), g.constant(h).unwrap(), g.constant(c).unwrap());
        let (h1, c1) = lstm_cell(&mut g, &store, &p, xv, hv, cv).unwrap();
        prop_assert!(g.value(h1).max_abs_diff(&Tensor::row(&hw)) < 1e-12);
        prop_assert!(g.value(c1).max_abs_diff(&Tensor::row(&cw)) < 1e-12);
    }
}
