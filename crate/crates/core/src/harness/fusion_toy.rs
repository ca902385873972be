//! Copy-style captioning over synthetic grid and region features.
//!
//! Regions carry an object class and their slot; the grid cells carry a scene
//! class. The caption lists the region classes in slot order followed by the
//! scene, so a decoder has to read both feature sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{sinusoidal_pe, Linear};
use crate::autodiff::{Graph, TrainRng, Var};
use crate::error::{Error, Result};
use crate::fusion::{xe_loss, FusionDesign, FusionLayer};
use crate::harness::records::{field, Record};
use crate::hierview::argmax;
use crate::metrics::MetricMeans;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FEATURES: usize = 16;
pub const REGIONS: usize = 3;
pub const GRID: usize = 4;
pub const CLASSES: usize = 6;
pub const SCENES: usize = 3;
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const VOCAB: usize = 2 + CLASSES + SCENES;
pub const NOISE: f64 = 0.1;
pub const MAGIC: &[u8; 4] = b"MIFT";

#[derive(Clone, Debug, PartialEq)]
pub struct FusionExample {
    pub grid: Tensor,
    pub region: Tensor,
    /// `BOS, class_1..class_N, scene, EOS`.
    pub caption: Vec<usize>,
}

impl FusionExample {
    pub fn to_record(&self) -> Record {
        let cap: Vec<f64> = self.caption.iter().map(|&t| t as f64).collect();
        vec![
            ("grid".into(), self.grid.clone()),
            ("region".into(), self.region.clone()),
            ("caption".into(), Tensor::row(&cap)),
        ]
    }

    pub fn from_record(rec: &Record) -> Result<Self> {
        let caption = field(rec, "caption")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < VOCAB {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("caption token {v} is invalid")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ex = Self {
            grid: field(rec, "grid")?.clone(),
            region: field(rec, "region")?.clone(),
            caption,
        };
        if ex.grid.shape() != [GRID, FEATURES]
            || ex.region.shape() != [REGIONS, FEATURES]
            || ex.caption.len() != REGIONS + 3
        {
            return Err(Error::Data("fusion example has unexpected shapes".into()));
        }
        Ok(ex)
    }
}

fn table<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    (0..rows)
        .map(|_| (0..FEATURES).map(|_| unit.sample(rng)).collect())
        .collect()
}

pub fn generate_splits(
    seed: u64,
    train: usize,
    test: usize,
) -> (Vec<FusionExample>, Vec<FusionExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = table(CLASSES, &mut rng);
    let slots = table(REGIONS, &mut rng);
    let scenes = table(SCENES, &mut rng);
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let make = |rng: &mut ChaCha8Rng| {
        let mut region = Tensor::zeros(&[REGIONS, FEATURES]);
        let mut caption = vec![BOS];
        for (i, slot) in slots.iter().enumerate() {
            let c = rng.random_range(0..CLASSES);
            caption.push(2 + c);
            for (f, (cv, sv)) in classes[c].iter().zip(slot).enumerate() {
                region.set(i, f, cv + sv + noise.sample(rng));
            }
        }
        let s = rng.random_range(0..SCENES);
        caption.push(2 + CLASSES + s);
        caption.push(EOS);
        let mut grid = Tensor::zeros(&[GRID, FEATURES]);
        for m in 0..GRID {
            for (f, v) in scenes[s].iter().enumerate() {
                grid.set(m, f, v + noise.sample(rng));
            }
        }
        FusionExample {
            grid,
            region,
            caption,
        }
    };
    let a = (0..train).map(|_| make(&mut rng)).collect();
    let b = (0..test).map(|_| make(&mut rng)).collect();
    (a, b)
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub d: usize,
    pub embed: crate::params::ParamId,
    pub grid_proj: Linear,
    pub region_proj: Linear,
    pub layer: FusionLayer,
    pub out: Linear,
}

impl CaptionModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        design: FusionDesign,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            d,
            embed: store.add("caption.embed", Tensor::randn(&[VOCAB, d], 1.0, rng)),
            grid_proj: Linear::new(store, "caption.grid", FEATURES, d, rng),
            region_proj: Linear::new(store, "caption.region", FEATURES, d, rng),
            layer: FusionLayer::new(store, "caption.fusion", design, d, heads, rng)?,
            out: Linear::new(store, "caption.out", d, VOCAB, rng),
        })
    }

    /// Next-token logits for every caption prefix, `(T-1)×V`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, ex: &FusionExample) -> Result<Var> {
        let inputs = &ex.caption[..ex.caption.len() - 1];
        let table = g.param(store, self.embed);
        let words = g.gather_rows(table, inputs)?;
        let pe = g.constant(sinusoidal_pe(inputs.len(), self.d)?)?;
        let words = g.add(words, pe)?;
        let grid = g.constant(ex.grid.clone())?;
        let grid = self.grid_proj.forward(g, store, grid)?;
        let region = g.constant(ex.region.clone())?;
        let region = self.region_proj.forward(g, store, region)?;
        let h = self.layer.forward(g, store, words, grid, region)?;
        self.out.forward(g, store, h)
    }
}

impl crate::harness::train::Task for CaptionModel {
    type Example = FusionExample;

    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &FusionExample,
        _rng: TrainRng<'_>,
    ) -> Result<Var> {
        let z = self.logits(g, store, ex)?;
        let l = xe_loss(g, z, &ex.caption[1..])?;
        g.scale(l, 1.0 / (ex.caption.len() - 1) as f64)
    }

    fn evaluate(&self, store: &ParamStore, data: &[FusionExample]) -> Result<MetricMeans> {
        let mut means = MetricMeans::default();
        for ex in data {
            let mut g = Graph::new();
            let z = self.logits(&mut g, store, ex)?;
            let (rows, v) = g.value(z).dims2()?;
            let vals = g.value(z).data();
            let hits = (0..rows)
                .filter(|&r| argmax(&vals[r * v..(r + 1) * v]) == Some(ex.caption[r + 1]))
                .count();
            means.add("token_acc", hits as f64 / rows as f64);
        }
        Ok(means)
    }
}
