//! Command implementations: dataset generation, training, evaluation and the
//! parameter report.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunConfig, TaskKind};
use crate::harness::train::{fit, EpochReport, Task, TrainState};
use crate::harness::{dialog, fusion_toy, instruct, records};
use crate::ltmi::{count_parameters, LayerKind};
use crate::metrics::MetricMeans;
use crate::params::ParamStore;

pub const DIALOG_SPLITS: (usize, usize) = (2000, 500);
pub const FUSION_SPLITS: (usize, usize) = (2000, 200);
pub const INSTRUCT_SPLITS: (usize, usize) = (500, 100);
/// Offset between the training seed and the held-out episode seed.
pub const HELD_OUT_OFFSET: u64 = 0x9e37_79b9;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "metrics.log";

fn split_paths(task: TaskKind, dir: &Path) -> (PathBuf, PathBuf) {
    let ext = if task == TaskKind::Instruct {
        "miep"
    } else {
        "bin"
    };
    (
        dir.join(format!("train.{ext}")),
        dir.join(format!("test.{ext}")),
    )
}

/// Writes the train and test splits of `task` into `dir`.
pub fn gen_data(task: TaskKind, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (train, test) = split_paths(task, dir);
    match task {
        TaskKind::Dialog => {
            let (a, b) = dialog::generate_splits(seed, DIALOG_SPLITS.0, DIALOG_SPLITS.1);
            records::save(
                &train,
                dialog::MAGIC,
                &a.iter().map(|e| e.to_record()).collect::<Vec<_>>(),
            )?;
            records::save(
                &test,
                dialog::MAGIC,
                &b.iter().map(|e| e.to_record()).collect::<Vec<_>>(),
            )?;
        }
        TaskKind::Fusion => {
            let (a, b) = fusion_toy::generate_splits(seed, FUSION_SPLITS.0, FUSION_SPLITS.1);
            records::save(
                &train,
                fusion_toy::MAGIC,
                &a.iter().map(|e| e.to_record()).collect::<Vec<_>>(),
            )?;
            records::save(
                &test,
                fusion_toy::MAGIC,
                &b.iter().map(|e| e.to_record()).collect::<Vec<_>>(),
            )?;
        }
        TaskKind::Instruct => {
            instruct::save_episodes(
                &train,
                &instruct::generate_episodes(seed, INSTRUCT_SPLITS.0),
            )?;
            let held_out = seed.wrapping_add(HELD_OUT_OFFSET);
            instruct::save_episodes(
                &test,
                &instruct::generate_episodes(held_out, INSTRUCT_SPLITS.1),
            )?;
            instruct::save_vocabulary(&dir.join("vocab.txt"))?;
        }
    }
    Ok(())
}

fn load_split<T>(
    path: &Path,
    magic: &[u8; 4],
    parse: fn(&records::Record) -> Result<T>,
) -> Result<Vec<T>> {
    records::load(path, magic)?.iter().map(parse).collect()
}

/// A model of any task, built deterministically from a config.
pub enum Model {
    Dialog(Box<dialog::DialogModel>),
    Fusion(Box<fusion_toy::CaptionModel>),
    Instruct(Box<instruct::Agent>),
}

pub fn build_model(cfg: &RunConfig, store: &mut ParamStore) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(match cfg.task {
        TaskKind::Dialog => Model::Dialog(Box::new(dialog::DialogModel::new(
            store,
            cfg.utilities,
            cfg.d,
            cfg.heads,
            cfg.layers,
            &mut rng,
        )?)),
        TaskKind::Fusion => Model::Fusion(Box::new(fusion_toy::CaptionModel::new(
            store,
            cfg.fusion_design,
            cfg.d,
            cfg.heads,
            &mut rng,
        )?)),
        TaskKind::Instruct => Model::Instruct(Box::new(instruct::Agent::new(
            store,
            cfg.d,
            cfg.view_fusion,
            &mut rng,
        )?)),
    })
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.reports.last().map(|r| r.loss)
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_task<T: Task>(
    task: &T,
    store: &mut ParamStore,
    state: &mut TrainState,
    train: &[T::Example],
    test: &[T::Example],
    cfg: &RunConfig,
    log: &mut dyn Write,
    ckpt: &Path,
) -> Result<Vec<EpochReport>> {
    fit(
        task,
        store,
        state,
        train,
        test,
        cfg,
        log,
        |store, state, _| Checkpoint::capture(cfg, store, state).save(ckpt),
    )
}

/// Trains `cfg` on the splits under `cfg.data`, writing a checkpoint to
/// `cfg.out` after every epoch and mirroring the log to `log`.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_path, test_path) = split_paths(cfg.task, &cfg.data);
    fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let mut store = ParamStore::new();
    let model = build_model(cfg, &mut store)?;
    let mut state = TrainState::new(&store, cfg);
    let mut buf = Vec::new();
    let reports = {
        let mut tee = Tee {
            a: log,
            b: &mut buf,
        };
        match &model {
            Model::Dialog(m) => {
                let a = load_split(
                    &train_path,
                    dialog::MAGIC,
                    dialog::DialogExample::from_record,
                )?;
                let b = load_split(
                    &test_path,
                    dialog::MAGIC,
                    dialog::DialogExample::from_record,
                )?;
                fit_task(
                    m.as_ref(),
                    &mut store,
                    &mut state,
                    &a,
                    &b,
                    cfg,
                    &mut tee,
                    &ckpt,
                )?
            }
            Model::Fusion(m) => {
                let a = load_split(
                    &train_path,
                    fusion_toy::MAGIC,
                    fusion_toy::FusionExample::from_record,
                )?;
                let b = load_split(
                    &test_path,
                    fusion_toy::MAGIC,
                    fusion_toy::FusionExample::from_record,
                )?;
                fit_task(
                    m.as_ref(),
                    &mut store,
                    &mut state,
                    &a,
                    &b,
                    cfg,
                    &mut tee,
                    &ckpt,
                )?
            }
            Model::Instruct(m) => {
                let a = instruct::load_episodes(&train_path)?;
                let b = instruct::load_episodes(&test_path)?;
                fit_task(
                    m.as_ref(),
                    &mut store,
                    &mut state,
                    &a,
                    &b,
                    cfg,
                    &mut tee,
                    &ckpt,
                )?
            }
        }
    };
    fs::write(cfg.out.join(LOG_FILE), buf)?;
    Ok(TrainOutcome {
        reports,
        checkpoint: ckpt,
    })
}

struct Tee<'a> {
    a: &'a mut dyn Write,
    b: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, data: &[u8]) -> std::io::Result<usize> {
        self.a.write_all(data)?;
        self.b.write_all(data)?;
        Ok(data.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}

/// Evaluates a checkpoint on the test split found in `data`.
pub fn evaluate(checkpoint: &Path, data: &Path) -> Result<MetricMeans> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config()?;
    let mut store = ParamStore::new();
    let model = build_model(&cfg, &mut store)?;
    ck.restore(&mut store)?;
    let (_, test) = split_paths(cfg.task, data);
    match &model {
        Model::Dialog(m) => m.evaluate(
            &store,
            &load_split(&test, dialog::MAGIC, dialog::DialogExample::from_record)?,
        ),
        Model::Fusion(m) => m.evaluate(
            &store,
            &load_split(
                &test,
                fusion_toy::MAGIC,
                fusion_toy::FusionExample::from_record,
            )?,
        ),
        Model::Instruct(m) => m.evaluate(&store, &instruct::load_episodes(&test)?),
    }
}

/// Single-layer parameter counts of the LTMI layer and the naive extension.
pub fn params_report(u: usize, d: usize) -> Result<String> {
    if u == 0 || d == 0 {
        return Err(Error::Usage("u and d must be positive".into()));
    }
    let ltmi = count_parameters(LayerKind::Ltmi, u, d, 1);
    let naive = count_parameters(LayerKind::Naive, u, d, 1);
    let mut s = String::new();
    let _ = writeln!(s, "component=ltmi u={u} d={d} params={ltmi}");
    let _ = writeln!(s, "component=naive u={u} d={d} params={naive}");
    let _ = writeln!(s, "ratio={}", ltmi as f64 / naive as f64);
    Ok(s)
}
