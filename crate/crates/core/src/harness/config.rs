//! Line-oriented `key = value` run configuration with `#` comments.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{FusionDesign, Order};
use crate::hierview::ViewFusion;
use crate::optim::{AdamConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Dialog,
    Fusion,
    Instruct,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Dialog => "dialog-toy",
            TaskKind::Fusion => "fusion-toy",
            TaskKind::Instruct => "instruct-toy",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dialog-toy" => Ok(TaskKind::Dialog),
            "fusion-toy" => Ok(TaskKind::Fusion),
            "instruct-toy" => Ok(TaskKind::Instruct),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

fn design_name(d: FusionDesign) -> &'static str {
    match d {
        FusionDesign::Concat => "concat",
        FusionDesign::Sequential(Order::GridFirst) => "sequential-grid-first",
        FusionDesign::Sequential(Order::RegionFirst) => "sequential-region-first",
        FusionDesign::Parallel => "parallel",
    }
}

fn parse_design(s: &str) -> Result<FusionDesign> {
    match s {
        "concat" => Ok(FusionDesign::Concat),
        "sequential-grid-first" => Ok(FusionDesign::Sequential(Order::GridFirst)),
        "sequential-region-first" => Ok(FusionDesign::Sequential(Order::RegionFirst)),
        "parallel" => Ok(FusionDesign::Parallel),
        _ => Err(Error::Config(format!("unknown fusion design {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Utilities of the dialog model: 3 uses image, question and history; 2 drops history.
    pub utilities: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub dropout: bool,
    pub fusion_design: FusionDesign,
    pub view_fusion: ViewFusion,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Dialog,
            utilities: 3,
            d: 64,
            heads: 4,
            layers: 2,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            dropout: true,
            fusion_design: FusionDesign::Parallel,
            view_fusion: ViewFusion::Gated,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "task" => c.task = v.parse()?,
                "utilities" => c.utilities = parse(k, v)?,
                "d" => c.d = parse(k, v)?,
                "heads" => c.heads = parse(k, v)?,
                "layers" => c.layers = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "epochs" => c.epochs = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "lr_start" => c.schedule.start = parse(k, v)?,
                "lr" => c.schedule.end = parse(k, v)?,
                "warmup_epochs" => c.schedule.warmup_epochs = parse(k, v)?,
                "halving_period" => c.schedule.period = parse(k, v)?,
                "beta1" => c.adam.beta1 = parse(k, v)?,
                "beta2" => c.adam.beta2 = parse(k, v)?,
                "eps" => c.adam.eps = parse(k, v)?,
                "weight_decay" => c.adam.weight_decay = parse(k, v)?,
                "dropout" => c.dropout = parse(k, v)?,
                "fusion_design" => c.fusion_design = parse_design(v)?,
                "view_fusion" => {
                    c.view_fusion = match v {
                        "gated" => ViewFusion::Gated,
                        "softmax" => ViewFusion::Softmax,
                        _ => return Err(Error::Config(format!("unknown view fusion {v:?}"))),
                    }
                }
                "data" => c.data = PathBuf::from(v),
                "out" => c.out = PathBuf::from(v),
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("utilities", self.utilities),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.task == TaskKind::Dialog && !(2..=3).contains(&self.utilities) {
            return Err(Error::Config("dialog-toy supports 2 or 3 utilities".into()));
        }
        self.schedule.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let vf = match self.view_fusion {
            ViewFusion::Gated => "gated",
            ViewFusion::Softmax => "softmax",
        };
        let fields: [(&str, String); 21] = [
            ("task", self.task.name().into()),
            ("utilities", self.utilities.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("lr_start", format!("{:?}", self.schedule.start)),
            ("lr", format!("{:?}", self.schedule.end)),
            (
                "warmup_epochs",
                format!("{:?}", self.schedule.warmup_epochs),
            ),
            ("halving_period", format!("{:?}", self.schedule.period)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("weight_decay", format!("{:?}", self.adam.weight_decay)),
            ("dropout", self.dropout.to_string()),
            ("fusion_design", design_name(self.fusion_design).into()),
            ("view_fusion", vf.into()),
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
