//! Checkpoint files: magic `MIAT`, version u32, the run config text, the
//! completed epoch count, parameters, Adam state and the training RNG state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::TrainState;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{read_exact, read_f64, read_tensor, read_u32, read_u64, write_tensor, Tensor};

pub const MAGIC: &[u8; 4] = b"MIAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u32,
    pub params: Vec<(String, Tensor)>,
    pub adam_config: AdamConfig,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, store: &ParamStore, state: &TrainState) -> Self {
        Self {
            config_text: cfg.to_text(),
            epoch: state.epoch,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam_config: state.adam.config,
            adam_step: state.adam.step,
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Copies parameter values into a store built from the same config and
    /// returns the resumable training state.
    pub fn restore(&self, store: &mut ParamStore) -> Result<TrainState> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            store.set_value(name, t)?;
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Ok(TrainState {
            adam: Adam {
                config: self.adam_config,
                step: self.adam_step,
                m: self.adam_m.clone(),
                v: self.adam_v.clone(),
            },
            rng,
            epoch: self.epoch,
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = self.config_text.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_tensor(w, name, t)?;
        }
        let c = self.adam_config;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.adam_step.to_le_bytes())?;
        for ((name, _), (m, v)) in self.params.iter().zip(self.adam_m.iter().zip(&self.adam_v)) {
            write_tensor(w, &format!("adam.m.{name}"), m)?;
            write_tensor(w, &format!("adam.v.{name}"), v)?;
        }
        w.write_all(&self.rng_seed)?;
        w.write_all(&self.rng_stream.to_le_bytes())?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let len = read_u32(r)? as usize;
        if len > 1 << 20 {
            return Err(Error::Format("implausible config length".into()));
        }
        let mut cfg = vec![0u8; len];
        read_exact(r, &mut cfg)?;
        let config_text =
            String::from_utf8(cfg).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let epoch = read_u32(r)?;
        let count = read_u32(r)? as usize;
        if count > 1 << 20 {
            return Err(Error::Format("implausible parameter count".into()));
        }
        let params = (0..count)
            .map(|_| read_tensor(r))
            .collect::<Result<Vec<_>>>()?;
        let adam_config = AdamConfig {
            beta1: read_f64(r)?,
            beta2: read_f64(r)?,
            eps: read_f64(r)?,
            weight_decay: read_f64(r)?,
        };
        let adam_step = read_u64(r)?;
        let mut adam_m = Vec::with_capacity(count);
        let mut adam_v = Vec::with_capacity(count);
        for (name, p) in &params {
            for (prefix, dst) in [("adam.m.", &mut adam_m), ("adam.v.", &mut adam_v)] {
                let (n, t) = read_tensor(r)?;
                if n != format!("{prefix}{name}") || t.shape() != p.shape() {
                    return Err(Error::Format(format!(
                        "optimizer state out of step at {name}"
                    )));
                }
                dst.push(t);
            }
        }
        let mut rng_seed = [0u8; 32];
        read_exact(r, &mut rng_seed)?;
        let rng_stream = read_u64(r)?;
        let mut wp = [0u8; 16];
        read_exact(r, &mut wp)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_text,
            epoch,
            params,
            adam_config,
            adam_step,
            adam_m,
            adam_v,
            rng_seed,
            rng_stream,
            rng_word_pos: u128::from_le_bytes(wp),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf)
            .expect("writing to a vector cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::read(&mut BufReader::new(f))
    }
}
