//! Scripted instruction-following episodes over five egocentric views, their
//! binary file format, and the imitation-trained agent.
//!
//! An episode alternates `goto X` and `<verb> X` instructions. While going to
//! `X` the agent turns toward the view holding it, moves ahead while its
//! detector confidence is low, and emits COMPLETE once `X` sits in the centre
//! view at full confidence. A manipulation instruction is the verb (with the
//! mask of `X` among the centre objects) followed by COMPLETE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::Linear;
use crate::autodiff::{Graph, TrainRng, Var};
use crate::encoders::{lstm_run, LstmParams};
use crate::error::{Error, Result};
use crate::hierview::{
    argmax, lwit_loss, ActionDecoder, Advance, HierarchicalAttention, InstructionState,
    MaskDecoder, TwoStageDecoder, ViewFusion,
};
use crate::metrics::MetricMeans;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{read_exact, read_f64, read_u32, Tensor};

pub const VIEWS: usize = 5;
pub const OBJECTS: usize = 4;
pub const FEATURES: usize = 32;
pub const CLASSES: usize = 8;
/// Object vocabulary including the "none" class at index 0.
pub const OBJECT_VOCAB: usize = CLASSES + 1;
pub const ACTIONS: [&str; 12] = [
    "MoveAhead",
    "RotateLeft",
    "RotateRight",
    "LookUp",
    "LookDown",
    "Pickup",
    "Put",
    "Open",
    "Close",
    "ToggleOn",
    "ToggleOff",
    "Slice",
];
pub const NAV_ACTIONS: usize = 5;
pub const COMPLETE: usize = ACTIONS.len();
pub const OBJECT_NAMES: [&str; CLASSES] = [
    "apple", "bowl", "cup", "knife", "lamp", "mug", "pan", "plate",
];
pub const VERBS: [&str; 8] = [
    "goto",
    "pickup",
    "put",
    "open",
    "close",
    "toggleon",
    "toggleoff",
    "slice",
];
pub const NO_MASK: u32 = u32::MAX;
pub const MAGIC: &[u8; 4] = b"MIEP";
pub const VERSION: u32 = 1;
/// Seed of the class and view signatures shared by every episode.
pub const WORLD_SEED: u64 = 0x5eed;
pub const NOISE: f64 = 0.1;

pub fn is_nav(a: usize) -> bool {
    a < NAV_ACTIONS
}

/// Token list: `<pad>`, `goal`, the verbs, then the object names.
pub fn vocabulary() -> Vec<String> {
    ["<pad>", "goal"]
        .iter()
        .chain(VERBS.iter())
        .chain(OBJECT_NAMES.iter())
        .map(|s| s.to_string())
        .collect()
}

fn verb_token(v: usize) -> u32 {
    (2 + v) as u32
}

fn object_token(class: usize) -> u32 {
    (2 + VERBS.len() + class - 1) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// `K·N×F`, view-major.
    pub features: Tensor,
    /// `K·N` confidences, view-major.
    pub confidences: Vec<f64>,
    pub action: u32,
    /// Target class of the current instruction, 1-based.
    pub object: u32,
    /// Gold instruction-level action for the two-stage decoder.
    pub aux_action: u32,
    pub mask: u32,
    /// 0-based index of the active instruction.
    pub instruction: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub goal: Vec<u32>,
    pub instructions: Vec<Vec<u32>>,
    pub steps: Vec<Step>,
}

/// Class and view signatures, fixed for all episodes.
pub struct World {
    classes: Vec<Vec<f64>>,
    views: Vec<Vec<f64>>,
}

impl World {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..FEATURES).map(|_| unit.sample(&mut rng)).collect())
                .collect()
        };
        let classes = table(CLASSES);
        let views = table(VIEWS);
        Self { classes, views }
    }

    /// Object feature of 1-based `class` seen in `view`.
    pub fn feature<R: Rng + ?Sized>(&self, class: usize, view: usize, rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, NOISE).expect("valid normal");
        (0..FEATURES)
            .map(|f| self.classes[class - 1][f] + self.views[view][f] + noise.sample(rng))
            .collect()
    }
}

impl Default for World {
    fn default() -> Self {
        Self::new()
    }
}

/// Observation with the target in `view` at `slot` with confidence `rho`,
/// other objects drawn from the remaining classes.
fn observe<R: Rng + ?Sized>(
    world: &World,
    target: usize,
    view: usize,
    slot: usize,
    rho: f64,
    rng: &mut R,
) -> (Tensor, Vec<f64>) {
    let mut feats = Vec::with_capacity(VIEWS * OBJECTS * FEATURES);
    let mut conf = Vec::with_capacity(VIEWS * OBJECTS);
    for k in 0..VIEWS {
        for n in 0..OBJECTS {
            let (class, r) = if k == view && n == slot {
                (target, rho)
            } else {
                let mut c = rng.random_range(1..CLASSES);
                if c >= target {
                    c += 1;
                }
                (c, rng.random_range(0.1..0.5))
            };
            feats.extend(world.feature(class, k, rng));
            conf.push(r);
        }
    }
    let t = Tensor::new(&[VIEWS * OBJECTS, FEATURES], feats).expect("consistent shape");
    (t, conf)
}

fn turn_for(view: usize) -> usize {
    match view {
        1 => 1,
        2 => 2,
        3 => 3,
        _ => 4,
    }
}

pub fn generate_episode<R: Rng + ?Sized>(world: &World, rng: &mut R) -> Episode {
    let pairs = rng.random_range(1..=2);
    let mut goal = vec![1u32];
    let mut instructions = Vec::new();
    let mut steps = Vec::new();
    for _ in 0..pairs {
        let target = rng.random_range(1..=CLASSES);
        let verb = rng.random_range(1..VERBS.len());
        let manip = NAV_ACTIONS + verb - 1;
        goal.extend([verb_token(verb), object_token(target)]);

        let m = instructions.len() as u32;
        instructions.push(vec![verb_token(0), object_token(target)]);
        let push = |steps: &mut Vec<Step>,
                    view,
                    rho,
                    action,
                    aux,
                    mask_slot: Option<usize>,
                    instr,
                    rng: &mut R| {
            let slot = rng.random_range(0..OBJECTS);
            let (features, confidences) = observe(world, target, view, slot, rho, rng);
            steps.push(Step {
                features,
                confidences,
                action: action as u32,
                object: target as u32,
                aux_action: aux as u32,
                mask: mask_slot.map_or(NO_MASK, |_| slot as u32),
                instruction: instr,
            });
        };
        let start = rng.random_range(0..VIEWS);
        if start != 0 {
            push(&mut steps, start, 0.9, turn_for(start), 0, None, m, rng);
        }
        for _ in 0..rng.random_range(1..=2) {
            let rho = rng.random_range(0.3..0.6);
            push(&mut steps, 0, rho, 0, 0, None, m, rng);
        }
        push(&mut steps, 0, 1.0, COMPLETE, 0, None, m, rng);

        instructions.push(vec![verb_token(verb), object_token(target)]);
        push(&mut steps, 0, 1.0, manip, manip, Some(0), m + 1, rng);
        push(&mut steps, 0, 1.0, COMPLETE, manip, None, m + 1, rng);
    }
    Episode {
        goal,
        instructions,
        steps,
    }
}

pub fn generate_episodes(seed: u64, count: usize) -> Vec<Episode> {
    let world = World::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| generate_episode(&world, &mut rng))
        .collect()
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tokens<W: Write>(w: &mut W, t: &[u32]) -> Result<()> {
    write_u32(w, t.len() as u32)?;
    t.iter().try_for_each(|&v| write_u32(w, v))
}

fn read_tokens<R: Read>(r: &mut R) -> Result<Vec<u32>> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(Error::Format(format!("implausible token count {n}")));
    }
    (0..n).map(|_| read_u32(r)).collect()
}

/// Header: magic, version, K, N, F, episode count (all u32). Each episode:
/// goal tokens, instruction count and token lists, step count, then per step
/// `K·N·F` f64 features, `K·N` f64 confidences and five u32 fields (action,
/// object, auxiliary action, mask or `u32::MAX`, instruction index).
pub fn write_episodes<W: Write>(w: &mut W, episodes: &[Episode]) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        VIEWS as u32,
        OBJECTS as u32,
        FEATURES as u32,
        episodes.len() as u32,
    ] {
        write_u32(w, v)?;
    }
    for ep in episodes {
        write_tokens(w, &ep.goal)?;
        write_u32(w, ep.instructions.len() as u32)?;
        for i in &ep.instructions {
            write_tokens(w, i)?;
        }
        write_u32(w, ep.steps.len() as u32)?;
        for s in &ep.steps {
            for v in s.features.data().iter().chain(&s.confidences) {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in [s.action, s.object, s.aux_action, s.mask, s.instruction] {
                write_u32(w, v)?;
            }
        }
    }
    Ok(())
}

pub fn read_episodes<R: Read>(r: &mut R) -> Result<Vec<Episode>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an episode file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported episode file version {version}"
        )));
    }
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    if dims != [VIEWS as u32, OBJECTS as u32, FEATURES as u32] {
        return Err(Error::Data(format!(
            "episode geometry {dims:?} does not match the agent"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let goal = read_tokens(r)?;
        let ni = read_u32(r)? as usize;
        if ni > 1024 {
            return Err(Error::Format(format!("implausible instruction count {ni}")));
        }
        let instructions = (0..ni)
            .map(|_| read_tokens(r))
            .collect::<Result<Vec<_>>>()?;
        let ns = read_u32(r)? as usize;
        if ns > 1 << 16 {
            return Err(Error::Format(format!("implausible step count {ns}")));
        }
        let mut steps = Vec::with_capacity(ns);
        for _ in 0..ns {
            let feats = (0..VIEWS * OBJECTS * FEATURES)
                .map(|_| read_f64(r))
                .collect::<Result<Vec<_>>>()?;
            let confidences = (0..VIEWS * OBJECTS)
                .map(|_| read_f64(r))
                .collect::<Result<Vec<_>>>()?;
            let f = [
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
                read_u32(r)?,
            ];
            steps.push(Step {
                features: Tensor::new(&[VIEWS * OBJECTS, FEATURES], feats)?,
                confidences,
                action: f[0],
                object: f[1],
                aux_action: f[2],
                mask: f[3],
                instruction: f[4],
            });
        }
        let ep = Episode {
            goal,
            instructions,
            steps,
        };
        validate(&ep)?;
        out.push(ep);
    }
    Ok(out)
}

fn validate(ep: &Episode) -> Result<()> {
    let vocab = vocabulary().len() as u32;
    let tokens_ok = ep
        .goal
        .iter()
        .chain(ep.instructions.iter().flatten())
        .all(|&t| t < vocab);
    let steps_ok = ep.steps.iter().all(|s| {
        s.action as usize <= COMPLETE
            && (s.aux_action as usize) < ACTIONS.len()
            && (s.object as usize) < OBJECT_VOCAB
            && (s.mask == NO_MASK || (s.mask as usize) < OBJECTS)
            && (s.instruction as usize) < ep.instructions.len()
            && s.confidences.iter().all(|c| (0.0..=1.0).contains(c))
    });
    if ep.goal.is_empty() || ep.instructions.iter().any(Vec::is_empty) || !tokens_ok || !steps_ok {
        return Err(Error::Data("episode fails validation".into()));
    }
    Ok(())
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_episodes(&mut w, episodes)?;
    w.flush()?;
    Ok(())
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_episodes(&mut BufReader::new(f))
}

pub fn save_vocabulary(path: &Path) -> Result<()> {
    std::fs::write(path, vocabulary().join("\n") + "\n")?;
    Ok(())
}

/// Per-step predictions of a teacher-forced replay.
#[derive(Clone, Debug)]
pub struct Replay {
    pub actions: Vec<usize>,
    pub masks: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub d: usize,
    pub embed: ParamId,
    pub goal_lstm: LstmParams,
    pub instr_lstm: LstmParams,
    pub object_proj: Linear,
    pub views: HierarchicalAttention,
    pub two_stage: TwoStageDecoder,
    pub action: ActionDecoder,
    pub mask: MaskDecoder,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        fusion: ViewFusion,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab = vocabulary().len();
        let mut views = HierarchicalAttention::new(store, "agent.views", VIEWS, d, rng);
        views.mode = fusion;
        Ok(Self {
            d,
            embed: store.add("agent.embed", Tensor::randn(&[vocab, d], 1.0, rng)),
            goal_lstm: LstmParams::new(store, "agent.goal", d, d, rng),
            instr_lstm: LstmParams::new(store, "agent.instr", d, d, rng),
            object_proj: Linear::new(store, "agent.objects", FEATURES, d, rng),
            views,
            two_stage: TwoStageDecoder::new(
                store,
                "agent.two_stage",
                (0..ACTIONS.len()).map(is_nav).collect(),
                OBJECT_VOCAB,
                d,
                d,
                rng,
            ),
            action: ActionDecoder::new(store, "agent.action", d, ACTIONS.len(), OBJECT_VOCAB, rng),
            mask: MaskDecoder::new(
                store,
                "agent.mask",
                d,
                d + ACTIONS.len() + OBJECT_VOCAB,
                rng,
            )?,
        })
    }

    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lstm: &LstmParams,
        tokens: &[u32],
    ) -> Result<Var> {
        let table = g.param(store, self.embed);
        let xs = tokens
            .iter()
            .map(|&t| g.gather_rows(table, &[t as usize]))
            .collect::<Result<Vec<_>>>()?;
        let hs = lstm_run(g, store, lstm, &xs)?;
        hs.last()
            .copied()
            .ok_or_else(|| Error::Data("empty token sequence".into()))
    }

    /// Teacher-forced pass returning the loss and the greedy predictions.
    pub fn replay(&self, g: &mut Graph, store: &ParamStore, ep: &Episode) -> Result<(Var, Replay)> {
        if ep.steps.is_empty() {
            return Err(Error::Data("episode without steps".into()));
        }
        let goal = self.encode(g, store, &self.goal_lstm, &ep.goal)?;
        let instrs = ep
            .instructions
            .iter()
            .map(|t| self.encode(g, store, &self.instr_lstm, t))
            .collect::<Result<Vec<_>>>()?;
        let mut selector = InstructionState::new(instrs.len())?;
        let mut ts = self.two_stage.reset(g, instrs[0])?;
        let mut h = goal;
        let mut c = g.constant(Tensor::zeros(&[1, self.d]))?;
        let mut action_rows = Vec::with_capacity(ep.steps.len());
        let mut aux_a = Vec::with_capacity(ep.steps.len());
        let mut aux_o = Vec::with_capacity(ep.steps.len());
        let mut masks = Vec::new();
        let mut replay = Replay {
            actions: Vec::new(),
            masks: Vec::new(),
        };
        for (t, step) in ep.steps.iter().enumerate() {
            if t > 0 {
                let mut prev = vec![0.0; COMPLETE + 1];
                prev[ep.steps[t - 1].action as usize] = 1.0;
                match selector.advance(&prev, COMPLETE) {
                    Advance::Next(m) => ts = self.two_stage.reset(g, instrs[m - 1])?,
                    Advance::Stay => {}
                    Advance::Terminal => {
                        return Err(Error::Data(
                            "episode continues after its last COMPLETE".into(),
                        ))
                    }
                }
            }
            let s = instrs[selector.m() - 1];
            let out = self.two_stage.step(g, store, &mut ts)?;
            aux_a.push(out.logits_a);
            aux_o.push(out.logits_o);
            let feats = g.constant(step.features.clone())?;
            let objs = self.object_proj.forward(g, store, feats)?;
            let mut views = Vec::with_capacity(VIEWS);
            let mut confs = Vec::with_capacity(VIEWS);
            for k in 0..VIEWS {
                views.push(g.slice_rows(objs, k * OBJECTS, OBJECTS)?);
                confs.push(step.confidences[k * OBJECTS..(k + 1) * OBJECTS].to_vec());
            }
            let v = self.views.forward(g, store, &views, &confs, s)?;
            let (h2, c2, logits) = self
                .action
                .step(g, store, v, s, out.fwd_a, out.fwd_o, h, c)?;
            (h, c) = (h2, c2);
            replay
                .actions
                .push(argmax(g.value(logits).data()).unwrap_or(0));
            action_rows.push(logits);
            if step.mask != NO_MASK {
                let guide = g.concat_cols(&[s, out.fwd_a, out.fwd_o])?;
                let z = self.mask.logits(g, store, views[0], guide)?;
                replay.masks.push(argmax(g.value(z).data()));
                masks.push((z, step.mask as usize));
            } else {
                replay.masks.push(None);
            }
        }
        let gold: Vec<usize> = ep.steps.iter().map(|s| s.action as usize).collect();
        let logits = g.concat_rows(&action_rows)?;
        let za = g.concat_rows(&aux_a)?;
        let zo = g.concat_rows(&aux_o)?;
        let aux = [
            (za, ep.steps.iter().map(|s| s.aux_action as usize).collect()),
            (zo, ep.steps.iter().map(|s| s.object as usize).collect()),
        ];
        let loss = lwit_loss(g, &masks, logits, &gold, &aux)?;
        let scaled = g.scale(loss.total, 1.0 / ep.steps.len() as f64)?;
        Ok((scaled, replay))
    }
}

impl crate::harness::train::Task for Agent {
    type Example = Episode;

    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ep: &Episode,
        _rng: TrainRng<'_>,
    ) -> Result<Var> {
        self.replay(g, store, ep).map(|r| r.0)
    }

    fn evaluate(&self, store: &ParamStore, data: &[Episode]) -> Result<MetricMeans> {
        let (mut steps, mut hits, mut masks, mut mask_hits) = (0usize, 0usize, 0usize, 0usize);
        for ep in data {
            let mut g = Graph::new();
            let (_, r) = self.replay(&mut g, store, ep)?;
            for (s, (&a, m)) in ep.steps.iter().zip(r.actions.iter().zip(&r.masks)) {
                steps += 1;
                hits += usize::from(a == s.action as usize);
                if s.mask != NO_MASK {
                    masks += 1;
                    mask_hits += usize::from(*m == Some(s.mask as usize));
                }
            }
        }
        let mut means = MetricMeans::default();
        means.add("action_acc", hits as f64 / steps.max(1) as f64);
        means.add("mask_acc", mask_hits as f64 / masks.max(1) as f64);
        Ok(means)
    }
}
