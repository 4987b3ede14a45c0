//! Schedules, exploration and the synchronous multi-environment training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvConfig, Frame, NUM_ACTIONS, NUM_AGENTS};
use crate::geometry::Plane;
use crate::phantom::{generate, PhantomSpec, CHAMBER_LABELS};
use crate::qnet::{
    adam_step, forward, loss_and_grads, save_checkpoint, soft_update, targets_from_values, AdamConfig, OptimState,
    PolyakForm, QNetConfig, QOutput, QParams,
};
use crate::replay::{PerBuffer, PerConfig, Transition};
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{Dims, IntensityWindow, LabelVolume, Volume};
use crate::{Error, Result};

// Stream keys for derive_seed.
const STREAM_INIT: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_WINDOW: u64 = 4;
const STREAM_RESET: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub num_envs: usize,
    /// Environment steps (summed over envs) between optimizer steps.
    pub train_every: usize,
    /// Transitions per optimizer step, split across the env buffers.
    pub batch_size: usize,
    pub history: usize,
    pub obs_size: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau: f64,
    pub polyak: PolyakForm,
    pub capacity: usize,
    pub alpha: f64,
    pub priority_eps: f64,
    pub shaping_scale: f64,
    pub oscillation_window: usize,
    pub oscillation_threshold: usize,
    pub randomize_window: bool,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Paired `<name>.vvol` volumes to train on; labels at `<name>.labels.vvol`.
    pub volumes: Vec<PathBuf>,
    /// Phantoms generated when `volumes` is empty.
    pub num_phantoms: usize,
    pub phantom_size: usize,
    pub phantom_jitter: f64,
}

impl TrainConfig {
    /// Full-scale recipe: 2000 episodes of 125 steps over 15 environments.
    pub fn full() -> Self {
        Self {
            episodes: 2000,
            steps_per_episode: 125,
            num_envs: 15,
            train_every: 15,
            batch_size: 8,
            history: 10,
            obs_size: 32,
            hidden: vec![512, 256],
            gamma: 0.999,
            lr: 1e-4,
            eps_start: 1.0,
            eps_end: 0.005,
            beta_start: 0.4,
            beta_end: 1.0,
            tau: 0.01,
            polyak: PolyakForm::SlowTarget,
            capacity: 25_000,
            alpha: 0.6,
            priority_eps: 1e-6,
            shaping_scale: 0.01,
            oscillation_window: 20,
            oscillation_threshold: 3,
            randomize_window: false,
            checkpoint_every: 100,
            seed: 0,
            volumes: Vec::new(),
            num_phantoms: 15,
            phantom_size: 128,
            phantom_jitter: 0.10,
        }
    }

    /// Laptop-scale profile: one 32^3 phantom, 200 episodes of 64 steps, 4 envs.
    pub fn desk() -> Self {
        Self {
            episodes: 200,
            steps_per_episode: 64,
            num_envs: 4,
            train_every: 4,
            batch_size: 32,
            history: 4,
            obs_size: 32,
            gamma: 0.9,
            lr: 1e-3,
            checkpoint_every: 50,
            num_phantoms: 1,
            phantom_size: 32,
            ..Self::full()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.steps_per_episode
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            shaping_scale: self.shaping_scale,
            max_steps: self.steps_per_episode,
            oscillation_window: self.oscillation_window,
            oscillation_threshold: self.oscillation_threshold,
            history_len: self.history,
            obs_size: self.obs_size,
            ..EnvConfig::default()
        }
    }

    pub fn qnet_config(&self) -> QNetConfig {
        QNetConfig {
            history: self.history,
            input_size: self.obs_size,
            hidden: self.hidden.clone(),
            heads: NUM_AGENTS,
            actions: NUM_ACTIONS,
        }
    }

    pub fn per_config(&self) -> PerConfig {
        PerConfig {
            capacity: self.capacity,
            alpha: self.alpha,
            priority_eps: self.priority_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("num_envs", self.num_envs),
            ("train_every", self.train_every),
            ("batch_size", self.batch_size),
            ("history", self.history),
            ("obs_size", self.obs_size),
            ("capacity", self.capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(name, "must be positive"));
        }
        if !(self.eps_end > 0.0 && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(Error::param("eps_end", "need 0 < eps_end <= eps_start <= 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end) {
            return Err(Error::param("beta_end", "need 0 < beta_start <= beta_end"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param("tau", "must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) || !(self.lr > 0.0) {
            return Err(Error::param("gamma", "need gamma in [0, 1] and lr > 0"));
        }
        if self.volumes.is_empty() && self.num_phantoms == 0 {
            return Err(Error::param("volumes", "no volumes and num_phantoms = 0"));
        }
        self.env_config().validate()
    }

    /// Parses `key = value` lines over the profile named by an optional
    /// `profile = full|desk` line (default `full`). `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::param("config", format!("line {}: expected key = value", lineno + 1)))?;
            entries.push((k.trim(), v.trim()));
        }
        let mut cfg = match entries.iter().find(|(k, _)| *k == "profile").map(|(_, v)| *v) {
            None | Some("full") => Self::full(),
            Some("desk") => Self::desk(),
            Some(other) => return Err(Error::param("profile", format!("unknown profile {other:?}"))),
        };
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::param("config", format!("bad value {v:?} for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
        }
        match key {
            "profile" => {}
            "episodes" => self.episodes = num(key, value)?,
            "steps_per_episode" => self.steps_per_episode = num(key, value)?,
            "num_envs" => self.num_envs = num(key, value)?,
            "train_every" => self.train_every = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "history" => self.history = num(key, value)?,
            "obs_size" => self.obs_size = num(key, value)?,
            "hidden" => self.hidden = list(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "eps_start" => self.eps_start = num(key, value)?,
            "eps_end" => self.eps_end = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "polyak" => {
                self.polyak = match value {
                    "slow_target" => PolyakForm::SlowTarget,
                    "literal" => PolyakForm::Literal,
                    _ => return Err(Error::param("config", format!("polyak must be slow_target or literal, got {value:?}"))),
                }
            }
            "capacity" => self.capacity = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "priority_eps" => self.priority_eps = num(key, value)?,
            "shaping_scale" => self.shaping_scale = num(key, value)?,
            "oscillation_window" => self.oscillation_window = num(key, value)?,
            "oscillation_threshold" => self.oscillation_threshold = num(key, value)?,
            "randomize_window" => self.randomize_window = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "volumes" => {
                self.volumes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "num_phantoms" => self.num_phantoms = num(key, value)?,
            "phantom_size" => self.phantom_size = num(key, value)?,
            "phantom_jitter" => self.phantom_jitter = num(key, value)?,
            _ => return Err(Error::param("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Renders every field as `key = value`; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let polyak = match self.polyak {
            PolyakForm::SlowTarget => "slow_target",
            PolyakForm::Literal => "literal",
        };
        let volumes = self
            .volumes
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let fields: Vec<(&str, String)> = vec![
            ("episodes", self.episodes.to_string()),
            ("steps_per_episode", self.steps_per_episode.to_string()),
            ("num_envs", self.num_envs.to_string()),
            ("train_every", self.train_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("history", self.history.to_string()),
            ("obs_size", self.obs_size.to_string()),
            ("hidden", join(&self.hidden)),
            ("gamma", self.gamma.to_string()),
            ("lr", self.lr.to_string()),
            ("eps_start", self.eps_start.to_string()),
            ("eps_end", self.eps_end.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("tau", self.tau.to_string()),
            ("polyak", polyak.to_string()),
            ("capacity", self.capacity.to_string()),
            ("alpha", self.alpha.to_string()),
            ("priority_eps", self.priority_eps.to_string()),
            ("shaping_scale", self.shaping_scale.to_string()),
            ("oscillation_window", self.oscillation_window.to_string()),
            ("oscillation_threshold", self.oscillation_threshold.to_string()),
            ("randomize_window", self.randomize_window.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("volumes", volumes),
            ("num_phantoms", self.num_phantoms.to_string()),
            ("phantom_size", self.phantom_size.to_string()),
            ("phantom_jitter", self.phantom_jitter.to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Exponential decay from `eps_start` to `eps_end` over `total` steps.
pub fn epsilon(t: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let frac = t as f64 / total.max(1) as f64;
    (cfg.eps_start * (cfg.eps_end / cfg.eps_start).powf(frac)).max(cfg.eps_end)
}

/// Exponential growth from `beta_start` to `beta_end` over `total` steps.
pub fn beta(t: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let frac = t as f64 / total.max(1) as f64;
    (cfg.beta_start * (cfg.beta_end / cfg.beta_start).powf(frac)).min(cfg.beta_end)
}

/// Per-agent epsilon-greedy choice from row `row` of `q`.
///
/// Agents draw in order 0, 1, 2: one uniform for the explore test, then one
/// action index only when exploring.
pub fn select_actions<R: Rng + ?Sized>(q: &QOutput, row: usize, eps: f64, rng: &mut R) -> [Action; NUM_AGENTS] {
    let mut out = [Action::Up; NUM_AGENTS];
    for (k, slot) in out.iter_mut().enumerate() {
        let idx = if rng.gen::<f64>() < eps {
            rng.gen_range(0..NUM_ACTIONS)
        } else {
            q.argmax(row, k)
        };
        *slot = Action::ALL[idx];
    }
    out
}

pub fn random_actions<R: Rng + ?Sized>(rng: &mut R) -> [Action; NUM_AGENTS] {
    [0; NUM_AGENTS].map(|_| Action::ALL[rng.gen_range(0..NUM_ACTIONS)])
}

/// Draws a window with `lo` in 0..=40 and width in 160..=255 (clamped at 255).
pub fn random_window<R: Rng + ?Sized>(rng: &mut R) -> IntensityWindow {
    let lo: u8 = rng.gen_range(0..=40);
    let width: u16 = rng.gen_range(160..=255);
    let hi = (lo as u16 + width).min(255) as u8;
    IntensityWindow::new(lo, hi).expect("lo <= 40 < 160 <= hi")
}

/// Applies a random intensity window to the environment's working volume.
pub fn intensity_randomization_hook<R: Rng + ?Sized>(env: &mut Env, rng: &mut R) -> IntensityWindow {
    let w = random_window(rng);
    env.set_window(Some(w));
    w
}

/// Flattens frames into one network input row.
pub fn stack_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>, out: &mut Vec<f64>) {
    for f in frames {
        out.extend(f.iter().map(|&v| v as f64));
    }
}

/// Online/target networks with their optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub online: QParams,
    pub target: QParams,
    pub opt: OptimState,
    pub gamma: f64,
    pub tau: f64,
    pub polyak: PolyakForm,
}

#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

impl Learner {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let online = QParams::init(cfg.qnet_config(), derive_seed(cfg.seed, STREAM_INIT))?;
        let opt = OptimState::new(
            &online,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            target: online.clone(),
            online,
            opt,
            gamma: cfg.gamma,
            tau: cfg.tau,
            polyak: cfg.polyak,
        })
    }

    /// One Double-Q step on `batch`: targets, loss, Adam, soft target update.
    pub fn update(&mut self, batch: &[&Transition], weights: &[f64]) -> Result<UpdateOutput> {
        let mut cur = Vec::new();
        let mut next = Vec::new();
        for t in batch {
            stack_frames(&t.obs, &mut cur);
            stack_frames(t.obs[1..].iter().chain(std::iter::once(&t.next_frame)), &mut next);
        }
        let rewards: Vec<[f64; NUM_AGENTS]> = batch.iter().map(|t| t.rewards).collect();
        let done: Vec<bool> = batch.iter().map(|t| t.done).collect();
        let actions: Vec<[usize; NUM_AGENTS]> = batch.iter().map(|t| t.actions.map(Action::index)).collect();

        let q_online = forward(&self.online, &next)?;
        let q_target = forward(&self.target, &next)?;
        let targets = targets_from_values(&q_online, &q_target, &rewards, &done, self.gamma)?;
        let out = loss_and_grads(&self.online, &cur, &actions, &targets, weights)?;
        adam_step(&mut self.online, &out.grads, &mut self.opt)?;
        if !self.online.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        soft_update(&mut self.target, &self.online, self.tau, self.polyak)?;
        Ok(UpdateOutput {
            loss: out.loss,
            td_errors: out.td_errors,
        })
    }
}

/// A training volume with its labels and goal plane.
#[derive(Debug, Clone)]
pub struct TrainVolume {
    pub name: String,
    pub volume: Arc<Volume>,
    pub labels: Arc<LabelVolume>,
    pub goal: Plane,
}

impl TrainVolume {
    pub fn new(name: impl Into<String>, volume: Volume, labels: LabelVolume) -> Result<Self> {
        let goal = crate::phantom::goal_plane(&labels, CHAMBER_LABELS)?;
        Ok(Self {
            name: name.into(),
            volume: Arc::new(volume),
            labels: Arc::new(labels),
            goal,
        })
    }
}

/// Label file paired with an intensity VVOL: `a/b.vvol` -> `a/b.labels.vvol`.
pub fn labels_path_for(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    volume.with_file_name(format!("{stem}.labels.vvol"))
}

/// Loads `cfg.volumes`, or generates `cfg.num_phantoms` seeded phantoms.
pub fn load_training_set(cfg: &TrainConfig) -> Result<Vec<TrainVolume>> {
    if !cfg.volumes.is_empty() {
        return cfg
            .volumes
            .iter()
            .map(|p| {
                let v = crate::volume::load_vvol(p)?.into_intensity()?;
                let l = crate::volume::load_vvol(labels_path_for(p))?.into_labels()?;
                TrainVolume::new(p.display().to_string(), v, l)
            })
            .collect();
    }
    (0..cfg.num_phantoms)
        .map(|i| {
            let spec = PhantomSpec::new(Dims::cube(cfg.phantom_size), derive_seed(cfg.seed, 1000 + i as u64))
                .with_jitter(cfg.phantom_jitter);
            let p = generate(&spec)?;
            TrainVolume::new(format!("phantom{i}"), p.volume, p.labels)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Environment steps taken, summed over environments.
    pub steps: usize,
    /// Per-step means over every environment step of the episode.
    pub plane_reward: f64,
    pub anatomy_reward: f64,
    pub area_reward: f64,
    pub oob_reward: f64,
    pub total_reward: f64,
    /// Mean over environments of the final plane's distance to the goal.
    pub terminal_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeStats>,
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
    /// One entry per synchronous global step.
    pub epsilon: Vec<f64>,
    /// One entry per optimizer step.
    pub beta: Vec<f64>,
    pub optimizer_steps: usize,
    /// Checkpoint files, relative to the output directory.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Mean of `f` over the last `n` episodes.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&EpisodeStats) -> f64) -> f64 {
        let tail = &self.episodes[self.episodes.len().saturating_sub(n)..];
        tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
    }
}

struct Slot {
    env: Env,
    buffer: PerBuffer<Transition>,
    act_rng: SplitMix64,
    sample_rng: SplitMix64,
    window_rng: SplitMix64,
}

#[derive(Default)]
struct Accum {
    steps: usize,
    plane: f64,
    anatomy: f64,
    area: f64,
    oob: f64,
    total: f64,
}

/// How actions are chosen during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Epsilon-greedy on the online network, with learning.
    Learn,
    /// Uniform random actions, no learning.
    Random,
}

/// Trains on `volumes`; checkpoints go to `out_dir` when given.
pub fn train(cfg: &TrainConfig, volumes: &[TrainVolume], out_dir: Option<&Path>) -> Result<(TrainReport, Learner)> {
    run(cfg, volumes, out_dir, RunMode::Learn)
}

/// The same episode loop under a uniform random policy; the baseline oracle.
pub fn random_baseline(cfg: &TrainConfig, volumes: &[TrainVolume]) -> Result<TrainReport> {
    run(cfg, volumes, None, RunMode::Random).map(|(r, _)| r)
}

pub fn run(cfg: &TrainConfig, volumes: &[TrainVolume], out_dir: Option<&Path>, mode: RunMode) -> Result<(TrainReport, Learner)> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::param("volumes", "need at least one training volume"));
    }
    let env_cfg = cfg.env_config();
    let mut slots = (0..cfg.num_envs)
        .map(|k| {
            let tv = &volumes[k % volumes.len()];
            let env_seed = derive_seed(cfg.seed, 100 + k as u64);
            Ok(Slot {
                env: Env::new(tv.volume.clone(), tv.labels.clone(), tv.goal, env_cfg.clone())?,
                buffer: PerBuffer::new(cfg.per_config())?,
                act_rng: SplitMix64::new(derive_seed(env_seed, STREAM_ACT)),
                sample_rng: SplitMix64::new(derive_seed(env_seed, STREAM_SAMPLE)),
                window_rng: SplitMix64::new(derive_seed(env_seed, STREAM_WINDOW)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut learner = Learner::new(cfg)?;
    let mut report = TrainReport::default();
    let total = cfg.total_steps();
    let mut global_step = 0usize;
    let mut pending = 0usize;

    for episode in 0..cfg.episodes {
        for (k, slot) in slots.iter_mut().enumerate() {
            if cfg.randomize_window {
                intensity_randomization_hook(&mut slot.env, &mut slot.window_rng);
            }
            let seed = derive_seed(derive_seed(cfg.seed, STREAM_RESET), (episode * cfg.num_envs + k) as u64);
            slot.env.reset(seed);
        }
        let mut acc = Accum::default();

        while slots.iter().any(|s| !s.env.is_done()) {
            let eps = match mode {
                RunMode::Learn => epsilon(global_step, total, cfg),
                RunMode::Random => 1.0,
            };
            report.epsilon.push(eps);

            let active: Vec<usize> = (0..slots.len()).filter(|&k| !slots[k].env.is_done()).collect();
            let histories: Vec<Vec<Frame>> = active.iter().map(|&k| slots[k].env.history()).collect();
            let q = match mode {
                RunMode::Learn => {
                    let mut inputs = Vec::with_capacity(active.len() * cfg.qnet_config().input_dim());
                    for h in &histories {
                        stack_frames(h, &mut inputs);
                    }
                    Some(forward(&learner.online, &inputs)?)
                }
                RunMode::Random => None,
            };
            let mut chosen = Vec::with_capacity(active.len());
            for (row, &k) in active.iter().enumerate() {
                let rng = &mut slots[k].act_rng;
                chosen.push(match &q {
                    Some(q) => select_actions(q, row, eps, rng),
                    None => random_actions(rng),
                });
            }

            let mut stepping: Vec<(&mut Slot, [Action; NUM_AGENTS])> = slots
                .iter_mut()
                .filter(|s| !s.env.is_done())
                .zip(chosen.iter().copied())
                .collect();
            let results: Vec<Result<crate::env::StepResult>> =
                stepping.par_iter_mut().map(|(s, a)| s.env.step(*a)).collect();

            for (((slot, actions), result), obs) in stepping.into_iter().zip(results).zip(histories) {
                let r = result?;
                acc.steps += 1;
                acc.plane += r.info.breakdown.plane;
                acc.anatomy += r.info.breakdown.anatomy;
                acc.area += r.info.breakdown.area;
                acc.oob += r.info.breakdown.oob.iter().sum::<f64>() / NUM_AGENTS as f64;
                acc.total += r.rewards.iter().sum::<f64>() / NUM_AGENTS as f64;
                if mode == RunMode::Learn {
                    slot.buffer.push(Transition {
                        obs,
                        actions,
                        rewards: r.rewards,
                        next_frame: r.observation,
                        done: r.done,
                    });
                }
            }

            global_step += 1;
            pending += active.len();
            while pending >= cfg.train_every {
                pending -= cfg.train_every;
                if mode == RunMode::Learn {
                    let b = beta(global_step, total, cfg);
                    let loss = optimize(cfg, &mut learner, &mut slots, report.optimizer_steps, b)?;
                    if !loss.is_finite() {
                        return Err(numeric_abort(out_dir, &report, loss));
                    }
                    report.losses.push(loss);
                    report.beta.push(b);
                }
                report.optimizer_steps += 1;
            }
        }

        let n = acc.steps.max(1) as f64;
        let terminal = slots.iter().map(|s| s.env.snapshot().distance).sum::<f64>() / slots.len() as f64;
        report.episodes.push(EpisodeStats {
            episode,
            steps: acc.steps,
            plane_reward: acc.plane / n,
            anatomy_reward: acc.anatomy / n,
            area_reward: acc.area / n,
            oob_reward: acc.oob / n,
            total_reward: acc.total / n,
            terminal_distance: terminal,
        });

        if let (Some(dir), RunMode::Learn) = (out_dir, mode) {
            if cfg.checkpoint_every > 0 && (episode + 1) % cfg.checkpoint_every == 0 && episode + 1 < cfg.episodes {
                let name = format!("checkpoint_ep{:05}.qnck", episode + 1);
                save_checkpoint(&learner.online, dir.join(&name))?;
                report.checkpoints.push(name.into());
            }
        }
    }

    if let (Some(dir), RunMode::Learn) = (out_dir, mode) {
        save_checkpoint(&learner.online, dir.join("final.qnck"))?;
        report.checkpoints.push("final.qnck".into());
    }
    Ok((report, learner))
}

/// Samples `cfg.batch_size` transitions across the buffers and applies one update.
fn optimize(cfg: &TrainConfig, learner: &mut Learner, slots: &mut [Slot], step: usize, beta: f64) -> Result<f64> {
    let n = slots.len();
    let base = cfg.batch_size / n;
    let extra = cfg.batch_size % n;
    // Rotate which buffers receive the remainder so every buffer is used evenly.
    let share = |k: usize| base + usize::from((k + n - step % n) % n < extra);

    let mut per_slot: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    let (out, offsets) = {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut weights = Vec::with_capacity(cfg.batch_size);
        for (k, slot) in slots.iter_mut().enumerate() {
            let want = share(k);
            if want == 0 || slot.buffer.is_empty() {
                continue;
            }
            let s = slot.buffer.sample(want, beta, &mut slot.sample_rng)?;
            per_slot.push((k, s.indices.clone(), batch.len()));
            batch.extend(s.items);
            weights.extend(s.weights);
        }
        if batch.is_empty() {
            return Err(Error::State("no transitions to learn from".into()));
        }
        let out = learner.update(&batch, &weights)?;
        (out, per_slot)
    };
    for (k, indices, start) in offsets {
        let td = &out.td_errors[start..start + indices.len()];
        slots[k].buffer.update_priorities(&indices, td)?;
    }
    Ok(out.loss)
}

fn numeric_abort(out_dir: Option<&Path>, report: &TrainReport, loss: f64) -> Error {
    let mut msg = format!("non-finite loss {loss} at optimizer step {}", report.optimizer_steps);
    if let Some(dir) = out_dir {
        let path = dir.join("diagnostic.json");
        if let Ok(json) = serde_json::to_vec_pretty(report) {
            if crate::image::write_file(&path, &json).is_ok() {
                let _ = write!(msg, "; report dumped to {}", path.display());
            }
        }
    }
    Error::Numeric(msg)
}
