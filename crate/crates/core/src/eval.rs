//! Policy evaluation, summary statistics and terminal-plane overlays.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, AgentConfig, Env, EnvConfig, StepRecord, NUM_ACTIONS, NUM_AGENTS};
use crate::image::{write_file, Image2D, RgbImage};
use crate::phantom::{centroid, CHAMBER_LABELS};
use crate::qnet::{forward, load_checkpoint, QParams};
use crate::rng::{derive_seed, SplitMix64};
use crate::trainer::{select_actions, stack_frames, TrainVolume};
use crate::{round_half_up, Error, Result};

/// Exploration rate used for greedy evaluation.
pub const EVAL_EPSILON: f64 = 0.005;
/// Gain applied to the per-pixel standard deviation in the red overlay channel.
pub const OVERLAY_STD_GAIN: f64 = 2.0;

/// Drives an environment one step at a time.
pub trait Policy: Sync {
    /// Observation shape `(history, size)` the policy needs, if any.
    fn observation_shape(&self) -> Option<(usize, usize)> {
        None
    }

    /// Chooses actions for the current state. May reposition agents first.
    fn act(&self, env: &mut Env, rng: &mut SplitMix64) -> Result<[Action; NUM_AGENTS]>;
}

/// Epsilon-greedy over a trained network.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub params: QParams,
    pub epsilon: f64,
}

impl GreedyPolicy {
    pub fn new(params: QParams) -> Self {
        Self {
            params,
            epsilon: EVAL_EPSILON,
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path).map(Self::new)
    }
}

impl Policy for GreedyPolicy {
    fn observation_shape(&self) -> Option<(usize, usize)> {
        let c = self.params.config();
        Some((c.history, c.input_size))
    }

    fn act(&self, env: &mut Env, rng: &mut SplitMix64) -> Result<[Action; NUM_AGENTS]> {
        let mut input = Vec::new();
        stack_frames(&env.history(), &mut input);
        let q = forward(&self.params, &input)?;
        Ok(select_actions(&q, 0, self.epsilon, rng))
    }
}

/// Uniform random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _env: &mut Env, rng: &mut SplitMix64) -> Result<[Action; NUM_AGENTS]> {
        Ok([0; NUM_AGENTS].map(|_| Action::ALL[rng.gen_range(0..NUM_ACTIONS)]))
    }
}

/// Scripted plug-in policy: places the agents on the rounded chamber
/// centroids, then steps right and left until the oscillation rule ends the
/// episode back on the centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OraclePolicy {
    pub target: AgentConfig,
}

impl OraclePolicy {
    pub fn for_labels(labels: &crate::volume::LabelVolume) -> Result<Self> {
        let mut pts = [[0i64; 3]; NUM_AGENTS];
        for (p, &label) in pts.iter_mut().zip(&CHAMBER_LABELS) {
            *p = centroid(labels, label)?.0.map(|c| round_half_up(c) as i64);
        }
        let target = AgentConfig(pts);
        target.plane()?;
        Ok(Self { target })
    }
}

impl Policy for OraclePolicy {
    fn act(&self, env: &mut Env, _rng: &mut SplitMix64) -> Result<[Action; NUM_AGENTS]> {
        let shifted = AgentConfig(self.target.0.map(|p| {
            let d = Action::Right.delta();
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        }));
        let at = env.positions();
        if at != self.target && at != shifted {
            env.teleport(self.target)?;
        }
        let a = if env.positions() == self.target {
            Action::Right
        } else {
            Action::Left
        };
        Ok([a; NUM_AGENTS])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub runs: usize,
    pub seed: u64,
    pub env: EnvConfig,
    /// Keep per-step records for every episode.
    pub record_trajectories: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            seed: 0,
            env: EnvConfig::default(),
            record_trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    /// Mean per-step plane-distance reward.
    pub plane_reward: f64,
    /// Mean per-step anatomical reward.
    pub anatomy_reward: f64,
    pub terminal_distance: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub volume: String,
    pub runs: usize,
    pub plane_reward: Stat,
    pub anatomy_reward: Stat,
    pub terminal_distance: Stat,
}

impl EvalSummary {
    pub fn from_episodes(volume: impl Into<String>, eps: &[EpisodeRecord]) -> Self {
        let col = |f: fn(&EpisodeRecord) -> f64| Stat::of(&eps.iter().map(f).collect::<Vec<_>>());
        Self {
            volume: volume.into(),
            runs: eps.len(),
            plane_reward: col(|e| e.plane_reward),
            anatomy_reward: col(|e| e.anatomy_reward),
            terminal_distance: col(|e| e.terminal_distance),
        }
    }

    pub fn table(summaries: &[EvalSummary]) -> String {
        let mut s = format!(
            "{:<24} {:>5} {:>22} {:>22} {:>26}\n",
            "volume", "runs", "plane distance reward", "anatomical reward", "distance from goal"
        );
        for e in summaries {
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>22} {:>22} {:>26}",
                e.volume,
                e.runs,
                format!("{:.4} ± {:.4}", e.plane_reward.mean, e.plane_reward.std),
                format!("{:.4} ± {:.4}", e.anatomy_reward.mean, e.anatomy_reward.std),
                format!("{:.3e} ± {:.3e}", e.terminal_distance.mean, e.terminal_distance.std),
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub episodes: Vec<EpisodeRecord>,
    pub terminal_slices: Vec<Image2D>,
    /// Per-episode step records; empty unless requested.
    pub trajectories: Vec<Vec<StepRecord>>,
}

struct Episode {
    record: EpisodeRecord,
    slice: Image2D,
    trajectory: Vec<StepRecord>,
}

/// Runs `cfg.runs` seeded episodes of `policy` on `volume`.
pub fn evaluate<P: Policy + ?Sized>(policy: &P, volume: &TrainVolume, cfg: &EvalConfig) -> Result<EvalOutput> {
    if cfg.runs == 0 {
        return Err(Error::param("runs", "must be at least 1"));
    }
    if let Some((h, s)) = policy.observation_shape() {
        if h != cfg.env.history_len || s != cfg.env.obs_size {
            return Err(Error::Shape(format!(
                "policy expects history {h} and size {s}, environment provides {} and {}",
                cfg.env.history_len, cfg.env.obs_size
            )));
        }
    }
    let proto = Env::new(volume.volume.clone(), volume.labels.clone(), volume.goal, cfg.env.clone())?;
    let episodes = (0..cfg.runs)
        .into_par_iter()
        .map(|i| run_episode(policy, proto.clone(), i, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut out = EvalOutput {
        summary: EvalSummary::from_episodes(&volume.name, &[]),
        episodes: Vec::with_capacity(cfg.runs),
        terminal_slices: Vec::with_capacity(cfg.runs),
        trajectories: Vec::new(),
    };
    for e in episodes {
        out.episodes.push(e.record);
        out.terminal_slices.push(e.slice);
        if cfg.record_trajectories {
            out.trajectories.push(e.trajectory);
        }
    }
    out.summary = EvalSummary::from_episodes(&volume.name, &out.episodes);
    Ok(out)
}

fn run_episode<P: Policy + ?Sized>(policy: &P, mut env: Env, i: usize, cfg: &EvalConfig) -> Result<Episode> {
    let seed = derive_seed(cfg.seed, i as u64);
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    env.reset(seed);
    let (mut plane, mut anatomy) = (0.0, 0.0);
    let mut trajectory = Vec::new();
    while !env.is_done() {
        let actions = policy.act(&mut env, &mut rng)?;
        let r = env.step(actions)?;
        plane += r.info.breakdown.plane;
        anatomy += r.info.breakdown.anatomy;
        if cfg.record_trajectories {
            trajectory.push(StepRecord {
                step: env.steps(),
                actions,
                rewards: r.rewards,
                done: r.done,
                info: r.info,
            });
        }
    }
    let steps = env.steps();
    let n = steps.max(1) as f64;
    Ok(Episode {
        record: EpisodeRecord {
            episode: i,
            seed,
            steps,
            plane_reward: plane / n,
            anatomy_reward: anatomy / n,
            terminal_distance: env.snapshot().distance,
        },
        slice: env.intensity_slice(),
        trajectory,
    })
}

/// Writes `episodes.jsonl`, `summary.json`, `summary.txt`, terminal slices
/// under `slices/`, and `trajectories.jsonl` when recorded.
pub fn write_outputs(out: &EvalOutput, dir: &Path) -> Result<()> {
    let jsonl = |lines: Vec<String>| lines.into_iter().map(|l| l + "\n").collect::<String>();
    let eps = out.episodes.iter().map(to_json).collect::<Result<Vec<_>>>()?;
    write_file(&dir.join("episodes.jsonl"), jsonl(eps).as_bytes())?;
    if !out.trajectories.is_empty() {
        let mut lines = Vec::new();
        for (i, t) in out.trajectories.iter().enumerate() {
            for rec in t {
                let mut v = serde_json::to_value(rec).map_err(json_err)?;
                v["episode"] = i.into();
                lines.push(v.to_string());
            }
        }
        write_file(&dir.join("trajectories.jsonl"), jsonl(lines).as_bytes())?;
    }
    let summary = serde_json::to_string_pretty(&out.summary).map_err(json_err)?;
    write_file(&dir.join("summary.json"), summary.as_bytes())?;
    write_file(&dir.join("summary.txt"), EvalSummary::table(std::slice::from_ref(&out.summary)).as_bytes())?;
    for (i, s) in out.terminal_slices.iter().enumerate() {
        s.save_pgm(dir.join("slices").join(format!("terminal_{i:04}.pgm")))?;
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::State(format!("json serialization failed: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(json_err)
}

/// Reads back an `episodes.jsonl` dump.
pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("episodes", e.to_string())))
        .collect()
}

/// Per-pixel mean (blue) and scaled standard deviation (red) of equal-sized slices.
pub fn overlay(slices: &[Image2D]) -> Result<RgbImage> {
    let first = slices.first().ok_or_else(|| Error::param("slices", "need at least one slice"))?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = slices.iter().find(|s| s.width != w || s.height != h) {
        return Err(Error::Shape(format!(
            "slice is {}x{}, expected {w}x{h}",
            bad.width, bad.height
        )));
    }
    // Integer sums keep the result independent of slice order.
    let n = slices.len() as u128;
    let data = (0..w * h)
        .map(|p| {
            let (mut s, mut ss) = (0u128, 0u128);
            for img in slices {
                let v = img.data[p] as u128;
                s += v;
                ss += v * v;
            }
            let mean = s as f64 / n as f64;
            let var = (n * ss - s * s) as f64 / (n * n) as f64;
            let blue = round_half_up(mean).clamp(0.0, 255.0) as u8;
            let red = round_half_up((OVERLAY_STD_GAIN * var.sqrt()).min(255.0)) as u8;
            [red, 0, blue]
        })
        .collect();
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Loads every `.pgm` in `dir`, sorted by file name.
pub fn load_slices_dir(dir: &Path) -> Result<Vec<Image2D>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(Image2D::load_pgm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: Vec<u8>) -> Image2D {
        Image2D::new(w, h, data).unwrap()
    }

    #[test]
    fn overlay_examples() {
        let a = img(2, 1, vec![0, 10]);
        let b = img(2, 1, vec![255, 10]);
        let o = overlay(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(o.data[0], [255, 0, 128]);
        assert_eq!(o.data[1], [0, 0, 10]);

        let single = overlay(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.data.iter().map(|p| p[2]).collect::<Vec<_>>(), a.data);
        assert!(single.data.iter().all(|p| p[0] == 0 && p[1] == 0));

        assert!(overlay(&[]).is_err());
        assert!(overlay(&[a, img(1, 1, vec![0])]).is_err());
    }

    #[test]
    fn overlay_std_matches_direct_formula() {
        let slices: Vec<Image2D> = [3u8, 9, 40, 41].iter().map(|&v| img(1, 1, vec![v])).collect();
        let xs = [3.0, 9.0, 40.0, 41.0];
        let st = Stat::of(&xs);
        let o = overlay(&slices).unwrap();
        assert_eq!(o.data[0][2], round_half_up(st.mean) as u8);
        assert_eq!(o.data[0][0], round_half_up((2.0 * st.std).min(255.0)) as u8);
    }

    #[test]
    fn stat_population_form() {
        assert_eq!(Stat::of(&[2.0]), Stat { mean: 2.0, std: 0.0 });
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
