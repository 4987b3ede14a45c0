//! Three agents moving voxel by voxel; the plane through their positions is
//! the quantity being steered towards the goal plane.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{sample_slice, slice_grid, triangle_area, Plane, Point, SliceGrid};
use crate::image::Image2D;
use crate::rng::SplitMix64;
use crate::volume::{apply_window, Dims, IntensityWindow, LabelVolume, Volume};
use crate::{Error, Result};

pub const NUM_AGENTS: usize = 3;
pub const NUM_ACTIONS: usize = 6;

const RESET_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Forward,
    Backward,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Backward,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Unit voxel step: up/down along -y/+y, left/right along -x/+x,
    /// forward/backward along +z/-z.
    pub fn delta(self) -> Point {
        match self {
            Action::Up => [0, -1, 0],
            Action::Down => [0, 1, 0],
            Action::Left => [-1, 0, 0],
            Action::Right => [1, 0, 0],
            Action::Forward => [0, 0, 1],
            Action::Backward => [0, 0, -1],
        }
    }
}

/// Positions of the three agents; the environment state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentConfig(pub [Point; NUM_AGENTS]);

impl AgentConfig {
    pub fn area(&self) -> f64 {
        let [a, b, c] = self.0;
        triangle_area(a, b, c)
    }

    pub fn plane(&self) -> Result<Plane> {
        let [a, b, c] = self.0;
        Plane::from_points(a, b, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Labels counted by the anatomical reward.
    pub tissue_labels: Vec<u8>,
    /// Scale applied to the area and out-of-boundary terms.
    pub shaping_scale: f64,
    pub max_steps: usize,
    pub oscillation_window: usize,
    /// An episode ends once a configuration is seen more than this many times.
    pub oscillation_threshold: usize,
    pub tie_tolerance: f64,
    /// Frames stacked into one network input.
    pub history_len: usize,
    /// Side of the pooled square observation.
    pub obs_size: usize,
    pub min_initial_area: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            tissue_labels: vec![1, 2, 3],
            shaping_scale: 0.01,
            max_steps: 125,
            oscillation_window: 20,
            oscillation_threshold: 3,
            tie_tolerance: 1e-12,
            history_len: 10,
            obs_size: 32,
            min_initial_area: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shaping_scale > 0.0) {
            return Err(Error::param("shaping_scale", "must be positive"));
        }
        if self.oscillation_window <= self.oscillation_threshold {
            return Err(Error::param("oscillation_window", "must exceed the oscillation threshold"));
        }
        if self.max_steps == 0 || self.history_len == 0 || self.obs_size == 0 {
            return Err(Error::param("env", "max_steps, history_len and obs_size must be positive"));
        }
        Ok(())
    }
}

/// Quantities compared between consecutive states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Distance from the current plane to the goal.
    pub distance: f64,
    /// Tissue-of-interest pixels in the label slice.
    pub tissue: usize,
    pub area: f64,
}

/// Unscaled per-term rewards in {-1, 0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub plane: f64,
    pub anatomy: f64,
    pub area: f64,
    pub oob: [f64; NUM_AGENTS],
}

fn sign_with_tolerance(delta: f64, tol: f64) -> f64 {
    if delta > tol {
        1.0
    } else if delta < -tol {
        -1.0
    } else {
        0.0
    }
}

/// Composes per-agent rewards from the previous and current snapshots.
///
/// When `degenerate` is set the caller has kept the previous plane, so
/// `cur.distance` and `cur.tissue` refer to it; the plane term is forced to 0
/// and the area term to -1.
pub fn compute_rewards(
    prev: &Snapshot,
    cur: &Snapshot,
    degenerate: bool,
    oob: [bool; NUM_AGENTS],
    cfg: &EnvConfig,
) -> ([f64; NUM_AGENTS], RewardBreakdown) {
    let tol = cfg.tie_tolerance;
    let plane = if degenerate {
        0.0
    } else {
        sign_with_tolerance(prev.distance - cur.distance, tol)
    };
    let anatomy = sign_with_tolerance(cur.tissue as f64 - prev.tissue as f64, tol);
    let area = if degenerate {
        -1.0
    } else {
        sign_with_tolerance(cur.area - prev.area, tol)
    };
    let oob = oob.map(|o| if o { -1.0 } else { 0.0 });
    let s = cfg.shaping_scale;
    let shared = plane + anatomy + s * area;
    let rewards = oob.map(|o| shared + s * o);
    (
        rewards,
        RewardBreakdown {
            plane,
            anatomy,
            area,
            oob,
        },
    )
}

/// True iff some configuration occurs more than `threshold` times in `history`.
pub fn oscillation_done(history: &[AgentConfig], threshold: usize) -> bool {
    let mut counts: HashMap<&AgentConfig, usize> = HashMap::with_capacity(history.len());
    history.iter().any(|c| {
        let n = counts.entry(c).or_default();
        *n += 1;
        *n > threshold
    })
}

/// Average-pools `img` to `size x size` and scales to [0, 1].
pub fn pool_observation(img: &Image2D, size: usize) -> Vec<f32> {
    let bounds = |k: usize, n: usize| {
        let lo = k * n / size;
        let hi = ((k + 1) * n / size).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    let mut out = Vec::with_capacity(size * size);
    for b in 0..size {
        let (r0, r1) = bounds(b, img.height);
        for a in 0..size {
            let (c0, c1) = bounds(a, img.width);
            let mut acc = 0u32;
            for j in r0..r1 {
                for i in c0..c1 {
                    acc += img.get(i, j) as u32;
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            out.push((acc as f64 / n / 255.0) as f32);
        }
    }
    out
}

pub type Frame = Arc<[f32]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub breakdown: RewardBreakdown,
    pub distance: f64,
    pub tissue: usize,
    pub degenerate: bool,
    pub oob: [bool; NUM_AGENTS],
    pub positions: AgentConfig,
    pub plane: Plane,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Frame,
    pub rewards: [f64; NUM_AGENTS],
    pub done: bool,
    pub info: StepInfo,
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub actions: [Action; NUM_AGENTS],
    pub rewards: [f64; NUM_AGENTS],
    pub done: bool,
    #[serde(flatten)]
    pub info: StepInfo,
}

/// The episodic three-agent environment over one volume.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    tissue: [bool; 256],
    base: Arc<Volume>,
    working: Arc<Volume>,
    labels: Arc<LabelVolume>,
    goal: Plane,
    positions: AgentConfig,
    plane: Plane,
    grid: SliceGrid,
    snapshot: Snapshot,
    visits: VecDeque<AgentConfig>,
    frames: VecDeque<Frame>,
    steps: usize,
    done: bool,
    initialized: bool,
}

impl Env {
    pub fn new(volume: Arc<Volume>, labels: Arc<LabelVolume>, goal: Plane, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        if volume.dims() != labels.dims() {
            return Err(Error::Shape(format!(
                "volume {:?} and labels {:?} differ",
                volume.dims(),
                labels.dims()
            )));
        }
        let mut tissue = [false; 256];
        for &l in &cfg.tissue_labels {
            tissue[l as usize] = true;
        }
        let dims = volume.dims();
        let placeholder = AgentConfig([[0, 0, 0], [1, 0, 0], [0, 1, 0]]);
        let plane = placeholder.plane()?;
        Ok(Self {
            tissue,
            working: volume.clone(),
            base: volume,
            labels,
            goal,
            positions: placeholder,
            plane,
            grid: slice_grid(&plane, dims),
            snapshot: Snapshot {
                distance: 0.0,
                tissue: 0,
                area: 0.0,
            },
            visits: VecDeque::with_capacity(cfg.oscillation_window + 1),
            frames: VecDeque::with_capacity(cfg.history_len + 1),
            cfg,
            steps: 0,
            done: false,
            initialized: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims {
        self.base.dims()
    }

    pub fn goal(&self) -> Plane {
        self.goal
    }

    pub fn positions(&self) -> AgentConfig {
        self.positions
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn volume(&self) -> &Volume {
        &self.working
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    /// Replaces the working intensities with a windowed copy of the source
    /// volume (`None` restores the source). Takes effect at the next observation.
    pub fn set_window(&mut self, window: Option<IntensityWindow>) {
        self.working = match window {
            Some(w) => Arc::new(apply_window(&self.base, w)),
            None => self.base.clone(),
        };
    }

    /// Starts an episode from seeded uniform positions.
    pub fn reset(&mut self, seed: u64) -> Frame {
        let mut rng = SplitMix64::new(seed);
        let dims = self.dims();
        let mut draw = || {
            let mut p = || {
                [
                    rng.gen_range(0..dims.nx as i64),
                    rng.gen_range(0..dims.ny as i64),
                    rng.gen_range(0..dims.nz as i64),
                ]
            };
            AgentConfig([p(), p(), p()])
        };
        let mut cfg = draw();
        let mut tries = 1;
        while cfg.area() < self.cfg.min_initial_area && tries < RESET_TRIES {
            cfg = draw();
            tries += 1;
        }
        while cfg.area() <= 0.0 {
            cfg = draw();
        }
        self.start_from(cfg).expect("non-collinear by construction")
    }

    /// Starts an episode from explicit positions.
    pub fn start_from(&mut self, cfg: AgentConfig) -> Result<Frame> {
        self.check_positions(&cfg)?;
        let plane = cfg.plane()?;
        self.positions = cfg;
        self.steps = 0;
        self.done = false;
        self.initialized = true;
        self.visits.clear();
        self.visits.push_back(cfg);
        self.set_plane(plane);
        self.snapshot.area = cfg.area();
        let frame = self.render();
        self.frames.clear();
        for _ in 0..self.cfg.history_len {
            self.frames.push_back(frame.clone());
        }
        Ok(frame)
    }

    /// Moves the agents directly onto `cfg` without producing a reward.
    ///
    /// Counts as a visit for oscillation detection; used by scripted policies.
    pub fn teleport(&mut self, cfg: AgentConfig) -> Result<Frame> {
        self.ensure_running()?;
        self.check_positions(&cfg)?;
        self.positions = cfg;
        if let Ok(plane) = cfg.plane() {
            self.set_plane(plane);
        }
        self.snapshot.area = cfg.area();
        self.record_visit(cfg);
        let frame = self.render();
        self.push_frame(frame.clone());
        Ok(frame)
    }

    pub fn step(&mut self, actions: [Action; NUM_AGENTS]) -> Result<StepResult> {
        self.ensure_running()?;
        let dims = self.dims();
        let mut oob = [false; NUM_AGENTS];
        let mut next = self.positions;
        for (k, a) in actions.iter().enumerate() {
            let d = a.delta();
            let p = [0, 1, 2].map(|c| next.0[k][c] + d[c]);
            oob[k] = !dims.contains(p);
            let ext = dims.as_array();
            next.0[k] = [0, 1, 2].map(|c| p[c].clamp(0, ext[c] as i64 - 1));
        }

        let prev = self.snapshot;
        self.positions = next;
        let degenerate = match next.plane() {
            Ok(plane) => {
                self.set_plane(plane);
                false
            }
            Err(_) => true,
        };
        self.snapshot.area = next.area();
        let (rewards, breakdown) = compute_rewards(&prev, &self.snapshot, degenerate, oob, &self.cfg);

        self.steps += 1;
        self.record_visit(next);
        if self.steps >= self.cfg.max_steps {
            self.done = true;
        }
        let observation = self.render();
        self.push_frame(observation.clone());
        Ok(StepResult {
            observation,
            rewards,
            done: self.done,
            info: StepInfo {
                breakdown,
                distance: self.snapshot.distance,
                tissue: self.snapshot.tissue,
                degenerate,
                oob,
                positions: next,
                plane: self.plane,
            },
        })
    }

    /// Current pooled observation.
    pub fn observe(&self) -> Frame {
        self.frames.back().cloned().unwrap_or_else(|| self.render())
    }

    /// The last `history_len` observations, oldest first.
    pub fn history(&self) -> Vec<Frame> {
        self.frames.iter().cloned().collect()
    }

    /// Full-resolution intensity slice of the current plane.
    pub fn intensity_slice(&self) -> Image2D {
        sample_slice(self.working.as_ref(), &self.grid)
    }

    pub fn label_slice(&self) -> Image2D {
        sample_slice(self.labels.as_ref(), &self.grid)
    }

    fn ensure_running(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::State("environment has not been reset".into()));
        }
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        Ok(())
    }

    fn check_positions(&self, cfg: &AgentConfig) -> Result<()> {
        match cfg.0.iter().find(|p| !self.dims().contains(**p)) {
            Some(p) => Err(Error::param("positions", format!("{p:?} outside {:?}", self.dims()))),
            None => Ok(()),
        }
    }

    fn set_plane(&mut self, plane: Plane) {
        self.plane = plane;
        self.grid = slice_grid(&plane, self.dims());
        self.snapshot.distance = plane.distance(&self.goal);
        self.snapshot.tissue = self
            .label_slice()
            .data
            .iter()
            .filter(|&&l| self.tissue[l as usize])
            .count();
    }

    fn record_visit(&mut self, cfg: AgentConfig) {
        self.visits.push_back(cfg);
        while self.visits.len() > self.cfg.oscillation_window {
            self.visits.pop_front();
        }
        if oscillation_done(self.visits.make_contiguous(), self.cfg.oscillation_threshold) {
            self.done = true;
        }
    }

    fn render(&self) -> Frame {
        pool_observation(&self.intensity_slice(), self.cfg.obs_size).into()
    }

    fn push_frame(&mut self, frame: Frame) {
        self.frames.push_back(frame);
        while self.frames.len() > self.cfg.history_len {
            self.frames.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};

    fn desk_env(cfg: EnvConfig) -> Env {
        let p = generate(&PhantomSpec::new(Dims::cube(32), 1)).unwrap();
        let goal = p.goal_plane().unwrap();
        Env::new(Arc::new(p.volume), Arc::new(p.labels), goal, cfg).unwrap()
    }

    fn snap(distance: f64, tissue: usize, area: f64) -> Snapshot {
        Snapshot { distance, tissue, area }
    }

    #[test]
    fn action_vectors() {
        assert_eq!(Action::ALL.len(), 6);
        let sum: Point = Action::ALL
            .iter()
            .fold([0; 3], |acc, a| [0, 1, 2].map(|k| acc[k] + a.delta()[k]));
        assert_eq!(sum, [0, 0, 0]);
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(Action::from_index(i), Some(*a));
            assert_eq!(a.delta().iter().map(|c| c.abs()).sum::<i64>(), 1);
        }
        assert_eq!(Action::from_index(6), None);
    }

    #[test]
    fn reward_composition() {
        let cfg = EnvConfig::default();
        let (r, _) = compute_rewards(&snap(0.5, 100, 3.0), &snap(0.4, 120, 2.0), false, [false; 3], &cfg);
        assert_eq!(r, [1.99; 3]);

        let (r, _) = compute_rewards(&snap(0.4, 120, 3.0), &snap(0.5, 100, 2.0), false, [true, false, false], &cfg);
        assert!((r[0] + 2.02).abs() < 1e-12);
        assert!((r[1] + 2.01).abs() < 1e-12);
        assert_eq!(r[1], r[2]);

        let s = snap(0.3, 7, 4.0);
        let (r, b) = compute_rewards(&s, &s, false, [false; 3], &cfg);
        assert_eq!(r, [0.0; 3]);
        assert_eq!(b, RewardBreakdown::default());

        // Differences inside the tie tolerance count as no change.
        let (r, _) = compute_rewards(&snap(0.3, 7, 4.0), &snap(0.3 - 1e-14, 7, 4.0), false, [false; 3], &cfg);
        assert_eq!(r, [0.0; 3]);
    }

    #[test]
    fn degenerate_policy() {
        let cfg = EnvConfig::default();
        let prev = snap(0.3, 10, 5.0);
        let cur = snap(0.3, 10, 0.0);
        let (r, b) = compute_rewards(&prev, &cur, true, [false; 3], &cfg);
        assert_eq!(b.plane, 0.0);
        assert_eq!(b.area, -1.0);
        assert_eq!(r, [-0.01; 3]);
    }

    #[test]
    fn oscillation_window_rules() {
        let s = AgentConfig([[1, 1, 1], [2, 2, 2], [3, 3, 4]]);
        let other = |k: i64| AgentConfig([[k, 0, 0], [0, k, 0], [0, 0, k + 1]]);
        let mut h: Vec<AgentConfig> = (0..20).map(other).collect();
        for rel in [12, 8, 4, 0] {
            h[19 - rel] = s;
        }
        assert!(oscillation_done(&h, 3));
        h[19] = other(99);
        assert!(!oscillation_done(&h, 3));
        // Four visits spanning 21 states: the oldest is outside the window.
        let mut long: Vec<AgentConfig> = (0..21).map(|k| other(k + 100)).collect();
        for i in [0, 8, 14, 20] {
            long[i] = s;
        }
        assert!(!oscillation_done(&long[1..], 3));
        assert!(oscillation_done(&long[..], 3));
    }

    #[test]
    fn reset_is_seeded_and_spread() {
        let mut env = desk_env(EnvConfig::default());
        env.reset(7);
        let a = env.positions();
        env.reset(7);
        assert_eq!(a, env.positions());
        let mut octants = [0usize; 8];
        for seed in 0..1000 {
            env.reset(seed);
            assert!(env.positions().area() >= 1.0);
            for p in env.positions().0 {
                let o = (p[0] >= 16) as usize | ((p[1] >= 16) as usize) << 1 | ((p[2] >= 16) as usize) << 2;
                octants[o] += 1;
            }
        }
        assert!(octants.iter().all(|&n| n > 250), "{octants:?}");
    }

    #[test]
    fn boundary_move_is_clamped_and_penalized() {
        let mut env = desk_env(EnvConfig::default());
        let start = AgentConfig([[0, 10, 10], [20, 5, 12], [8, 25, 20]]);
        env.start_from(start).unwrap();
        let r = env.step([Action::Left, Action::Right, Action::Down]).unwrap();
        assert_eq!(r.info.positions.0[0], [0, 10, 10]);
        assert_eq!(r.info.oob, [true, false, false]);
        assert_eq!(r.info.breakdown.oob, [-1.0, 0.0, 0.0]);
        assert!((r.rewards[0] - (r.rewards[1] - 0.01)).abs() < 1e-12);
        assert_eq!(r.rewards[1], r.rewards[2]);
    }

    #[test]
    fn fourth_visit_terminates() {
        let mut env = desk_env(EnvConfig::default());
        let start = AgentConfig([[5, 10, 10], [20, 5, 12], [8, 25, 20]]);
        env.start_from(start).unwrap();
        let fwd = [Action::Right, Action::Right, Action::Right];
        let back = [Action::Left, Action::Left, Action::Left];
        let mut dones = Vec::new();
        for _ in 0..3 {
            dones.push(env.step(fwd).unwrap().done);
            dones.push(env.step(back).unwrap().done);
        }
        // Start visited at t=0,2,4,6: done exactly on the fourth visit.
        assert_eq!(dones, [false, false, false, false, false, true]);
        assert!(matches!(env.step(fwd), Err(Error::State(_))));
    }

    #[test]
    fn horizon_terminates() {
        let cfg = EnvConfig {
            max_steps: 5,
            ..EnvConfig::default()
        };
        let mut env = desk_env(cfg);
        env.start_from(AgentConfig([[5, 10, 10], [20, 5, 12], [8, 25, 20]])).unwrap();
        for k in 0..5 {
            let r = env.step([Action::Right, Action::Down, Action::Forward]).unwrap();
            assert_eq!(r.done, k == 4);
        }
    }

    #[test]
    fn degenerate_step_keeps_previous_plane() {
        let mut env = desk_env(EnvConfig::default());
        env.start_from(AgentConfig([[4, 5, 5], [6, 6, 7], [8, 8, 9]])).unwrap();
        let kept = env.plane();
        let kept_obs = env.observe();
        let kept_tissue = env.snapshot().tissue;
        // Lands on (5,5,5) (6,6,6) (8,8,8), all on one line.
        let r = env.step([Action::Right, Action::Backward, Action::Backward]).unwrap();
        assert!(r.info.degenerate);
        assert_eq!(r.info.plane, kept);
        assert_eq!(r.info.tissue, kept_tissue);
        assert_eq!(r.info.breakdown.plane, 0.0);
        assert_eq!(r.info.breakdown.area, -1.0);
        assert_eq!(r.info.breakdown.anatomy, 0.0);
        assert_eq!(r.rewards, [-0.01; 3]);
        assert_eq!(&r.observation[..], &kept_obs[..]);
    }

    #[test]
    fn shared_rewards_without_oob() {
        let mut env = desk_env(EnvConfig::default());
        let mut rng = SplitMix64::new(3);
        for ep in 0..20 {
            env.reset(ep);
            while !env.is_done() {
                let a = [0; 3].map(|_: u8| Action::ALL[rng.gen_range(0..6)]);
                let r = env.step(a).unwrap();
                let bound = 2.0 + 2.0 * env.config().shaping_scale;
                assert!(r.rewards.iter().all(|x| x.abs() <= bound + 1e-12));
                for p in r.info.positions.0 {
                    assert!(env.dims().contains(p));
                }
                if !r.info.oob.iter().any(|&o| o) {
                    assert!(r.rewards[0] == r.rewards[1] && r.rewards[1] == r.rewards[2]);
                }
            }
        }
    }

    #[test]
    fn observation_is_permutation_invariant_and_pooled() {
        let cfg = EnvConfig {
            obs_size: 16,
            ..EnvConfig::default()
        };
        let mut env = desk_env(cfg);
        let a = env.start_from(AgentConfig([[3, 4, 5], [20, 9, 14], [11, 28, 7]])).unwrap();
        let b = env.start_from(AgentConfig([[11, 28, 7], [3, 4, 5], [20, 9, 14]])).unwrap();
        assert_eq!(&a[..], &b[..]);
        let direct = pool_observation(&env.intensity_slice(), 16);
        assert_eq!(&b[..], &direct[..]);
        assert_eq!(env.history().len(), 10);
    }

    #[test]
    fn pooling_constant_and_block_mean() {
        let img = Image2D::new(4, 4, vec![51; 16]).unwrap();
        assert!(pool_observation(&img, 2).iter().all(|&v| v == 0.2));
        let img = Image2D::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(pool_observation(&img, 1), vec![0.5]);
        // Upsampling repeats pixels.
        assert_eq!(pool_observation(&img, 4).len(), 16);
    }
}
