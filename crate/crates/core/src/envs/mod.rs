//! Discrete meta-RL environments.
//!
//! Every task runs a fixed number of fixed-length episodes, so a meta-episode
//! always has [`TaskInstance::meta_len`] steps. Observations are fixed-width
//! vectors; latent task variables stay private to [`TaskInstance`].

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOOR_REWARD: f64 = 4.0;
pub const DOOR_PENALTY: f64 = -3.0;
pub const ROOM_REWARD: f64 = 0.1;
pub const GOAL_REWARD: f64 = 1.0;
/// Indicator probabilities of the two T-Maze Latent task classes.
pub const LATENT_P: [f64; 2] = [0.5, 0.7];
pub const GRID: usize = 3;
pub const CELLS: usize = GRID * GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Tls,
    TmazeAgree,
    TmazeLatent,
    Mcls,
    Plan,
    PlanBlind,
}

impl EnvKind {
    pub const ALL: [EnvKind; 6] = [
        EnvKind::Tls,
        EnvKind::TmazeAgree,
        EnvKind::TmazeLatent,
        EnvKind::Mcls,
        EnvKind::Plan,
        EnvKind::PlanBlind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Tls => "tls",
            EnvKind::TmazeAgree => "tmaze_agree",
            EnvKind::TmazeLatent => "tmaze_latent",
            EnvKind::Mcls => "mcls",
            EnvKind::Plan => "plan",
            EnvKind::PlanBlind => "plan_blind",
        }
    }

    fn is_tmaze(self) -> bool {
        matches!(self, EnvKind::Tls | EnvKind::TmazeAgree | EnvKind::TmazeLatent)
    }

    fn is_plan(self) -> bool {
        matches!(self, EnvKind::Plan | EnvKind::PlanBlind)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "environment",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// T-maze corridor length.
    pub corridor: usize,
    /// Number of MC-LS rooms.
    pub rooms: usize,
    /// Planning Game episode length.
    pub plan_steps: usize,
    /// Episodes per meta-episode; `None` uses the environment's own count.
    pub episodes: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EnvConfig {
    pub fn desk() -> Self {
        EnvConfig {
            corridor: 10,
            rooms: 6,
            plan_steps: 100,
            episodes: None,
        }
    }

    pub fn full() -> Self {
        EnvConfig {
            corridor: 100,
            rooms: 16,
            ..Self::desk()
        }
    }

    pub fn validate(&self, kind: EnvKind) -> Result<()> {
        if kind.is_tmaze() && self.corridor < 2 {
            return Err(Error::config("corridor", "must be at least 2"));
        }
        if kind == EnvKind::Mcls && self.rooms == 0 {
            return Err(Error::config("rooms", "must be positive"));
        }
        if kind.is_plan() && self.plan_steps == 0 {
            return Err(Error::config("plan_steps", "must be positive"));
        }
        if self.episodes == Some(0) {
            return Err(Error::config("episodes", "must be positive"));
        }
        Ok(())
    }

    pub fn episodes(&self, kind: EnvKind) -> usize {
        self.episodes.unwrap_or(match kind {
            EnvKind::Tls | EnvKind::TmazeAgree | EnvKind::TmazeLatent => 4,
            EnvKind::Mcls => 2,
            EnvKind::Plan | EnvKind::PlanBlind => 1,
        })
    }

    pub fn episode_len(&self, kind: EnvKind) -> usize {
        match kind {
            EnvKind::Tls | EnvKind::TmazeAgree | EnvKind::TmazeLatent => self.corridor + 1,
            EnvKind::Mcls => self.rooms + 2,
            EnvKind::Plan | EnvKind::PlanBlind => self.plan_steps,
        }
    }

    pub fn obs_dim(&self, kind: EnvKind) -> usize {
        match kind {
            EnvKind::Tls | EnvKind::TmazeAgree | EnvKind::TmazeLatent => 5,
            EnvKind::Mcls => 4,
            EnvKind::Plan => 2 * CELLS + 1,
            EnvKind::PlanBlind => 1,
        }
    }

    pub fn n_actions(&self, kind: EnvKind) -> usize {
        if kind.is_plan() {
            4
        } else {
            2
        }
    }

    /// T-Maze Agreement: position of the second signal.
    pub fn midpoint(&self) -> usize {
        self.corridor / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub episode_done: bool,
    pub meta_episode_done: bool,
}

#[derive(Clone, Debug)]
enum Latent {
    Signal(bool),
    Agree(bool, bool),
    Bernoulli(usize),
    Rooms { color: bool, cues: Vec<bool> },
    /// `labels[cell]` is the one-hot label observed in that cell.
    Plan { labels: [usize; CELLS] },
}

/// A sampled task with its own random stream and dynamics state.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    kind: EnvKind,
    cfg: EnvConfig,
    latent: Latent,
    rng: ChaCha8Rng,
    episode: usize,
    t: usize,
    pos: usize,
    goal: usize,
    at_goal: bool,
    finished: bool,
}

/// Independent stream for task `index` of a run with `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn env_sample_task(kind: EnvKind, cfg: &EnvConfig, seed: u64, index: u64) -> Result<TaskInstance> {
    cfg.validate(kind)?;
    let mut rng = task_rng(seed, index);
    let latent = match kind {
        EnvKind::Tls => Latent::Signal(rng.gen()),
        EnvKind::TmazeAgree => Latent::Agree(rng.gen(), rng.gen()),
        EnvKind::TmazeLatent => Latent::Bernoulli(rng.gen_range(0..2)),
        EnvKind::Mcls => Latent::Rooms {
            color: rng.gen(),
            cues: (0..cfg.rooms).map(|_| rng.gen()).collect(),
        },
        EnvKind::Plan | EnvKind::PlanBlind => {
            let mut labels: [usize; CELLS] = std::array::from_fn(|i| i);
            labels.shuffle(&mut rng);
            Latent::Plan { labels }
        }
    };
    let mut task = TaskInstance {
        kind,
        cfg: cfg.clone(),
        latent,
        rng,
        episode: 0,
        t: 0,
        pos: 0,
        goal: 0,
        at_goal: false,
        finished: false,
    };
    task.start_episode();
    Ok(task)
}

fn pm(bit: bool) -> f64 {
    if bit {
        1.0
    } else {
        -1.0
    }
}

/// Torus move: 0 up, 1 down, 2 left, 3 right.
pub fn grid_move(cell: usize, action: usize) -> usize {
    let (r, c) = (cell / GRID, cell % GRID);
    let (r, c) = match action {
        0 => ((r + GRID - 1) % GRID, c),
        1 => ((r + 1) % GRID, c),
        2 => (r, (c + GRID - 1) % GRID),
        _ => (r, (c + 1) % GRID),
    };
    r * GRID + c
}

impl TaskInstance {
    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.obs_dim(self.kind)
    }

    pub fn n_actions(&self) -> usize {
        self.cfg.n_actions(self.kind)
    }

    pub fn episodes(&self) -> usize {
        self.cfg.episodes(self.kind)
    }

    /// Steps in one meta-episode.
    pub fn meta_len(&self) -> usize {
        self.episodes() * self.cfg.episode_len(self.kind)
    }

    fn start_episode(&mut self) {
        self.t = 0;
        if self.kind.is_plan() {
            self.pos = self.rng.gen_range(0..CELLS);
            self.goal = self.draw_goal();
            self.at_goal = false;
        }
    }

    fn draw_goal(&mut self) -> usize {
        let g = self.rng.gen_range(0..CELLS - 1);
        if g >= self.pos {
            g + 1
        } else {
            g
        }
    }

    /// Observation at the current step.
    pub fn observe(&mut self) -> Vec<f64> {
        let len = self.cfg.episode_len(self.kind);
        let t = self.t;
        // task signals appear in the first episode only
        let first = self.episode == 0;
        match (&self.latent, self.kind) {
            (_, k) if k.is_tmaze() => {
                let mut o = vec![0.0; 5];
                if t == 0 {
                    o[0] = 1.0;
                } else if t + 1 == len {
                    o[2] = 1.0;
                } else {
                    o[1] = 1.0;
                }
                match self.latent {
                    Latent::Signal(s) => {
                        if t == 0 && first {
                            o[3] = pm(s);
                        } else if t + 1 < len {
                            o[4] = f64::from(u8::from(self.rng.gen::<bool>()));
                        }
                    }
                    Latent::Agree(a, b) => {
                        if t == 0 && first {
                            o[3] = pm(a);
                        } else if t == self.cfg.midpoint() && first {
                            o[3] = pm(b);
                        }
                    }
                    Latent::Bernoulli(class) => {
                        o[4] = f64::from(u8::from(self.rng.gen_bool(LATENT_P[class])));
                    }
                    _ => unreachable!("t-maze latent"),
                }
                o
            }
            (Latent::Rooms { color, cues }, _) => {
                let mut o = vec![0.0; 4];
                if t == 0 {
                    o[0] = 1.0;
                    if first {
                        o[3] = pm(*color);
                    }
                } else if t + 1 == len {
                    o[2] = 1.0;
                } else {
                    o[1] = 1.0;
                    o[3] = pm(cues[t - 1]);
                }
                o
            }
            (Latent::Plan { labels }, kind) => {
                let flag = f64::from(u8::from(self.at_goal));
                if kind == EnvKind::PlanBlind {
                    return vec![flag];
                }
                let mut o = vec![0.0; 2 * CELLS + 1];
                o[labels[self.pos]] = 1.0;
                o[CELLS + labels[self.goal]] = 1.0;
                o[2 * CELLS] = flag;
                o
            }
            _ => unreachable!("latent matches kind"),
        }
    }

    /// Observation that opens the meta-episode.
    pub fn reset(&mut self) -> Vec<f64> {
        self.observe()
    }

    pub fn env_step(&mut self, action: usize) -> Result<StepResult> {
        let n = self.n_actions();
        if action >= n {
            return Err(Error::InvalidAction { action, n });
        }
        if self.finished {
            return Err(Error::config("env", "meta-episode already finished"));
        }
        let len = self.cfg.episode_len(self.kind);
        let last = self.t + 1 == len;
        let reward = match &self.latent {
            Latent::Signal(s) if last => door(action == usize::from(*s)),
            Latent::Agree(a, b) if last => door(action == usize::from(a == b)),
            Latent::Bernoulli(class) if last => door(action == *class),
            Latent::Rooms { color, .. } if last => door(action == usize::from(*color)),
            Latent::Rooms { cues, .. } if self.t > 0 => {
                if action == usize::from(cues[self.t - 1]) {
                    ROOM_REWARD
                } else {
                    0.0
                }
            }
            Latent::Plan { .. } => {
                self.pos = grid_move(self.pos, action);
                self.at_goal = self.pos == self.goal;
                if self.at_goal {
                    self.goal = self.draw_goal();
                    GOAL_REWARD
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        self.t += 1;
        let episode_done = last;
        let mut meta_episode_done = false;
        if episode_done {
            self.episode += 1;
            if self.episode == self.episodes() {
                meta_episode_done = true;
                self.finished = true;
            } else {
                self.start_episode();
            }
        }
        let obs = if meta_episode_done {
            vec![0.0; self.obs_dim()]
        } else {
            self.observe()
        };
        Ok(StepResult {
            obs,
            reward,
            episode_done,
            meta_episode_done,
        })
    }
}

fn door(correct: bool) -> f64 {
    if correct {
        DOOR_REWARD
    } else {
        DOOR_PENALTY
    }
}

fn ln_binom(n: usize, k: usize) -> f64 {
    let lf = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

/// Probability that the maximum a posteriori class is right after `n`
/// indicators, with equal prior on the two classes.
pub fn latent_map_accuracy(n: usize) -> f64 {
    (0..=n)
        .map(|k| {
            let lb = ln_binom(n, k);
            let like = |p: f64| (lb + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
            0.5 * like(LATENT_P[0]).max(like(LATENT_P[1]))
        })
        .sum()
}

/// Expected meta-episode return of the best scripted policy.
pub fn env_optimal_return(kind: EnvKind, cfg: &EnvConfig) -> Result<f64> {
    cfg.validate(kind)?;
    let e = cfg.episodes(kind) as f64;
    match kind {
        EnvKind::Tls | EnvKind::TmazeAgree => Ok(e * DOOR_REWARD),
        EnvKind::Mcls => Ok(e * (cfg.rooms as f64 * ROOM_REWARD + DOOR_REWARD)),
        EnvKind::TmazeLatent => {
            // first junction decided from the indicators seen; the door
            // reward then reveals the class for every later episode
            let pc = latent_map_accuracy(cfg.episode_len(kind));
            let first = pc * DOOR_REWARD + (1.0 - pc) * DOOR_PENALTY;
            Ok(first + (e - 1.0) * DOOR_REWARD)
        }
        EnvKind::Plan | EnvKind::PlanBlind => Err(Error::NoOptimum(kind.name().into())),
    }
}

/// Observation layout, action set and reward table.
pub fn describe(kind: EnvKind, cfg: &EnvConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "env: {kind}");
    let _ = writeln!(s, "obs_dim: {}", cfg.obs_dim(kind));
    let _ = writeln!(s, "n_actions: {}", cfg.n_actions(kind));
    let _ = writeln!(s, "episodes: {}", cfg.episodes(kind));
    let _ = writeln!(s, "episode_len: {}", cfg.episode_len(kind));
    let (layout, rewards) = match kind {
        EnvKind::Tls => (
            "start, corridor, junction, signal(+-1 at the first episode's start), noise bit (corridor)",
            "door = signal: +4; otherwise -3; all other steps 0",
        ),
        EnvKind::TmazeAgree => (
            "start, corridor, junction, signal(+-1 at start and midpoint of the first episode), unused",
            "door = [signals agree]: +4; otherwise -3",
        ),
        EnvKind::TmazeLatent => (
            "start, corridor, junction, unused, indicator bit (every step)",
            "door 0 for p=0.5, door 1 for p=0.7: +4; otherwise -3",
        ),
        EnvKind::Mcls => (
            "start, room, final, value(+-1: color at the first episode's start, cue in rooms)",
            "room action = cue: +0.1; final action = color: +4, otherwise -3",
        ),
        EnvKind::Plan => (
            "one-hot label of current cell (9), one-hot label of goal (9), at-goal flag",
            "reaching the goal: +1, then a new goal is drawn",
        ),
        EnvKind::PlanBlind => ("at-goal flag", "reaching the goal: +1, then a new goal is drawn"),
    };
    let _ = writeln!(s, "obs: {layout}");
    let _ = writeln!(s, "rewards: {rewards}");
    match env_optimal_return(kind, cfg) {
        Ok(v) => {
            let _ = writeln!(s, "optimal_return: {v}");
        }
        Err(_) => {
            let _ = writeln!(s, "optimal_return: unavailable");
        }
    }
    s
}
