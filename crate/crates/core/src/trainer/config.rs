use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregators::AggKind;
use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::seqmodel::{SequenceModelSpec, Variant};

/// Learning rates tried by [`super::lr_sweep`].
pub const LR_GRID: [f64; 5] = [3e-3, 1e-3, 3e-4, 1e-4, 3e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    #[serde(default = "desk_corridor")]
    pub corridor: usize,
    #[serde(default = "desk_rooms")]
    pub rooms: usize,
    #[serde(default = "desk_plan_steps")]
    pub plan_steps: usize,
    pub episodes: Option<usize>,
}

fn desk_corridor() -> usize {
    EnvConfig::desk().corridor
}
fn desk_rooms() -> usize {
    EnvConfig::desk().rooms
}
fn desk_plan_steps() -> usize {
    EnvConfig::desk().plan_steps
}

impl EnvSection {
    pub fn new(kind: EnvKind, cfg: &EnvConfig) -> Self {
        EnvSection {
            kind,
            corridor: cfg.corridor,
            rooms: cfg.rooms,
            plan_steps: cfg.plan_steps,
            episodes: cfg.episodes,
        }
    }

    pub fn cfg(&self) -> EnvConfig {
        EnvConfig {
            corridor: self.corridor,
            rooms: self.rooms,
            plan_steps: self.plan_steps,
            episodes: self.episodes,
        }
    }
}

/// Sequence model choice; omitted widths and the gradient mode follow the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default = "default_agg")]
    pub agg: AggKind,
    pub embed: Option<usize>,
    pub hidden: Option<usize>,
    pub st_gradient: Option<bool>,
}

fn default_agg() -> AggKind {
    AggKind::Max
}

impl ModelSection {
    pub fn new(variant: Variant, agg: AggKind) -> Self {
        ModelSection {
            variant,
            agg,
            embed: None,
            hidden: None,
            st_gradient: None,
        }
    }

    pub fn spec(&self) -> SequenceModelSpec {
        let base = SequenceModelSpec::new(self.variant, self.agg);
        SequenceModelSpec {
            embed: self.embed.unwrap_or(if self.variant.splits() {
                embed_for(self.agg)
            } else {
                base.embed
            }),
            hidden: self.hidden.unwrap_or(base.hidden),
            st_gradient: self.st_gradient.unwrap_or(base.st_gradient),
            ..base
        }
    }
}

impl FromStr for ModelSection {
    type Err = Error;

    /// Parses a label such as `rnn` or `splagger-avg`.
    fn from_str(s: &str) -> Result<Self> {
        let (variant, agg) = match s.split_once('-') {
            Some((v, a)) => (v.parse()?, a.parse()?),
            None => (s.parse()?, default_agg()),
        };
        Ok(ModelSection::new(variant, agg))
    }
}

impl From<&SequenceModelSpec> for ModelSection {
    fn from(s: &SequenceModelSpec) -> Self {
        ModelSection {
            variant: s.variant,
            agg: s.agg,
            embed: Some(s.embed),
            hidden: Some(s.hidden),
            st_gradient: Some(s.st_gradient),
        }
    }
}

/// Optimisation and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub frames: u64,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    /// Entropy bonus; `None` picks 0.01, or 0 for the planning game.
    pub entropy: Option<f64>,
    pub value_coef: f64,
    pub kl_weight: f64,
    pub grad_clip: f64,
    /// Meta-episodes per update.
    pub batch: usize,
    pub epochs: usize,
    /// Divide learner rewards by the running spread of discounted returns.
    pub scale_rewards: bool,
    pub eval_every: u64,
    pub eval_tasks: usize,
    /// Stop once the evaluation mean reaches this return.
    pub stop_at: Option<f64>,
    /// Write a parameter file at every evaluation, not only at the end.
    pub checkpoint_all: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 3e-4,
            frames: 2_000_000,
            seeds: vec![1, 2, 3],
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy: None,
            value_coef: 0.5,
            kl_weight: 1e-6,
            grad_clip: 0.5,
            batch: 16,
            epochs: 4,
            scale_rewards: true,
            eval_every: 50_000,
            eval_tasks: 100,
            stop_at: None,
            checkpoint_all: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl TrainConfig {
    pub fn new(kind: EnvKind, model: ModelSection) -> Self {
        TrainConfig {
            env: EnvSection::new(kind, &EnvConfig::desk()),
            model,
            train: TrainSection::default(),
        }
    }

    pub fn entropy_coef(&self) -> f64 {
        self.train.entropy.unwrap_or(match self.env.kind {
            EnvKind::Plan | EnvKind::PlanBlind => 0.0,
            _ => 0.01,
        })
    }

    /// Fills every optional field with its resolved value.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.entropy = Some(self.entropy_coef());
        c.env.episodes = Some(self.env.cfg().episodes(self.env.kind));
        c.model = ModelSection::from(&self.model.spec());
        c
    }

    pub fn validate(&self) -> Result<()> {
        fn within(section: &'static str) -> impl Fn(Error) -> Error {
            move |e| match e {
                Error::Config { field, reason } => Error::config(format!("{section}.{field}"), reason),
                e => e,
            }
        }
        self.env.cfg().validate(self.env.kind).map_err(within("env"))?;
        self.model.spec().validate().map_err(within("model"))?;
        let t = &self.train;
        let positive = |field: &'static str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, "must be positive"))
            }
        };
        positive("train.lr", t.lr > 0.0 && t.lr.is_finite())?;
        positive("train.batch", t.batch > 0)?;
        positive("train.epochs", t.epochs > 0)?;
        positive("train.eval_every", t.eval_every > 0)?;
        positive("train.eval_tasks", t.eval_tasks > 0)?;
        positive("train.grad_clip", t.grad_clip > 0.0)?;
        positive("train.clip", t.clip > 0.0)?;
        if t.seeds.is_empty() {
            return Err(Error::config("train.seeds", "needs at least one seed"));
        }
        for (field, v) in [("train.gamma", t.gamma), ("train.lambda", t.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        let ent = self.entropy_coef();
        if !(ent >= 0.0) {
            return Err(Error::config("train.entropy", "must be non-negative"));
        }
        if matches!(self.env.kind, EnvKind::Plan | EnvKind::PlanBlind) && ent != 0.0 {
            return Err(Error::config("train.entropy", "the planning game trains without an entropy bonus"));
        }
        if !(t.value_coef >= 0.0) || !(t.kl_weight >= 0.0) {
            return Err(Error::config("train.value_coef", "loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Short label used in run directory names and CSV rows.
    pub fn model_label(&self) -> String {
        model_label(&self.model.spec())
    }
}

pub fn model_label(spec: &SequenceModelSpec) -> String {
    match spec.variant {
        Variant::Rnn | Variant::LstmInvinit | Variant::Cnp | Variant::Pearl => spec.variant.name().to_string(),
        v => format!("{}-{}", v.name(), spec.agg.name()),
    }
}

/// Embedding width for a split model with aggregator `agg`: kinds that split
/// their own input again need an even aggregated half.
pub fn embed_for(agg: AggKind) -> usize {
    if agg.splits_input() {
        52
    } else {
        SequenceModelSpec::DEFAULT_EMBED
    }
}
