//! Transition encoders, recurrent cells and the assembled sequence models.

mod cells;
mod model;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cells::{open_gate_bias, Gru, Lstm, LstmState};
pub use model::{pearl_kl_node, ModelState, SequenceModel, StepOut};
pub use params::{fan_in_uniform, Bound, Linear, ParamId, ParamStore};

use crate::aggregators::AggKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One step of interaction. `done` marks that `s_next` opens a new episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub s: Vec<T>,
    pub a: usize,
    pub r: T,
    pub s_next: Vec<T>,
    pub done: bool,
}

impl<T: Scalar> Transition<T> {
    /// Width of [`Transition::features`].
    pub fn width(obs_dim: usize, n_actions: usize) -> usize {
        2 * obs_dim + n_actions + 2
    }

    /// `s, onehot(a), r, s', done` written into `out`.
    pub fn write_features(&self, n_actions: usize, out: &mut [T]) {
        let d = self.s.len();
        debug_assert_eq!(out.len(), Self::width(d, n_actions));
        out[..d].copy_from_slice(&self.s);
        out[d..d + n_actions].iter_mut().for_each(|v| *v = T::zero());
        out[d + self.a] = T::one();
        out[d + n_actions] = self.r;
        out[d + n_actions + 1..2 * d + n_actions + 1].copy_from_slice(&self.s_next);
        out[2 * d + n_actions + 1] = if self.done { T::one() } else { T::zero() };
    }

    pub fn features(&self, n_actions: usize) -> Vec<T> {
        let mut out = vec![T::zero(); Self::width(self.s.len(), n_actions)];
        self.write_features(n_actions, &mut out);
        out
    }

    /// The transition that opens a meta-episode: zero state, action 0, no reward.
    pub fn opening(first_obs: Vec<T>) -> Self {
        Transition {
            s: vec![T::zero(); first_obs.len()],
            a: 0,
            r: T::zero(),
            s_next: first_obs,
            done: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rnn,
    Cnp,
    Amrl,
    Pearl,
    Splagger,
    SplaggerNosplit,
    SplaggerNornn,
    AmrlNornn,
    LstmInvinit,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Rnn,
        Variant::Cnp,
        Variant::Amrl,
        Variant::Pearl,
        Variant::Splagger,
        Variant::SplaggerNosplit,
        Variant::SplaggerNornn,
        Variant::AmrlNornn,
        Variant::LstmInvinit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnn => "rnn",
            Variant::Cnp => "cnp",
            Variant::Amrl => "amrl",
            Variant::Pearl => "pearl",
            Variant::Splagger => "splagger",
            Variant::SplaggerNosplit => "splagger_nosplit",
            Variant::SplaggerNornn => "splagger_nornn",
            Variant::AmrlNornn => "amrl_nornn",
            Variant::LstmInvinit => "lstm_invinit",
        }
    }

    pub fn straight_through(self) -> bool {
        matches!(self, Variant::Amrl | Variant::AmrlNornn)
    }

    pub fn has_gru(self) -> bool {
        matches!(
            self,
            Variant::Rnn | Variant::Amrl | Variant::Splagger | Variant::SplaggerNosplit
        )
    }

    pub fn splits(self) -> bool {
        matches!(self, Variant::Amrl | Variant::Splagger)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "model variant",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceModelSpec {
    pub variant: Variant,
    /// Aggregator for the aggregating variants; `cnp` and `pearl` fix their own.
    pub agg: AggKind,
    pub embed: usize,
    pub hidden: usize,
    pub st_gradient: bool,
}

impl SequenceModelSpec {
    pub const DEFAULT_EMBED: usize = 50;
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(variant: Variant, agg: AggKind) -> Self {
        SequenceModelSpec {
            variant,
            agg,
            embed: Self::DEFAULT_EMBED,
            hidden: Self::DEFAULT_HIDDEN,
            st_gradient: variant.straight_through(),
        }
    }

    pub fn with_embed(mut self, embed: usize) -> Self {
        self.embed = embed;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    /// The aggregator actually used, if any.
    pub fn aggregator(&self) -> Option<AggKind> {
        match self.variant {
            Variant::Rnn | Variant::LstmInvinit => None,
            Variant::Cnp => Some(AggKind::Avg),
            Variant::Pearl => Some(AggKind::Pearl),
            _ => Some(self.agg),
        }
    }

    /// Width fed to the aggregator.
    pub fn aggregated_width(&self) -> usize {
        if self.variant.splits() {
            self.embed / 2
        } else {
            self.embed
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.st_gradient != self.variant.straight_through() {
            return Err(Error::config(
                "st_gradient",
                format!(
                    "{} requires st_gradient = {}",
                    self.variant,
                    self.variant.straight_through()
                ),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.embed == 0 || (self.variant.splits() && self.embed % 2 == 1) {
            return Err(Error::config("embed", "split models need an even embedding width"));
        }
        if let Some(kind) = self.aggregator() {
            kind.check_width(self.aggregated_width())
                .map_err(|e| Error::config("embed", e.to_string()))?;
            if self.st_gradient && kind.read_width(self.aggregated_width()) != self.aggregated_width() {
                return Err(Error::config(
                    "agg",
                    format!("{kind} changes width and cannot take an identity Jacobian"),
                ));
            }
        }
        Ok(())
    }

    /// Width of the embedding handed to the policy.
    pub fn output_width(&self) -> usize {
        let agg_out = |k: AggKind| k.output_width(self.aggregated_width());
        match self.variant {
            Variant::Rnn | Variant::LstmInvinit => self.hidden,
            Variant::Amrl | Variant::Splagger => {
                self.embed / 2 + agg_out(self.aggregator().expect("aggregating"))
            }
            _ => agg_out(self.aggregator().expect("aggregating")),
        }
    }

    /// Width of the per-step unit-normal draw, for models that sample.
    pub fn noise_width(&self) -> Option<usize> {
        (self.aggregator() == Some(AggKind::Pearl)).then(|| self.aggregated_width() / 2)
    }
}
