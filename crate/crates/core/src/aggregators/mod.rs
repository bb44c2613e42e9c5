//! Constant-memory permutation-invariant aggregation of encoded transitions.
//!
//! Every kind folds one encoded vector at a time into an [`AggState`] whose
//! size does not grow with the number of steps. [`agg_batch`] computes the
//! same aggregate from the whole sequence at once and serves as the test dual
//! of the online fold. [`AggregatorOp`] is the tape form used by the sequence
//! models, with exact gradients carried backward through the recurrence.

mod batch;
mod online;
mod pearl;
mod tape_op;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::agg_batch;
pub use online::{agg_init, AggState};
pub use pearl::{pearl_kl_to_prior, pearl_posterior, pearl_sample};
pub use tape_op::{aggregate_sequence, aggregate_step, AggregatorOp};

use crate::error::{Error, Result};

/// Lower bound added to softplus outputs that must stay positive.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// Initial softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Sum,
    Avg,
    Max,
    /// First half averaged, second half maxed.
    AvgMax,
    /// Softmax-weighted mean, weights from the values themselves.
    Softmax,
    /// First half aggregated, second half softmax logits.
    WSoftmax,
    /// First half aggregated, second half positive weights via softplus.
    WAvg,
    /// First half means, second half raw variances; product of Gaussians.
    Pearl,
}

impl AggKind {
    pub const ALL: [AggKind; 8] = [
        AggKind::Sum,
        AggKind::Avg,
        AggKind::Max,
        AggKind::AvgMax,
        AggKind::Softmax,
        AggKind::WSoftmax,
        AggKind::WAvg,
        AggKind::Pearl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Avg => "avg",
            AggKind::Max => "max",
            AggKind::AvgMax => "avgmax",
            AggKind::Softmax => "softmax",
            AggKind::WSoftmax => "wsoftmax",
            AggKind::WAvg => "wavg",
            AggKind::Pearl => "pearl",
        }
    }

    /// Kinds that split their input in half.
    pub fn splits_input(self) -> bool {
        matches!(
            self,
            AggKind::AvgMax | AggKind::WSoftmax | AggKind::WAvg | AggKind::Pearl
        )
    }

    /// Kinds with a learnable temperature.
    pub fn has_temperature(self) -> bool {
        matches!(self, AggKind::Softmax | AggKind::WSoftmax)
    }

    pub fn check_width(self, width: usize) -> Result<()> {
        if width == 0 || (self.splits_input() && width % 2 == 1) {
            return Err(Error::OddWidth {
                kind: self.name(),
                width,
            });
        }
        Ok(())
    }

    /// Width of the aggregate consumed downstream. For `pearl` this is the
    /// latent width (one half); its read-out carries mean and variance.
    pub fn output_width(self, width: usize) -> usize {
        match self {
            AggKind::WSoftmax | AggKind::WAvg | AggKind::Pearl => width / 2,
            _ => width,
        }
    }

    /// Width of [`AggState::read`] and of the tape node value.
    pub fn read_width(self, width: usize) -> usize {
        match self {
            AggKind::WSoftmax | AggKind::WAvg => width / 2,
            _ => width,
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "aggregator",
                name: s.to_string(),
            })
    }
}
