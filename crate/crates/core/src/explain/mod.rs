//! LeGrad and baseline explanation methods.
//!
//! LeGrad scores every selected layer `l` by running the model's embedding
//! head on `Z^l`, differentiates that score with respect to the
//! post-softmax attention `A^l` (as a leaf), keeps the positive part,
//! averages over heads and query rows, and averages the resulting token maps
//! over layers before reshaping, upsampling and normalizing.

mod baselines;
mod heatmap;
mod legrad;
mod pipeline;
mod query;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{
    attentioncam, attentioncam_scores, default_gradcam_layer, gradcam, gradcam_scores,
    raw_attention, raw_attention_scores, rollout, rollout_matrix, rollout_scores, token_gradient,
};
pub use heatmap::Heatmap;
pub use legrad::{
    background_suppress, central_difference, fd_grad_attention, finalize_single_layer,
    grad_attention, layer_explanation, layer_score, legrad, legrad_layers, merge_layers,
    LayerExplanation, DEFAULT_SUPPRESS_THRESHOLD,
};
pub use pipeline::{explain, ExplainParams, Explanation, LayerSummary};
pub use query::{Query, Target};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Legrad,
    RawAttention,
    Rollout,
    Gradcam,
    Attentioncam,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Legrad,
        Method::RawAttention,
        Method::Rollout,
        Method::Gradcam,
        Method::Attentioncam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Legrad => "legrad",
            Method::RawAttention => "raw_attention",
            Method::Rollout => "rollout",
            Method::Gradcam => "gradcam",
            Method::Attentioncam => "attentioncam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Which layers LeGrad merges: `lastP%` (the trailing `ceil(P/100 * L)`
/// layers), `all`, or explicit 1-based indices such as `12`, `9,10,12` or
/// `9-12`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    LastPercent(u32),
    All,
    List(Vec<usize>),
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec::LastPercent(40)
    }
}

impl LayerSpec {
    /// Sorted, deduplicated layer indices within `1..=layers`.
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        if layers == 0 {
            return Err(Error::LayerRange("model has no transformer layers".into()));
        }
        let mut out = match self {
            LayerSpec::All => (1..=layers).collect(),
            LayerSpec::LastPercent(p) => {
                let count = ((*p as usize * layers).div_ceil(100)).clamp(1, layers);
                (layers - count + 1..=layers).collect()
            }
            LayerSpec::List(list) => {
                if let Some(&bad) = list.iter().find(|&&l| l == 0 || l > layers) {
                    return Err(Error::LayerOutOfRange {
                        layer: bad,
                        max: layers,
                    });
                }
                list.clone()
            }
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(Error::LayerRange("empty layer selection".into()));
        }
        Ok(out)
    }

    /// The single explicit layer, if that is all the spec names.
    pub fn single(&self) -> Option<usize> {
        match self {
            LayerSpec::List(l) if l.len() == 1 => Some(l[0]),
            _ => None,
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::LayerRange(format!("cannot parse {s:?}"));
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSpec::All);
        }
        if let Some(pct) = s.strip_prefix("last").and_then(|r| r.strip_suffix('%')) {
            let p: u32 = pct.parse().map_err(|_| bad())?;
            if p == 0 || p > 100 {
                return Err(bad());
            }
            return Ok(LayerSpec::LastPercent(p));
        }
        let mut list = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            match part.split_once('-') {
                Some((a, b)) => {
                    let a: usize = a.trim().parse().map_err(|_| bad())?;
                    let b: usize = b.trim().parse().map_err(|_| bad())?;
                    if a > b {
                        return Err(bad());
                    }
                    list.extend(a..=b);
                }
                None => list.push(part.parse().map_err(|_| bad())?),
            }
        }
        Ok(LayerSpec::List(list))
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::LastPercent(p) => write!(f, "last{p}%"),
            LayerSpec::All => f.write_str("all"),
            LayerSpec::List(l) => {
                let parts: Vec<String> = l.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(l: LayerSpec) -> Self {
        l.to_string()
    }
}
