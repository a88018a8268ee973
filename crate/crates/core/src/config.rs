//! Run configuration: TOML file values, overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Bootstrap on the whole test set before predicting.
    Transductive,
    /// Bootstrap on the first `warmup` records; earlier predictions are vision-language only.
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabeling {
    /// One-to-one: repeatedly take the most probable unmatched (centroid, class) pair.
    Greedy,
    /// Per-centroid argmax; several centroids may claim one class.
    Argmax,
}

/// Which pipeline components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Attribute-assisted prompting.
    pub aap: bool,
    /// Distance-covariance scoring on the vision-vision path.
    pub bdc: bool,
    /// Multimodal (image + textual analog) clustering and features.
    pub mac: bool,
    /// Nearest-neighbor soft voting.
    pub sv: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            aap: true,
            bdc: true,
            mac: true,
            sv: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            aap: false,
            bdc: false,
            mac: false,
            sv: false,
        }
    }

    /// Parses a comma list such as `aap,bdc`; `none` or an empty string disables all.
    pub fn parse(list: &str) -> Result<Self> {
        let mut t = Self::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "aap" => t.aap = true,
                "bdc" => t.bdc = true,
                "mac" => t.mac = true,
                "sv" => t.sv = true,
                "all" => t = Self::all(),
                "none" => {}
                other => {
                    return Err(TataError::InvalidValue {
                        field: "toggle",
                        reason: format!("unknown component {other:?}"),
                    })
                }
            }
        }
        Ok(t)
    }

    /// Whether the vision-vision path runs at all.
    pub fn vision_vision(&self) -> bool {
        self.bdc || self.mac
    }

    /// Whether any component needs the bootstrapped class store.
    pub fn needs_state(&self) -> bool {
        self.bdc || self.mac || self.sv
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.aap, "aap"),
            (self.bdc, "bdc"),
            (self.mac, "mac"),
            (self.sv, "sv"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Class count; when set it must match the class-name list.
    pub classes: Option<usize>,
    /// Nouns kept per semantic center.
    pub k1: usize,
    /// Soft-voting neighbors.
    pub k3: usize,
    /// Weight of the vision-vision distribution in the fusion.
    pub alpha: f64,
    /// Temperature of the vision-language and pseudo-labeling softmaxes.
    pub tau: f64,
    /// Temperature of the textual-analog softmax.
    pub tau_tilde: f64,
    /// Temperature of the vision-vision softmax.
    pub tau_vv: f64,
    /// Divide vision-vision dCov² scores by the query's own distance variance
    /// before the softmax. Off with `tau_vv = 1` gives the plain
    /// `exp(dCov²)` normalization.
    pub vv_self_scale: bool,
    /// Attributes per composed prompt.
    pub n_attr: usize,
    /// Confidence gate for admission to the class store.
    pub theta: f64,
    /// Members kept per class.
    pub capacity: usize,
    pub warmup: usize,
    /// Admissions between full re-clusterings (streaming mode; 0 disables).
    pub recluster: usize,
    pub mode: Mode,
    pub pseudo_labeling: PseudoLabeling,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: None,
            k1: 5,
            k3: 4,
            alpha: 1.75,
            tau: 0.01,
            tau_tilde: 0.005,
            tau_vv: 0.05,
            vv_self_scale: true,
            n_attr: 3,
            theta: 0.55,
            capacity: 8,
            warmup: 256,
            recluster: 256,
            mode: Mode::Transductive,
            pseudo_labeling: PseudoLabeling::Greedy,
            seed: 0,
            toggles: Toggles::all(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub classes: Option<usize>,
    pub k1: Option<usize>,
    pub k3: Option<usize>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub tau_tilde: Option<f64>,
    pub tau_vv: Option<f64>,
    pub n_attr: Option<usize>,
    pub theta: Option<f64>,
    pub capacity: Option<usize>,
    pub warmup: Option<usize>,
    pub recluster: Option<usize>,
    pub mode: Option<Mode>,
    pub pseudo_labeling: Option<PseudoLabeling>,
    pub seed: Option<u64>,
    pub toggles: Option<Toggles>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TataError::Parse(e.to_string()))
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { self.$f = v; } )* };
        }
        take!(
            k1,
            k3,
            alpha,
            tau,
            tau_tilde,
            tau_vv,
            n_attr,
            theta,
            capacity,
            warmup,
            recluster,
            mode,
            pseudo_labeling,
            seed,
            toggles
        );
        if o.classes.is_some() {
            self.classes = o.classes;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TataError::InvalidValue {
                    field,
                    reason: format!("must be a finite value > 0, got {v}"),
                })
            }
        };
        positive("tau", self.tau)?;
        positive("tau_tilde", self.tau_tilde)?;
        positive("tau_vv", self.tau_vv)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TataError::InvalidValue {
                field: "alpha",
                reason: format!("must be >= 0, got {}", self.alpha),
            });
        }
        if self.theta.is_nan() {
            return Err(TataError::InvalidValue {
                field: "theta",
                reason: "is NaN".into(),
            });
        }
        let at_least_one = |field: &'static str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(TataError::InvalidValue {
                    field,
                    reason: "must be >= 1".into(),
                })
            }
        };
        at_least_one("k1", self.k1)?;
        at_least_one("n_attr", self.n_attr)?;
        at_least_one("capacity", self.capacity)?;
        if self.classes == Some(0) {
            return Err(TataError::InvalidValue {
                field: "classes",
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Reads `path` if given, then applies `overrides` and validates.
pub fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}
