//! One-factor-at-a-time ablation grids.

use serde::Serialize;

use crate::config::{check_config, ExperimentConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationAxis {
    Preposition,
    AnchorLength,
    Arrangement,
    Kd,
    GumbelTau,
    Ensemble,
    Paradigm,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Preposition,
        AblationAxis::AnchorLength,
        AblationAxis::Arrangement,
        AblationAxis::Kd,
        AblationAxis::GumbelTau,
        AblationAxis::Ensemble,
        AblationAxis::Paradigm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Preposition => "preposition",
            AblationAxis::AnchorLength => "anchor_length",
            AblationAxis::Arrangement => "arrangement",
            AblationAxis::Kd => "kd",
            AblationAxis::GumbelTau => "gumbel_tau",
            AblationAxis::Ensemble => "ensemble",
            AblationAxis::Paradigm => "paradigm",
        }
    }

    /// Parses exactly one axis name; lists of axes are refused.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains(',') || s.split_whitespace().count() > 1 {
            return Err(Error::invalid(format!(
                "ablation grids vary one axis at a time, got `{s}`"
            )));
        }
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::invalid(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
        })
    }

    /// Cell values in table order.
    pub fn values(self) -> &'static [&'static str] {
        match self {
            AblationAxis::Preposition => &["of", "with", "at", "sun", "sea", "none"],
            AblationAxis::AnchorLength => &["1", "2", "3", "4"],
            AblationAxis::Arrangement => &["matrix", "before_soft", "middle", "after_class"],
            AblationAxis::Kd => &["on", "off"],
            AblationAxis::GumbelTau => &["0.1", "0.5", "1", "2", "4"],
            AblationAxis::Ensemble => &["on", "off"],
            AblationAxis::Paradigm => &["two_stage", "one_stage"],
        }
    }

    /// The base configuration with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        if !self.values().contains(&value) {
            return Err(Error::invalid(format!(
                "`{value}` is not a cell of the {} axis",
                self.name()
            )));
        }
        let mut cfg = base.clone();
        let (key, v) = match self {
            AblationAxis::Preposition => ("prompt.preposition", value.to_string()),
            AblationAxis::AnchorLength => ("prompt.anchor_len", value.to_string()),
            AblationAxis::Arrangement => ("prompt.arrangement", value.to_string()),
            AblationAxis::Kd => {
                let lambda = if value == "on" { base.train.lambda_kd } else { 0.0 };
                ("train.lambda_kd", lambda.to_string())
            }
            AblationAxis::GumbelTau => ("prompt.gumbel_tau", value.to_string()),
            AblationAxis::Ensemble => ("eval.ensemble", value.to_string()),
            AblationAxis::Paradigm => ("run.paradigm", value.to_string()),
        };
        cfg.set(key, &v).map_err(Error::InvalidArgument)?;
        check_config(&cfg)?;
        Ok(cfg)
    }
}

/// Settings one ablation cell actually ran with, for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellWiring {
    pub axis: &'static str,
    pub value: String,
    pub preposition: String,
    pub anchor_len: usize,
    pub arrangement: &'static str,
    pub uses_position_matrix: bool,
    pub lambda_kd: f64,
    pub gumbel_tau: f64,
    pub ensemble: bool,
    pub paradigm: &'static str,
}

impl CellWiring {
    pub fn new(axis: AblationAxis, value: &str, cfg: &ExperimentConfig) -> Self {
        let p = &cfg.train.prompt;
        Self {
            axis: axis.name(),
            value: value.to_string(),
            preposition: p.preposition.map_or("none", |x| x.name()).to_string(),
            anchor_len: p.anchor_len,
            arrangement: p.arrangement.name(),
            uses_position_matrix: p.arrangement == crate::prompt::Arrangement::Matrix,
            lambda_kd: cfg.train.lambda_kd,
            gumbel_tau: p.gumbel_tau,
            ensemble: cfg.eval.ensemble,
            paradigm: cfg.run.paradigm.name(),
        }
    }
}
