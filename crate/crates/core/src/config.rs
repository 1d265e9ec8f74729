//! Experiment configuration: a line-oriented `key = value` format.
//!
//! ```text
//! # comment
//! run.name = baseline        # trailing comments are allowed
//! run.seeds = 0, 1, 2
//! stage2.lr = 0.001
//! ```
//!
//! Keys are `section.field`. Every key has a default except `run.name`.
//! Unknown and repeated keys are rejected with their line number. Lists are
//! comma-separated. `prompt.preposition = none` drops the preposition.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pretrain::PretrainConfig;
use crate::prompt::{Arrangement, PositionForward};
use crate::train::{KdDirection, KdTeacher, Method, Paradigm, TrainConfig};
use crate::world::{Preposition, Shift, WorldConfig};

/// Settings of the experiment runner itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out: String,
    pub paradigm: Paradigm,
    /// Methods trained by `run`; `compare` always uses all of them.
    pub methods: Vec<Method>,
    pub base_fraction: f64,
    /// Labeled images per base class.
    pub shots: usize,
    pub checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            seeds: vec![0, 1, 2],
            out: "out".into(),
            paradigm: Paradigm::TwoStage,
            methods: vec![Method::CoOp, Method::AnchorOpt],
            base_fraction: 0.5,
            shots: 16,
            checkpoints: true,
        }
    }
}

/// Class descriptions that supervise the anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescriptionConfig {
    pub per_class: usize,
    pub perturbation: f64,
}

impl Default for DescriptionConfig {
    fn default() -> Self {
        Self {
            per_class: 5,
            perturbation: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub world: WorldConfig,
    /// Vocabulary and image shape are taken from the world.
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub descriptions: DescriptionConfig,
    pub eval: EvalConfig,
    /// Target worlds of the cross-world evaluation.
    pub shifts: Vec<Shift>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            run: RunConfig::default(),
            world: WorldConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            descriptions: DescriptionConfig::default(),
            eval: EvalConfig::default(),
            shifts: vec![Shift::RaiseNoise(2.0), Shift::RotateRenderMap(0.5)],
        };
        cfg.sync_encoder();
        cfg
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "run.name",
    "run.seeds",
    "run.out",
    "run.paradigm",
    "run.methods",
    "run.base_fraction",
    "run.shots",
    "run.checkpoints",
    "world.classes",
    "world.attributes",
    "world.latent_dim",
    "world.noise_sigma",
    "world.vocab_size",
    "world.patches",
    "world.patch_dim",
    "world.uniqueness",
    "world.words",
    "world.caption_perturbation",
    "world.caption_name_prob",
    "world.caption_attribute_prob",
    "encoder.token_dim",
    "encoder.embed_dim",
    "encoder.text_blocks",
    "encoder.text_heads",
    "encoder.max_len",
    "encoder.image_width",
    "encoder.image_blocks",
    "encoder.image_heads",
    "encoder.mlp_ratio",
    "pretrain.min_steps",
    "pretrain.max_steps",
    "pretrain.lr",
    "pretrain.target",
    "pretrain.eval_every",
    "pretrain.heldout_per_class",
    "pretrain.batch_classes",
    "prompt.soft_len",
    "prompt.anchor_len",
    "prompt.preposition",
    "prompt.arrangement",
    "prompt.position_forward",
    "prompt.gumbel_tau",
    "prompt.deep_depth",
    "prompt.attribute_words",
    "train.lambda_ce",
    "train.lambda_kd",
    "train.kd_direction",
    "train.kd_teacher",
    "train.momentum",
    "stage1.steps",
    "stage1.lr",
    "stage1.batch",
    "stage1.descriptions",
    "stage1.description_perturbation",
    "stage2.steps",
    "stage2.lr",
    "stage2.batch",
    "one_stage.steps",
    "one_stage.period",
    "eval.samples_per_class",
    "eval.ensemble",
    "eval.shifts",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a valid {}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_enum<T>(v: &str, parse: impl Fn(&str) -> Option<T>, allowed: &str) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("`{v}` is not one of {allowed}"))
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Encoder fields that must agree with the world.
    fn sync_encoder(&mut self) {
        self.encoder.vocab_size = self.world.vocab_size;
        self.encoder.patches = self.world.patches;
        self.encoder.patch_dim = self.world.patch_dim;
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let (w, e, p, t) = (
            &mut self.world,
            &mut self.encoder,
            &mut self.pretrain,
            &mut self.train,
        );
        match key {
            "run.name" => {
                if v.is_empty() {
                    return Err("run name must not be empty".into());
                }
                self.run.name = v.to_string();
            }
            "run.seeds" => {
                let seeds = split_list(v).map(parse_num).collect::<std::result::Result<Vec<u64>, _>>()?;
                if seeds.is_empty() {
                    return Err("at least one seed is required".into());
                }
                self.run.seeds = seeds;
            }
            "run.out" => self.run.out = v.to_string(),
            "run.paradigm" => {
                self.run.paradigm = parse_enum(v, Paradigm::parse, "two_stage, one_stage")?
            }
            "run.methods" => {
                let methods = split_list(v)
                    .map(|m| parse_enum(m, Method::parse, "coop, atprompt, anchoropt"))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if methods.is_empty() {
                    return Err("at least one method is required".into());
                }
                self.run.methods = methods;
            }
            "run.base_fraction" => self.run.base_fraction = parse_num(v)?,
            "run.shots" => self.run.shots = parse_num(v)?,
            "run.checkpoints" => self.run.checkpoints = parse_bool(v)?,
            "world.classes" => w.classes = parse_num(v)?,
            "world.attributes" => w.attributes = parse_num(v)?,
            "world.latent_dim" => w.latent_dim = parse_num(v)?,
            "world.noise_sigma" => w.noise_sigma = parse_num(v)?,
            "world.vocab_size" => w.vocab_size = parse_num(v)?,
            "world.patches" => w.patches = parse_num(v)?,
            "world.patch_dim" => w.patch_dim = parse_num(v)?,
            "world.uniqueness" => w.uniqueness = parse_num(v)?,
            "world.words" => w.words = parse_num(v)?,
            "world.caption_perturbation" => w.caption_perturbation = parse_num(v)?,
            "world.caption_name_prob" => w.caption_name_prob = parse_num(v)?,
            "world.caption_attribute_prob" => w.caption_attribute_prob = parse_num(v)?,
            "encoder.token_dim" => e.token_dim = parse_num(v)?,
            "encoder.embed_dim" => e.embed_dim = parse_num(v)?,
            "encoder.text_blocks" => e.text_blocks = parse_num(v)?,
            "encoder.text_heads" => e.text_heads = parse_num(v)?,
            "encoder.max_len" => e.max_len = parse_num(v)?,
            "encoder.image_width" => e.image_width = parse_num(v)?,
            "encoder.image_blocks" => e.image_blocks = parse_num(v)?,
            "encoder.image_heads" => e.image_heads = parse_num(v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse_num(v)?,
            "pretrain.min_steps" => p.min_steps = parse_num(v)?,
            "pretrain.max_steps" => p.max_steps = parse_num(v)?,
            "pretrain.lr" => p.lr = parse_num(v)?,
            "pretrain.target" => p.target_top1 = parse_num(v)?,
            "pretrain.eval_every" => p.eval_every = parse_num(v)?,
            "pretrain.heldout_per_class" => p.heldout_per_class = parse_num(v)?,
            "pretrain.batch_classes" => p.batch_classes = parse_num(v)?,
            "prompt.soft_len" => t.prompt.soft_len = parse_num(v)?,
            "prompt.anchor_len" => t.prompt.anchor_len = parse_num(v)?,
            "prompt.preposition" => {
                t.prompt.preposition = if v == "none" {
                    None
                } else {
                    Some(parse_enum(v, Preposition::parse, "of, with, at, sun, sea, none")?)
                }
            }
            "prompt.arrangement" => {
                t.prompt.arrangement = parse_enum(
                    v,
                    Arrangement::parse,
                    "matrix, before_soft, middle, after_class",
                )?
            }
            "prompt.position_forward" => {
                t.prompt.position_forward = parse_enum(v, PositionForward::parse, "hard_st, soft")?
            }
            "prompt.gumbel_tau" => t.prompt.gumbel_tau = parse_num(v)?,
            "prompt.deep_depth" => t.prompt.deep_depth = parse_num(v)?,
            "prompt.attribute_words" => t.prompt.attribute_words = parse_num(v)?,
            "train.lambda_ce" => t.lambda_ce = parse_num(v)?,
            "train.lambda_kd" => t.lambda_kd = parse_num(v)?,
            "train.kd_direction" => {
                t.kd_direction =
                    parse_enum(v, KdDirection::parse, "teacher_first, student_first")?
            }
            "train.kd_teacher" => t.kd_teacher = parse_enum(v, KdTeacher::parse, "probs, logits")?,
            "train.momentum" => t.momentum = parse_num(v)?,
            "stage1.steps" => t.stage1.steps = parse_num(v)?,
            "stage1.lr" => t.stage1.lr = parse_num(v)?,
            "stage1.batch" => t.stage1.batch = parse_num(v)?,
            "stage1.descriptions" => self.descriptions.per_class = parse_num(v)?,
            "stage1.description_perturbation" => self.descriptions.perturbation = parse_num(v)?,
            "stage2.steps" => t.stage2.steps = parse_num(v)?,
            "stage2.lr" => t.stage2.lr = parse_num(v)?,
            "stage2.batch" => t.stage2.batch = parse_num(v)?,
            "one_stage.steps" => t.one_stage_steps = parse_num(v)?,
            "one_stage.period" => t.one_stage_period = parse_num(v)?,
            "eval.samples_per_class" => self.eval.samples_per_class = parse_num(v)?,
            "eval.ensemble" => self.eval.ensemble = parse_bool(v)?,
            "eval.shifts" => {
                self.shifts = if v == "none" {
                    Vec::new()
                } else {
                    split_list(v)
                        .map(|s| Shift::parse(s).map_err(|e| e.to_string()))
                        .collect::<std::result::Result<_, _>>()?
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        self.sync_encoder();
        Ok(())
    }

    /// Textual value of one key; `set(key, get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let (w, e, p, t) = (&self.world, &self.encoder, &self.pretrain, &self.train);
        Some(match key {
            "run.name" => self.run.name.clone(),
            "run.seeds" => join(&self.run.seeds, u64::to_string),
            "run.out" => self.run.out.clone(),
            "run.paradigm" => self.run.paradigm.name().into(),
            "run.methods" => join(&self.run.methods, |m| m.name().into()),
            "run.base_fraction" => self.run.base_fraction.to_string(),
            "run.shots" => self.run.shots.to_string(),
            "run.checkpoints" => self.run.checkpoints.to_string(),
            "world.classes" => w.classes.to_string(),
            "world.attributes" => w.attributes.to_string(),
            "world.latent_dim" => w.latent_dim.to_string(),
            "world.noise_sigma" => w.noise_sigma.to_string(),
            "world.vocab_size" => w.vocab_size.to_string(),
            "world.patches" => w.patches.to_string(),
            "world.patch_dim" => w.patch_dim.to_string(),
            "world.uniqueness" => w.uniqueness.to_string(),
            "world.words" => w.words.to_string(),
            "world.caption_perturbation" => w.caption_perturbation.to_string(),
            "world.caption_name_prob" => w.caption_name_prob.to_string(),
            "world.caption_attribute_prob" => w.caption_attribute_prob.to_string(),
            "encoder.token_dim" => e.token_dim.to_string(),
            "encoder.embed_dim" => e.embed_dim.to_string(),
            "encoder.text_blocks" => e.text_blocks.to_string(),
            "encoder.text_heads" => e.text_heads.to_string(),
            "encoder.max_len" => e.max_len.to_string(),
            "encoder.image_width" => e.image_width.to_string(),
            "encoder.image_blocks" => e.image_blocks.to_string(),
            "encoder.image_heads" => e.image_heads.to_string(),
            "encoder.mlp_ratio" => e.mlp_ratio.to_string(),
            "pretrain.min_steps" => p.min_steps.to_string(),
            "pretrain.max_steps" => p.max_steps.to_string(),
            "pretrain.lr" => p.lr.to_string(),
            "pretrain.target" => p.target_top1.to_string(),
            "pretrain.eval_every" => p.eval_every.to_string(),
            "pretrain.heldout_per_class" => p.heldout_per_class.to_string(),
            "pretrain.batch_classes" => p.batch_classes.to_string(),
            "prompt.soft_len" => t.prompt.soft_len.to_string(),
            "prompt.anchor_len" => t.prompt.anchor_len.to_string(),
            "prompt.preposition" => t.prompt.preposition.map_or("none", Preposition::name).into(),
            "prompt.arrangement" => t.prompt.arrangement.name().into(),
            "prompt.position_forward" => t.prompt.position_forward.name().into(),
            "prompt.gumbel_tau" => t.prompt.gumbel_tau.to_string(),
            "prompt.deep_depth" => t.prompt.deep_depth.to_string(),
            "prompt.attribute_words" => t.prompt.attribute_words.to_string(),
            "train.lambda_ce" => t.lambda_ce.to_string(),
            "train.lambda_kd" => t.lambda_kd.to_string(),
            "train.kd_direction" => t.kd_direction.name().into(),
            "train.kd_teacher" => t.kd_teacher.name().into(),
            "train.momentum" => t.momentum.to_string(),
            "stage1.steps" => t.stage1.steps.to_string(),
            "stage1.lr" => t.stage1.lr.to_string(),
            "stage1.batch" => t.stage1.batch.to_string(),
            "stage1.descriptions" => self.descriptions.per_class.to_string(),
            "stage1.description_perturbation" => self.descriptions.perturbation.to_string(),
            "stage2.steps" => t.stage2.steps.to_string(),
            "stage2.lr" => t.stage2.lr.to_string(),
            "stage2.batch" => t.stage2.batch.to_string(),
            "one_stage.steps" => t.one_stage_steps.to_string(),
            "one_stage.period" => t.one_stage_period.to_string(),
            "eval.samples_per_class" => self.eval.samples_per_class.to_string(),
            "eval.ensemble" => self.eval.ensemble.to_string(),
            "eval.shifts" => {
                if self.shifts.is_empty() {
                    "none".into()
                } else {
                    join(&self.shifts, Shift::to_string)
                }
            }
            _ => return None,
        })
    }

    /// Fully resolved `key = value` listing in [`KEYS`] order.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key resolves")))
            .collect()
    }

    /// SHA-256 of the resolved listing, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    /// Digest of the settings that determine a pretrained encoder.
    pub fn encoder_digest(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        for k in KEYS
            .iter()
            .filter(|k| k.starts_with("world.") || k.starts_with("encoder.") || k.starts_with("pretrain."))
        {
            h.update(format!("{k} = {}\n", self.get(k).expect("listed key")).as_bytes());
        }
        h.update(format!("seed = {seed}\n").as_bytes());
        hex::encode(h.finalize())
    }
}

/// A parsed configuration together with the line each key came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Source line per explicitly set key; 0 marks a command-line override.
    pub lines: BTreeMap<String, usize>,
}

impl LoadedConfig {
    fn line_of(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    fn reject(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line_of(key),
            message: format!("`{key}`: {}", message.into()),
        }
    }
}

/// Parses configuration text, applies `key=value` overrides, and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let mut loaded = LoadedConfig {
        config: ExperimentConfig::default(),
        lines: BTreeMap::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        if let Some(first) = loaded.lines.get(key) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
        loaded
            .config
            .set(key, value)
            .map_err(|message| Error::Config { line, message: format!("`{key}`: {message}") })?;
        loaded.lines.insert(key.to_string(), line);
    }
    for o in overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            message: format!("override `{o}` is not `key=value`"),
        })?;
        let key = key.trim();
        loaded.config.set(key, value).map_err(|message| Error::Config {
            line: 0,
            message: format!("override `{key}`: {message}"),
        })?;
        loaded.lines.insert(key.to_string(), 0);
    }
    validate(&loaded)?;
    Ok(loaded)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    parse_config(&std::fs::read_to_string(path)?, overrides)
}

fn validate(loaded: &LoadedConfig) -> Result<()> {
    if loaded.config.run.name.is_empty() {
        return Err(Error::MissingKey("run.name".into()));
    }
    validate_settings(loaded)
}

/// Range and consistency checks of a programmatically built configuration.
pub fn check_config(config: &ExperimentConfig) -> Result<()> {
    validate_settings(&LoadedConfig {
        config: config.clone(),
        lines: BTreeMap::new(),
    })
}

fn validate_settings(loaded: &LoadedConfig) -> Result<()> {
    let c = &loaded.config;
    let prompt = &c.train.prompt;
    if prompt.soft_len == 0 {
        return Err(loaded.reject("prompt.soft_len", "at least one soft token is required"));
    }
    if prompt.anchor_len == 0 {
        return Err(loaded.reject("prompt.anchor_len", "at least one anchor token is required"));
    }
    for m in Method::ALL {
        let len = prompt.longest_prompt(m);
        if len > c.encoder.max_len {
            let key = if loaded.line_of("encoder.max_len") > 0 {
                "encoder.max_len"
            } else {
                "prompt.soft_len"
            };
            return Err(loaded.reject(
                key,
                format!(
                    "{} prompts need {len} tokens but encoder.max_len is {}",
                    m.name(),
                    c.encoder.max_len
                ),
            ));
        }
    }
    if prompt.deep_depth == 0 || prompt.deep_depth > c.encoder.text_blocks {
        return Err(loaded.reject(
            "prompt.deep_depth",
            format!("must lie in 1..={}", c.encoder.text_blocks),
        ));
    }
    let positive = [
        ("prompt.gumbel_tau", prompt.gumbel_tau),
        ("stage1.lr", c.train.stage1.lr),
        ("stage2.lr", c.train.stage2.lr),
        ("pretrain.lr", c.pretrain.lr),
    ];
    for (key, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            return Err(loaded.reject(key, "must be positive"));
        }
    }
    for (key, v) in [("train.lambda_ce", c.train.lambda_ce), ("train.lambda_kd", c.train.lambda_kd)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(loaded.reject(key, "must be non-negative"));
        }
    }
    if !(0.0..1.0).contains(&c.train.momentum) {
        return Err(loaded.reject("train.momentum", "must lie in [0, 1)"));
    }
    let counts = [
        ("run.shots", c.run.shots),
        ("stage1.batch", c.train.stage1.batch),
        ("stage2.batch", c.train.stage2.batch),
        ("stage1.descriptions", c.descriptions.per_class),
        ("one_stage.period", c.train.one_stage_period),
        ("eval.samples_per_class", c.eval.samples_per_class),
        ("pretrain.eval_every", c.pretrain.eval_every),
    ];
    for (key, v) in counts {
        if v == 0 {
            return Err(loaded.reject(key, "must be at least 1"));
        }
    }
    if !(c.run.base_fraction > 0.0 && c.run.base_fraction < 1.0) {
        return Err(loaded.reject("run.base_fraction", "must lie strictly between 0 and 1"));
    }
    if !(c.descriptions.perturbation.is_finite() && c.descriptions.perturbation >= 0.0) {
        return Err(loaded.reject("stage1.description_perturbation", "must be non-negative"));
    }
    c.world
        .validate()
        .map_err(|e| loaded.reject("world.classes", e.to_string()))?;
    c.encoder
        .validate()
        .map_err(|e| loaded.reject("encoder.token_dim", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let loaded = parse_config("run.name = x\nrun.seeds = 4, 5\nprompt.preposition = none\n", &[]).unwrap();
        let again = parse_config(&loaded.config.echo(), &[]).unwrap();
        assert_eq!(again.config, loaded.config);
        assert_eq!(again.config.digest(), loaded.config.digest());
        for k in KEYS {
            assert!(loaded.config.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn rejections_name_key_and_line() {
        let err = parse_config("run.name = a\n\nbogus.key = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, ref message } if message.contains("bogus.key")));
        let err = parse_config("run.name = a\nrun.name = b\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = parse_config("stage2.lr = 0.1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::MissingKey(ref k) if k == "run.name"));
        let err = parse_config("run.name = a\nprompt.soft_len = 0\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = parse_config("run.name = a\nprompt.soft_len = 13\n", &[]).unwrap_err();
        assert!(err.to_string().contains("max_len"), "{err}");
    }

    #[test]
    fn overrides_apply_after_file() {
        let loaded = parse_config(
            "run.name = a # note\nstage2.steps = 5\n",
            &["stage2.steps=7".into(), "train.kd_teacher=logits".into()],
        )
        .unwrap();
        assert_eq!(loaded.config.train.stage2.steps, 7);
        assert_eq!(loaded.config.train.kd_teacher, KdTeacher::Logits);
        assert_eq!(loaded.lines["stage2.steps"], 0);
        assert!(parse_config("run.name = a\n", &["nope".into()]).is_err());
    }

    #[test]
    fn world_shape_flows_into_encoder() {
        let loaded = parse_config("run.name = a\nworld.patch_dim = 12\n", &[]).unwrap();
        assert_eq!(loaded.config.encoder.patch_dim, 12);
    }
}
