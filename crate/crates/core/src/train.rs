//! Prompt training: anchor distillation from description features, base-class
//! adaptation with ensemble-teacher distillation, and the alternating
//! single-stage schedule.

use autodiff::{AutodiffError, Graph, Sgd, Tensor, Var};
use rand::seq::index;
use rand::Rng as _;
use serde::Serialize;

use crate::encoder::{softmax, BoundEncoder, EncoderStack, PredictionDistribution};
use crate::error::{Error, Result};
use crate::prompt::{
    sample_position_matrix, Arrangement, PositionForward, PromptBuilder, PromptSequence,
};
use crate::rng::{self, gaussian, Rng};
use crate::world::{generate_descriptions, LabeledSample, Preposition, Split, SynthWorld};

/// Soft-token initialization scale.
pub const SOFT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    CoOp,
    AtPrompt,
    AnchorOpt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CoOp, Method::AtPrompt, Method::AnchorOpt];

    pub fn name(self) -> &'static str {
        match self {
            Method::CoOp => "coop",
            Method::AtPrompt => "atprompt",
            Method::AnchorOpt => "anchoropt",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::CoOp => "CoOp",
            Method::AtPrompt => "ATPrompt-style",
            Method::AnchorOpt => "CoOp+AnchorOPT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_anchors(self) -> bool {
        self == Method::AnchorOpt
    }
}

/// Argument order of the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KdDirection {
    /// `KL(q_ens ‖ q_norm)` with the ensemble as a detached teacher.
    TeacherFirst,
    /// `KL(q_norm ‖ q_ens)`.
    StudentFirst,
}

impl KdDirection {
    pub fn name(self) -> &'static str {
        match self {
            KdDirection::TeacherFirst => "teacher_first",
            KdDirection::StudentFirst => "student_first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher_first" => Some(KdDirection::TeacherFirst),
            "student_first" => Some(KdDirection::StudentFirst),
            _ => None,
        }
    }
}

/// How the distillation teacher combines the two prompt branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KdTeacher {
    /// `(q_norm + q_anc) / 2`.
    Probabilities,
    /// `softmax((l_norm + l_anc) / 2)`.
    Logits,
}

impl KdTeacher {
    pub fn name(self) -> &'static str {
        match self {
            KdTeacher::Probabilities => "probs",
            KdTeacher::Logits => "logits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "probs" => Some(KdTeacher::Probabilities),
            "logits" => Some(KdTeacher::Logits),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Paradigm {
    TwoStage,
    OneStage,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::TwoStage => "two_stage",
            Paradigm::OneStage => "one_stage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_stage" => Some(Paradigm::TwoStage),
            "one_stage" => Some(Paradigm::OneStage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptConfig {
    pub soft_len: usize,
    pub anchor_len: usize,
    pub preposition: Option<Preposition>,
    pub arrangement: Arrangement,
    pub position_forward: PositionForward,
    pub gumbel_tau: f64,
    /// Blocks that receive fresh soft tokens; 1 is the shallow prompt.
    pub deep_depth: usize,
    /// Attribute words (and attribute soft tokens) of the ATPrompt-style baseline.
    pub attribute_words: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            soft_len: 6,
            anchor_len: 1,
            preposition: Some(Preposition::Of),
            arrangement: Arrangement::Matrix,
            position_forward: PositionForward::HardStraightThrough,
            gumbel_tau: 1.0,
            deep_depth: 1,
            attribute_words: 2,
        }
    }
}

impl PromptConfig {
    /// Worst-case token count of any prompt the method builds, counting a
    /// two-token class name and the start and end markers.
    pub fn longest_prompt(&self, method: Method) -> usize {
        let (m, n) = (self.soft_len, self.anchor_len);
        let body = match method {
            Method::CoOp => m,
            Method::AtPrompt => m + 2 * self.attribute_words,
            Method::AnchorOpt => (m + n).max(n + usize::from(self.preposition.is_some())),
        };
        body + 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageBudget {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub prompt: PromptConfig,
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub kd_direction: KdDirection,
    pub kd_teacher: KdTeacher,
    pub momentum: f64,
    pub stage1: StageBudget,
    pub stage2: StageBudget,
    pub one_stage_steps: usize,
    /// Consecutive steps of each phase before switching.
    pub one_stage_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            lambda_ce: 1.0,
            lambda_kd: 10.0,
            kd_direction: KdDirection::TeacherFirst,
            kd_teacher: KdTeacher::Probabilities,
            momentum: 0.9,
            stage1: StageBudget {
                steps: 200,
                lr: 0.004,
                batch: 8,
            },
            stage2: StageBudget {
                steps: 200,
                lr: 0.001,
                batch: 32,
            },
            one_stage_steps: 400,
            one_stage_period: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Initialized,
    Stage1,
    Stage2,
    OneStage,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Initialized => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::OneStage => "one_stage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Initialized, Stage::Stage1, Stage::Stage2, Stage::OneStage]
            .into_iter()
            .find(|t| t.tag() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub lambda_ce: f64,
    pub lambda_kd: f64,
}

/// Learned prompt parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub prompt: PromptConfig,
    /// `[M, d_tok]`.
    pub soft: Tensor,
    /// `[N, d_tok]`.
    pub anchors: Tensor,
    /// `[M+N, M+N]`, rows are target positions.
    pub position_logits: Tensor,
    /// One `[M, d_tok]` set per deep block.
    pub deep_soft: Vec<Tensor>,
    /// `[m, d_tok]` for the ATPrompt-style baseline.
    pub attribute_soft: Option<Tensor>,
    pub stage: Stage,
    pub step: usize,
    pub seed: u64,
}

pub const SOFT: &str = "prompt.soft";
pub const ANCHORS: &str = "prompt.anchors";
pub const POSITION_LOGITS: &str = "prompt.position_logits";
pub const ATTRIBUTE_SOFT: &str = "prompt.attribute_soft";

pub fn deep_name(i: usize) -> String {
    format!("prompt.deep{i}")
}

impl TrainState {
    pub fn new(method: Method, prompt: &PromptConfig, stack: &EncoderStack, seed: u64) -> Result<Self> {
        let cfg = stack.config();
        let (m, n) = (prompt.soft_len, prompt.anchor_len);
        if m == 0 || n == 0 {
            return Err(Error::invalid("soft and anchor lengths must be at least 1"));
        }
        if prompt.deep_depth == 0 || prompt.deep_depth > cfg.text_blocks {
            return Err(Error::invalid(format!(
                "deep depth {} must lie in 1..={}",
                prompt.deep_depth, cfg.text_blocks
            )));
        }
        if method == Method::AtPrompt && prompt.deep_depth > 1 {
            return Err(Error::invalid("deep prompts are not supported for the attribute baseline"));
        }
        if !(prompt.gumbel_tau.is_finite() && prompt.gumbel_tau > 0.0) {
            return Err(Error::invalid("Gumbel temperature must be positive"));
        }
        let len = prompt.longest_prompt(method);
        if len > cfg.max_len {
            return Err(Error::PromptTooLong {
                len,
                max: cfg.max_len,
            });
        }
        let dt = cfg.token_dim;
        let mut rng = rng::substream(seed, "init");
        let soft = gaussian(&mut rng, &[m, dt], SOFT_INIT_STD);
        let anchors = gaussian(&mut rng, &[n, dt], SOFT_INIT_STD);
        let position_logits = gaussian(&mut rng, &[m + n, m + n], 1.0);
        let deep_soft = (1..prompt.deep_depth)
            .map(|_| gaussian(&mut rng, &[m, dt], SOFT_INIT_STD))
            .collect();
        let attribute_soft = (method == Method::AtPrompt && prompt.attribute_words > 0)
            .then(|| gaussian(&mut rng, &[prompt.attribute_words, dt], SOFT_INIT_STD));
        Ok(Self {
            method,
            prompt: prompt.clone(),
            soft,
            anchors,
            position_logits,
            deep_soft,
            attribute_soft,
            stage: Stage::Initialized,
            step: 0,
            seed,
        })
    }

    /// All learned tensors by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (SOFT.to_string(), &self.soft),
            (ANCHORS.to_string(), &self.anchors),
            (POSITION_LOGITS.to_string(), &self.position_logits),
        ];
        for (i, t) in self.deep_soft.iter().enumerate() {
            out.push((deep_name(i), t));
        }
        if let Some(a) = &self.attribute_soft {
            out.push((ATTRIBUTE_SOFT.to_string(), a));
        }
        out
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            SOFT => &mut self.soft,
            ANCHORS => &mut self.anchors,
            POSITION_LOGITS => &mut self.position_logits,
            ATTRIBUTE_SOFT => self.attribute_soft.as_mut().expect("attribute soft tokens"),
            other => {
                let i: usize = other
                    .strip_prefix("prompt.deep")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or_else(|| panic!("unknown prompt tensor {other}"));
                &mut self.deep_soft[i]
            }
        }
    }

    /// Hash of the anchor tokens.
    pub fn anchor_digest(&self) -> String {
        autodiff::digest_tensors([&self.anchors])
    }

    /// Hash of everything Stage II may update.
    pub fn adapt_digest(&self) -> String {
        let mut ts = vec![&self.soft, &self.position_logits];
        ts.extend(self.deep_soft.iter());
        ts.extend(self.attribute_soft.iter());
        autodiff::digest_tensors(ts)
    }

    pub fn digest(&self) -> String {
        autodiff::digest_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn anchors_trained(&self) -> bool {
        matches!(self.stage, Stage::Stage1 | Stage::Stage2 | Stage::OneStage)
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self.stage, Stage::Stage2 | Stage::OneStage)
    }

    /// Names updated when adapting to base classes.
    fn adapt_names(&self) -> Vec<String> {
        let mut names = vec![SOFT.to_string()];
        if self.method.uses_anchors() && self.prompt.arrangement == Arrangement::Matrix {
            names.push(POSITION_LOGITS.to_string());
        }
        names.extend((0..self.deep_soft.len()).map(deep_name));
        if self.attribute_soft.is_some() {
            names.push(ATTRIBUTE_SOFT.to_string());
        }
        names
    }

    fn apply_update(&mut self, opt: &mut Sgd, names: &[String], grads: &autodiff::GradMap) -> Result<()> {
        let mut owned: Vec<(String, Tensor)> = names
            .iter()
            .map(|n| (n.clone(), self.tensor_mut(n).clone()))
            .collect();
        {
            let mut slots: Vec<(&str, &mut Tensor)> =
                owned.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
            opt.step(&mut slots, grads)?;
        }
        for (n, t) in owned {
            *self.tensor_mut(&n) = t;
        }
        Ok(())
    }
}

/// Prompt parameters placed on a graph.
pub struct StateVars {
    pub soft: Var,
    pub anchors: Var,
    pub position_logits: Var,
    pub deep_soft: Vec<Var>,
    pub attribute_soft: Option<Var>,
}

impl StateVars {
    /// Binds anchors trainable iff `anchors`, and the adaptation tensors
    /// trainable iff `adapt`.
    pub fn bind(g: &mut Graph, state: &TrainState, anchors: bool, adapt: bool) -> Self {
        let mut put = |name: &str, t: &Tensor, trainable: bool| {
            if trainable {
                g.param(name, t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            soft: put(SOFT, &state.soft, adapt),
            anchors: put(ANCHORS, &state.anchors, anchors),
            position_logits: put(POSITION_LOGITS, &state.position_logits, adapt),
            deep_soft: state
                .deep_soft
                .iter()
                .enumerate()
                .map(|(i, t)| put(&deep_name(i), t, adapt))
                .collect(),
            attribute_soft: state
                .attribute_soft
                .as_ref()
                .map(|t| put(ATTRIBUTE_SOFT, t, adapt)),
        }
    }
}

/// Encodes prompts, replacing the hidden states at soft positions with
/// fresh tokens after each of the first `deep_soft.len()` blocks. Other
/// positions keep their processed states.
pub fn forward_deep(
    g: &mut Graph,
    enc: &BoundEncoder<'_>,
    prompts: &[PromptSequence],
    deep_soft: &[Var],
) -> Result<Var> {
    let blocks = enc.config().text_blocks;
    if deep_soft.len() + 1 > blocks {
        return Err(Error::invalid(format!(
            "deep depth {} exceeds the {blocks} text blocks",
            deep_soft.len() + 1
        )));
    }
    let seqs: Vec<Var> = prompts.iter().map(|p| p.embeddings).collect();
    if deep_soft.is_empty() {
        return enc.encode_text(g, &seqs);
    }
    let assigns = prompts
        .iter()
        .map(|p| {
            p.soft_assign
                .ok_or_else(|| Error::invalid("deep prompting needs soft-slot assignments"))
        })
        .collect::<Result<Vec<_>>>()?;
    let assign = g.concat(&assigns, 0)?;
    let m = g.shape(assign)[1];
    let ones = g.constant(Tensor::ones(&[m, 1]));
    let covered = g.matmul(assign, ones)?;
    let neg = g.scale(covered, -1.0)?;
    let one = g.constant(Tensor::ones(&[1]));
    let keep = g.add(neg, one)?;
    let mut hook = |g: &mut Graph, block: usize, x: Var| -> Result<Var> {
        match deep_soft.get(block) {
            Some(&fresh) => {
                let injected = g.matmul(assign, fresh)?;
                let kept = g.mul(x, keep)?;
                Ok(g.add(kept, injected)?)
            }
            None => Ok(x),
        }
    };
    enc.encode_text_with(g, &seqs, &mut hook)
}

/// Per-class prompts of the method's normal (non-anchor) branch.
pub fn normal_prompts(
    g: &mut Graph,
    enc: &BoundEncoder<'_>,
    world: &SynthWorld,
    state: &TrainState,
    vars: &StateVars,
    classes: &[usize],
    realized: Option<Var>,
) -> Result<Vec<PromptSequence>> {
    let builder = PromptBuilder::new(enc);
    let attr_tokens: Vec<usize> = (0..state.prompt.attribute_words.min(world.num_attributes()))
        .map(|a| world.config.attribute_token(a))
        .collect();
    classes
        .iter()
        .map(|&c| {
            let name = world.class_name(c);
            match state.method {
                Method::CoOp => builder.coop(g, vars.soft, name),
                Method::AtPrompt => {
                    builder.atprompt(g, vars.attribute_soft, &attr_tokens, vars.soft, name)
                }
                Method::AnchorOpt => match state.prompt.arrangement {
                    Arrangement::Matrix => {
                        let r = realized
                            .ok_or_else(|| Error::invalid("matrix arrangement needs a realization"))?;
                        builder.normal(g, vars.soft, vars.anchors, r, name)
                    }
                    fixed => builder.fixed_arrangement(g, vars.soft, vars.anchors, fixed, name),
                },
            }
        })
        .collect()
}

pub fn anchor_prompts(
    g: &mut Graph,
    enc: &BoundEncoder<'_>,
    world: &SynthWorld,
    state: &TrainState,
    anchors: Var,
    classes: &[usize],
) -> Result<Vec<PromptSequence>> {
    let builder = PromptBuilder::new(enc);
    classes
        .iter()
        .map(|&c| builder.anchor(g, anchors, state.prompt.preposition, world.class_name(c)))
        .collect()
}

/// Realized position matrix for this forward pass, if the method uses one.
fn realize(
    g: &mut Graph,
    state: &TrainState,
    vars: &StateVars,
    rng: &mut Rng,
    training: bool,
) -> Result<Option<Var>> {
    if !state.method.uses_anchors() || state.prompt.arrangement != Arrangement::Matrix {
        return Ok(None);
    }
    sample_position_matrix(
        g,
        vars.position_logits,
        state.prompt.gumbel_tau,
        rng,
        training,
        state.prompt.position_forward,
    )
    .map(Some)
}

/// Normal-branch class features at inference (noise-free hard matrix),
/// `[C, d]`.
pub fn inference_class_features(
    stack: &EncoderStack,
    world: &SynthWorld,
    state: &TrainState,
    classes: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = stack.bind(&mut g, false)?;
    let vars = StateVars::bind(&mut g, state, false, false);
    let mut unused = rng::substream(0, "unused");
    let realized = realize(&mut g, state, &vars, &mut unused, false)?;
    let prompts = normal_prompts(&mut g, &enc, world, state, &vars, classes, realized)?;
    let f = forward_deep(&mut g, &enc, &prompts, &vars.deep_soft)?;
    Ok(g.value(f).clone())
}

/// Anchor-prompt class features, `[C, d]`.
pub fn anchor_class_features(
    stack: &EncoderStack,
    world: &SynthWorld,
    state: &TrainState,
    classes: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = stack.bind(&mut g, false)?;
    let anchors = g.constant(state.anchors.clone());
    let prompts = anchor_prompts(&mut g, &enc, world, state, anchors, classes)?;
    let seqs: Vec<Var> = prompts.iter().map(|p| p.embeddings).collect();
    let f = enc.encode_text(&mut g, &seqs)?;
    Ok(g.value(f).clone())
}

/// Equal-weight average of two distributions over the same classes.
pub fn ensemble_predict(
    q_norm: &PredictionDistribution,
    q_anc: &PredictionDistribution,
) -> Result<PredictionDistribution> {
    if q_norm.classes != q_anc.classes {
        return Err(Error::invalid("ensemble members cover different class sets"));
    }
    Ok(PredictionDistribution {
        classes: q_norm.classes.clone(),
        probs: q_norm
            .probs
            .iter()
            .zip(&q_anc.probs)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    })
}

/// Cached description features per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionTargets {
    pub classes: Vec<usize>,
    /// `[n_c, d]` per class.
    pub features: Vec<Tensor>,
}

impl DescriptionTargets {
    pub fn encode(
        world: &SynthWorld,
        stack: &EncoderStack,
        classes: &[usize],
        per_class: usize,
        perturbation: f64,
        seed: u64,
    ) -> Result<Self> {
        if classes.is_empty() || per_class == 0 {
            return Err(Error::invalid("no descriptions to distill from"));
        }
        let features = classes
            .iter()
            .map(|&c| {
                let d = generate_descriptions(world, c, per_class, perturbation, seed)?;
                stack.encode_token_sequences(&d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: classes.to_vec(),
            features,
        })
    }

    pub fn from_features(classes: Vec<usize>, features: Vec<Tensor>) -> Result<Self> {
        if classes.is_empty() || classes.len() != features.len() {
            return Err(Error::invalid("no descriptions to distill from"));
        }
        if features.iter().any(|f| f.is_empty() || f.ndim() != 2) {
            return Err(Error::invalid("every class needs at least one description"));
        }
        Ok(Self { classes, features })
    }

    fn total(&self) -> usize {
        self.features.iter().map(Tensor::rows).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (ci, f) in self.features.iter().enumerate() {
            if i < f.rows() {
                return (ci, i);
            }
            i -= f.rows();
        }
        unreachable!("description index in range")
    }
}

/// Everything a run trains against.
pub struct TrainContext<'a> {
    pub world: &'a SynthWorld,
    pub stack: &'a EncoderStack,
    pub split: &'a Split,
}

impl TrainContext<'_> {
    fn check(&self) -> Result<()> {
        if !self.stack.is_frozen() {
            return Err(Error::invalid("prompt training requires a frozen encoder"));
        }
        Ok(())
    }
}

fn anchor_step(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    targets: &DescriptionTargets,
    batch: usize,
    opt: &mut Sgd,
    rng: &mut Rng,
) -> Result<f64> {
    let picks: Vec<(usize, usize)> = (0..batch.max(1))
        .map(|_| targets.locate(rng.random_range(0..targets.total())))
        .collect();
    let mut used: Vec<usize> = picks.iter().map(|&(c, _)| c).collect();
    used.sort_unstable();
    used.dedup();

    let mut g = Graph::new();
    let enc = ctx.stack.bind(&mut g, false)?;
    let vars = StateVars::bind(&mut g, state, true, false);
    let classes: Vec<usize> = used.iter().map(|&i| targets.classes[i]).collect();
    let prompts = anchor_prompts(&mut g, &enc, ctx.world, state, vars.anchors, &classes)?;
    let seqs: Vec<Var> = prompts.iter().map(|p| p.embeddings).collect();
    let feats = enc.encode_text(&mut g, &seqs)?;
    let rows: Vec<usize> = picks
        .iter()
        .map(|(c, _)| used.binary_search(c).expect("used class"))
        .collect();
    let pred = g.gather_rows(feats, &rows)?;
    let d = ctx.stack.config().embed_dim;
    let mut target = Vec::with_capacity(picks.len() * d);
    for &(c, i) in &picks {
        target.extend_from_slice(targets.features[c].row(i));
    }
    let target = g.constant(Tensor::new(vec![picks.len(), d], target)?);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.named();
    state.apply_update(opt, &[ANCHORS.to_string()], &grads)?;
    Ok(value)
}

/// Distills the anchors toward description features. Only the anchors move.
pub fn train_stage1_anchor(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    targets: &DescriptionTargets,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    ctx.check()?;
    if !state.method.uses_anchors() {
        return Err(Error::invalid(format!("{} has no anchor tokens", state.method.name())));
    }
    if state.stage != Stage::Initialized {
        return Err(Error::invalid("anchor optimization needs a fresh state"));
    }
    let mut rng = rng::substream(state.seed, rng::STAGE1);
    let mut opt = Sgd::new(config.stage1.lr, config.momentum)?;
    let mut trace = Vec::with_capacity(config.stage1.steps);
    for _ in 0..config.stage1.steps {
        trace.push(anchor_step(state, ctx, targets, config.stage1.batch, &mut opt, &mut rng)?);
        state.step += 1;
    }
    state.stage = Stage::Stage1;
    Ok(trace)
}

/// Precomputed inputs to the adaptation loss.
pub struct AdaptData {
    /// Image features of the training samples, `[n, d]`.
    pub features: Tensor,
    /// Index into the base class list per sample.
    pub targets: Vec<usize>,
    /// Anchor-prompt logits per sample, `[n, C_base]`.
    pub anchor_logits: Option<Tensor>,
}

impl AdaptData {
    pub fn prepare(
        state: &TrainState,
        ctx: &TrainContext<'_>,
        samples: &[LabeledSample],
        with_anchor_teacher: bool,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let base = &ctx.split.base;
        let targets = samples
            .iter()
            .map(|s| {
                base.binary_search(&s.label)
                    .map_err(|_| Error::invalid(format!("class {} is not a base class", s.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let features = ctx.stack.encode_images(&imgs)?;
        let anchor_logits = if with_anchor_teacher {
            let anchor = anchor_class_features(ctx.stack, ctx.world, state, base)?;
            Some(class_logits(&features, &anchor, ctx.stack.logit_scale())?)
        } else {
            None
        };
        Ok(Self {
            features,
            targets,
            anchor_logits,
        })
    }
}

/// `scale · images · classesᵀ`.
pub fn class_logits(images: &Tensor, classes: &Tensor, scale: f64) -> Result<Tensor> {
    let (n, c) = (images.rows(), classes.rows());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        out.extend((0..c).map(|j| scale * crate::pretrain::dot(images.row(i), classes.row(j))));
    }
    Ok(Tensor::new(vec![n, c], out)?)
}

/// Row-wise `softmax(scale · images · classesᵀ)`.
pub fn class_probabilities(images: &Tensor, classes: &Tensor, scale: f64) -> Result<Tensor> {
    let mut logits = class_logits(images, classes, scale)?;
    let c = logits.cols();
    for row in logits.data_mut().chunks_mut(c) {
        let p = softmax(row);
        row.copy_from_slice(&p);
    }
    Ok(logits)
}

fn non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(source @ AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss {
            step,
            ce: f64::NAN,
            kd: f64::NAN,
            source,
        },
        other => other,
    }
}

/// Nodes of the adaptation objective.
pub struct AdaptLoss {
    /// `λ1·CE + λ2·KL`, or `λ1·CE` without a teacher.
    pub loss: Var,
    pub ce: Var,
    pub kd: Option<Var>,
}

/// Adaptation objective on one batch of image features. `anchor_logits`
/// (`[batch, C]`, anchor-prompt logits of the same images) enables the
/// distillation term against the detached ensemble teacher.
#[allow(clippy::too_many_arguments)]
pub fn adapt_loss(
    g: &mut Graph,
    enc: &BoundEncoder<'_>,
    world: &SynthWorld,
    state: &TrainState,
    vars: &StateVars,
    realized: Option<Var>,
    classes: &[usize],
    images: Var,
    targets: &[usize],
    anchor_logits: Option<Tensor>,
    config: &TrainConfig,
) -> Result<AdaptLoss> {
    let prompts = normal_prompts(g, enc, world, state, vars, classes, realized)?;
    let text = forward_deep(g, enc, &prompts, &vars.deep_soft)?;
    let logits = enc.logits(g, images, text)?;
    let ce = g.cross_entropy(logits, targets)?;
    let weighted_ce = g.scale(ce, config.lambda_ce)?;
    let Some(l_anc) = anchor_logits else {
        return Ok(AdaptLoss {
            loss: weighted_ce,
            ce,
            kd: None,
        });
    };
    let l_anc = g.constant(l_anc);
    let q_norm = g.softmax(logits, 1.0)?;
    let mixed = match config.kd_teacher {
        KdTeacher::Probabilities => {
            let q_anc = g.softmax(l_anc, 1.0)?;
            let sum = g.add(q_norm, q_anc)?;
            g.scale(sum, 0.5)?
        }
        KdTeacher::Logits => {
            let sum = g.add(logits, l_anc)?;
            g.softmax(sum, 2.0)?
        }
    };
    let teacher = g.stop_gradient(mixed)?;
    let kd = match config.kd_direction {
        KdDirection::TeacherFirst => g.kl_divergence(teacher, q_norm)?,
        KdDirection::StudentFirst => g.kl_divergence(q_norm, teacher)?,
    };
    let weighted = g.scale(kd, config.lambda_kd)?;
    Ok(AdaptLoss {
        loss: g.add(weighted_ce, weighted)?,
        ce,
        kd: Some(kd),
    })
}

fn adapt_step(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    data: &AdaptData,
    config: &TrainConfig,
    use_kd: bool,
    opt: &mut Sgd,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let n = data.targets.len();
    let batch = config.stage2.batch.clamp(1, n);
    let mut picks = index::sample(rng, n, batch).into_vec();
    picks.sort_unstable();

    let mut g = Graph::new();
    let enc = ctx.stack.bind(&mut g, false)?;
    let vars = StateVars::bind(&mut g, state, false, true);
    let realized = realize(&mut g, state, &vars, rng, true)?;
    let d = ctx.stack.config().embed_dim;
    let mut img = Vec::with_capacity(batch * d);
    for &i in &picks {
        img.extend_from_slice(data.features.row(i));
    }
    let img = g.constant(Tensor::new(vec![batch, d], img)?);
    let targets: Vec<usize> = picks.iter().map(|&i| data.targets[i]).collect();
    let teacher = match (&data.anchor_logits, use_kd) {
        (Some(l_anc), true) => {
            let c = l_anc.cols();
            let mut rows = Vec::with_capacity(batch * c);
            for &i in &picks {
                rows.extend_from_slice(l_anc.row(i));
            }
            Some(Tensor::new(vec![batch, c], rows)?)
        }
        _ => None,
    };
    let AdaptLoss { loss, ce, kd } = adapt_loss(
        &mut g,
        &enc,
        ctx.world,
        state,
        &vars,
        realized,
        &ctx.split.base,
        img,
        &targets,
        teacher,
        config,
    )?;
    let kd = kd.map_or(0.0, |k| g.value(k).item());
    let ce_value = g.value(ce).item();
    let grads = g.backward(loss)?.named();
    let names = state.adapt_names();
    state.apply_update(opt, &names, &grads)?;
    let lambda_kd = if use_kd && data.anchor_logits.is_some() {
        config.lambda_kd
    } else {
        0.0
    };
    Ok(LossBreakdown {
        step: state.step,
        ce: ce_value,
        kd,
        total: config.lambda_ce * ce_value + lambda_kd * kd,
        lambda_ce: config.lambda_ce,
        lambda_kd,
    })
}

/// Adapts soft tokens (and the position matrix) to the base classes with
/// frozen anchors. AnchorOPT adds the ensemble-teacher distillation term.
pub fn train_stage2_adapt(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    ctx.check()?;
    let expected = if state.method.uses_anchors() {
        Stage::Stage1
    } else {
        Stage::Initialized
    };
    if state.stage != expected {
        return Err(Error::invalid(format!(
            "adaptation expects a state at stage {}, found {}",
            expected.tag(),
            state.stage.tag()
        )));
    }
    let use_kd = state.method.uses_anchors();
    let data = AdaptData::prepare(state, ctx, samples, use_kd)?;
    let mut rng = rng::substream(state.seed, rng::STAGE2);
    let mut opt = Sgd::new(config.stage2.lr, config.momentum)?;
    let mut trace = Vec::with_capacity(config.stage2.steps);
    for _ in 0..config.stage2.steps {
        let step = state.step;
        let lb = adapt_step(state, ctx, &data, config, use_kd, &mut opt, &mut rng)
            .map_err(|e| non_finite(step, e))?;
        trace.push(lb);
        state.step += 1;
    }
    state.stage = Stage::Stage2;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OneStageTrace {
    /// `(step, mse)` for anchor steps.
    pub anchor: Vec<(usize, f64)>,
    pub adapt: Vec<LossBreakdown>,
}

/// Alternates anchor steps and CE-only adaptation steps, `period` of each.
pub fn train_one_stage(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    targets: &DescriptionTargets,
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<OneStageTrace> {
    ctx.check()?;
    if !state.method.uses_anchors() {
        return Err(Error::invalid(format!("{} has no anchor tokens", state.method.name())));
    }
    if state.stage != Stage::Initialized {
        return Err(Error::invalid("one-stage training needs a fresh state"));
    }
    if config.one_stage_period == 0 {
        return Err(Error::invalid("alternation period must be positive"));
    }
    let data = AdaptData::prepare(state, ctx, samples, false)?;
    let mut rng_a = rng::substream(state.seed, rng::STAGE1);
    let mut rng_b = rng::substream(state.seed, rng::STAGE2);
    let mut opt_a = Sgd::new(config.stage1.lr, config.momentum)?;
    let mut opt_b = Sgd::new(config.stage2.lr, config.momentum)?;
    let mut trace = OneStageTrace::default();
    for t in 0..config.one_stage_steps {
        let step = state.step;
        if (t / config.one_stage_period).is_multiple_of(2) {
            let l = anchor_step(state, ctx, targets, config.stage1.batch, &mut opt_a, &mut rng_a)?;
            trace.anchor.push((step, l));
        } else {
            let lb = adapt_step(state, ctx, &data, config, false, &mut opt_b, &mut rng_b)
                .map_err(|e| non_finite(step, e))?;
            debug_assert_eq!(lb.kd, 0.0);
            trace.adapt.push(lb);
        }
        state.step += 1;
    }
    state.stage = Stage::OneStage;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_is_mean() {
        let a = PredictionDistribution {
            classes: vec![3, 5],
            probs: vec![1.0, 0.0],
        };
        let b = PredictionDistribution {
            classes: vec![3, 5],
            probs: vec![0.0, 1.0],
        };
        assert_eq!(ensemble_predict(&a, &b).unwrap().probs, vec![0.5, 0.5]);
        assert_eq!(ensemble_predict(&a, &a).unwrap(), a);
        let c = PredictionDistribution {
            classes: vec![3, 6],
            probs: vec![0.5, 0.5],
        };
        assert!(ensemble_predict(&a, &c).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        for s in [Stage::Initialized, Stage::Stage1, Stage::Stage2, Stage::OneStage] {
            assert_eq!(Stage::parse(s.tag()), Some(s));
        }
        assert_eq!(KdDirection::parse("student_first"), Some(KdDirection::StudentFirst));
        assert_eq!(Paradigm::parse("one_stage"), Some(Paradigm::OneStage));
    }
}
