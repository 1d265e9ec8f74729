//! Prompt token sequences and the learned position matrix that places soft
//! and anchor tokens.

use std::ops::Range;

use autodiff::{Graph, Tensor, Var};
use serde::Serialize;

use rand::Rng as _;

use crate::encoder::BoundEncoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::world::{Preposition, EOT, SOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TokenRole {
    Prefix,
    Soft,
    Anchor,
    Preposition,
    Attribute,
    Class,
    Suffix,
}

/// One position of a realized prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptToken {
    pub embedding: Vec<f64>,
    pub role: TokenRole,
    pub trainable: bool,
}

/// A prompt placed on a graph: `[L, d_tok]` embeddings plus per-position
/// metadata. `soft_assign` is `[L, M]` and maps positions to soft slots for
/// deep prompting.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    pub embeddings: Var,
    pub roles: Vec<TokenRole>,
    pub trainable: Vec<bool>,
    pub class_span: Range<usize>,
    pub soft_assign: Option<Var>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Position whose hidden state is pooled.
    pub fn suffix_index(&self) -> usize {
        self.len() - 1
    }

    pub fn tokens(&self, g: &Graph) -> Vec<PromptToken> {
        let e = g.value(self.embeddings);
        self.roles
            .iter()
            .zip(&self.trainable)
            .enumerate()
            .map(|(i, (&role, &trainable))| PromptToken {
                embedding: e.row(i).to_vec(),
                role,
                trainable,
            })
            .collect()
    }
}

/// Where anchors go when the position matrix is bypassed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arrangement {
    /// Learned position matrix.
    Matrix,
    BeforeSoft,
    /// Between the two halves of the soft tokens (first half rounds up).
    Middle,
    AfterClass,
}

impl Arrangement {
    pub const ALL: [Arrangement; 4] = [
        Arrangement::Matrix,
        Arrangement::BeforeSoft,
        Arrangement::Middle,
        Arrangement::AfterClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arrangement::Matrix => "matrix",
            Arrangement::BeforeSoft => "before_soft",
            Arrangement::Middle => "middle",
            Arrangement::AfterClass => "after_class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Forward behavior of the position matrix during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PositionForward {
    /// One-hot forward, soft backward.
    HardStraightThrough,
    Soft,
}

impl PositionForward {
    pub fn name(self) -> &'static str {
        match self {
            PositionForward::HardStraightThrough => "hard_st",
            PositionForward::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hard_st" => Some(PositionForward::HardStraightThrough),
            "soft" => Some(PositionForward::Soft),
            _ => None,
        }
    }
}

/// Gumbel(0, 1) noise.
pub fn sample_gumbel_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// One-hot of each row's argmax (lowest index on ties).
pub fn hard_assignment(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    for (r, c) in logits.argmax_rows().into_iter().enumerate() {
        out.row_mut(r)[c] = 1.0;
    }
    out
}

/// Realized position matrix. Training draws fresh Gumbel noise; evaluation
/// is the noise-free argmax and consumes no randomness.
pub fn sample_position_matrix(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    rng: &mut Rng,
    training: bool,
    forward: PositionForward,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::invalid(format!(
            "position logits must be square, got {shape:?}"
        )));
    }
    if !training {
        let hard = hard_assignment(g.value(logits));
        return Ok(g.constant(hard));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("Gumbel temperature must be positive"));
    }
    let noise = sample_gumbel_noise(&shape, rng);
    let hard = forward == PositionForward::HardStraightThrough;
    Ok(g.gumbel_softmax(logits, noise, temperature, hard)?)
}

/// Token-level prompt assembly on top of a bound encoder.
pub struct PromptBuilder<'e, 'a> {
    enc: &'e BoundEncoder<'a>,
    max_len: usize,
}

struct Part {
    embeddings: Var,
    role: TokenRole,
    len: usize,
    trainable: bool,
}

impl<'e, 'a> PromptBuilder<'e, 'a> {
    pub fn new(enc: &'e BoundEncoder<'a>) -> Self {
        Self {
            enc,
            max_len: enc.config().max_len,
        }
    }

    fn fixed(&self, g: &mut Graph, ids: &[usize], role: TokenRole) -> Result<Part> {
        Ok(Part {
            embeddings: self.enc.token_embeddings(g, ids)?,
            role,
            len: ids.len(),
            trainable: false,
        })
    }

    fn learned(&self, g: &Graph, v: Var, role: TokenRole) -> Result<Part> {
        let shape = g.shape(v);
        if shape.len() != 2 || shape[1] != self.enc.config().token_dim {
            return Err(Error::invalid(format!(
                "learned tokens must be [n, {}], got {shape:?}",
                self.enc.config().token_dim
            )));
        }
        Ok(Part {
            embeddings: v,
            role,
            len: shape[0],
            trainable: g.requires_grad(v),
        })
    }

    fn assemble(
        &self,
        g: &mut Graph,
        parts: Vec<Part>,
        roles_override: Option<Vec<TokenRole>>,
    ) -> Result<PromptSequence> {
        let len: usize = parts.iter().map(|p| p.len).sum();
        if len > self.max_len {
            return Err(Error::PromptTooLong {
                len,
                max: self.max_len,
            });
        }
        let mut roles = Vec::with_capacity(len);
        let mut trainable = Vec::with_capacity(len);
        let mut class_span = 0..0;
        for p in &parts {
            if p.role == TokenRole::Class {
                class_span = roles.len()..roles.len() + p.len;
            }
            roles.extend(std::iter::repeat_n(p.role, p.len));
            trainable.extend(std::iter::repeat_n(p.trainable, p.len));
        }
        if let Some(r) = roles_override {
            roles = r;
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.embeddings).collect();
        Ok(PromptSequence {
            embeddings: g.concat(&vars, 0)?,
            roles,
            trainable,
            class_span,
            soft_assign: None,
        })
    }

    fn class_part(&self, g: &mut Graph, class_tokens: &[usize]) -> Result<Part> {
        if class_tokens.is_empty() {
            return Err(Error::invalid("class name has no tokens"));
        }
        self.fixed(g, class_tokens, TokenRole::Class)
    }

    /// `[SOT][soft…][class][EOT]`.
    pub fn coop(&self, g: &mut Graph, soft: Var, class_tokens: &[usize]) -> Result<PromptSequence> {
        let parts = vec![
            self.fixed(g, &[SOT], TokenRole::Prefix)?,
            self.learned(g, soft, TokenRole::Soft)?,
            self.class_part(g, class_tokens)?,
            self.fixed(g, &[EOT], TokenRole::Suffix)?,
        ];
        let mut seq = self.assemble(g, parts, None)?;
        let m = g.shape(soft)[0];
        let mut assign = Tensor::zeros(&[seq.len(), m]);
        for i in 0..m {
            assign.row_mut(1 + i)[i] = 1.0;
        }
        seq.soft_assign = Some(g.constant(assign));
        Ok(seq)
    }

    /// `[SOT][attribute soft…][attribute words…][soft…][class][EOT]`.
    pub fn atprompt(
        &self,
        g: &mut Graph,
        attribute_soft: Option<Var>,
        attribute_tokens: &[usize],
        soft: Var,
        class_tokens: &[usize],
    ) -> Result<PromptSequence> {
        let mut parts = vec![self.fixed(g, &[SOT], TokenRole::Prefix)?];
        if let Some(a) = attribute_soft {
            parts.push(self.learned(g, a, TokenRole::Soft)?);
        }
        if !attribute_tokens.is_empty() {
            parts.push(self.fixed(g, attribute_tokens, TokenRole::Attribute)?);
        }
        parts.push(self.learned(g, soft, TokenRole::Soft)?);
        parts.push(self.class_part(g, class_tokens)?);
        parts.push(self.fixed(g, &[EOT], TokenRole::Suffix)?);
        self.assemble(g, parts, None)
    }

    /// `[SOT][anchors…][preposition][class][EOT]`.
    pub fn anchor(
        &self,
        g: &mut Graph,
        anchors: Var,
        preposition: Option<Preposition>,
        class_tokens: &[usize],
    ) -> Result<PromptSequence> {
        let mut parts = vec![
            self.fixed(g, &[SOT], TokenRole::Prefix)?,
            self.learned(g, anchors, TokenRole::Anchor)?,
        ];
        if let Some(p) = preposition {
            parts.push(self.fixed(g, &[p.token()], TokenRole::Preposition)?);
        }
        parts.push(self.class_part(g, class_tokens)?);
        parts.push(self.fixed(g, &[EOT], TokenRole::Suffix)?);
        self.assemble(g, parts, None)
    }

    /// `[SOT][realized · (soft ‖ anchors)][class][EOT]`. The realized matrix
    /// is `[M+N, M+N]`: row `i` selects what sits at middle position `i`.
    pub fn normal(
        &self,
        g: &mut Graph,
        soft: Var,
        anchors: Var,
        realized: Var,
        class_tokens: &[usize],
    ) -> Result<PromptSequence> {
        let m = g.shape(soft)[0];
        let pool = g.concat(&[soft, anchors], 0)?;
        let k = g.shape(pool)[0];
        if g.shape(realized) != [k, k] {
            return Err(Error::invalid(format!(
                "realized matrix has shape {:?}, expected [{k}, {k}]",
                g.shape(realized)
            )));
        }
        let middle = g.matmul(realized, pool)?;
        let chosen = g.value(realized).argmax_rows();
        let mid_roles: Vec<TokenRole> = chosen
            .iter()
            .map(|&c| if c < m { TokenRole::Soft } else { TokenRole::Anchor })
            .collect();
        let trainable = g.requires_grad(middle);
        let class = self.class_part(g, class_tokens)?;
        let cls_len = class.len;
        let parts = vec![
            self.fixed(g, &[SOT], TokenRole::Prefix)?,
            Part {
                embeddings: middle,
                role: TokenRole::Soft,
                len: k,
                trainable,
            },
            class,
            self.fixed(g, &[EOT], TokenRole::Suffix)?,
        ];
        let mut roles = vec![TokenRole::Prefix];
        roles.extend(mid_roles);
        roles.extend(std::iter::repeat_n(TokenRole::Class, cls_len));
        roles.push(TokenRole::Suffix);
        let mut seq = self.assemble(g, parts, Some(roles))?;
        let to_soft = g.slice(realized, 1, 0, m)?;
        seq.soft_assign = Some(pad_rows(g, to_soft, 1, cls_len + 1)?);
        Ok(seq)
    }

    /// Anchors spliced at a fixed place among the soft tokens.
    pub fn fixed_arrangement(
        &self,
        g: &mut Graph,
        soft: Var,
        anchors: Var,
        arrangement: Arrangement,
        class_tokens: &[usize],
    ) -> Result<PromptSequence> {
        let m = g.shape(soft)[0];
        let n = g.shape(anchors)[0];
        let soft_part = |g: &Graph, v| self.learned(g, v, TokenRole::Soft);
        let mut parts = vec![self.fixed(g, &[SOT], TokenRole::Prefix)?];
        // Soft slot index for each learned position, None for anchors.
        let mut slots: Vec<Option<usize>> = Vec::new();
        match arrangement {
            Arrangement::Matrix => {
                return Err(Error::invalid("matrix arrangement needs a realized matrix"))
            }
            Arrangement::BeforeSoft => {
                parts.push(self.learned(g, anchors, TokenRole::Anchor)?);
                parts.push(soft_part(g, soft)?);
                slots.extend(std::iter::repeat_n(None, n));
                slots.extend((0..m).map(Some));
            }
            Arrangement::Middle => {
                let half = m.div_ceil(2);
                if half > 0 {
                    let a = g.slice(soft, 0, 0, half)?;
                    parts.push(soft_part(g, a)?);
                }
                parts.push(self.learned(g, anchors, TokenRole::Anchor)?);
                if half < m {
                    let b = g.slice(soft, 0, half, m)?;
                    parts.push(soft_part(g, b)?);
                }
                slots.extend((0..half).map(Some));
                slots.extend(std::iter::repeat_n(None, n));
                slots.extend((half..m).map(Some));
            }
            Arrangement::AfterClass => {
                parts.push(soft_part(g, soft)?);
                slots.extend((0..m).map(Some));
            }
        }
        let class = self.class_part(g, class_tokens)?;
        let cls_len = class.len;
        parts.push(class);
        if arrangement == Arrangement::AfterClass {
            parts.push(self.learned(g, anchors, TokenRole::Anchor)?);
        }
        parts.push(self.fixed(g, &[EOT], TokenRole::Suffix)?);
        let mut seq = self.assemble(g, parts, None)?;

        let len = seq.len();
        let mut assign = Tensor::zeros(&[len, m.max(1)]);
        for (i, slot) in slots.iter().enumerate() {
            if let Some(s) = slot {
                assign.row_mut(1 + i)[*s] = 1.0;
            }
        }
        debug_assert!(seq.class_span.len() == cls_len);
        if m > 0 {
            seq.soft_assign = Some(g.constant(assign));
        }
        Ok(seq)
    }
}

/// Adds `top` and `bottom` zero rows around `x`.
fn pad_rows(g: &mut Graph, x: Var, top: usize, bottom: usize) -> Result<Var> {
    let cols = g.shape(x)[1];
    let mut parts = Vec::with_capacity(3);
    if top > 0 {
        parts.push(g.constant(Tensor::zeros(&[top, cols])));
    }
    parts.push(x);
    if bottom > 0 {
        parts.push(g.constant(Tensor::zeros(&[bottom, cols])));
    }
    Ok(g.concat(&parts, 0)?)
}
