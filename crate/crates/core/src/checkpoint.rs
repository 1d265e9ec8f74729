//! Binary checkpoints for encoder stacks and prompt training states.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ANOP" | version u32 | kind u8 | digest str | world seed u64 | stage str
//! | meta str | tensor count u32 | tensors… | crc32 u32
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. A tensor is a name
//! string, a `u32` rank, `u64` dimensions and raw `f64` values. The CRC covers
//! every byte before it and is checked before any field is parsed. `meta` is a
//! `key=value` listing of the non-tensor settings needed to rebuild the object.

use std::collections::BTreeMap;
use std::path::Path;

use autodiff::{ParamStore, Tensor};

use crate::encoder::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::prompt::{Arrangement, PositionForward};
use crate::train::{
    deep_name, Method, PromptConfig, Stage, TrainState, ANCHORS, ATTRIBUTE_SOFT, POSITION_LOGITS,
    SOFT,
};
use crate::world::Preposition;

pub const MAGIC: &[u8; 4] = b"ANOP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Encoder = 1,
    PromptState = 2,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_digest: String,
    pub world_seed: u64,
    pub stage: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind as u8);
        put_str(&mut buf, &self.config_digest);
        buf.extend_from_slice(&self.world_seed.to_le_bytes());
        put_str(&mut buf, &self.stage);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut buf, &meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let kind = match r.u8()? {
            1 => CheckpointKind::Encoder,
            2 => CheckpointKind::PromptState,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let config_digest = r.string()?;
        let world_seed = r.u64()?;
        let stage = r.string()?;
        let meta = r
            .string()?
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("malformed meta line `{l}`")))
            })
            .collect::<Result<_>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|&n| n.saturating_mul(8) <= r.remaining())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` overruns the file")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            kind,
            config_digest,
            world_seed,
            stage,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for meta key `{key}`")))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn encoder_meta(c: &EncoderConfig, frozen: bool) -> BTreeMap<String, String> {
    [
        ("vocab_size", c.vocab_size),
        ("token_dim", c.token_dim),
        ("embed_dim", c.embed_dim),
        ("text_blocks", c.text_blocks),
        ("text_heads", c.text_heads),
        ("max_len", c.max_len),
        ("patches", c.patches),
        ("patch_dim", c.patch_dim),
        ("image_width", c.image_width),
        ("image_blocks", c.image_blocks),
        ("image_heads", c.image_heads),
        ("mlp_ratio", c.mlp_ratio),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .chain([("frozen".to_string(), frozen.to_string())])
    .collect()
}

pub fn stack_checkpoint(stack: &EncoderStack, config_digest: &str, world_seed: u64) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Encoder,
        config_digest: config_digest.to_string(),
        world_seed,
        stage: "pretrained".into(),
        meta: encoder_meta(stack.config(), stack.is_frozen()),
        tensors: stack
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    }
}

pub fn stack_from_checkpoint(ck: &Checkpoint) -> Result<EncoderStack> {
    ck.expect_kind(CheckpointKind::Encoder)?;
    let config = EncoderConfig {
        vocab_size: ck.meta("vocab_size")?,
        token_dim: ck.meta("token_dim")?,
        embed_dim: ck.meta("embed_dim")?,
        text_blocks: ck.meta("text_blocks")?,
        text_heads: ck.meta("text_heads")?,
        max_len: ck.meta("max_len")?,
        patches: ck.meta("patches")?,
        patch_dim: ck.meta("patch_dim")?,
        image_width: ck.meta("image_width")?,
        image_blocks: ck.meta("image_blocks")?,
        image_heads: ck.meta("image_heads")?,
        mlp_ratio: ck.meta("mlp_ratio")?,
    };
    let mut params = ParamStore::new();
    for (n, t) in &ck.tensors {
        params.insert(n.clone(), t.clone())?;
    }
    EncoderStack::from_params(config, params, ck.meta("frozen")?)
}

pub fn save_stack(stack: &EncoderStack, config_digest: &str, world_seed: u64, path: &Path) -> Result<()> {
    stack_checkpoint(stack, config_digest, world_seed).save(path)
}

pub fn load_stack(path: &Path) -> Result<EncoderStack> {
    stack_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn state_checkpoint(state: &TrainState, config_digest: &str, world_seed: u64) -> Checkpoint {
    let p = &state.prompt;
    let meta = [
        ("method", state.method.name().to_string()),
        ("soft_len", p.soft_len.to_string()),
        ("anchor_len", p.anchor_len.to_string()),
        ("preposition", p.preposition.map_or("none", Preposition::name).to_string()),
        ("arrangement", p.arrangement.name().to_string()),
        ("position_forward", p.position_forward.name().to_string()),
        ("gumbel_tau", p.gumbel_tau.to_string()),
        ("deep_depth", p.deep_depth.to_string()),
        ("attribute_words", p.attribute_words.to_string()),
        ("step", state.step.to_string()),
        ("seed", state.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Checkpoint {
        kind: CheckpointKind::PromptState,
        config_digest: config_digest.to_string(),
        world_seed,
        stage: state.stage.tag().to_string(),
        meta,
        tensors: state
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

fn parse_with<T>(ck: &Checkpoint, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
    let raw: String = ck.meta(key)?;
    f(&raw).ok_or_else(|| Error::Checkpoint(format!("bad value `{raw}` for meta key `{key}`")))
}

pub fn state_from_checkpoint(ck: &Checkpoint) -> Result<TrainState> {
    ck.expect_kind(CheckpointKind::PromptState)?;
    let prompt = PromptConfig {
        soft_len: ck.meta("soft_len")?,
        anchor_len: ck.meta("anchor_len")?,
        preposition: parse_with(ck, "preposition", |s| {
            if s == "none" {
                Some(None)
            } else {
                Preposition::parse(s).map(Some)
            }
        })?,
        arrangement: parse_with(ck, "arrangement", Arrangement::parse)?,
        position_forward: parse_with(ck, "position_forward", PositionForward::parse)?,
        gumbel_tau: ck.meta("gumbel_tau")?,
        deep_depth: ck.meta("deep_depth")?,
        attribute_words: ck.meta("attribute_words")?,
    };
    let mut tensors: BTreeMap<&str, &Tensor> =
        ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    let soft = take(SOFT)?;
    let anchors = take(ANCHORS)?;
    let position_logits = take(POSITION_LOGITS)?;
    let deep_soft = (0..prompt.deep_depth.saturating_sub(1))
        .map(|i| take(&deep_name(i)))
        .collect::<Result<Vec<_>>>()?;
    let attribute_soft = take(ATTRIBUTE_SOFT).ok();
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    let (m, n) = (prompt.soft_len, prompt.anchor_len);
    if soft.shape().first() != Some(&m)
        || anchors.shape().first() != Some(&n)
        || position_logits.shape() != [m + n, m + n]
    {
        return Err(Error::Checkpoint("prompt tensor shapes do not match the settings".into()));
    }
    Ok(TrainState {
        method: parse_with(ck, "method", Method::parse)?,
        prompt,
        soft,
        anchors,
        position_logits,
        deep_soft,
        attribute_soft,
        stage: Stage::parse(&ck.stage)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage `{}`", ck.stage)))?,
        step: ck.meta("step")?,
        seed: ck.meta("seed")?,
    })
}

pub fn save_state(state: &TrainState, config_digest: &str, world_seed: u64, path: &Path) -> Result<()> {
    state_checkpoint(state, config_digest, world_seed).save(path)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    state_from_checkpoint(&Checkpoint::load(path)?)
}
