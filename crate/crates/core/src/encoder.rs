//! Toy dual encoder: a causal pre-norm transformer over token embeddings and
//! a bidirectional one over image patches, both projected into a shared
//! unit-normalized space.

use std::collections::BTreeMap;

use autodiff::{Graph, ParamStore, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, gaussian, Rng};

pub const LOGIT_SCALE_INIT: f64 = 1.0 / 0.07;
pub const LOGIT_SCALE_RANGE: (f64, f64) = (1.0, 100.0);
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub max_len: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub image_width: usize,
    pub image_blocks: usize,
    pub image_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            token_dim: 32,
            embed_dim: 16,
            text_blocks: 4,
            text_heads: 2,
            max_len: 16,
            patches: 9,
            patch_dim: 24,
            image_width: 24,
            image_blocks: 2,
            image_heads: 2,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.token_dim,
            self.embed_dim,
            self.text_blocks,
            self.text_heads,
            self.max_len,
            self.patches,
            self.patch_dim,
            self.image_width,
            self.image_blocks,
            self.image_heads,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if !self.token_dim.is_multiple_of(self.text_heads) || !self.image_width.is_multiple_of(self.image_heads) {
            return Err(Error::invalid("model width must be divisible by the head count"));
        }
        Ok(())
    }
}

/// Unit-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(pub Vec<f64>);

impl Feature {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Unnormalized(n));
        }
        Ok(())
    }
}

/// Class probabilities over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Predicted class; ties go to the earliest class in the list.
    pub fn predicted(&self) -> usize {
        self.classes[autodiff::argmax(&self.probs)]
    }
}

/// `softmax(scale · ⟨image, class_i⟩)` over the given class features.
pub fn classify(
    image: &Feature,
    class_features: &[Feature],
    classes: &[usize],
    logit_scale: f64,
) -> Result<PredictionDistribution> {
    if class_features.len() != classes.len() || class_features.is_empty() {
        return Err(Error::invalid("class features and class ids must match and be non-empty"));
    }
    image.check()?;
    let mut logits = Vec::with_capacity(class_features.len());
    for f in class_features {
        f.check()?;
        if f.0.len() != image.0.len() {
            return Err(Error::invalid("feature dimensions differ"));
        }
        logits.push(logit_scale * f.0.iter().zip(&image.0).map(|(a, b)| a * b).sum::<f64>());
    }
    Ok(PredictionDistribution {
        classes: classes.to_vec(),
        probs: softmax(&logits),
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn rows_as_features(t: &Tensor) -> Vec<Feature> {
    (0..t.rows()).map(|r| Feature(t.row(r).to_vec())).collect()
}

fn add_tower(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    width: usize,
    blocks: usize,
    ratio: usize,
) -> Result<()> {
    let w = width as f64;
    let out_std = w.powf(-0.5) * (2.0 * blocks as f64).powf(-0.5);
    for b in 0..blocks {
        let p = format!("{prefix}.block{b}");
        store.insert(format!("{p}.ln1.gain"), Tensor::ones(&[width]))?;
        store.insert(format!("{p}.ln1.bias"), Tensor::zeros(&[width]))?;
        store.insert(
            format!("{p}.attn.w_qkv"),
            gaussian(rng, &[width, 3 * width], w.powf(-0.5)),
        )?;
        store.insert(format!("{p}.attn.b_qkv"), Tensor::zeros(&[3 * width]))?;
        store.insert(format!("{p}.attn.w_out"), gaussian(rng, &[width, width], out_std))?;
        store.insert(format!("{p}.attn.b_out"), Tensor::zeros(&[width]))?;
        store.insert(format!("{p}.ln2.gain"), Tensor::ones(&[width]))?;
        store.insert(format!("{p}.ln2.bias"), Tensor::zeros(&[width]))?;
        store.insert(
            format!("{p}.mlp.w1"),
            gaussian(rng, &[width, ratio * width], (2.0 * w).powf(-0.5)),
        )?;
        store.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[ratio * width]))?;
        store.insert(
            format!("{p}.mlp.w2"),
            gaussian(rng, &[ratio * width, width], out_std),
        )?;
        store.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[width]))?;
    }
    store.insert(format!("{prefix}.ln_final.gain"), Tensor::ones(&[width]))?;
    store.insert(format!("{prefix}.ln_final.bias"), Tensor::zeros(&[width]))?;
    Ok(())
}

/// Parameters of both towers plus the shared logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    config: EncoderConfig,
    params: ParamStore,
    frozen: bool,
}

impl EncoderStack {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, "encoder.init");
        let (dt, d, di) = (config.token_dim, config.embed_dim, config.image_width);
        let mut p = ParamStore::new();
        p.insert(
            "text.token_embedding",
            gaussian(&mut rng, &[config.vocab_size, dt], 0.02),
        )?;
        p.insert(
            "text.pos_embedding",
            gaussian(&mut rng, &[config.max_len, dt], 0.01),
        )?;
        add_tower(&mut p, &mut rng, "text", dt, config.text_blocks, config.mlp_ratio)?;
        p.insert("text.proj", gaussian(&mut rng, &[dt, d], (dt as f64).powf(-0.5)))?;
        p.insert(
            "image.patch.w",
            gaussian(&mut rng, &[config.patch_dim, di], (config.patch_dim as f64).powf(-0.5)),
        )?;
        p.insert("image.patch.b", Tensor::zeros(&[di]))?;
        p.insert(
            "image.pos_embedding",
            gaussian(&mut rng, &[config.patches, di], 0.02),
        )?;
        add_tower(&mut p, &mut rng, "image", di, config.image_blocks, config.mlp_ratio)?;
        p.insert("image.proj", gaussian(&mut rng, &[di, d], (di as f64).powf(-0.5)))?;
        p.insert("logit_scale", Tensor::scalar(LOGIT_SCALE_INIT).reshaped(vec![1])?)?;
        Ok(Self {
            config,
            params: p,
            frozen: false,
        })
    }

    /// Rebuilds a stack from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_params(config: EncoderConfig, params: ParamStore, frozen: bool) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "encoder has {} tensors, expected {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get("logit_scale").expect("logit scale").item()
    }

    /// Puts every parameter on `g`. A frozen stack can only be bound as
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundEncoder<'_>> {
        if trainable && self.frozen {
            return Err(Error::Frozen);
        }
        let vars = self
            .params
            .names()
            .into_iter()
            .zip(self.params.bind(g, trainable))
            .collect();
        Ok(BoundEncoder {
            config: &self.config,
            vars,
        })
    }

    /// Image features without gradients, `[B, d]`.
    pub fn encode_images(&self, images: &[&Tensor]) -> Result<Tensor> {
        self.in_chunks(images.len(), |enc, g, range| enc.encode_images(g, &images[range]))
    }

    /// Text features of token sequences without gradients, `[B, d]`. Start
    /// and end markers are added.
    pub fn encode_token_sequences(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        self.in_chunks(seqs.len(), |enc, g, range| {
            let embedded = seqs[range]
                .iter()
                .map(|s| enc.embed_sequence(g, s))
                .collect::<Result<Vec<_>>>()?;
            enc.encode_text(g, &embedded)
        })
    }

    fn in_chunks<F>(&self, n: usize, mut f: F) -> Result<Tensor>
    where
        F: FnMut(&BoundEncoder<'_>, &mut Graph, std::ops::Range<usize>) -> Result<Var>,
    {
        const CHUNK: usize = 64;
        if n == 0 {
            return Err(Error::invalid("nothing to encode"));
        }
        let mut data = Vec::with_capacity(n * self.config.embed_dim);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut g = Graph::new();
            let enc = self.bind(&mut g, false)?;
            let out = f(&enc, &mut g, start..end)?;
            data.extend_from_slice(g.value(out).data());
            start = end;
        }
        Ok(Tensor::new(vec![n, self.config.embed_dim], data)?)
    }
}

/// Hook applied to the stacked text hidden states after a block.
pub type BlockHook<'h> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'h;

/// An [`EncoderStack`] placed on a graph.
pub struct BoundEncoder<'a> {
    config: &'a EncoderConfig,
    vars: BTreeMap<String, Var>,
}

impl BoundEncoder<'_> {
    pub fn config(&self) -> &EncoderConfig {
        self.config
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown encoder parameter {name}"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn logit_scale(&self) -> Var {
        self.var("logit_scale")
    }

    /// Token embedding rows, `[n, d_tok]`.
    pub fn token_embeddings(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {bad} is outside the vocabulary")));
        }
        Ok(g.gather_rows(self.var("text.token_embedding"), ids)?)
    }

    /// `[SOT] ids [EOT]` as embeddings.
    pub fn embed_sequence(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut full = Vec::with_capacity(ids.len() + 2);
        full.push(crate::world::SOT);
        full.extend_from_slice(ids);
        full.push(crate::world::EOT);
        self.token_embeddings(g, &full)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(w))?;
        Ok(g.add(y, self.var(b))?)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        Ok(g.layer_norm(
            x,
            self.var(&format!("{prefix}.gain")),
            self.var(&format!("{prefix}.bias")),
        )?)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        lengths: &[usize],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let width = g.shape(x)[1];
        let hd = width / heads;
        let qkv = self.linear(g, x, &format!("{prefix}.w_qkv"), &format!("{prefix}.b_qkv"))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut masks: BTreeMap<usize, Var> = BTreeMap::new();
        let mut segments = Vec::with_capacity(lengths.len());
        let mut row = 0;
        for &len in lengths {
            let seg = g.slice(qkv, 0, row, row + len)?;
            let mask = if causal {
                Some(*masks.entry(len).or_insert_with(|| {
                    let mut m = Tensor::zeros(&[len, len]);
                    for i in 0..len {
                        for j in i + 1..len {
                            m.row_mut(i)[j] = MASKED;
                        }
                    }
                    g.constant(m)
                }))
            } else {
                None
            };
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = g.slice(seg, 1, h * hd, (h + 1) * hd)?;
                let k = g.slice(seg, 1, width + h * hd, width + (h + 1) * hd)?;
                let v = g.slice(seg, 1, 2 * width + h * hd, 2 * width + (h + 1) * hd)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let mut s = g.scale(s, scale)?;
                if let Some(m) = mask {
                    s = g.add(s, m)?;
                }
                let a = g.softmax(s, 1.0)?;
                outs.push(g.matmul(a, v)?);
            }
            segments.push(g.concat(&outs, 1)?);
            row += len;
        }
        let merged = g.concat(&segments, 0)?;
        self.linear(g, merged, &format!("{prefix}.w_out"), &format!("{prefix}.b_out"))
    }

    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        lengths: &[usize],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let a = self.attention(g, h, &format!("{prefix}.attn"), lengths, heads, causal)?;
        let x = g.add(x, a)?;
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
        Ok(g.add(x, h)?)
    }

    /// Features of embedded sequences (each `[L_i, d_tok]`, ending in the
    /// position that is pooled), `[B, d]`.
    pub fn encode_text(&self, g: &mut Graph, sequences: &[Var]) -> Result<Var> {
        self.encode_text_with(g, sequences, &mut |_, _, x| Ok(x))
    }

    /// Like [`encode_text`](Self::encode_text) with `hook(g, block, x)` run on
    /// the stacked hidden states after every block.
    pub fn encode_text_with(
        &self,
        g: &mut Graph,
        sequences: &[Var],
        hook: &mut BlockHook<'_>,
    ) -> Result<Var> {
        if sequences.is_empty() {
            return Err(Error::invalid("no sequences to encode"));
        }
        let mut lengths = Vec::with_capacity(sequences.len());
        for &s in sequences {
            let shape = g.shape(s);
            if shape.len() != 2 || shape[1] != self.config.token_dim {
                return Err(Error::invalid(format!(
                    "sequence embedding has shape {shape:?}, expected [L, {}]",
                    self.config.token_dim
                )));
            }
            if shape[0] > self.config.max_len {
                return Err(Error::PromptTooLong {
                    len: shape[0],
                    max: self.config.max_len,
                });
            }
            lengths.push(shape[0]);
        }
        let x = g.concat(sequences, 0)?;
        let positions: Vec<usize> = lengths.iter().flat_map(|&l| 0..l).collect();
        let pos = g.gather_rows(self.var("text.pos_embedding"), &positions)?;
        let mut x = g.add(x, pos)?;
        for b in 0..self.config.text_blocks {
            x = self.block(
                g,
                x,
                &format!("text.block{b}"),
                &lengths,
                self.config.text_heads,
                true,
            )?;
            x = hook(g, b, x)?;
        }
        let pooled: Vec<usize> = lengths
            .iter()
            .scan(0, |end, &l| {
                *end += l;
                Some(*end - 1)
            })
            .collect();
        let x = g.gather_rows(x, &pooled)?;
        let x = self.layer_norm(g, x, "text.ln_final")?;
        let x = g.matmul(x, self.var("text.proj"))?;
        Ok(g.l2_normalize(x)?)
    }

    /// Image features, `[B, d]`.
    pub fn encode_images(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let (p, pd) = (self.config.patches, self.config.patch_dim);
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        let mut data = Vec::with_capacity(images.len() * p * pd);
        for img in images {
            if img.shape() != [p, pd] {
                return Err(Error::invalid(format!(
                    "image has shape {:?}, expected [{p}, {pd}]",
                    img.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        let b = images.len();
        let x = g.constant(Tensor::new(vec![b * p, pd], data)?);
        let x = self.linear(g, x, "image.patch.w", "image.patch.b")?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..p).collect();
        let pos = g.gather_rows(self.var("image.pos_embedding"), &positions)?;
        let mut x = g.add(x, pos)?;
        let lengths = vec![p; b];
        for blk in 0..self.config.image_blocks {
            x = self.block(
                g,
                x,
                &format!("image.block{blk}"),
                &lengths,
                self.config.image_heads,
                false,
            )?;
        }
        let x = g.reshape(x, &[b, p, self.config.image_width])?;
        let x = g.mean_axis(x, 1)?;
        let x = self.layer_norm(g, x, "image.ln_final")?;
        let x = g.matmul(x, self.var("image.proj"))?;
        Ok(g.l2_normalize(x)?)
    }

    /// `scale · images · textᵀ`, `[B, C]`.
    pub fn logits(&self, g: &mut Graph, images: Var, text: Var) -> Result<Var> {
        let tt = g.transpose(text)?;
        let s = g.matmul(images, tt)?;
        Ok(g.mul(s, self.logit_scale())?)
    }
}
