//! Contrastive pretraining of the dual encoder on world captions.

use autodiff::{Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::encoder::{EncoderConfig, EncoderStack, LOGIT_SCALE_RANGE};
use crate::error::{Error, Result};
use crate::rng;
use crate::world::{sample_dataset, LabeledSample, SynthWorld};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainConfig {
    /// Steps run before the retrieval target may end training.
    pub min_steps: usize,
    pub max_steps: usize,
    pub lr: f64,
    /// Stop once held-out retrieval top-1 reaches this.
    pub target_top1: f64,
    pub eval_every: usize,
    pub heldout_per_class: usize,
    /// Classes per batch; every class appears at most once per batch so
    /// there are no false negatives.
    pub batch_classes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            min_steps: 150,
            max_steps: 3000,
            lr: 2e-3,
            target_top1: 0.9,
            eval_every: 50,
            heldout_per_class: 8,
            batch_classes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub top1: f64,
    pub loss_trace: Vec<f64>,
    pub top1_trace: Vec<(usize, f64)>,
    /// Mean cosine between held-out images and their own class caption.
    pub matched_cosine: f64,
    /// Mean cosine between held-out images and other class captions.
    pub mismatched_cosine: f64,
}

/// Held-out image-to-caption retrieval: each image against one canonical
/// caption per class.
#[derive(Debug, Clone)]
pub struct RetrievalProbe {
    images: Vec<LabeledSample>,
    captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalScore {
    pub top1: f64,
    pub matched_cosine: f64,
    pub mismatched_cosine: f64,
}

impl RetrievalProbe {
    pub fn new(world: &SynthWorld, per_class: usize, seed: u64) -> Result<Self> {
        let classes: Vec<usize> = (0..world.num_classes()).collect();
        let images = sample_dataset(
            world,
            &classes,
            per_class,
            rng::derive_seed(seed, "pretrain.heldout"),
        )?;
        let captions = classes.iter().map(|&c| world.canonical_caption(c)).collect();
        Ok(Self { images, captions })
    }

    pub fn score(&self, stack: &EncoderStack) -> Result<RetrievalScore> {
        let text = stack.encode_token_sequences(&self.captions)?;
        let imgs: Vec<&Tensor> = self.images.iter().map(|s| &s.image).collect();
        let feats = stack.encode_images(&imgs)?;
        let (mut hits, mut matched, mut mismatched) = (0usize, 0.0, 0.0);
        let c = self.captions.len();
        for (i, s) in self.images.iter().enumerate() {
            let sims: Vec<f64> = (0..c)
                .map(|j| dot(feats.row(i), text.row(j)))
                .collect();
            if autodiff::argmax(&sims) == s.label {
                hits += 1;
            }
            for (j, &v) in sims.iter().enumerate() {
                if j == s.label {
                    matched += v;
                } else {
                    mismatched += v;
                }
            }
        }
        let n = self.images.len() as f64;
        Ok(RetrievalScore {
            top1: hits as f64 / n,
            matched_cosine: matched / n,
            mismatched_cosine: mismatched / (n * (c - 1) as f64),
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains a fresh encoder with the symmetric InfoNCE loss until held-out
/// retrieval reaches the target, then freezes it. Missing the target within
/// `max_steps` is an error.
pub fn pretrain_contrastive(
    world: &SynthWorld,
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderStack, PretrainReport)> {
    if encoder.vocab_size != world.vocab_size()
        || encoder.patches != world.config.patches
        || encoder.patch_dim != world.config.patch_dim
    {
        return Err(Error::invalid(
            "encoder vocabulary or image shape does not match the world",
        ));
    }
    if config.eval_every == 0 || config.batch_classes < 2 {
        return Err(Error::invalid("eval_every must be positive and batches need two classes"));
    }
    let mut stack = EncoderStack::new(encoder.clone(), rng::derive_seed(seed, rng::PRETRAIN))?;
    let mut rng = rng::substream(seed, rng::PRETRAIN);
    let probe = RetrievalProbe::new(world, config.heldout_per_class, seed)?;
    let mut adam = Adam::new(config.lr)?;
    let batch = config.batch_classes.min(world.num_classes());
    let mut classes: Vec<usize> = (0..world.num_classes()).collect();
    let mut report = PretrainReport {
        steps: 0,
        top1: 0.0,
        loss_trace: Vec::new(),
        top1_trace: Vec::new(),
        matched_cosine: 0.0,
        mismatched_cosine: 0.0,
    };

    for step in 1..=config.max_steps {
        classes.shuffle(&mut rng);
        let picked = &classes[..batch];
        let images: Vec<Tensor> = picked.iter().map(|&c| world.sample_image(c, &mut rng)).collect();
        let captions: Vec<Vec<usize>> =
            picked.iter().map(|&c| world.sample_caption(c, &mut rng)).collect();

        let mut g = Graph::new();
        let enc = stack.bind(&mut g, true)?;
        let seqs = captions
            .iter()
            .map(|c| enc.embed_sequence(&mut g, c))
            .collect::<Result<Vec<_>>>()?;
        let text = enc.encode_text(&mut g, &seqs)?;
        let img_refs: Vec<&Tensor> = images.iter().collect();
        let img = enc.encode_images(&mut g, &img_refs)?;
        let logits = enc.logits(&mut g, img, text)?;
        let targets: Vec<usize> = (0..batch).collect();
        let l_img = g.cross_entropy(logits, &targets)?;
        let lt = g.transpose(logits)?;
        let l_txt = g.cross_entropy(lt, &targets)?;
        let sum = g.add(l_img, l_txt)?;
        let loss = g.scale(sum, 0.5)?;
        report.loss_trace.push(g.value(loss).item());
        let grads = g.backward(loss)?.named();
        drop(enc);

        let params = stack.params_mut()?;
        let mut slots: Vec<(&str, &mut Tensor)> = params.iter_mut().collect();
        adam.step(&mut slots, &grads)?;
        let s = params.get_mut("logit_scale").expect("logit scale");
        let v = s.data()[0].clamp(LOGIT_SCALE_RANGE.0, LOGIT_SCALE_RANGE.1);
        s.data_mut()[0] = v;
        report.steps = step;

        if step % config.eval_every == 0 || step == config.max_steps {
            let score = probe.score(&stack)?;
            report.top1 = score.top1;
            report.matched_cosine = score.matched_cosine;
            report.mismatched_cosine = score.mismatched_cosine;
            report.top1_trace.push((step, score.top1));
            if score.top1 >= config.target_top1 && step >= config.min_steps {
                break;
            }
        }
    }
    if report.top1 < config.target_top1 {
        return Err(Error::PretrainTargetMissed {
            steps: report.steps,
            top1: report.top1,
            target: config.target_top1,
        });
    }
    stack.freeze();
    Ok((stack, report))
}
