//! Base-to-novel and cross-world evaluation.

use std::collections::BTreeMap;

use autodiff::{Adam, Graph, Tensor};
use serde::Serialize;

use crate::encoder::{classify, rows_as_features, EncoderStack, Feature, PredictionDistribution};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{
    anchor_class_features, ensemble_predict, inference_class_features, TrainState,
};
use crate::world::{sample_dataset, LabeledSample, Split, SynthWorld};

/// `2bn / (b + n)` over percentages; 0 when both are 0.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    for (name, v) in [("base", base), ("novel", novel)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::invalid(format!("{name} accuracy {v} is outside [0, 100]")));
        }
    }
    if base + novel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * novel / (base + novel))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub per_class_acc: BTreeMap<usize, f64>,
    pub seed: u64,
    pub config_digest: String,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub samples_per_class: usize,
    /// Route novel classes through the anchor ensemble.
    pub ensemble: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 50,
            ensemble: true,
        }
    }
}

/// Logged prediction for one evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub label: usize,
    pub normal: PredictionDistribution,
    pub anchor: Option<PredictionDistribution>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub base: Vec<SamplePrediction>,
    pub novel: Vec<SamplePrediction>,
}

/// Text-side classifiers used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub base: Vec<Feature>,
    pub novel: Vec<Feature>,
    /// Anchor-prompt features of the novel classes, when the ensemble is used.
    pub novel_anchor: Option<Vec<Feature>>,
}

impl ClassFeatures {
    pub fn compute(
        state: &TrainState,
        stack: &EncoderStack,
        world: &SynthWorld,
        split: &Split,
        config: &EvalConfig,
    ) -> Result<Self> {
        if !state.is_adapted() {
            return Err(Error::Untrained(format!(
                "{} state is at stage {}",
                state.method.name(),
                state.stage.tag()
            )));
        }
        let base = rows_as_features(&inference_class_features(stack, world, state, &split.base)?);
        let novel =
            rows_as_features(&inference_class_features(stack, world, state, &split.novel)?);
        let novel_anchor = if state.method.uses_anchors() && config.ensemble {
            Some(rows_as_features(&anchor_class_features(
                stack,
                world,
                state,
                &split.novel,
            )?))
        } else {
            None
        };
        Ok(Self {
            base,
            novel,
            novel_anchor,
        })
    }
}

/// Fresh evaluation samples for both sides of the split.
pub fn evaluation_samples(
    world: &SynthWorld,
    split: &Split,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if per_class == 0 {
        return Err(Error::invalid("evaluation needs at least one sample per class"));
    }
    let s = rng::derive_seed(seed, rng::EVAL);
    Ok((
        sample_dataset(world, &split.base, per_class, rng::derive_seed(s, "base"))?,
        sample_dataset(world, &split.novel, per_class, rng::derive_seed(s, "novel"))?,
    ))
}

fn accuracy(preds: &[SamplePrediction], per_class: &mut BTreeMap<usize, f64>) -> f64 {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in preds {
        let e = counts.entry(p.label).or_default();
        e.1 += 1;
        if p.predicted == p.label {
            e.0 += 1;
        }
    }
    for (&c, &(hit, n)) in &counts {
        per_class.insert(c, 100.0 * hit as f64 / n as f64);
    }
    let hits = preds.iter().filter(|p| p.predicted == p.label).count();
    100.0 * hits as f64 / preds.len() as f64
}

/// Scores samples against fixed class features. Base samples use the normal
/// prompts only; novel samples use the ensemble when anchor features exist.
pub fn evaluate_with_features(
    features: &ClassFeatures,
    stack: &EncoderStack,
    split: &Split,
    base_samples: &[LabeledSample],
    novel_samples: &[LabeledSample],
) -> Result<(Vec<SamplePrediction>, Vec<SamplePrediction>)> {
    let scale = stack.logit_scale();
    let encode = |samples: &[LabeledSample]| -> Result<Vec<Feature>> {
        let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Ok(rows_as_features(&stack.encode_images(&imgs)?))
    };
    let base_feats = encode(base_samples)?;
    let novel_feats = encode(novel_samples)?;
    let mut base = Vec::with_capacity(base_samples.len());
    for (s, f) in base_samples.iter().zip(&base_feats) {
        let normal = classify(f, &features.base, &split.base, scale)?;
        base.push(SamplePrediction {
            label: s.label,
            predicted: normal.predicted(),
            normal,
            anchor: None,
        });
    }
    let mut novel = Vec::with_capacity(novel_samples.len());
    for (s, f) in novel_samples.iter().zip(&novel_feats) {
        let normal = classify(f, &features.novel, &split.novel, scale)?;
        let anchor = features
            .novel_anchor
            .as_ref()
            .map(|a| classify(f, a, &split.novel, scale))
            .transpose()?;
        let predicted = match &anchor {
            Some(a) => ensemble_predict(&normal, a)?.predicted(),
            None => normal.predicted(),
        };
        novel.push(SamplePrediction {
            label: s.label,
            normal,
            anchor,
            predicted,
        });
    }
    Ok((base, novel))
}

/// Base accuracy, novel accuracy and HM of a trained state.
pub fn evaluate_base_to_novel(
    state: &TrainState,
    stack: &EncoderStack,
    world: &SynthWorld,
    split: &Split,
    config: &EvalConfig,
    seed: u64,
) -> Result<Evaluation> {
    let start = std::time::Instant::now();
    let features = ClassFeatures::compute(state, stack, world, split, config)?;
    let (base_samples, novel_samples) =
        evaluation_samples(world, split, config.samples_per_class, seed)?;
    let (base, novel) =
        evaluate_with_features(&features, stack, split, &base_samples, &novel_samples)?;
    let mut per_class_acc = BTreeMap::new();
    let base_acc = accuracy(&base, &mut per_class_acc);
    let novel_acc = accuracy(&novel, &mut per_class_acc);
    Ok(Evaluation {
        record: MetricsRecord {
            base_acc,
            novel_acc,
            hm: harmonic_mean(base_acc, novel_acc)?,
            per_class_acc,
            seed,
            config_digest: String::new(),
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
        base,
        novel,
    })
}

/// Evaluates the unmodified prompts on each target world with the source
/// split and evaluation seed. One record per target.
pub fn evaluate_cross_world(
    state: &TrainState,
    stack: &EncoderStack,
    source: &SynthWorld,
    split: &Split,
    targets: &[SynthWorld],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    targets
        .iter()
        .map(|t| {
            if t.num_classes() != source.num_classes()
                || t.vocab_size() != source.vocab_size()
                || t.image_shape() != source.image_shape()
            {
                return Err(Error::invalid(format!(
                    "target world ({} classes, vocab {}, image {:?}) does not match the source \
                     ({} classes, vocab {}, image {:?})",
                    t.num_classes(),
                    t.vocab_size(),
                    t.image_shape(),
                    source.num_classes(),
                    source.vocab_size(),
                    source.image_shape()
                )));
            }
            Ok(evaluate_base_to_novel(state, stack, t, split, config, seed)?.record)
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub base: Summary,
    pub novel: Summary,
    pub hm: Summary,
}

pub fn aggregate(records: &[MetricsRecord]) -> Aggregate {
    let pick = |f: fn(&MetricsRecord) -> f64| summarize(&records.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        base: pick(|r| r.base_acc),
        novel: pick(|r| r.novel_acc),
        hm: pick(|r| r.hm),
    }
}

/// Accuracy (percent) of name-only prompts `[SOT][class][EOT]`.
pub fn zero_shot_accuracy(
    stack: &EncoderStack,
    world: &SynthWorld,
    classes: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<f64> {
    let names: Vec<Vec<usize>> = classes.iter().map(|&c| world.class_name(c).to_vec()).collect();
    let text = rows_as_features(&stack.encode_token_sequences(&names)?);
    let samples = sample_dataset(world, classes, per_class, seed)?;
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let feats = rows_as_features(&stack.encode_images(&imgs)?);
    let mut hits = 0;
    for (s, f) in samples.iter().zip(&feats) {
        if classify(f, &text, classes, stack.logit_scale())?.predicted() == s.label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Accuracy (percent) of a softmax-regression probe on frozen image features.
pub fn linear_probe_accuracy(
    stack: &EncoderStack,
    world: &SynthWorld,
    classes: &[usize],
    shots: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<f64> {
    let train = sample_dataset(world, classes, shots, rng::derive_seed(seed, "probe.train"))?;
    let test = sample_dataset(world, classes, test_per_class, rng::derive_seed(seed, "probe.test"))?;
    let encode = |s: &[LabeledSample]| {
        let imgs: Vec<&Tensor> = s.iter().map(|x| &x.image).collect();
        stack.encode_images(&imgs)
    };
    let (xtr, xte) = (encode(&train)?, encode(&test)?);
    let index = |s: &[LabeledSample]| -> Vec<usize> {
        s.iter()
            .map(|x| classes.iter().position(|&c| c == x.label).expect("class"))
            .collect()
    };
    let (ytr, yte) = (index(&train), index(&test));
    let (d, c) = (xtr.cols(), classes.len());
    let mut w = Tensor::zeros(&[d, c]);
    let mut b = Tensor::zeros(&[c]);
    let mut adam = Adam::new(0.05)?;
    for _ in 0..300 {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let wv = g.param("w", w.clone());
        let bv = g.param("b", b.clone());
        let h = g.matmul(x, wv)?;
        let logits = g.add(h, bv)?;
        let loss = g.cross_entropy(logits, &ytr)?;
        let grads = g.backward(loss)?.named();
        adam.step(&mut [("w", &mut w), ("b", &mut b)], &grads)?;
    }
    let mut hits = 0;
    for (i, &y) in yte.iter().enumerate() {
        let scores: Vec<f64> = (0..c)
            .map(|j| b.data()[j] + (0..d).map(|k| xte.get2(i, k) * w.get2(k, j)).sum::<f64>())
            .collect();
        if autodiff::argmax(&scores) == y {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / yte.len() as f64)
}
