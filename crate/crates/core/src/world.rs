//! Synthetic world: classes built from shared attributes, images rendered from
//! class latents, and token sequences (captions, descriptions) drawn from the
//! same latents through a separate text rendering map.

use std::collections::BTreeSet;

use autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, gaussian, Rng};

pub const PAD: usize = 0;
pub const SOT: usize = 1;
pub const EOT: usize = 2;

/// Fixed function words with their own token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Preposition {
    Of,
    With,
    At,
    Sun,
    Sea,
}

impl Preposition {
    pub const ALL: [Preposition; 5] = [
        Preposition::Of,
        Preposition::With,
        Preposition::At,
        Preposition::Sun,
        Preposition::Sea,
    ];

    pub fn token(self) -> usize {
        match self {
            Preposition::Of => 3,
            Preposition::With => 4,
            Preposition::At => 5,
            Preposition::Sun => 6,
            Preposition::Sea => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preposition::Of => "of",
            Preposition::With => "with",
            Preposition::At => "at",
            Preposition::Sun => "sun",
            Preposition::Sea => "sea",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

const FIRST_FREE_TOKEN: usize = 8;
const MIN_CONTENT_WORDS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub classes: usize,
    pub attributes: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub vocab_size: usize,
    pub patches: usize,
    pub patch_dim: usize,
    /// Weight of the class-unique latent direction.
    pub uniqueness: f64,
    /// Content words per caption or description.
    pub words: usize,
    pub caption_perturbation: f64,
    pub caption_name_prob: f64,
    pub caption_attribute_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 16,
            attributes: 4,
            latent_dim: 12,
            noise_sigma: 0.3,
            vocab_size: 128,
            patches: 9,
            patch_dim: 24,
            uniqueness: 0.6,
            words: 4,
            caption_perturbation: 0.3,
            caption_name_prob: 0.7,
            caption_attribute_prob: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 || self.latent_dim < 4 {
            return Err(Error::invalid("a world needs at least four classes and latent dimensions"));
        }
        if self.attributes == 0 || self.patches == 0 || self.patch_dim == 0 {
            return Err(Error::invalid("attributes, patches and patch_dim must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        let needed = FIRST_FREE_TOKEN + self.attributes + 2 * self.classes + MIN_CONTENT_WORDS;
        if self.vocab_size < needed {
            return Err(Error::invalid(format!(
                "vocabulary of {} tokens cannot hold {} classes and {} attributes (needs {needed})",
                self.vocab_size, self.classes, self.attributes
            )));
        }
        if self.words == 0 || self.words > self.vocab_size - needed + MIN_CONTENT_WORDS {
            return Err(Error::invalid("words per sequence out of range"));
        }
        for (name, p) in [
            ("caption_name_prob", self.caption_name_prob),
            ("caption_attribute_prob", self.caption_attribute_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn attribute_token(&self, a: usize) -> usize {
        FIRST_FREE_TOKEN + a
    }

    fn name_base(&self) -> usize {
        FIRST_FREE_TOKEN + self.attributes
    }

    pub fn content_base(&self) -> usize {
        self.name_base() + 2 * self.classes
    }

    pub fn content_words(&self) -> usize {
        self.vocab_size - self.content_base()
    }
}

/// Distribution shift applied to a world for cross-world evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shift {
    /// Blend the image rendering map toward a fresh one: `cos θ·R + sin θ·R'`.
    RotateRenderMap(f64),
    /// Multiply the image noise level.
    RaiseNoise(f64),
    /// Blend every class's attribute mix toward a fresh mix.
    RemapAttributeMix(f64),
}

impl Shift {
    pub fn name(&self) -> &'static str {
        match self {
            Shift::RotateRenderMap(_) => "rotate-render-map",
            Shift::RaiseNoise(_) => "raise-noise",
            Shift::RemapAttributeMix(_) => "remap-attribute-mix",
        }
    }

    pub fn amount(&self) -> f64 {
        match *self {
            Shift::RotateRenderMap(x) | Shift::RaiseNoise(x) | Shift::RemapAttributeMix(x) => x,
        }
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            Shift::RotateRenderMap(x) | Shift::RemapAttributeMix(x) => x == 0.0,
            Shift::RaiseNoise(x) => x == 1.0,
        }
    }

    /// Parses `name:amount`, e.g. `raise-noise:2`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, amount) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("shift `{s}` must look like name:amount")))?;
        let x: f64 = amount
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("shift amount `{amount}` is not a number")))?;
        let shift = match name.trim() {
            "rotate-render-map" => Shift::RotateRenderMap(x),
            "raise-noise" => Shift::RaiseNoise(x),
            "remap-attribute-mix" => Shift::RemapAttributeMix(x),
            other => return Err(Error::invalid(format!("unknown shift `{other}`"))),
        };
        shift.validate()?;
        Ok(shift)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shift::RotateRenderMap(x) => x.is_finite(),
            Shift::RaiseNoise(x) => x.is_finite() && x > 0.0,
            Shift::RemapAttributeMix(x) => (0.0..=1.0).contains(&x),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid amount {} for shift {}",
                self.amount(),
                self.name()
            )))
        }
    }
}

impl std::fmt::Display for Shift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.name(), self.amount())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub seed: u64,
    /// Unit attribute directions, `[A, k]`.
    pub attribute_latents: Tensor,
    /// Class-unique directions, `[C, k]`.
    pub class_unique: Tensor,
    /// Non-negative attribute weights per class, `[C, A]`.
    pub attribute_mix: Tensor,
    /// Unit class latents, `[C, k]`.
    pub class_latents: Tensor,
    pub class_names: Vec<Vec<usize>>,
    /// Latent to flattened image grid, `[k, P·d_img]`.
    pub image_render: Tensor,
    /// Content-word scores per latent, `[words, k]`.
    pub text_render: Tensor,
    pub noise_sigma: f64,
    pub shifts: Vec<Shift>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[P, d_img]` patch grid.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(rng, &[rows, cols], 1.0);
    for r in 0..rows {
        normalize(t.row_mut(r));
    }
    t
}

fn sample_mix(rng: &mut Rng, attributes: usize) -> Vec<f64> {
    let picks = if attributes > 1 && rng.random_bool(0.5) { 2 } else { 1 };
    let mut ids: Vec<usize> = (0..attributes).collect();
    ids.shuffle(rng);
    let mut mix = vec![0.0; attributes];
    for &a in &ids[..picks] {
        mix[a] = rng.random_range(0.5..1.0);
    }
    mix
}

/// Builds a world from `seed` with the remaining settings at their defaults.
pub fn generate_world(
    seed: u64,
    classes: usize,
    attributes: usize,
    latent_dim: usize,
    noise_sigma: f64,
) -> Result<SynthWorld> {
    SynthWorld::generate(
        &WorldConfig {
            classes,
            attributes,
            latent_dim,
            noise_sigma,
            ..WorldConfig::default()
        },
        seed,
    )
}

impl SynthWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::WORLD);
        let (c, a, k) = (config.classes, config.attributes, config.latent_dim);
        let attribute_latents = unit_rows(&mut rng, a, k);
        let class_unique = unit_rows(&mut rng, c, k);
        let mut mix = Tensor::zeros(&[c, a]);
        for ci in 0..c {
            mix.row_mut(ci).copy_from_slice(&sample_mix(&mut rng, a));
        }
        let class_names = (0..c)
            .map(|ci| {
                let first = config.name_base() + 2 * ci;
                if rng.random_bool(0.5) {
                    vec![first, first + 1]
                } else {
                    vec![first]
                }
            })
            .collect();
        let image_render = gaussian(&mut rng, &[k, config.patches * config.patch_dim], 1.0);
        let text_render = gaussian(&mut rng, &[config.content_words(), k], 1.0);
        let mut world = SynthWorld {
            config: config.clone(),
            seed,
            attribute_latents,
            class_unique,
            class_latents: Tensor::zeros(&[c, k]),
            attribute_mix: mix,
            class_names,
            image_render,
            text_render,
            noise_sigma: config.noise_sigma,
            shifts: Vec::new(),
        };
        world.refresh_latents();
        Ok(world)
    }

    fn latent_for_mix(&self, class: usize, mix: &[f64]) -> Vec<f64> {
        let k = self.config.latent_dim;
        let mut z = vec![0.0; k];
        for (a, &w) in mix.iter().enumerate() {
            for (zi, &v) in z.iter_mut().zip(self.attribute_latents.row(a)) {
                *zi += w * v;
            }
        }
        for (zi, &u) in z.iter_mut().zip(self.class_unique.row(class)) {
            *zi += self.config.uniqueness * u;
        }
        normalize(&mut z);
        z
    }

    fn refresh_latents(&mut self) {
        for c in 0..self.num_classes() {
            let z = self.latent_for_mix(c, self.attribute_mix.row(c));
            self.class_latents.row_mut(c).copy_from_slice(&z);
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    pub fn num_attributes(&self) -> usize {
        self.config.attributes
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.config.patches, self.config.patch_dim]
    }

    pub fn class_name(&self, class: usize) -> &[usize] {
        &self.class_names[class]
    }

    /// Attributes with non-zero weight in the class's mix.
    pub fn class_attributes(&self, class: usize) -> Vec<usize> {
        self.attribute_mix
            .row(class)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, _)| a)
            .collect()
    }

    pub fn dominant_attribute(&self, class: usize) -> usize {
        autodiff::argmax(self.attribute_mix.row(class))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::invalid(format!(
                "class {class} is outside the world's {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Noise-free image of a class, `[P, d_img]`.
    pub fn render_image(&self, class: usize) -> Tensor {
        let k = self.config.latent_dim;
        let width = self.config.patches * self.config.patch_dim;
        let z = self.class_latents.row(class);
        let mut out = vec![0.0; width];
        for (i, &zi) in z.iter().enumerate().take(k) {
            for (o, &r) in out.iter_mut().zip(self.image_render.row(i)) {
                *o += zi * r;
            }
        }
        Tensor::new(vec![self.config.patches, self.config.patch_dim], out).expect("grid shape")
    }

    pub fn sample_image(&self, class: usize, rng: &mut Rng) -> Tensor {
        let mut img = self.render_image(class);
        for x in img.data_mut() {
            let n = rng::standard_normal(rng);
            *x += self.noise_sigma * n;
        }
        img
    }

    fn perturbed_mix(&self, class: usize, perturbation: f64, rng: &mut Rng) -> Vec<f64> {
        self.attribute_mix
            .row(class)
            .iter()
            .map(|&w| {
                if perturbation == 0.0 {
                    w
                } else {
                    let n = rng::standard_normal(rng);
                    (w + perturbation * n).max(0.0)
                }
            })
            .collect()
    }

    fn content_words_for(&self, z: &[f64]) -> Vec<usize> {
        let scores: Vec<f64> = (0..self.config.content_words())
            .map(|w| {
                self.text_render
                    .row(w)
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(self.config.words)
            .map(|w| self.config.content_base() + w)
            .collect()
    }

    fn sequence(
        &self,
        class: usize,
        perturbation: f64,
        with_attribute: bool,
        with_name: bool,
        rng: &mut Rng,
    ) -> Vec<usize> {
        let mix = self.perturbed_mix(class, perturbation, rng);
        let z = self.latent_for_mix(class, &mix);
        let mut tokens = self.content_words_for(&z);
        if with_attribute {
            tokens.push(self.config.attribute_token(autodiff::argmax(&mix)));
        }
        if with_name {
            tokens.extend_from_slice(&self.class_names[class]);
        }
        tokens
    }

    /// A pretraining caption. Start and end markers are added by the encoder.
    pub fn sample_caption(&self, class: usize, rng: &mut Rng) -> Vec<usize> {
        let attr = rng.random_bool(self.config.caption_attribute_prob);
        let name = rng.random_bool(self.config.caption_name_prob);
        self.sequence(class, self.config.caption_perturbation, attr, name, rng)
    }

    /// Noise-free caption: content words, dominant attribute word, class name.
    pub fn canonical_caption(&self, class: usize) -> Vec<usize> {
        let mut rng = rng::substream(0, "canonical");
        self.sequence(class, 0.0, true, true, &mut rng)
    }

    pub fn shifted(&self, shift: Shift, seed: u64) -> Result<SynthWorld> {
        shift_world(self, shift, seed)
    }

    pub fn summary(&self) -> WorldSummary {
        WorldSummary {
            seed: self.seed,
            classes: self.num_classes(),
            attributes: self.num_attributes(),
            latent_dim: self.config.latent_dim,
            noise_sigma: self.noise_sigma,
            vocab_size: self.vocab_size(),
            image_shape: self.image_shape(),
            shifts: self.shifts.iter().map(|s| s.to_string()).collect(),
            class_table: (0..self.num_classes())
                .map(|c| ClassSummary {
                    class: c,
                    name_tokens: self.class_names[c].clone(),
                    attribute_mix: self.attribute_mix.row(c).to_vec(),
                    canonical_caption: self.canonical_caption(c),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: usize,
    pub name_tokens: Vec<usize>,
    pub attribute_mix: Vec<f64>,
    pub canonical_caption: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorldSummary {
    pub seed: u64,
    pub classes: usize,
    pub attributes: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub vocab_size: usize,
    pub image_shape: [usize; 2],
    pub shifts: Vec<String>,
    pub class_table: Vec<ClassSummary>,
}

/// `n` samples per class, class-major. Labels depend only on `classes` and
/// `n`; the seed only moves the pixel noise.
pub fn sample_dataset(
    world: &SynthWorld,
    classes: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if classes.is_empty() {
        return Err(Error::invalid("cannot sample a dataset over an empty class set"));
    }
    for &c in classes {
        world.check_class(c)?;
    }
    let mut rng = rng::substream(seed, "dataset");
    let mut out = Vec::with_capacity(classes.len() * n);
    for &c in classes {
        for _ in 0..n {
            out.push(LabeledSample {
                image: world.sample_image(c, &mut rng),
                label: c,
            });
        }
    }
    Ok(out)
}

/// `n` description token sequences for `class`. Each perturbs the class's
/// attribute mix, lists the top content words of the perturbed latent, the
/// dominant attribute word, and ends with the class name.
pub fn generate_descriptions(
    world: &SynthWorld,
    class: usize,
    n: usize,
    perturbation: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    world.check_class(class)?;
    if n == 0 {
        return Err(Error::invalid("at least one description is required"));
    }
    if !(perturbation.is_finite() && perturbation >= 0.0) {
        return Err(Error::invalid("description perturbation must be non-negative"));
    }
    let mut rng = rng::substream(seed, &format!("descriptions.{class}"));
    Ok((0..n)
        .map(|_| world.sequence(class, perturbation, true, true, &mut rng))
        .collect())
}

/// Seeded partition of the classes; both sides are sorted.
pub fn base_novel_split(world: &SynthWorld, base_fraction: f64, seed: u64) -> Result<Split> {
    let c = world.num_classes();
    let n_base = (c as f64 * base_fraction).round() as usize;
    if !(base_fraction.is_finite()) || n_base == 0 || n_base >= c {
        return Err(Error::invalid(format!(
            "base fraction {base_fraction} leaves an empty side for {c} classes"
        )));
    }
    let mut ids: Vec<usize> = (0..c).collect();
    ids.shuffle(&mut rng::substream(seed, "split"));
    let mut base = ids[..n_base].to_vec();
    let mut novel = ids[n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok(Split { base, novel })
}

/// Copy of `world` under `shift`. Class names and vocabulary are unchanged;
/// identity shifts return an equal world apart from the shift log.
pub fn shift_world(world: &SynthWorld, shift: Shift, seed: u64) -> Result<SynthWorld> {
    shift.validate()?;
    let mut out = world.clone();
    out.shifts.push(shift);
    if shift.is_identity() {
        return Ok(out);
    }
    let mut rng = rng::substream(seed, &format!("shift.{}", shift.name()));
    match shift {
        Shift::RotateRenderMap(theta) => {
            let fresh = gaussian(&mut rng, world.image_render.shape(), 1.0);
            let (c, s) = (theta.cos(), theta.sin());
            for (o, &f) in out.image_render.data_mut().iter_mut().zip(fresh.data()) {
                *o = c * *o + s * f;
            }
        }
        Shift::RaiseNoise(factor) => out.noise_sigma *= factor,
        Shift::RemapAttributeMix(strength) => {
            for cls in 0..out.num_classes() {
                let fresh = sample_mix(&mut rng, out.num_attributes());
                for (w, f) in out.attribute_mix.row_mut(cls).iter_mut().zip(fresh) {
                    *w = (1.0 - strength) * *w + strength * f;
                }
            }
            out.refresh_latents();
        }
    }
    Ok(out)
}

type ClassPairs = Vec<(usize, usize)>;

/// Class pairs that share at least one attribute, and pairs that share none.
pub fn attribute_sharing_pairs(world: &SynthWorld) -> (ClassPairs, ClassPairs) {
    let sets: Vec<BTreeSet<usize>> = (0..world.num_classes())
        .map(|c| world.class_attributes(c).into_iter().collect())
        .collect();
    let mut shared = Vec::new();
    let mut disjoint = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i].is_disjoint(&sets[j]) {
                disjoint.push((i, j));
            } else {
                shared.push((i, j));
            }
        }
    }
    (shared, disjoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SynthWorld {
        generate_world(3, 8, 3, 12, 0.3).unwrap()
    }

    #[test]
    fn latents_are_unit_and_mixes_valid() {
        let w = world();
        for c in 0..w.num_classes() {
            let n: f64 = w.class_latents.row(c).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
            let attrs = w.class_attributes(c);
            assert!((1..=2).contains(&attrs.len()));
            for a in attrs {
                let m = w.attribute_mix.get2(c, a);
                assert!((0.5..1.0).contains(&m));
            }
        }
    }

    #[test]
    fn vocabulary_regions_do_not_overlap() {
        let w = world();
        let cfg = &w.config;
        let mut names: Vec<usize> = w.class_names.iter().flatten().copied().collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), w.class_names.iter().map(Vec::len).sum::<usize>());
        assert!(names.iter().all(|&t| t >= cfg.attribute_token(cfg.attributes)));
        assert!(names.iter().all(|&t| t < cfg.content_base()));
        let cap = w.canonical_caption(0);
        assert!(cap.iter().all(|&t| t >= FIRST_FREE_TOKEN && t < cfg.vocab_size));
    }

    #[test]
    fn zero_perturbation_descriptions_are_identical() {
        let w = world();
        let d = generate_descriptions(&w, 2, 4, 0.0, 9).unwrap();
        assert!(d.windows(2).all(|p| p[0] == p[1]));
        assert!(d[0].ends_with(w.class_name(2)));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let w = world();
        let s = base_novel_split(&w, 0.5, 1).unwrap();
        assert_eq!(s.base.len(), 4);
        assert_eq!(s.novel.len(), 4);
        let mut all = s.base.clone();
        all.extend(&s.novel);
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(base_novel_split(&w, 0.0, 1).is_err());
        assert!(base_novel_split(&w, 1.0, 1).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(generate_world(0, 8, 3, 12, -0.1).is_err());
        assert!(generate_world(0, 100, 3, 12, 0.1).is_err());
        let w = world();
        assert!(sample_dataset(&w, &[], 3, 0).is_err());
        assert!(sample_dataset(&w, &[99], 3, 0).is_err());
        assert!(Shift::parse("raise-noise:-1").is_err());
        assert!(Shift::parse("melt:1").is_err());
    }

    #[test]
    fn identity_shifts_leave_world_unchanged() {
        let w = world();
        for s in [
            Shift::RotateRenderMap(0.0),
            Shift::RaiseNoise(1.0),
            Shift::RemapAttributeMix(0.0),
        ] {
            let mut shifted = shift_world(&w, s, 5).unwrap();
            shifted.shifts.clear();
            assert_eq!(shifted, w);
        }
    }

    #[test]
    fn shift_parse_roundtrip() {
        let s = Shift::parse("rotate-render-map:0.5").unwrap();
        assert_eq!(s, Shift::RotateRenderMap(0.5));
        assert_eq!(Shift::parse(&s.to_string()).unwrap(), s);
    }
}
