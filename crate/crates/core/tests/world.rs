use std::collections::BTreeSet;
use std::sync::OnceLock;

use anchoropt::eval::{linear_probe_accuracy, zero_shot_accuracy};
use anchoropt::world::attribute_sharing_pairs;
use anchoropt::{
    base_novel_split, generate_descriptions, generate_world, pretrain_contrastive, sample_dataset,
    shift_world, EncoderConfig, EncoderStack, PretrainConfig, Shift, SynthWorld, WorldConfig,
};

fn small() -> SynthWorld {
    generate_world(11, 8, 3, 12, 0.3).unwrap()
}

/// Default world with its pretrained encoder, shared by the slower checks.
fn pretrained() -> &'static (SynthWorld, EncoderStack) {
    static CELL: OnceLock<(SynthWorld, EncoderStack)> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = SynthWorld::generate(&WorldConfig::default(), 0).unwrap();
        let (stack, _) =
            pretrain_contrastive(&world, &EncoderConfig::default(), &PretrainConfig::default(), 0)
                .unwrap();
        (world, stack)
    })
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn same_seed_gives_identical_worlds() {
    assert_eq!(small(), small());
    assert_ne!(small(), generate_world(12, 8, 3, 12, 0.3).unwrap());
}

#[test]
fn single_attribute_world_shares_one_direction() {
    let w = generate_world(4, 8, 1, 12, 0.3).unwrap();
    for c in 0..w.num_classes() {
        assert_eq!(w.class_attributes(c), vec![0]);
    }
    let (shared, disjoint) = attribute_sharing_pairs(&w);
    assert!(disjoint.is_empty());
    assert_eq!(shared.len(), 8 * 7 / 2);
}

#[test]
fn degenerate_counts_are_rejected() {
    assert!(generate_world(0, 3, 2, 12, 0.3).is_err());
    assert!(generate_world(0, 8, 0, 12, 0.3).is_err());
    assert!(generate_world(0, 8, 2, 3, 0.3).is_err());
}

#[test]
fn zero_noise_samples_are_identical() {
    let w = generate_world(5, 8, 3, 12, 0.0).unwrap();
    let s = sample_dataset(&w, &[2], 2, 7).unwrap();
    assert_eq!(s[0].image, s[1].image);
    assert_eq!(s[0].image, w.render_image(2));
}

#[test]
fn dataset_counts_and_label_order() {
    let w = generate_world(1, 16, 4, 12, 0.3).unwrap();
    let classes: Vec<usize> = (0..8).collect();
    let a = sample_dataset(&w, &classes, 16, 1).unwrap();
    let b = sample_dataset(&w, &classes, 16, 2).unwrap();
    assert_eq!(a.len(), 128);
    for c in &classes {
        assert_eq!(a.iter().filter(|s| s.label == *c).count(), 16);
    }
    let labels = |s: &[anchoropt::LabeledSample]| s.iter().map(|x| x.label).collect::<Vec<_>>();
    assert_eq!(labels(&a), labels(&b));
    assert!(a.iter().zip(&b).any(|(x, y)| x.image != y.image));
    assert_eq!(a[0].image.shape(), &w.image_shape()[..]);
}

#[test]
fn same_class_descriptions_overlap_more() {
    let w = SynthWorld::generate(&WorldConfig::default(), 3).unwrap();
    let sets: Vec<Vec<Vec<usize>>> = (0..w.num_classes())
        .map(|c| generate_descriptions(&w, c, 5, 0.3, 3).unwrap())
        .collect();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
    for (c, set) in sets.iter().enumerate() {
        assert_eq!(set.len(), 5);
        for d in set {
            assert!(d.ends_with(w.class_name(c)));
        }
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                within += jaccard(&set[i], &set[j]);
                nw += 1;
            }
        }
        for other in sets.iter().skip(c + 1) {
            for a in set {
                for b in other {
                    across += jaccard(a, b);
                    na += 1;
                }
            }
        }
    }
    assert!(within / nw as f64 > across / na as f64);
    assert!(generate_descriptions(&w, 0, 0, 0.3, 3).is_err());
}

#[test]
fn split_sizes_and_stability() {
    let w = small();
    let s = base_novel_split(&w, 0.5, 9).unwrap();
    assert_eq!((s.base.len(), s.novel.len()), (4, 4));
    assert_eq!(s, base_novel_split(&w, 0.5, 9).unwrap());
    assert!(s.base.iter().all(|c| !s.novel.contains(c)));
}

#[test]
fn shifts_preserve_classes_and_unit_noise_is_identity() {
    let w = small();
    let mut same = shift_world(&w, Shift::RaiseNoise(1.0), 2).unwrap();
    same.shifts.clear();
    assert_eq!(same, w);
    for s in ["rotate-render-map:0.7", "raise-noise:3", "remap-attribute-mix:0.5"] {
        let shifted = w.shifted(Shift::parse(s).unwrap(), 2).unwrap();
        assert_eq!(shifted.num_classes(), w.num_classes());
        assert_eq!(shifted.class_names, w.class_names);
        assert_ne!(shifted, w);
    }
    assert!(Shift::parse("shrink-render-map:1").is_err());
}

#[test]
fn attribute_sharing_raises_latent_cosine() {
    for seed in 0..3 {
        let w = SynthWorld::generate(&WorldConfig::default(), seed).unwrap();
        let (shared, disjoint) = attribute_sharing_pairs(&w);
        assert!(!shared.is_empty() && !disjoint.is_empty());
        let mean = |pairs: &[(usize, usize)]| {
            pairs
                .iter()
                .map(|&(i, j)| cosine(w.class_latents.row(i), w.class_latents.row(j)))
                .sum::<f64>()
                / pairs.len() as f64
        };
        assert!(mean(&shared) > mean(&disjoint), "seed {seed}");
    }
}

#[test]
fn linear_probe_learns_base_classes() {
    let (world, stack) = pretrained();
    let split = base_novel_split(world, 0.5, 0).unwrap();
    let acc = linear_probe_accuracy(stack, world, &split.base, 16, 25, 0).unwrap();
    assert!(acc >= 90.0, "linear probe {acc:.1}%");
}

#[test]
fn shifted_world_degrades_zero_shot() {
    let (world, stack) = pretrained();
    let classes: Vec<usize> = (0..world.num_classes()).collect();
    let source = zero_shot_accuracy(stack, world, &classes, 40, 1).unwrap();
    for s in [Shift::RaiseNoise(4.0), Shift::RotateRenderMap(1.0)] {
        let target = zero_shot_accuracy(stack, &world.shifted(s, 0).unwrap(), &classes, 40, 1).unwrap();
        assert!(target < source, "{s}: {target:.1} vs source {source:.1}");
    }
}
