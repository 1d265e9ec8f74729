//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The process exits 0 after printing the report so the rest of the suite
//! keeps running; set `ANOP_ACCEPTANCE_STRICT=1` to exit 1 when any
//! criterion fails, and `ANOP_ACCEPTANCE_ONLY=2,3` to run a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchoropt::ablation::AblationAxis;
use anchoropt::checkpoint;
use anchoropt::config::{load_config, parse_config, ExperimentConfig};
use anchoropt::eval::{
    evaluate_base_to_novel, evaluate_with_features, evaluation_samples, harmonic_mean,
    ClassFeatures,
};
use anchoropt::pipeline::{self, prepare};
use anchoropt::prompt::{hard_assignment, sample_gumbel_noise, sample_position_matrix, PositionForward};
use anchoropt::rng::{self, Rng};
use anchoropt::train::{
    adapt_loss, class_logits, ensemble_predict, forward_deep, normal_prompts, train_one_stage, train_stage1_anchor,
    train_stage2_adapt, KdDirection, Method, StateVars, TrainState,
};
use anchoropt::{EncoderStack, PredictionDistribution, SynthWorld};
use autodiff::{analytic_gradient, check_gradients, Graph, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let only = std::env::var("ANOP_ACCEPTANCE_ONLY").ok();
    let criteria: [(&str, &str, Check); 9] = [
        ("1", "metric fidelity", metric_fidelity),
        ("2", "gradient suite", gradient_suite),
        ("3", "position-matrix properties", position_matrix),
        ("4", "stage isolation", stage_isolation),
        ("5", "ensemble and routing", ensemble_routing),
        ("6", "base-to-novel direction", base_to_novel),
        ("7", "paradigm comparison", paradigm),
        ("8", "ablation machinery", ablation_machinery),
        ("9", "determinism", determinism),
    ];
    let (mut failed, mut ran) = (0, 0);
    for (id, name, check) in criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|x| x == id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        failed += usize::from(!outcome.pass);
        println!(
            "criterion {id} {name}: {} ({:.1}s) {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!("acceptance: {}/{ran} criteria pass", ran - failed);
    if failed > 0 && std::env::var("ANOP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn default_config(overrides: &[&str]) -> Result<ExperimentConfig, String> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Ok(load_config(&repo_root().join("configs/default.cfg"), &o).map_err(err)?.config)
}

/// Default world with small training budgets, for structural checks.
fn small_config(extra: &[&str]) -> Result<ExperimentConfig, String> {
    let mut o = vec![
        "run.name=acceptance",
        "run.seeds=0",
        "pretrain.min_steps=40",
        "pretrain.max_steps=40",
        "pretrain.target=0",
        "stage1.steps=12",
        "stage2.steps=12",
        "one_stage.steps=16",
        "eval.samples_per_class=6",
    ];
    o.extend_from_slice(extra);
    default_config(&o)
}

fn metric_fidelity() -> Result<Outcome, String> {
    let cases = [((82.69, 63.22), 71.66), ((81.24, 76.27), 78.68)];
    let mut worst: f64 = 0.0;
    let mut got = Vec::new();
    for ((b, n), want) in cases {
        let hm = harmonic_mean(b, n).map_err(err)?;
        worst = worst.max((hm - want).abs());
        got.push(format!("{hm:.4}"));
    }
    Ok(Outcome {
        pass: worst <= 0.01,
        detail: format!("hm = [{}], max deviation {worst:.4} (tolerance 0.01)", got.join(", ")),
    })
}

// ---------------------------------------------------------------------------
// Gradients

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn draw(seed: u64, shape: &[usize]) -> Tensor {
    rng::gaussian(&mut rng::substream(seed, "acceptance"), shape, 1.0)
}

/// Scalar reduction through fixed random weights.
fn project(g: &mut Graph, y: Var, seed: u64) -> autodiff::Result<Var> {
    let w = g.constant(draw(seed ^ 0xabc, g.shape(y)));
    let p = g.mul(y, w)?;
    g.mean(p)
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var, u64) -> autodiff::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul.lhs", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(draw(s + 1, &[4, 2]));
            g.matmul(x, b)
        })),
        ("matmul.rhs", vec![4, 2], Box::new(|g, x, s| {
            let a = g.constant(draw(s + 1, &[3, 4]));
            g.matmul(a, x)
        })),
        ("add.broadcast", vec![2, 3], Box::new(|g, x, s| {
            let b = g.constant(draw(s + 1, &[3]));
            g.add(x, b)
        })),
        ("add.broadcast_rhs", vec![3], Box::new(|g, x, s| {
            let a = g.constant(draw(s + 1, &[2, 3]));
            g.add(a, x)
        })),
        ("sub", vec![2, 3], Box::new(|g, x, s| {
            let b = g.constant(draw(s + 1, &[2, 3]));
            g.sub(b, x)
        })),
        ("mul", vec![2, 3], Box::new(|g, x, s| {
            let b = g.constant(draw(s + 1, &[2, 3]));
            let y = g.mul(x, b)?;
            g.mul(y, x)
        })),
        ("scale", vec![5], Box::new(|g, x, _| g.scale(x, -2.5))),
        ("concat", vec![2, 3], Box::new(|g, x, s| {
            let b = g.constant(draw(s + 1, &[1, 3]));
            g.concat(&[b, x, x], 0)
        })),
        ("slice", vec![3, 4], Box::new(|g, x, _| g.slice(x, 1, 1, 3))),
        ("gather_rows", vec![4, 3], Box::new(|g, x, _| g.gather_rows(x, &[2, 0, 2, 3]))),
        ("layer_norm.x", vec![2, 5], Box::new(|g, x, s| {
            let gain = g.constant(draw(s + 1, &[5]));
            let bias = g.constant(draw(s + 2, &[5]));
            g.layer_norm(x, gain, bias)
        })),
        ("layer_norm.gain", vec![5], Box::new(|g, x, s| {
            let input = g.constant(draw(s + 1, &[2, 5]));
            let bias = g.constant(draw(s + 2, &[5]));
            g.layer_norm(input, x, bias)
        })),
        ("softmax.t0.5", vec![2, 4], Box::new(|g, x, _| g.softmax(x, 0.5))),
        ("log_softmax.t2", vec![2, 4], Box::new(|g, x, _| g.log_softmax(x, 2.0))),
        ("gelu", vec![6], Box::new(|g, x, _| g.gelu(x))),
        ("l2_normalize", vec![2, 4], Box::new(|g, x, _| g.l2_normalize(x))),
        ("mean_axis0", vec![3, 2], Box::new(|g, x, _| g.mean_axis(x, 0))),
        ("mse", vec![2, 3], Box::new(|g, x, s| {
            let t = g.constant(draw(s + 1, &[2, 3]));
            g.mse(x, t)
        })),
        ("cross_entropy", vec![3, 4], Box::new(|g, x, _| g.cross_entropy(x, &[1, 3, 0]))),
        ("kl.student", vec![2, 4], Box::new(|g, x, s| {
            let q = g.constant(draw(s + 1, &[2, 4]));
            let q = g.softmax(q, 1.0)?;
            let p = g.softmax(x, 1.0)?;
            g.kl_divergence(q, p)
        })),
        ("kl.teacher", vec![2, 4], Box::new(|g, x, s| {
            let p = g.constant(draw(s + 1, &[2, 4]));
            let p = g.softmax(p, 1.0)?;
            let q = g.softmax(x, 1.0)?;
            g.kl_divergence(q, p)
        })),
        ("gumbel_softmax.soft", vec![3, 3], Box::new(|g, x, s| {
            let noise = draw(s + 1, &[3, 3]);
            g.gumbel_softmax(x, noise, 0.7, false)
        })),
        ("transpose", vec![2, 3], Box::new(|g, x, _| g.transpose(x))),
        ("reshape", vec![2, 3], Box::new(|g, x, _| g.reshape(x, &[3, 2]))),
    ]
}

/// Tiny world, frozen random encoder and AnchorOPT state for the composed loss.
struct LossFixture {
    world: SynthWorld,
    stack: EncoderStack,
    state: TrainState,
    classes: Vec<usize>,
    images: Tensor,
    targets: Vec<usize>,
    anchor_logits: Tensor,
    noise: Tensor,
    cfg: ExperimentConfig,
}

impl LossFixture {
    fn new(seed: u64, direction: KdDirection) -> Result<Self, String> {
        let dir = format!("train.kd_direction={}", direction.name());
        let cfg = parse_config(
            "run.name = gradcheck",
            &[
                "world.classes=4",
                "world.attributes=2",
                "world.latent_dim=4",
                "encoder.token_dim=8",
                "encoder.embed_dim=6",
                "encoder.text_blocks=2",
                "encoder.image_width=8",
                "encoder.image_blocks=1",
                "encoder.mlp_ratio=2",
                "prompt.soft_len=2",
                &dir,
            ]
            .map(String::from),
        )
        .map_err(err)?
        .config;
        let world = SynthWorld::generate(&cfg.world, seed).map_err(err)?;
        let mut stack = EncoderStack::new(cfg.encoder.clone(), seed).map_err(err)?;
        stack.freeze();
        let mut state = TrainState::new(Method::AnchorOpt, &cfg.train.prompt, &stack, seed).map_err(err)?;
        state.anchors = draw(seed + 7, state.anchors.shape());
        state.position_logits = draw(seed + 8, state.position_logits.shape());
        let classes = vec![0, 1, 2];
        let samples = anchoropt::sample_dataset(&world, &classes, 1, seed).map_err(err)?;
        let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let images = stack.encode_images(&imgs).map_err(err)?;
        let anchor = anchoropt::train::anchor_class_features(&stack, &world, &state, &classes).map_err(err)?;
        let anchor_logits = class_logits(&images, &anchor, stack.logit_scale()).map_err(err)?;
        let k = state.position_logits.rows();
        Ok(Self {
            world,
            stack,
            classes,
            targets: vec![0, 1, 2],
            images,
            anchor_logits,
            noise: sample_gumbel_noise(&[k, k], &mut rng::substream(seed, "noise")),
            state,
            cfg,
        })
    }

    /// Trainer objective with `x` standing in for the soft tokens or the
    /// position logits.
    fn loss(&self, g: &mut Graph, x: Var, wrt_soft: bool) -> autodiff::Result<Var> {
        let (enc, vars, realized, img) = self.bind(g, x, wrt_soft)?;
        let out = adapt_loss(
            g,
            &enc,
            &self.world,
            &self.state,
            &vars,
            Some(realized),
            &self.classes,
            img,
            &self.targets,
            Some(self.anchor_logits.clone()),
            &self.cfg.train,
        )
        .map_err(to_autodiff)?;
        Ok(out.loss)
    }

    fn bind<'s>(
        &'s self,
        g: &mut Graph,
        x: Var,
        wrt_soft: bool,
    ) -> autodiff::Result<(anchoropt::encoder::BoundEncoder<'s>, StateVars, Var, Var)> {
        let enc = self.stack.bind(g, false).map_err(to_autodiff)?;
        let mut vars = StateVars::bind(g, &self.state, false, false);
        if wrt_soft {
            vars.soft = x;
        } else {
            vars.position_logits = x;
        }
        let tau = self.cfg.train.prompt.gumbel_tau;
        let realized = g.gumbel_softmax(vars.position_logits, self.noise.clone(), tau, false)?;
        let img = g.constant(self.images.clone());
        Ok((enc, vars, realized, img))
    }

    /// Normal-prompt logits `[n, C]`.
    fn logits(&self, g: &mut Graph, x: Var, wrt_soft: bool) -> autodiff::Result<Var> {
        let (enc, vars, realized, img) = self.bind(g, x, wrt_soft)?;
        let prompts = normal_prompts(g, &enc, &self.world, &self.state, &vars, &self.classes, Some(realized))
            .map_err(to_autodiff)?;
        let text = forward_deep(g, &enc, &prompts, &vars.deep_soft).map_err(to_autodiff)?;
        enc.logits(g, img, text).map_err(to_autodiff)
    }

    /// Ensemble teacher evaluated at `point`.
    fn teacher_at(&self, point: &Tensor, wrt_soft: bool) -> Result<Tensor, String> {
        let mut g = Graph::new();
        let x = g.constant(point.clone());
        let l = self.logits(&mut g, x, wrt_soft).map_err(err)?;
        let q = g.softmax(l, 1.0).map_err(err)?;
        let a = g.constant(self.anchor_logits.clone());
        let qa = g.softmax(a, 1.0).map_err(err)?;
        let sum = g.add(q, qa).map_err(err)?;
        let t = g.scale(sum, 0.5).map_err(err)?;
        Ok(g.value(t).clone())
    }

    /// The same objective written out with the teacher as a constant: the
    /// function whose derivative the detached teacher defines.
    fn frozen_teacher_loss(&self, g: &mut Graph, x: Var, wrt_soft: bool, teacher: &Tensor) -> autodiff::Result<Var> {
        let logits = self.logits(g, x, wrt_soft)?;
        let ce = g.cross_entropy(logits, &self.targets)?;
        let q = g.softmax(logits, 1.0)?;
        let t = g.constant(teacher.clone());
        let kd = match self.cfg.train.kd_direction {
            KdDirection::TeacherFirst => g.kl_divergence(t, q)?,
            KdDirection::StudentFirst => g.kl_divergence(q, t)?,
        };
        let ce = g.scale(ce, self.cfg.train.lambda_ce)?;
        let kd = g.scale(kd, self.cfg.train.lambda_kd)?;
        g.add(ce, kd)
    }
}

fn to_autodiff(e: anchoropt::Error) -> autodiff::AutodiffError {
    match e {
        anchoropt::Error::Autodiff(inner) => inner,
        other => autodiff::AutodiffError::InvalidTensor(other.to_string()),
    }
}

fn gradient_suite() -> Result<Outcome, String> {
    let mut cases = 0;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: String, e: f64| {
        cases += 1;
        if e > worst.0 || !e.is_finite() {
            worst = (e, name);
        }
    };
    for (name, shape, f) in op_cases() {
        for s in 0..2u64 {
            let point = draw(100 + s, &shape);
            let e = check_gradients(|g, x| {
                let y = f(g, x, s)?;
                project(g, y, s)
            }, &point, FD_STEP)
            .map_err(err)?;
            note(format!("{name}#{s}"), e);
        }
    }
    // The detached branch contributes nothing to the gradient.
    let point = draw(5, &[2, 3]);
    let grad = analytic_gradient(&|g: &mut Graph, x: Var| {
        let d = g.stop_gradient(x)?;
        let y = g.mul(d, x)?;
        g.mean(y)
    }, &point)
    .map_err(err)?;
    let want: Vec<f64> = point.data().iter().map(|v| v / 6.0).collect();
    let sg_err = grad.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    note("stop_gradient".into(), sg_err);

    for seed in 0..8u64 {
        let dir = if seed % 2 == 0 { KdDirection::TeacherFirst } else { KdDirection::StudentFirst };
        let fx = LossFixture::new(seed, dir)?;
        for wrt_soft in [true, false] {
            let point = if wrt_soft { fx.state.soft.clone() } else { fx.state.position_logits.clone() };
            let what = if wrt_soft { "soft" } else { "position" };
            let teacher = fx.teacher_at(&point, wrt_soft)?;
            let frozen = |g: &mut Graph, x: Var| fx.frozen_teacher_loss(g, x, wrt_soft, &teacher);
            let e = check_gradients(frozen, &point, FD_STEP).map_err(err)?;
            note(format!("composed.{what}#{seed}"), e);
            // The trainer's graph must produce exactly that gradient.
            let trained = analytic_gradient(&|g: &mut Graph, x: Var| fx.loss(g, x, wrt_soft), &point).map_err(err)?;
            let reference = analytic_gradient(&frozen, &point).map_err(err)?;
            let gap = trained
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            note(format!("composed.{what}.trainer#{seed}"), gap);
        }
    }
    Ok(Outcome {
        pass: cases >= 25 && worst.0 < FD_TOL,
        detail: format!(
            "{cases} cases, worst relative error {:.2e} at {} (tolerance {FD_TOL:.0e})",
            worst.0, worst.1
        ),
    })
}

// ---------------------------------------------------------------------------
// Position matrix

/// Rows whose top-two perturbed logits are closer than this are near-ties
/// for which no finite temperature gives a one-hot softmax.
const TIE_MARGIN: f64 = 1e-2;

fn realize(logits: &Tensor, tau: f64, seed: u64, forward: PositionForward) -> Result<Tensor, String> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let mut r = rng::substream(seed, "realize");
    let v = sample_position_matrix(&mut g, l, tau, &mut r, true, forward).map_err(err)?;
    Ok(g.value(v).clone())
}

fn position_matrix() -> Result<Outcome, String> {
    let taus = [0.1, 0.5, 1.0, 2.0, 4.0];
    let mut draws = rng::substream(3, "position-matrices");
    let (mut one_hot_fail, mut sum_dev, mut st_mismatch, mut n) = (0, 0.0f64, 0, 0);
    for i in 0..1000u64 {
        let tau = taus[(i % 5) as usize];
        let k = 2 + (i % 7) as usize;
        let logits = rng::gaussian(&mut draws, &[k, k], 2.0);
        let hard = realize(&logits, tau, i, PositionForward::HardStraightThrough)?;
        let soft = realize(&logits, tau, i, PositionForward::Soft)?;
        // Pure hard forward: one-hot argmax of the same perturbed logits.
        let noise = sample_gumbel_noise(&[k, k], &mut rng::substream(i, "realize"));
        let mut perturbed = logits.clone();
        for (p, z) in perturbed.data_mut().iter_mut().zip(noise.data()) {
            *p += z;
        }
        let pure = hard_assignment(&perturbed);
        for r in 0..k {
            let row = hard.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                one_hot_fail += 1;
            }
            sum_dev = sum_dev.max((soft.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let same_bits = hard.data().iter().zip(pure.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        st_mismatch += usize::from(!same_bits);
        n += 1;
    }
    // Near-zero temperature: the soft rows collapse onto the hard ones.
    let (mut low_dev, mut excluded, mut rows) = (0.0f64, 0, 0);
    for i in 0..200u64 {
        let k = 2 + (i % 7) as usize;
        let logits = rng::gaussian(&mut draws, &[k, k], 2.0);
        let hard = realize(&logits, 1e-4, 5000 + i, PositionForward::HardStraightThrough)?;
        let soft = realize(&logits, 1e-4, 5000 + i, PositionForward::Soft)?;
        let noise = sample_gumbel_noise(&[k, k], &mut rng::substream(5000 + i, "realize"));
        for r in 0..k {
            let mut z: Vec<f64> = logits.row(r).iter().zip(noise.row(r)).map(|(a, b)| a + b).collect();
            z.sort_by(|a, b| b.total_cmp(a));
            rows += 1;
            if z[0] - z[1] < TIE_MARGIN {
                excluded += 1;
                continue;
            }
            let d = hard.row(r).iter().zip(soft.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            low_dev = low_dev.max(d);
        }
    }
    Ok(Outcome {
        pass: one_hot_fail == 0 && sum_dev <= 1e-9 && st_mismatch == 0 && low_dev < 1e-6,
        detail: format!(
            "{n} matrices: {one_hot_fail} non-one-hot rows, max |soft row sum - 1| {sum_dev:.1e}, \
             {st_mismatch} straight-through/hard mismatches; tau 1e-4: max soft/hard deviation \
             {low_dev:.1e} over {} rows ({excluded} near-tie rows with margin < {TIE_MARGIN} excluded)",
            rows - excluded
        ),
    })
}

// ---------------------------------------------------------------------------
// Training structure

fn stage_isolation() -> Result<Outcome, String> {
    let cfg = small_config(&[])?;
    let p = prepare(&cfg, 0, None).map_err(err)?;
    let ctx = p.context();
    let enc0 = p.stack.digest();
    let mut problems = Vec::new();

    let mut s = TrainState::new(Method::AnchorOpt, &cfg.train.prompt, &p.stack, 0).map_err(err)?;
    let (a0, d0) = (s.anchor_digest(), s.adapt_digest());
    train_stage1_anchor(&mut s, &ctx, &p.targets, &cfg.train).map_err(err)?;
    let (a1, d1) = (s.anchor_digest(), s.adapt_digest());
    if a1 == a0 {
        problems.push("stage I left the anchors unchanged".to_string());
    }
    if d1 != d0 {
        problems.push("stage I changed soft tokens or position logits".into());
    }
    train_stage2_adapt(&mut s, &ctx, &p.train, &cfg.train).map_err(err)?;
    let (a2, d2) = (s.anchor_digest(), s.adapt_digest());
    if a2 != a1 {
        problems.push("stage II changed the anchors".into());
    }
    if d2 == d1 {
        problems.push("stage II left the soft tokens unchanged".into());
    }
    let before_eval = s.digest();
    evaluate_base_to_novel(&s, &p.stack, &p.world, &p.split, &cfg.eval, 0).map_err(err)?;
    if s.digest() != before_eval {
        problems.push("evaluation changed the prompt state".into());
    }
    let mut coop = TrainState::new(Method::CoOp, &cfg.train.prompt, &p.stack, 0).map_err(err)?;
    train_stage2_adapt(&mut coop, &ctx, &p.train, &cfg.train).map_err(err)?;
    let mut one = TrainState::new(Method::AnchorOpt, &cfg.train.prompt, &p.stack, 0).map_err(err)?;
    train_one_stage(&mut one, &ctx, &p.targets, &p.train, &cfg.train).map_err(err)?;
    if p.stack.digest() != enc0 || !p.stack.is_frozen() {
        problems.push("encoder parameters changed after pretraining".into());
    }
    Ok(Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "anchors {}..{} after stage I, soft/position {}..{} after stage II, encoder {} unchanged",
                &a0[..8],
                &a1[..8],
                &d1[..8],
                &d2[..8],
                &enc0[..8]
            )
        } else {
            problems.join("; ")
        },
    })
}

fn random_distribution(r: &mut Rng, classes: &[usize]) -> PredictionDistribution {
    let logits = rng::gaussian(r, &[classes.len()], 2.0);
    PredictionDistribution {
        classes: classes.to_vec(),
        probs: anchoropt::encoder::softmax(logits.data()),
    }
}

fn ensemble_routing() -> Result<Outcome, String> {
    let mut r = rng::substream(11, "ensemble");
    let classes = [2, 5, 7, 9, 11];
    let mut violations = 0;
    for _ in 0..500 {
        let a = random_distribution(&mut r, &classes);
        let b = random_distribution(&mut r, &classes);
        if ensemble_predict(&a, &a).map_err(err)? != a {
            violations += 1;
        }
        let m = ensemble_predict(&a, &b).map_err(err)?;
        let exact = m.probs.iter().zip(a.probs.iter().zip(&b.probs)).all(|(x, (p, q))| *x == 0.5 * (p + q));
        if !exact || m.classes != a.classes || (m.probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            violations += 1;
        }
    }

    let cfg = small_config(&[])?;
    let p = prepare(&cfg, 0, None).map_err(err)?;
    let ctx = p.context();
    let mut s = TrainState::new(Method::AnchorOpt, &cfg.train.prompt, &p.stack, 0).map_err(err)?;
    train_stage1_anchor(&mut s, &ctx, &p.targets, &cfg.train).map_err(err)?;
    train_stage2_adapt(&mut s, &ctx, &p.train, &cfg.train).map_err(err)?;
    let features = ClassFeatures::compute(&s, &p.stack, &p.world, &p.split, &cfg.eval).map_err(err)?;
    let (bs, ns) = evaluation_samples(&p.world, &p.split, 10, 0).map_err(err)?;
    let (base, novel) = evaluate_with_features(&features, &p.stack, &p.split, &bs, &ns).map_err(err)?;
    let mut corrupted = features.clone();
    let anchors = corrupted.novel_anchor.as_mut().ok_or("no anchor features")?;
    for f in anchors.iter_mut() {
        let noise = rng::gaussian(&mut r, &[f.0.len()], 1.0);
        let norm = noise.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        f.0 = noise.data().iter().map(|v| v / norm).collect();
    }
    let (base_c, novel_c) = evaluate_with_features(&corrupted, &p.stack, &p.split, &bs, &ns).map_err(err)?;
    let base_same = base == base_c;
    let novel_moved = novel.iter().zip(&novel_c).any(|(a, b)| a.anchor != b.anchor);
    Ok(Outcome {
        pass: violations == 0 && base_same && novel_moved,
        detail: format!(
            "500 distribution pairs, {violations} violations; corrupting anchor features: \
             base predictions {} ({} samples), novel anchor route {}",
            if base_same { "identical" } else { "CHANGED" },
            base.len(),
            if novel_moved { "changed" } else { "unchanged" }
        ),
    })
}

// ---------------------------------------------------------------------------
// End-to-end

const FIVE_SEEDS: &str = "run.seeds=0,1,2,3,4";

fn temp() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(err)
}

fn base_to_novel() -> Result<Outcome, String> {
    let cfg = default_config(&[FIVE_SEEDS])?;
    let dir = temp()?;
    let start = Instant::now();
    let cmp = pipeline::compare(&cfg, dir.path()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let gate = cmp.gate().ok_or("comparison lacks a method")?;
    print!("{}", cmp.markdown());
    Ok(Outcome {
        pass: gate.passed() && secs < 300.0,
        detail: format!(
            "(a) novel {:.2} vs CoOp {:.2}: {}; (b) HM {:.2} vs CoOp {:.2} - 0.5: {}; {secs:.0}s of 300s",
            gate.anchor_novel,
            gate.coop_novel,
            if gate.novel_improves { "pass" } else { "fail" },
            gate.anchor_hm,
            gate.coop_hm,
            if gate.hm_holds { "pass" } else { "fail" },
        ),
    })
}

fn paradigm() -> Result<Outcome, String> {
    let mut hm = BTreeMap::new();
    for paradigm in ["two_stage", "one_stage"] {
        let cfg = default_config(&[
            FIVE_SEEDS,
            &format!("run.paradigm={paradigm}"),
            "run.methods=anchoropt",
            "run.checkpoints=false",
            "eval.shifts=none",
        ])?;
        let dir = temp()?;
        let rows = pipeline::run_experiment(&cfg, dir.path()).map_err(err)?;
        let mean = rows.iter().map(|r| r.hm).sum::<f64>() / rows.len() as f64;
        hm.insert(paradigm, (mean, rows.len()));
    }
    let (two, n2) = hm["two_stage"];
    let (one, n1) = hm["one_stage"];
    Ok(Outcome {
        pass: n1 == 5 && n2 == 5 && two >= one - 0.5,
        detail: format!("two-stage mean HM {two:.2}, one-stage {one:.2} (gate: two >= one - 0.5)"),
    })
}

fn ablation_machinery() -> Result<Outcome, String> {
    let cfg = small_config(&["run.seeds=0,1"])?;
    let mut problems = Vec::new();
    let mut cells = 0;
    for axis in AblationAxis::ALL {
        let dir = temp()?;
        let ab = pipeline::ablate(&cfg, axis, dir.path()).map_err(err)?;
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).map_err(err)?)
                .map_err(err)?;
        let wired = manifest["cells"].as_array().ok_or("manifest has no cells")?;
        let values: Vec<&str> = wired.iter().filter_map(|c| c["value"].as_str()).collect();
        if values != axis.values() {
            problems.push(format!("{}: cells {values:?}", axis.name()));
        }
        if ab.rows.len() != axis.values().len() * 2 {
            problems.push(format!("{}: {} metric rows", axis.name(), ab.rows.len()));
        }
        for c in wired {
            cells += 1;
            let v = c["value"].as_str().unwrap_or_default();
            let ok = match axis {
                AblationAxis::Preposition => c["preposition"] == v,
                AblationAxis::AnchorLength => c["anchor_len"].as_u64().map(|n| n.to_string()) == Some(v.into()),
                AblationAxis::Arrangement => {
                    c["arrangement"] == v && c["uses_position_matrix"] == (v == "matrix")
                }
                AblationAxis::Kd => {
                    let want = if v == "off" { 0.0 } else { cfg.train.lambda_kd };
                    c["lambda_kd"].as_f64() == Some(want)
                }
                AblationAxis::GumbelTau => c["gumbel_tau"].as_f64() == v.parse().ok(),
                AblationAxis::Ensemble => c["ensemble"] == (v == "on"),
                AblationAxis::Paradigm => c["paradigm"] == v,
            };
            if !ok {
                problems.push(format!("{}={v}: wiring {c}", axis.name()));
            }
            // What actually ran: anchor rows in the checkpoint, position dumps.
            let id = pipeline::run_id(&cfg, &format!("{}={v}", axis.name()), 0);
            let positions = dir.path().join(format!("positions/{id}.json")).exists();
            if positions != (c["uses_position_matrix"] == true) {
                problems.push(format!("{}={v}: position dump present = {positions}", axis.name()));
            }
            let stage = if c["paradigm"] == "one_stage" { "one_stage" } else { "stage2" };
            let state = checkpoint::load_state(&dir.path().join(format!("checkpoints/{id}.{stage}.anop")))
                .map_err(err)?;
            if Some(state.anchors.rows() as u64) != c["anchor_len"].as_u64() {
                problems.push(format!("{}={v}: checkpoint has {} anchors", axis.name(), state.anchors.rows()));
            }
        }
        if axis == AblationAxis::Kd {
            let off = ab.rows.iter().find(|r| r.value == "off").ok_or("kd=off row missing")?;
            let on = ab.rows.iter().find(|r| r.value == "on").ok_or("kd=on row missing")?;
            if off.ce_final == on.ce_final {
                problems.push("kd on/off trained identically".into());
            }
        }
    }
    Ok(Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("7 axes, {cells} cells wired as configured (kd=off at lambda 0, fixed arrangements bypass the matrix)")
        } else {
            problems.join("; ")
        },
    })
}

fn strip_runtime(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn files(root: &Path, sub: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(root.join(sub)).map_err(err)? {
        let e = e.map_err(err)?;
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(err)?);
    }
    Ok(out)
}

fn determinism() -> Result<Outcome, String> {
    let cfg = small_config(&["run.seeds=0,1", "run.methods=coop,atprompt,anchoropt"])?;
    let (a, b) = (temp()?, temp()?);
    pipeline::run_experiment(&cfg, a.path()).map_err(err)?;
    pipeline::run_experiment(&cfg, b.path()).map_err(err)?;
    let read = |d: &Path| std::fs::read_to_string(d.join("metrics.csv")).map_err(err);
    let csv_same = strip_runtime(&read(a.path())?) == strip_runtime(&read(b.path())?);
    let (ca, cb) = (files(a.path(), "checkpoints")?, files(b.path(), "checkpoints")?);
    let (pa, pb) = (files(a.path(), "positions")?, files(b.path(), "positions")?);
    let (ea, eb) = (files(a.path(), "cache")?, files(b.path(), "cache")?);
    let ck_same = ca == cb && !ca.is_empty();
    Ok(Outcome {
        pass: csv_same && ck_same && pa == pb && ea == eb,
        detail: format!(
            "metrics CSV {} without the runtime column; {} prompt checkpoints, {} encoder checkpoints, {} position dumps {}",
            if csv_same { "identical" } else { "DIFFERS" },
            ca.len(),
            ea.len(),
            pa.len(),
            if ck_same && pa == pb && ea == eb { "byte-identical" } else { "DIFFER" }
        ),
    })
}
