//! `anchoropt`: experiment runner for anchor-token prompt learning on a
//! synthetic world.

use std::path::PathBuf;
use std::process::ExitCode;

use anchoropt::ablation::AblationAxis;
use anchoropt::checkpoint;
use anchoropt::config::{load_config, parse_config, ExperimentConfig};
use anchoropt::eval::{evaluate_base_to_novel, evaluate_cross_world, MetricsRecord};
use anchoropt::pipeline::{self, prepare, OutputDir, Prepared};
use anchoropt::train::{
    train_stage1_anchor, train_stage2_adapt, Method, Paradigm, Stage, TrainState,
};
use anchoropt::{Error, SynthWorld};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anchoropt", version, about = "Anchor-token prompt learning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over `run.out`.
    #[arg(long, global = true, env = "ANOP_OUT")]
    out: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Run name used without a config file, shared so staged commands chain.
const ADHOC_NAME: &str = "adhoc";

#[derive(Subcommand)]
enum Command {
    /// Full pipeline for the configured methods and seeds.
    Run,
    /// Contrastive pretraining of the encoder stack (cached per seed).
    Pretrain,
    /// Stage I: fit anchor tokens to description features.
    TrainAnchor,
    /// Stage II: adapt soft tokens and the position matrix on labeled shots.
    Adapt {
        #[arg(long, default_value = "anchoropt", value_parser = parse_method)]
        method: Method,
        /// Stage I checkpoint to start from (anchor method only).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Alternating anchor and adaptation steps in a single stage.
    OneStage,
    /// Evaluate a prompt checkpoint base-to-novel and on configured shifts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One-factor ablation grid for the anchor method.
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
    },
    /// All methods side by side over seeds 0..N.
    Compare {
        #[arg(long)]
        seeds: Option<u64>,
        /// Exit with status 4 unless the anchor method improves novel
        /// accuracy without losing more than 0.5 HM.
        #[arg(long = "assert")]
        gate: bool,
    },
    /// Print the generated world: classes, attributes, per-class mixtures.
    DumpWorld {
        #[arg(long)]
        json: bool,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    AblationAxis::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("acceptance gate failed: {0}")]
    Gate(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config { .. } | Error::MissingKey(_)) => 2,
            Failure::Core(_) => 3,
            Failure::Gate(_) => 4,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("run.seeds={seed}"));
    }
    if let Command::Compare { seeds: Some(n), .. } = &cli.command {
        if *n == 0 {
            return Err(Error::Config { line: 0, message: "--seeds must be at least 1".into() }.into());
        }
        let list: Vec<String> = (0..*n).map(|s| s.to_string()).collect();
        overrides.push(format!("run.seeds={}", list.join(",")));
    }
    let cfg = match &cli.common.config {
        Some(path) => load_config(path, &overrides)?.config,
        None => parse_config(&format!("run.name = {ADHOC_NAME}"), &overrides)?.config,
    };
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out));

    match cli.command {
        Command::Run => {
            let rows = pipeline::run_experiment(&cfg, &out)?;
            println!("| run | axis | value | base | novel | hm |\n|---|---|---|---|---|---|");
            for r in rows {
                println!(
                    "| {} | {} | {} | {:.2} | {:.2} | {:.2} |",
                    r.run_id, r.axis, r.value, r.base_acc, r.novel_acc, r.hm
                );
            }
            println!("artifacts in {}", out.display());
        }
        Command::Pretrain => {
            let dir = OutputDir::create(&out)?;
            for &seed in &cfg.run.seeds {
                let p = prepare(&cfg, seed, Some(&dir.cache()))?;
                println!(
                    "seed {seed}: {} steps, held-out top-1 {:.3}, encoder {}{}",
                    p.pretrain.steps,
                    p.pretrain.top1,
                    &p.pretrain.encoder_digest[..16],
                    if p.pretrain.cached { " (cached)" } else { "" }
                );
            }
        }
        Command::TrainAnchor => {
            let dir = OutputDir::create(&out)?;
            for &seed in &cfg.run.seeds {
                let p = prepare(&cfg, seed, Some(&dir.cache()))?;
                let mut state = TrainState::new(Method::AnchorOpt, &cfg.train.prompt, &p.stack, seed)?;
                let trace = train_stage1_anchor(&mut state, &p.context(), &p.targets, &cfg.train)?;
                let path = save(&dir, &cfg, Method::AnchorOpt, &state, seed)?;
                println!(
                    "seed {seed}: anchor mse {:.5} -> {:.5}, saved {}",
                    trace.first().copied().unwrap_or(f64::NAN),
                    trace.last().copied().unwrap_or(f64::NAN),
                    path.display()
                );
            }
        }
        Command::Adapt { method, from } => {
            let dir = OutputDir::create(&out)?;
            for &seed in &cfg.run.seeds {
                let p = prepare(&cfg, seed, Some(&dir.cache()))?;
                let mut state = if method.uses_anchors() {
                    let path = match &from {
                        Some(path) => path.clone(),
                        None => dir.checkpoint_path(&pipeline::run_id(&cfg, method.name(), seed), Stage::Stage1)?,
                    };
                    if !path.exists() {
                        return Err(Error::invalid(format!(
                            "no stage I checkpoint at {}; run `train-anchor` first or pass --from",
                            path.display()
                        ))
                        .into());
                    }
                    checkpoint::load_state(&path)?
                } else {
                    TrainState::new(method, &cfg.train.prompt, &p.stack, seed)?
                };
                let trace = train_stage2_adapt(&mut state, &p.context(), &p.train, &cfg.train)?;
                let path = save(&dir, &cfg, method, &state, seed)?;
                let rec = evaluate_base_to_novel(&state, &p.stack, &p.world, &p.split, &cfg.eval, seed)?.record;
                if let Some(last) = trace.last() {
                    println!("seed {seed}: final ce {:.4}, kd {:.4}", last.ce, last.kd);
                }
                report(&format!("{} seed {seed}", method.label()), &rec);
                println!("saved {}", path.display());
            }
        }
        Command::OneStage => {
            let dir = OutputDir::create(&out)?;
            for &seed in &cfg.run.seeds {
                let p = prepare(&cfg, seed, Some(&dir.cache()))?;
                let trained = pipeline::train_method(&p, &cfg, Method::AnchorOpt, Paradigm::OneStage, &mut |_| Ok(()))?;
                let path = save(&dir, &cfg, Method::AnchorOpt, &trained.state, seed)?;
                let rec = evaluate_base_to_novel(&trained.state, &p.stack, &p.world, &p.split, &cfg.eval, seed)?.record;
                report(&format!("one-stage seed {seed}"), &rec);
                println!("saved {}", path.display());
            }
        }
        Command::Eval { checkpoint: path } => {
            let dir = OutputDir::create(&out)?;
            let ck = checkpoint::Checkpoint::load(&path)?;
            let state = checkpoint::state_from_checkpoint(&ck)?;
            let seed = ck.world_seed;
            let p = prepare(&cfg, seed, Some(&dir.cache()))?;
            let rec = evaluate_base_to_novel(&state, &p.stack, &p.world, &p.split, &cfg.eval, seed)?.record;
            report(&format!("{} seed {seed}", state.method.label()), &rec);
            eval_shifts(&cfg, &p, &state)?;
        }
        Command::Ablate { axis } => {
            let ablation = pipeline::ablate(&cfg, axis, &out)?;
            print!("{}", ablation.markdown());
        }
        Command::Compare { gate, .. } => {
            let cmp = pipeline::compare(&cfg, &out)?;
            print!("{}", cmp.markdown());
            if gate {
                let g = cmp
                    .gate()
                    .ok_or_else(|| Failure::Gate("comparison lacks a baseline or the anchor method".into()))?;
                println!(
                    "gate: novel {:.2} vs {:.2} ({}), hm {:.2} vs {:.2} ({})",
                    g.anchor_novel,
                    g.coop_novel,
                    verdict(g.novel_improves),
                    g.anchor_hm,
                    g.coop_hm,
                    verdict(g.hm_holds)
                );
                if !g.passed() {
                    return Err(Failure::Gate(format!(
                        "anchor novel {:.2} vs baseline {:.2}, anchor hm {:.2} vs baseline {:.2}",
                        g.anchor_novel, g.coop_novel, g.anchor_hm, g.coop_hm
                    )));
                }
            }
        }
        Command::DumpWorld { json } => {
            for &seed in &cfg.run.seeds {
                let world = SynthWorld::generate(&cfg.world, seed)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&world.summary()).map_err(Error::from)?);
                } else {
                    print!("{}", describe_world(&world));
                }
            }
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn save(dir: &OutputDir, cfg: &ExperimentConfig, method: Method, state: &TrainState, seed: u64) -> Result<PathBuf, Error> {
    let path = dir.checkpoint_path(&pipeline::run_id(cfg, method.name(), seed), state.stage)?;
    checkpoint::save_state(state, &cfg.digest(), seed, &path)?;
    Ok(path)
}

fn report(label: &str, r: &MetricsRecord) {
    println!("{label}: base {:.2}, novel {:.2}, hm {:.2}", r.base_acc, r.novel_acc, r.hm);
}

fn eval_shifts(cfg: &ExperimentConfig, p: &Prepared, state: &TrainState) -> Result<(), Error> {
    let targets = cfg
        .shifts
        .iter()
        .map(|s| p.world.shifted(*s, p.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let records = evaluate_cross_world(state, &p.stack, &p.world, &p.split, &targets, &cfg.eval, p.seed)?;
    for (shift, rec) in cfg.shifts.iter().zip(&records) {
        report(&format!("  shift {shift}"), rec);
    }
    Ok(())
}

fn describe_world(w: &SynthWorld) -> String {
    let s = w.summary();
    let mut out = format!(
        "world seed {}: C = {} classes, A = {} attributes, latent {}, noise {:.3}, vocab {}, image {}x{}\n",
        s.seed, s.classes, s.attributes, s.latent_dim, s.noise_sigma, s.vocab_size, s.image_shape[0], s.image_shape[1]
    );
    if !s.shifts.is_empty() {
        out += &format!("shifts: {}\n", s.shifts.join(", "));
    }
    for c in &s.class_table {
        let mix: Vec<String> = c.attribute_mix.iter().map(|m| format!("{m:.3}")).collect();
        out += &format!(
            "class {:>3}  name {:?}  mix [{}]  caption {:?}\n",
            c.class,
            c.name_tokens,
            mix.join(" "),
            c.canonical_caption
        );
    }
    out
}
