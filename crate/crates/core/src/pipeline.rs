//! End-to-end experiment orchestration: per-seed preparation (world,
//! pretrained encoder, split, shots, descriptions), method training with
//! stage checkpoints, evaluation, and the artifacts of a run directory.
//!
//! ```text
//! <out>/metrics.csv          one row per (run, evaluation)
//! <out>/manifest.json        resolved config, versions, status, artifacts
//! <out>/positions/<id>.json  learned position matrices
//! <out>/checkpoints/<id>.<stage>.anop
//! <out>/cache/encoder-<digest>.anop
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::ablation::{AblationAxis, CellWiring};
use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_base_to_novel, evaluate_cross_world, Aggregate, MetricsRecord};
use crate::pretrain::pretrain_contrastive;
use crate::prompt::{hard_assignment, Arrangement};
use crate::rng;
use crate::train::{
    train_one_stage, train_stage1_anchor, train_stage2_adapt, DescriptionTargets, LossBreakdown,
    Method, Paradigm, Stage, TrainContext, TrainState,
};
use crate::world::{base_novel_split, sample_dataset, LabeledSample, Split, SynthWorld};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything a seed's training runs share.
pub struct Prepared {
    pub seed: u64,
    pub world: SynthWorld,
    pub stack: EncoderStack,
    pub split: Split,
    /// Labeled base-class shots.
    pub train: Vec<LabeledSample>,
    pub targets: DescriptionTargets,
    pub pretrain: PretrainInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainInfo {
    pub seed: u64,
    pub steps: usize,
    pub top1: f64,
    pub encoder_digest: String,
    pub cached: bool,
}

impl Prepared {
    pub fn context(&self) -> TrainContext<'_> {
        TrainContext {
            world: &self.world,
            stack: &self.stack,
            split: &self.split,
        }
    }
}

/// Builds the world and split, pretrains (or loads the cached) encoder, and
/// draws the shots and descriptions of one seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, cache: Option<&Path>) -> Result<Prepared> {
    let world = SynthWorld::generate(&cfg.world, seed)?;
    let digest = cfg.encoder_digest(seed);
    let cache_file = cache.map(|d| d.join(format!("encoder-{}.anop", &digest[..16])));
    let (stack, pretrain) = match cache_file.as_deref().filter(|p| p.exists()) {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stack = checkpoint::stack_from_checkpoint(&ck)?;
            let info = PretrainInfo {
                seed,
                steps: meta_or(&ck, "pretrain_steps", 0),
                top1: meta_or(&ck, "pretrain_top1", f64::NAN),
                encoder_digest: stack.digest(),
                cached: true,
            };
            (stack, info)
        }
        None => {
            let (stack, report) = pretrain_contrastive(&world, &cfg.encoder, &cfg.pretrain, seed)?;
            if let Some(path) = &cache_file {
                let mut ck = checkpoint::stack_checkpoint(&stack, &digest, seed);
                ck.meta.insert("pretrain_steps".into(), report.steps.to_string());
                ck.meta.insert("pretrain_top1".into(), report.top1.to_string());
                std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
                ck.save(path)?;
            }
            let info = PretrainInfo {
                seed,
                steps: report.steps,
                top1: report.top1,
                encoder_digest: stack.digest(),
                cached: false,
            };
            (stack, info)
        }
    };
    let split = base_novel_split(&world, cfg.run.base_fraction, seed)?;
    let train = sample_dataset(&world, &split.base, cfg.run.shots, rng::derive_seed(seed, "shots"))?;
    let targets = DescriptionTargets::encode(
        &world,
        &stack,
        &split.base,
        cfg.descriptions.per_class,
        cfg.descriptions.perturbation,
        seed,
    )?;
    Ok(Prepared {
        seed,
        world,
        stack,
        split,
        train,
        targets,
        pretrain,
    })
}

fn meta_or<T: std::str::FromStr>(ck: &Checkpoint, key: &str, default: T) -> T {
    ck.meta.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// A trained state with its loss traces.
pub struct Trained {
    pub state: TrainState,
    pub stage1: Vec<f64>,
    pub adapt: Vec<LossBreakdown>,
}

impl Trained {
    pub fn ce_final(&self) -> f64 {
        self.adapt.last().map_or(f64::NAN, |l| l.ce)
    }

    pub fn kd_final(&self) -> f64 {
        self.adapt.last().map_or(f64::NAN, |l| l.kd)
    }
}

/// Trains one method; `on_stage` sees the state after every stage.
pub fn train_method(
    p: &Prepared,
    cfg: &ExperimentConfig,
    method: Method,
    paradigm: Paradigm,
    on_stage: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<Trained> {
    let ctx = p.context();
    let mut state = TrainState::new(method, &cfg.train.prompt, &p.stack, p.seed)?;
    let mut stage1 = Vec::new();
    let adapt;
    if method.uses_anchors() && paradigm == Paradigm::OneStage {
        let trace = train_one_stage(&mut state, &ctx, &p.targets, &p.train, &cfg.train)?;
        stage1 = trace.anchor.into_iter().map(|(_, l)| l).collect();
        adapt = trace.adapt;
    } else {
        if method.uses_anchors() {
            stage1 = train_stage1_anchor(&mut state, &ctx, &p.targets, &cfg.train)?;
            on_stage(&state)?;
        }
        adapt = train_stage2_adapt(&mut state, &ctx, &p.train, &cfg.train)?;
    }
    on_stage(&state)?;
    Ok(Trained {
        state,
        stage1,
        adapt,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub paradigm: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub ce_final: f64,
    pub kd_final: f64,
    pub runtime_seconds: f64,
}

/// Learned position matrix of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionDump {
    pub run_id: String,
    pub soft_len: usize,
    pub anchor_len: usize,
    /// Row-major `(M+N)²` logits; rows are target positions.
    pub logits: Vec<Vec<f64>>,
    /// Inference assignment (noise-free argmax).
    pub assignment: Vec<Vec<f64>>,
    /// Source token placed at each position, `V<i>` or `A<i>`.
    pub order: Vec<String>,
}

impl PositionDump {
    pub fn new(run_id: &str, state: &TrainState) -> Self {
        let m = state.prompt.soft_len;
        let logits = &state.position_logits;
        let hard = hard_assignment(logits);
        let rows = |t: &autodiff::Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        let order = hard
            .argmax_rows()
            .into_iter()
            .map(|j| if j < m { format!("V{}", j + 1) } else { format!("A{}", j - m + 1) })
            .collect();
        Self {
            run_id: run_id.to_string(),
            soft_len: m,
            anchor_len: state.prompt.anchor_len,
            logits: rows(logits),
            assignment: rows(&hard),
            order,
        }
    }
}

/// Output directory layout and writers.
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn checkpoint_path(&self, run_id: &str, stage: Stage) -> Result<PathBuf> {
        Ok(self.subdir("checkpoints")?.join(format!("{run_id}.{}.anop", stage.tag())))
    }

    pub fn write_position(&self, dump: &PositionDump) -> Result<PathBuf> {
        let path = self.subdir("positions")?.join(format!("{}.json", dump.run_id));
        std::fs::write(&path, serde_json::to_string_pretty(dump)?)?;
        Ok(path)
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<PathBuf> {
        let path = self.root.join(METRICS_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub package: &'static str,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            package: env!("CARGO_PKG_VERSION"),
            checkpoint_format: checkpoint::VERSION,
        }
    }
}

/// Run record written next to the metrics, on success and on failure.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub command: String,
    pub status: String,
    pub error: Option<String>,
    pub config_digest: String,
    /// Resolved `key = value` listing of every setting.
    pub config: Vec<String>,
    pub versions: Versions,
    pub seeds: Vec<u64>,
    pub pretrain: Vec<PretrainInfo>,
    pub cells: Vec<CellWiring>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Self {
        Self {
            name: cfg.run.name.clone(),
            command: command.to_string(),
            status: "running".into(),
            error: None,
            config_digest: cfg.digest(),
            config: cfg.echo().lines().map(str::to_string).collect(),
            versions: Versions::default(),
            seeds: cfg.run.seeds.clone(),
            pretrain: Vec::new(),
            cells: Vec::new(),
            artifacts: Vec::new(),
        }
    }
}

/// Shared state of a command writing into one output directory.
struct Session<'a> {
    out: OutputDir,
    cfg: &'a ExperimentConfig,
    manifest: Manifest,
    rows: Vec<MetricsRow>,
}

impl<'a> Session<'a> {
    fn new(cfg: &'a ExperimentConfig, out: &Path, command: &str) -> Result<Self> {
        Ok(Self {
            out: OutputDir::create(out)?,
            cfg,
            manifest: Manifest::new(cfg, command),
            rows: Vec::new(),
        })
    }

    fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out.root).unwrap_or(path);
        self.manifest.artifacts.push(rel.display().to_string());
    }

    fn prepare(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
        let p = prepare(cfg, seed, Some(&self.out.cache()))?;
        if !self.manifest.pretrain.iter().any(|i| i.seed == seed) {
            self.manifest.pretrain.push(p.pretrain.clone());
        }
        Ok(p)
    }

    /// Trains, checkpoints, evaluates and records one run.
    fn run_one(
        &mut self,
        p: &Prepared,
        cfg: &ExperimentConfig,
        run_id: &str,
        method: Method,
        axis: &str,
        value: &str,
    ) -> Result<(Trained, MetricsRecord)> {
        let start = Instant::now();
        let paradigm = cfg.run.paradigm;
        let digest = cfg.digest();
        let mut saved = Vec::new();
        let trained = train_method(p, cfg, method, paradigm, &mut |state| {
            if self.cfg.run.checkpoints {
                let path = self.out.checkpoint_path(run_id, state.stage)?;
                checkpoint::save_state(state, &digest, p.seed, &path)?;
                saved.push(path);
            }
            Ok(())
        })?;
        for path in saved {
            self.artifact(&path);
        }
        let mut eval = evaluate_base_to_novel(&trained.state, &p.stack, &p.world, &p.split, &cfg.eval, p.seed)?;
        eval.record.config_digest = digest;
        eval.record.runtime_seconds = start.elapsed().as_secs_f64();
        if method.uses_anchors() && cfg.train.prompt.arrangement == Arrangement::Matrix {
            let path = self.out.write_position(&PositionDump::new(run_id, &trained.state))?;
            self.artifact(&path);
        }
        self.rows.push(MetricsRow {
            run_id: run_id.to_string(),
            paradigm: paradigm_label(method, paradigm),
            axis: axis.to_string(),
            value: value.to_string(),
            seed: p.seed,
            base_acc: eval.record.base_acc,
            novel_acc: eval.record.novel_acc,
            hm: eval.record.hm,
            ce_final: trained.ce_final(),
            kd_final: trained.kd_final(),
            runtime_seconds: eval.record.runtime_seconds,
        });
        Ok((trained, eval.record))
    }

    fn finish(mut self, result: &Result<()>) -> Result<Vec<MetricsRow>> {
        let metrics = self.out.write_metrics(&self.rows)?;
        self.artifact(&metrics);
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        self.out.write_manifest(&self.manifest)?;
        Ok(self.rows)
    }
}

fn paradigm_label(method: Method, paradigm: Paradigm) -> String {
    if method.uses_anchors() {
        paradigm.name().to_string()
    } else {
        "n/a".to_string()
    }
}

/// Identifier of one method run: `<name>-<label>-s<seed>`.
pub fn run_id(cfg: &ExperimentConfig, label: &str, seed: u64) -> String {
    format!("{}-{label}-s{seed}", cfg.run.name)
}

/// Configured methods over configured seeds, plus cross-world evaluation of
/// the anchor method on each configured shift.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRow>> {
    let mut s = Session::new(cfg, out, "run")?;
    let result = (|| -> Result<()> {
        for &seed in &cfg.run.seeds {
            let p = s.prepare(cfg, seed)?;
            for &method in &cfg.run.methods {
                let id = run_id(cfg, method.name(), seed);
                let (trained, _) = s.run_one(&p, cfg, &id, method, "method", method.name())?;
                if !method.uses_anchors() || cfg.shifts.is_empty() {
                    continue;
                }
                let targets = cfg
                    .shifts
                    .iter()
                    .map(|sh| p.world.shifted(*sh, seed))
                    .collect::<Result<Vec<_>>>()?;
                let records = evaluate_cross_world(
                    &trained.state,
                    &p.stack,
                    &p.world,
                    &p.split,
                    &targets,
                    &cfg.eval,
                    seed,
                )?;
                for (shift, rec) in cfg.shifts.iter().zip(records) {
                    s.rows.push(MetricsRow {
                        run_id: id.clone(),
                        paradigm: paradigm_label(method, cfg.run.paradigm),
                        axis: "cross_world".into(),
                        value: shift.to_string(),
                        seed,
                        base_acc: rec.base_acc,
                        novel_acc: rec.novel_acc,
                        hm: rec.hm,
                        ce_final: trained.ce_final(),
                        kd_final: trained.kd_final(),
                        runtime_seconds: rec.runtime_seconds,
                    });
                }
            }
        }
        Ok(())
    })();
    let rows = s.finish(&result)?;
    result.map(|()| rows)
}

/// Per-method aggregate of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub label: &'static str,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub rows: Vec<MetricsRow>,
}

/// Outcome of the directional base-to-novel gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareGate {
    pub coop_novel: f64,
    pub anchor_novel: f64,
    pub coop_hm: f64,
    pub anchor_hm: f64,
    pub novel_improves: bool,
    pub hm_holds: bool,
}

impl CompareGate {
    pub const HM_TOLERANCE: f64 = 0.5;

    pub fn passed(&self) -> bool {
        self.novel_improves && self.hm_holds
    }
}

impl Comparison {
    pub fn summary(&self, method: Method) -> Option<&Aggregate> {
        self.methods.iter().find(|m| m.method == method).map(|m| &m.aggregate)
    }

    pub fn gate(&self) -> Option<CompareGate> {
        let coop = self.summary(Method::CoOp)?;
        let anchor = self.summary(Method::AnchorOpt)?;
        Some(CompareGate {
            coop_novel: coop.novel.mean,
            anchor_novel: anchor.novel.mean,
            coop_hm: coop.hm.mean,
            anchor_hm: anchor.hm.mean,
            novel_improves: anchor.novel.mean > coop.novel.mean,
            hm_holds: anchor.hm.mean >= coop.hm.mean - CompareGate::HM_TOLERANCE,
        })
    }

    /// Base / Novel / HM table, mean ± sample std over seeds.
    pub fn markdown(&self) -> String {
        let mut s = "| Method | Base | Novel | HM |\n|---|---|---|---|\n".to_string();
        for m in &self.methods {
            let a = &m.aggregate;
            s += &format!(
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
                m.label, a.base.mean, a.base.std, a.novel.mean, a.novel.std, a.hm.mean, a.hm.std
            );
        }
        s += &format!("\n{} seeds: {:?}\n", self.seeds.len(), self.seeds);
        s
    }
}

/// CoOp, the attribute baseline and the anchor method side by side.
pub fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<Comparison> {
    let mut s = Session::new(cfg, out, "compare")?;
    let mut records: Vec<(Method, MetricsRecord)> = Vec::new();
    let result = (|| -> Result<()> {
        for &seed in &cfg.run.seeds {
            let p = s.prepare(cfg, seed)?;
            for method in Method::ALL {
                let id = run_id(cfg, method.name(), seed);
                let (_, rec) = s.run_one(&p, cfg, &id, method, "method", method.name())?;
                records.push((method, rec));
            }
        }
        Ok(())
    })();
    let methods: Vec<MethodSummary> = Method::ALL
        .into_iter()
        .map(|m| {
            let recs: Vec<MetricsRecord> =
                records.iter().filter(|(x, _)| *x == m).map(|(_, r)| r.clone()).collect();
            MethodSummary {
                method: m,
                label: m.label(),
                aggregate: aggregate(&recs),
            }
        })
        .collect();
    let seeds = cfg.run.seeds.clone();
    let table = Comparison {
        seeds: seeds.clone(),
        methods: methods.clone(),
        rows: Vec::new(),
    }
    .markdown();
    if result.is_ok() {
        let path = s.out.write_text("compare.md", &table)?;
        s.artifact(&path);
    }
    let rows = s.finish(&result)?;
    result?;
    Ok(Comparison {
        seeds,
        methods,
        rows,
    })
}

/// Aggregated cell of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub value: String,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
    pub wiring: Vec<CellWiring>,
    pub rows: Vec<MetricsRow>,
}

impl Ablation {
    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| {} | Base | Novel | HM |\n|---|---|---|---|\n",
            self.axis.name()
        );
        for c in &self.cells {
            let a = &c.aggregate;
            s += &format!(
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
                c.value, a.base.mean, a.base.std, a.novel.mean, a.novel.std, a.hm.mean, a.hm.std
            );
        }
        s
    }
}

/// Every cell of one axis for the anchor method, over the configured seeds.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<Ablation> {
    let mut s = Session::new(cfg, out, &format!("ablate {}", axis.name()))?;
    let cells_cfg = axis
        .values()
        .iter()
        .map(|v| axis.apply(cfg, v).map(|c| (*v, c)))
        .collect::<Result<Vec<_>>>()?;
    s.manifest.cells = cells_cfg
        .iter()
        .map(|(v, c)| CellWiring::new(axis, v, c))
        .collect();
    let mut records: Vec<(usize, MetricsRecord)> = Vec::new();
    let result = (|| -> Result<()> {
        for &seed in &cfg.run.seeds {
            // Every cell shares world, encoder, split and shots.
            let p = s.prepare(cfg, seed)?;
            for (i, (value, cell)) in cells_cfg.iter().enumerate() {
                let id = run_id(cfg, &format!("{}={value}", axis.name()), seed);
                let (_, rec) = s.run_one(&p, cell, &id, Method::AnchorOpt, axis.name(), value)?;
                records.push((i, rec));
            }
        }
        Ok(())
    })();
    let cells: Vec<AblationCell> = cells_cfg
        .iter()
        .enumerate()
        .map(|(i, (v, _))| {
            let recs: Vec<MetricsRecord> =
                records.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect();
            AblationCell {
                value: v.to_string(),
                aggregate: aggregate(&recs),
            }
        })
        .collect();
    let wiring = s.manifest.cells.clone();
    let mut ablation = Ablation {
        axis,
        cells,
        wiring,
        rows: Vec::new(),
    };
    if result.is_ok() {
        let path = s.out.write_text(&format!("ablation-{}.md", axis.name()), &ablation.markdown())?;
        s.artifact(&path);
    }
    ablation.rows = s.finish(&result)?;
    result?;
    Ok(ablation)
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| Error::invalid(format!("bad number in metrics column {i}")))
        };
        rows.push(MetricsRow {
            run_id: get(0),
            paradigm: get(1),
            axis: get(2),
            value: get(3),
            seed: get(4)
                .parse()
                .map_err(|_| Error::invalid("bad seed in metrics"))?,
            base_acc: num(5)?,
            novel_acc: num(6)?,
            hm: num(7)?,
            ce_final: num(8)?,
            kd_final: num(9)?,
            runtime_seconds: num(10)?,
        });
    }
    Ok(rows)
}
