//! End-to-end pruning pipeline: pretrain, per-group rate search, the
//! soft-pruning schedule with its five-epoch cadence, hard prune, finetune.
//! Also the uniform-rate baseline and multi-seed mode comparison.
//!
//! All stages train on the 80% split and report accuracy on the held-out
//! 20%. Every random draw derives from the config seed through
//! [`crate::rng`].

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bayesopt::{self, BoConfig, Bounds, Evaluation};
use crate::checkpoint;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::fpgm;
use crate::grouping::{self, LayerGrouping, SparsityReport};
use crate::network::{init_conv, init_dense, Network};
use crate::objective::{self, ObjectiveConfig};
use crate::par;
use crate::rng::{self, Stage};

/// Fixed mini-batch size for every training stage.
pub const BATCH_SIZE: usize = 32;
/// Soft-prune cadence within the schedule loop.
pub const SFP_CADENCE: usize = 5;
/// Upper clamp on per-group rate bounds so one filter always survives.
pub const RATE_CAP: f64 = 0.95;
/// Storage parameters of the prunable stack built by [`build_toy_net`].
pub const TOY_NET_PRUNABLE_PARAMS: usize = 12_840;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Bfpgm,
    Uniform,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bfpgm => "bfpgm",
            Mode::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic { n: usize, classes: usize, size: usize },
    Idx { images: String, labels: String },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            n: 1600,
            classes: 4,
            size: 16,
        }
    }
}

/// Run configuration. JSON keys are exactly the field names; unknown keys
/// are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "defaults::n_pretrain")]
    pub n_pretrain: usize,
    #[serde(default = "defaults::n_sfp")]
    pub n_sfp: usize,
    #[serde(default = "defaults::n_finetune")]
    pub n_finetune: usize,
    #[serde(default = "defaults::i0")]
    pub i0: usize,
    #[serde(default = "defaults::big_i")]
    pub big_i: usize,
    #[serde(default = "defaults::t_plus")]
    pub t_plus: f64,
    #[serde(default = "defaults::bound_offset")]
    pub bound_offset: f64,
    #[serde(default = "defaults::penalty_value")]
    pub penalty_value: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::n_groups")]
    pub n_groups: usize,
    #[serde(default)]
    pub boundaries: Option<Vec<usize>>,
    #[serde(default = "defaults::t")]
    pub t: f64,
    #[serde(default = "defaults::kappa")]
    pub kappa: f64,
    #[serde(default = "defaults::lr_pretrain")]
    pub lr_pretrain: f64,
    #[serde(default = "defaults::lr_sfp")]
    pub lr_sfp: f64,
    #[serde(default = "defaults::lr_finetune")]
    pub lr_finetune: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSource,
}

mod defaults {
    pub fn n_pretrain() -> usize {
        50
    }
    pub fn n_sfp() -> usize {
        30
    }
    pub fn n_finetune() -> usize {
        5
    }
    pub fn i0() -> usize {
        12
    }
    pub fn big_i() -> usize {
        60
    }
    pub fn t_plus() -> f64 {
        0.04
    }
    pub fn bound_offset() -> f64 {
        0.2
    }
    pub fn penalty_value() -> f64 {
        100.0
    }
    pub fn lambda() -> f64 {
        5.0
    }
    pub fn n_groups() -> usize {
        6
    }
    pub fn t() -> f64 {
        0.2
    }
    pub fn kappa() -> f64 {
        2.0
    }
    pub fn lr_pretrain() -> f64 {
        0.05
    }
    pub fn lr_sfp() -> f64 {
        0.02
    }
    pub fn lr_finetune() -> f64 {
        0.01
    }
    pub fn seed() -> u64 {
        1
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.t > 0.0 && self.t < 1.0) {
            return bad(format!("t = {} must lie in (0, 1)", self.t));
        }
        if self.t_plus < 0.0 {
            return bad(format!("t_plus = {} must be non-negative", self.t_plus));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        if self.bound_offset < 0.0 {
            return bad(format!(
                "bound_offset = {} must be non-negative",
                self.bound_offset
            ));
        }
        if self.i0 < 1 || self.i0 > self.big_i {
            return bad(format!(
                "need 1 <= i0 <= big_i, got i0 = {}, big_i = {}",
                self.i0, self.big_i
            ));
        }
        if self.n_groups < 1 {
            return bad("n_groups must be at least 1".into());
        }
        if let Some(b) = &self.boundaries {
            if b.len() + 1 != self.n_groups {
                return bad(format!(
                    "{} boundaries do not cut {} groups",
                    b.len(),
                    self.n_groups
                ));
            }
        }
        for (name, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_sfp", self.lr_sfp),
            ("lr_finetune", self.lr_finetune),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} = {lr} must be positive"));
            }
        }
        if !self.kappa.is_finite() || !self.penalty_value.is_finite() {
            return bad("kappa and penalty_value must be finite".into());
        }
        if let DatasetSource::Synthetic { n, classes, size } = &self.dataset {
            if *n < 5 * BATCH_SIZE {
                return bad(format!(
                    "synthetic n = {n} too small for batch size {BATCH_SIZE}"
                ));
            }
            if !(2..=10).contains(classes) || *size < 8 {
                return bad(format!("invalid synthetic spec {classes} classes, size {size}"));
            }
        }
        Ok(())
    }
}

/// Per-epoch metric row; `stage` distinguishes training epochs from prune
/// events. Losses on training rows are mean batch training loss; event rows
/// carry validation loss instead.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTrace {
    pub name: String,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Per-stage wall clock. Excluded from determinism comparisons.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timing {
    pub pretrain_s: f64,
    pub optimize_s: f64,
    pub sfp_s: f64,
    pub finetune_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub target: f64,
    pub seed: u64,
    pub phi_star: Vec<f64>,
    pub stages: Vec<StageTrace>,
    pub final_sparsity: SparsityReport,
    pub final_accuracy: f64,
    pub params_total: usize,
    pub params_after: usize,
    pub timing: Timing,
}

/// Six 3x3 conv layers (1->8->8->16->16->24->24, stride 2 on the odd
/// layers), global average pooling and a non-prunable dense head.
pub fn build_toy_net(seed: u64, class_count: usize) -> Network {
    let mut r = rng::rng_from(seed);
    let channels = [8usize, 8, 16, 16, 24, 24];
    let strides = [1usize, 2, 1, 2, 1, 2];
    let mut layers = Vec::new();
    let mut in_c = 1usize;
    for (m, s) in channels.iter().zip(strides) {
        layers.push(crate::layer::Layer::Conv(init_conv(&mut r, *m, in_c, 3, s, 1)));
        layers.push(crate::layer::Layer::Relu);
        in_c = *m;
    }
    layers.push(crate::layer::Layer::GlobalAvgPool);
    let mut head = init_dense(&mut r, class_count, in_c);
    head.prunable = false;
    layers.push(crate::layer::Layer::Dense(head));
    Network::new(layers, seed).expect("toy architecture composes")
}

pub fn build_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic { n, classes, size } => {
            data::make_synthetic(rng::stage_seed(cfg.seed, Stage::Dataset), *n, *classes, *size)
        }
        DatasetSource::Idx { images, labels } => {
            data::read_idx(Path::new(images), Path::new(labels))
        }
    }
}

/// Grouping from the config boundaries (equal-depth cuts by default).
pub fn grouping_for(net: &Network, cfg: &PipelineConfig) -> Result<LayerGrouping> {
    let prunable_len = net.prunable_layer_indices().len();
    let boundaries = match &cfg.boundaries {
        Some(b) => b.clone(),
        None => grouping::equal_depth_boundaries(prunable_len, cfg.n_groups),
    };
    grouping::partition(net, cfg.n_groups, &boundaries)
}

/// Stages data/split/init for a run.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: Split,
    pub net: Network,
    pub grouping: LayerGrouping,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let dataset = build_dataset(cfg)?;
    let split = data::split_80_20(&dataset, rng::stage_seed(cfg.seed, Stage::Split))?;
    let net = build_toy_net(rng::stage_seed(cfg.seed, Stage::Init), dataset.class_count);
    let grouping = grouping_for(&net, cfg)?;
    Ok(Prepared {
        dataset,
        split,
        net,
        grouping,
    })
}

fn val_indices(split: &Split) -> Vec<usize> {
    (0..split.validation.len()).collect()
}

fn stage_err<T>(stage: &'static str, net: &Network, out_dir: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        let _ = checkpoint::write_checkpoint(net, &out_dir.join("last_good.pkck"));
        Error::Stage {
            stage,
            source: Box::new(e),
        }
    })
}

/// Trains `epochs` epochs, pushing one metrics row per epoch.
fn train_stage(
    net: &mut Network,
    split: &Split,
    grouping: &LayerGrouping,
    epochs: usize,
    lr: f64,
    stage_seed: u64,
    stage: &'static str,
    rows: &mut Vec<MetricsRow>,
) -> Result<StageTrace> {
    let vidx = val_indices(split);
    let mut trace = StageTrace {
        name: stage.to_string(),
        losses: Vec::with_capacity(epochs),
        accuracies: Vec::with_capacity(epochs),
    };
    for epoch in 0..epochs {
        let (loss, _steps) = net.train_one_epoch(
            &split.train,
            lr,
            BATCH_SIZE,
            rng::epoch_seed(stage_seed, epoch),
        )?;
        let accuracy = net.eval_accuracy(&split.validation, &vidx)?;
        let sparsity = grouping::sparsity(net, grouping).overall;
        rows.push(MetricsRow {
            epoch,
            stage,
            loss,
            accuracy,
            sparsity,
        });
        trace.losses.push(loss);
        trace.accuracies.push(accuracy);
    }
    Ok(trace)
}

fn event_row(
    net: &Network,
    split: &Split,
    grouping: &LayerGrouping,
    epoch: usize,
    stage: &'static str,
) -> Result<MetricsRow> {
    let vidx = val_indices(split);
    Ok(MetricsRow {
        epoch,
        stage,
        loss: net.eval_loss(&split.validation, &vidx)?,
        accuracy: net.eval_accuracy(&split.validation, &vidx)?,
        sparsity: grouping::sparsity(net, grouping).overall,
    })
}

/// Searches per-group rates with the surrogate optimizer; returns the best
/// rate vector and writes `bo_history.csv` (also on abort).
fn optimize_rates_stage(
    net: &Network,
    split: &Split,
    grouping: &LayerGrouping,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<f64>> {
    let bounds = Bounds::rate_box(grouping.group_count(), cfg.t, cfg.bound_offset, RATE_CAP)?;
    let obj_cfg = ObjectiveConfig {
        target: cfg.t,
        t_plus: cfg.t_plus,
        lambda: cfg.lambda,
        penalty_value: cfg.penalty_value,
        lr: cfg.lr_sfp,
        batch_size: BATCH_SIZE,
        epoch_seed: rng::stage_seed(cfg.seed, Stage::TrialEpoch),
        snapshot: net,
        split,
        grouping,
    };
    let bo_cfg = BoConfig {
        initial_points: cfg.i0,
        total: cfg.big_i,
        kappa: cfg.kappa,
        seed: rng::stage_seed(cfg.seed, Stage::Optimize),
    };
    let outcome = bayesopt::optimize(
        |rates| {
            let r = objective::evaluate(rates, &obj_cfg)?;
            Ok(Evaluation {
                value: r.value,
                was_penalty: r.was_penalty,
            })
        },
        &bounds,
        &bo_cfg,
    );
    match outcome {
        Ok(out) => {
            bayesopt::write_history_csv(&out_dir.join("bo_history.csv"), &out.history)?;
            Ok(out.best_point)
        }
        Err(aborted) => {
            let _ = bayesopt::write_history_csv(&out_dir.join("bo_history.csv"), &aborted.history);
            Err(aborted.into())
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "epoch,stage,loss,accuracy,sparsity")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.stage, r.loss, r.accuracy, r.sparsity
        )?;
    }
    Ok(())
}

/// Soft-prune/retrain loop, hard prune, finetune. Appends stage traces and
/// metric rows; assumes `net` is already pretrained.
fn schedule_into(
    net: &mut Network,
    split: &Split,
    grouping: &LayerGrouping,
    phi_star: &[f64],
    cfg: &PipelineConfig,
    out_dir: &Path,
    rows: &mut Vec<MetricsRow>,
    stages: &mut Vec<StageTrace>,
    timing: &mut Timing,
) -> Result<()> {
    // Stage: soft-prune / retrain loop.
    let clock = Instant::now();
    let backup = net.clone();
    let sfp_result: Result<StageTrace> = (|| {
        let vidx = val_indices(split);
        let mut trace = StageTrace {
            name: "sfp".into(),
            losses: Vec::new(),
            accuracies: Vec::new(),
        };
        let stage_seed = rng::stage_seed(cfg.seed, Stage::Sfp);
        for epoch in 0..cfg.n_sfp {
            if epoch % SFP_CADENCE == 0 {
                fpgm::soft_prune_network(net, phi_star, grouping)?;
                rows.push(event_row(net, split, grouping, epoch, "soft_prune")?);
            }
            let (loss, _) = net.train_one_epoch(
                &split.train,
                cfg.lr_sfp,
                BATCH_SIZE,
                rng::epoch_seed(stage_seed, epoch),
            )?;
            let accuracy = net.eval_accuracy(&split.validation, &vidx)?;
            let sparsity = grouping::sparsity(net, grouping).overall;
            rows.push(MetricsRow {
                epoch,
                stage: "sfp",
                loss,
                accuracy,
                sparsity,
            });
            trace.losses.push(loss);
            trace.accuracies.push(accuracy);
        }
        Ok(trace)
    })();
    stages.push(stage_err("sfp", &backup, out_dir, sfp_result)?);
    timing.sfp_s = clock.elapsed().as_secs_f64();

    // Stage: hard prune and freeze.
    let backup = net.clone();
    stage_err(
        "hard_prune",
        &backup,
        out_dir,
        fpgm::hard_prune_network(net, phi_star, grouping),
    )?;
    rows.push(event_row(net, split, grouping, cfg.n_sfp, "hard_prune")?);

    // Stage: finetune.
    let clock = Instant::now();
    let backup = net.clone();
    let trace = stage_err(
        "finetune",
        &backup,
        out_dir,
        train_stage(
            net,
            split,
            grouping,
            cfg.n_finetune,
            cfg.lr_finetune,
            rng::stage_seed(cfg.seed, Stage::Finetune),
            "finetune",
            rows,
        ),
    )?;
    stages.push(trace);
    timing.finetune_s = clock.elapsed().as_secs_f64();
    Ok(())
}

fn finish_report(
    net: &Network,
    split: &Split,
    grouping: &LayerGrouping,
    cfg: &PipelineConfig,
    out_dir: &Path,
    phi_star: Vec<f64>,
    stages: Vec<StageTrace>,
    params_total: usize,
    mut timing: Timing,
    total_clock: Instant,
    rows: &[MetricsRow],
    metrics_name: &str,
) -> Result<RunReport> {
    let final_sparsity = grouping::sparsity(net, grouping);
    let final_accuracy = net.eval_accuracy(&split.validation, &val_indices(split))?;
    timing.total_s = total_clock.elapsed().as_secs_f64();

    checkpoint::write_checkpoint(net, &out_dir.join("final.pkck"))?;
    write_metrics_csv(&out_dir.join(metrics_name), rows)?;

    let report = RunReport {
        mode: cfg.mode,
        target: cfg.t,
        seed: cfg.seed,
        phi_star,
        stages,
        params_after: final_sparsity.params_total - final_sparsity.params_pruned,
        params_total,
        final_sparsity,
        final_accuracy,
        timing,
    };
    fs::write(
        out_dir.join("run_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Full schedule on an already prepared state. Writes `pretrained.pkck`,
/// `final.pkck`, `metrics.csv`, `run_report.json` and (in bfpgm mode)
/// `bo_history.csv` into `out_dir`.
pub fn run_prepared(
    mut prepared: Prepared,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let total_clock = Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut stages: Vec<StageTrace> = Vec::new();
    let mut timing = Timing::default();
    let split = prepared.split;
    let grouping = prepared.grouping;
    let net = &mut prepared.net;

    let (_, params_total) = grouping::count_params(net, &grouping);

    // Stage: pretrain.
    let clock = Instant::now();
    let backup = net.clone();
    let trace = stage_err(
        "pretrain",
        &backup,
        out_dir,
        train_stage(
            net,
            &split,
            &grouping,
            cfg.n_pretrain,
            cfg.lr_pretrain,
            rng::stage_seed(cfg.seed, Stage::Pretrain),
            "pretrain",
            &mut rows,
        ),
    )?;
    stages.push(trace);
    timing.pretrain_s = clock.elapsed().as_secs_f64();
    checkpoint::write_checkpoint(net, &out_dir.join("pretrained.pkck"))?;

    // Stage: per-group rate selection.
    let clock = Instant::now();
    let phi_star = match cfg.mode {
        Mode::Uniform => vec![cfg.t; grouping.group_count()],
        Mode::Bfpgm => {
            let backup = net.clone();
            stage_err(
                "optimize",
                &backup,
                out_dir,
                optimize_rates_stage(net, &split, &grouping, cfg, out_dir),
            )?
        }
    };
    timing.optimize_s = clock.elapsed().as_secs_f64();

    schedule_into(
        net,
        &split,
        &grouping,
        &phi_star,
        cfg,
        out_dir,
        &mut rows,
        &mut stages,
        &mut timing,
    )?;

    finish_report(
        net,
        &split,
        &grouping,
        cfg,
        out_dir,
        phi_star,
        stages,
        params_total,
        timing,
        total_clock,
        &rows,
        "metrics.csv",
    )
}

/// Stage command: pretrain only. Saves `pretrained.pkck` and
/// `metrics_pretrain.csv`.
pub fn pretrain_only(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut prepared = prepare(cfg)?;
    let mut rows = Vec::new();
    let backup = prepared.net.clone();
    stage_err(
        "pretrain",
        &backup,
        out_dir,
        train_stage(
            &mut prepared.net,
            &prepared.split,
            &prepared.grouping,
            cfg.n_pretrain,
            cfg.lr_pretrain,
            rng::stage_seed(cfg.seed, Stage::Pretrain),
            "pretrain",
            &mut rows,
        ),
    )?;
    checkpoint::write_checkpoint(&prepared.net, &out_dir.join("pretrained.pkck"))?;
    write_metrics_csv(&out_dir.join("metrics_pretrain.csv"), &rows)?;
    Ok(())
}

/// Per-group rates selected for one checkpoint, as stored in `rates.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatesFile {
    pub phi_star: Vec<f64>,
}

/// Stage command: rate search against a pretrained checkpoint. Writes
/// `bo_history.csv` and `rates.json`; returns the chosen rates.
pub fn optimize_only(cfg: &PipelineConfig, ckpt: &Path, out_dir: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let net = checkpoint::read_checkpoint(ckpt)?;
    let dataset = build_dataset(cfg)?;
    let split = data::split_80_20(&dataset, rng::stage_seed(cfg.seed, Stage::Split))?;
    let grouping = grouping_for(&net, cfg)?;
    let backup = net.clone();
    let phi_star = stage_err(
        "optimize",
        &backup,
        out_dir,
        optimize_rates_stage(&net, &split, &grouping, cfg, out_dir),
    )?;
    fs::write(
        out_dir.join("rates.json"),
        serde_json::to_string_pretty(&RatesFile {
            phi_star: phi_star.clone(),
        })?,
    )?;
    Ok(phi_star)
}

/// Stage command: the pruning schedule (SFP loop, hard prune, finetune) on
/// a pretrained checkpoint. `rates` defaults to the uniform target vector.
pub fn prune_only(
    cfg: &PipelineConfig,
    ckpt: &Path,
    rates: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let total_clock = Instant::now();
    let mut net = checkpoint::read_checkpoint(ckpt)?;
    let dataset = build_dataset(cfg)?;
    let split = data::split_80_20(&dataset, rng::stage_seed(cfg.seed, Stage::Split))?;
    let grouping = grouping_for(&net, cfg)?;
    let phi_star = match rates {
        Some(r) => {
            if r.len() != grouping.group_count() {
                return Err(Error::Config(format!(
                    "{} rates for {} groups",
                    r.len(),
                    grouping.group_count()
                )));
            }
            r
        }
        None => vec![cfg.t; grouping.group_count()],
    };
    let (_, params_total) = grouping::count_params(&net, &grouping);
    let mut rows = Vec::new();
    let mut stages = Vec::new();
    let mut timing = Timing::default();
    schedule_into(
        &mut net,
        &split,
        &grouping,
        &phi_star,
        cfg,
        out_dir,
        &mut rows,
        &mut stages,
        &mut timing,
    )?;
    finish_report(
        &net,
        &split,
        &grouping,
        cfg,
        out_dir,
        phi_star,
        stages,
        params_total,
        timing,
        total_clock,
        &rows,
        "metrics_prune.csv",
    )
}

/// Builds everything from the config and runs the full schedule.
pub fn run(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    run_prepared(prepared, cfg, out_dir)
}

/// Runs the schedule on a caller-supplied network (dataset and split still
/// come from the config). Used for architecture variants such as grouping
/// ablations.
pub fn run_with_network(net: Network, cfg: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let split = data::split_80_20(&dataset, rng::stage_seed(cfg.seed, Stage::Split))?;
    let grouping = grouping_for(&net, cfg)?;
    run_prepared(
        Prepared {
            dataset,
            split,
            net,
            grouping,
        },
        cfg,
        out_dir,
    )
}

/// One aggregate row of [`compare_modes`].
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub sparsity_mean: f64,
    pub sparsity_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs both modes for every seed at the same target and aggregates final
/// accuracy and sparsity per mode. Independent runs fan out in parallel,
/// each into its own subdirectory.
pub fn compare_modes(
    cfg: &PipelineConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let modes = [Mode::Bfpgm, Mode::Uniform];
    let jobs: Vec<(Mode, u64)> = modes
        .iter()
        .flat_map(|m| seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let results = par::map_indices(jobs.len(), |j| {
        let (mode, seed) = jobs[j];
        let mut run_cfg = cfg.clone();
        run_cfg.mode = mode;
        run_cfg.seed = seed;
        let sub = out_dir.join(format!("{}_seed{}", mode.as_str(), seed));
        run(&run_cfg, &sub)
    });
    let mut reports = Vec::with_capacity(jobs.len());
    for r in results {
        reports.push(r?);
    }
    let mut table = Vec::new();
    for mode in modes {
        let accs: Vec<f64> = reports
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.final_accuracy)
            .collect();
        let sps: Vec<f64> = reports
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.final_sparsity.overall)
            .collect();
        let (accuracy_mean, accuracy_std) = mean_std(&accs);
        let (sparsity_mean, sparsity_std) = mean_std(&sps);
        table.push(CompareRow {
            mode,
            n_seeds: seeds.len(),
            accuracy_mean,
            accuracy_std,
            sparsity_mean,
            sparsity_std,
        });
    }
    write_compare_csv(&out_dir.join("compare.csv"), &table)?;
    Ok(table)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(
        out,
        "mode,n_seeds,accuracy_mean,accuracy_std,sparsity_mean,sparsity_std"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mode.as_str(),
            r.n_seeds,
            r.accuracy_mean,
            r.accuracy_std,
            r.sparsity_mean,
            r.sparsity_std
        )?;
    }
    Ok(())
}

/// Accuracy and sparsity of a stored checkpoint against the config's
/// dataset and grouping.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub sparsity: SparsityReport,
}

pub fn evaluate_checkpoint(cfg: &PipelineConfig, ckpt: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let net = checkpoint::read_checkpoint(ckpt)?;
    let dataset = build_dataset(cfg)?;
    let split = data::split_80_20(&dataset, rng::stage_seed(cfg.seed, Stage::Split))?;
    let grouping = grouping_for(&net, cfg)?;
    let vidx: Vec<usize> = (0..split.validation.len()).collect();
    Ok(EvalSummary {
        accuracy: net.eval_accuracy(&split.validation, &vidx)?,
        sparsity: grouping::sparsity(&net, &grouping),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_net_parameter_count_is_pinned() {
        let net = build_toy_net(1, 4);
        let g = grouping_for(&net, &PipelineConfig::default()).unwrap();
        let (per_group, total) = grouping::count_params(&net, &g);
        assert_eq!(total, TOY_NET_PRUNABLE_PARAMS);
        assert_eq!(per_group, vec![80, 584, 1168, 2320, 3480, 5208]);
    }

    #[test]
    fn toy_net_defaults_to_one_group_per_conv() {
        let net = build_toy_net(1, 4);
        let g = grouping_for(&net, &PipelineConfig::default()).unwrap();
        assert_eq!(g.group_count(), 6);
        for group in &g.groups {
            assert_eq!(group.len(), 1);
        }
    }

    #[test]
    fn toy_net_emits_class_count_logits() {
        let net = build_toy_net(1, 4);
        let out = net
            .forward(&crate::tensor::Tensor::zeros(&[1, 16, 16]))
            .unwrap();
        assert_eq!(out.shape(), &[4]);
        // spatially flexible: the same stack handles 28x28 inputs
        let out = net
            .forward(&crate::tensor::Tensor::zeros(&[1, 28, 28]))
            .unwrap();
        assert_eq!(out.shape(), &[4]);
    }

    #[test]
    fn config_defaults_mirror_the_schedule() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.n_pretrain, 50);
        assert_eq!(cfg.n_sfp, 30);
        assert_eq!(cfg.n_finetune, 5);
        assert_eq!(cfg.i0, 12);
        assert_eq!(cfg.big_i, 60);
        assert_eq!(cfg.t_plus, 0.04);
        assert_eq!(cfg.bound_offset, 0.2);
        assert_eq!(cfg.penalty_value, 100.0);
        assert_eq!(cfg.lambda, 5.0);
        assert_eq!(cfg.n_groups, 6);
        assert_eq!(cfg.kappa, 2.0);
        assert_eq!(cfg.mode, Mode::Bfpgm);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = PipelineConfig::from_json(r#"{"n_pretrain": 3, "typo_key": 1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"t": 0.0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"t": 1.5}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"i0": 90}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"boundaries": [1, 2], "n_groups": 6}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"lr_sfp": 0.0}"#).is_err());
    }

    #[test]
    fn mode_and_dataset_parse_from_json() {
        let cfg = PipelineConfig::from_json(
            r#"{"mode": "uniform", "dataset": {"kind": "synthetic", "n": 640, "classes": 2, "size": 8}}"#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Uniform);
        assert_eq!(
            cfg.dataset,
            DatasetSource::Synthetic {
                n: 640,
                classes: 2,
                size: 8
            }
        );
        let cfg = PipelineConfig::from_json(
            r#"{"dataset": {"kind": "idx", "images": "a", "labels": "b"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.dataset, DatasetSource::Idx { .. }));
    }
}
