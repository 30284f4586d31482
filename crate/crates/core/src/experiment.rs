//! The prune → finalize → retrain pipeline and its artifacts.
//!
//! Iterations are numbered globally across an optional pretraining phase, the
//! pruning phase and retraining. Each pruning iteration ticks the scheduler,
//! then takes one SGD step with the current group factors. Pruning ends at the
//! tick that reports every layer done, or at the iteration cap; a capped run
//! is reported as incomplete with its shortfall and is still retrained with
//! whatever masks exist.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compact::{build_compact, encode_compact};
use crate::config::{DatasetSource, Dtype, ExperimentConfig};
use crate::data::{load_cifar10, make_synthetic_split, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::groups::{GroupMask, GroupType};
use crate::nn::{backward, forward, init_params, predict, sgd_step, GroupTerms, NetworkSpec, Params, SgdConfig};
use crate::real::Real;
use crate::scheduler::{target_count, Scheduler, SchedulerEvent, SchedulerKind};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunPhase {
    Pretrain,
    Prune,
    Retrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerStats {
    pub sparsity: f64,
    pub lambda_min: f64,
    pub lambda_mean: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRow {
    pub iteration: u64,
    pub phase: RunPhase,
    /// Prediction loss `L` on the batch.
    pub loss: f64,
    /// `L` plus the weight-decay and group penalty terms.
    pub objective: f64,
    /// One entry per conv layer.
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub groups: usize,
    pub ratio: f64,
    pub target_count: usize,
    pub pruned_count: usize,
    pub sparsity: f64,
}

impl LayerOutcome {
    pub fn shortfall(&self) -> usize {
        self.target_count.saturating_sub(self.pruned_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Complete { all_reached_at: u64 },
    /// Layers listed with their missing group counts.
    Incomplete { shortfall: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheduler: SchedulerKind,
    pub group_type: GroupType,
    pub network_name: String,
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub status: RunStatus,
    pub layers: Vec<LayerOutcome>,
    pub prune_iterations_run: u64,
    /// Which split the accuracies were measured on.
    pub eval_split: String,
    pub accuracy_before_prune: f64,
    pub accuracy_before_retrain: f64,
    pub accuracy_after_retrain: f64,
    pub original_params: usize,
    pub compact_params: Option<usize>,
    pub compact_error: Option<String>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        matches!(self.status, RunStatus::Complete { .. })
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.sparsity).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub rows: Vec<IterationRow>,
    pub events: Vec<SchedulerEvent>,
    pub masks: Vec<GroupMask>,
    pub compact_model: Option<Vec<u8>>,
}

/// A finished run together with its final weights.
#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub record: RunRecord,
    pub spec: NetworkSpec,
    pub params: Params<T>,
}

pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
    pub eval_split: &'static str,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetSource::Synthetic { spec, test_per_class } => {
            let (train, test) = make_synthetic_split(spec, cfg.seed, *test_per_class);
            if test.is_empty() {
                Ok(Datasets { eval: train.clone(), train, eval_split: "train" })
            } else {
                Ok(Datasets { train, eval: test, eval_split: "test" })
            }
        }
        DatasetSource::Cifar10 { dir, subtract_mean, max_train, max_test } => {
            let c = load_cifar10(dir, *subtract_mean)?;
            let mut train = c.train;
            if let Some(n) = max_train {
                train.truncate(*n);
            }
            match c.test {
                Some(mut test) => {
                    if let Some(n) = max_test {
                        test.truncate(*n);
                    }
                    Ok(Datasets { train, eval: test, eval_split: "test" })
                }
                None => Ok(Datasets { eval: train.clone(), train, eval_split: "train" }),
            }
        }
    }
}

/// Top-1 accuracy over the whole dataset.
pub fn accuracy<T: Real>(spec: &NetworkSpec, params: &Params<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch::<T>(chunk);
        let logits = predict(spec, params, &x)?;
        correct += crate::nn::argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn layer_stats(sched: &Scheduler) -> Vec<LayerStats> {
    sched
        .layers()
        .iter()
        .map(|l| {
            let lam = l.lambdas();
            LayerStats {
                sparsity: l.sparsity(),
                lambda_min: lam.iter().copied().fold(f64::INFINITY, f64::min),
                lambda_mean: lam.iter().sum::<f64>() / lam.len() as f64,
                lambda_max: lam.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

fn sgd_config(cfg: &ExperimentConfig, lr: f64) -> SgdConfig {
    SgdConfig { learning_rate: lr, weight_decay: cfg.weight_decay, batch_size: cfg.batch_size }
}

struct Trainer<'a, T> {
    cfg: &'a ExperimentConfig,
    spec: &'a NetworkSpec,
    train: &'a Dataset,
    sampler: BatchSampler,
    params: Params<T>,
}

impl<T: Real> Trainer<'_, T> {
    /// One SGD step; returns the batch loss and the objective at the pre-step weights.
    fn step(&mut self, terms: &[Option<GroupTerms<'_>>], group_penalty: f64, lr: f64) -> Result<(f64, f64)> {
        let idx = self.sampler.next_batch(self.cfg.batch_size);
        let (x, labels) = self.train.batch::<T>(&idx);
        let pass = forward(self.spec, &self.params, &x, &labels)?;
        let grads = backward(self.spec, &self.params, &pass, &labels)?;
        let loss = pass.loss.as_f64();
        let objective = loss + 0.5 * self.cfg.weight_decay * self.params.weight_sq_norm() + group_penalty;
        sgd_step(&mut self.params, &grads, terms, &sgd_config(self.cfg, lr))?;
        Ok((loss, objective))
    }
}

/// Runs the full pipeline in precision `T` without writing anything.
pub fn run_experiment_typed<T: Real>(cfg: &ExperimentConfig) -> Result<RunOutcome<T>> {
    let data = load_datasets(cfg)?;
    run_on_data::<T>(cfg, &data)
}

pub fn run_on_data<T: Real>(cfg: &ExperimentConfig, data: &Datasets) -> Result<RunOutcome<T>> {
    let spec = &cfg.network;
    if data.train.shape() != spec.input || data.train.len() < cfg.batch_size {
        return Err(Error::config(
            "dataset",
            format!("{} training samples of {:?} for input {:?} and batch {}", data.train.len(), data.train.shape(), spec.input, cfg.batch_size),
        ));
    }
    let mut tr = Trainer {
        cfg,
        spec,
        train: &data.train,
        sampler: BatchSampler::new(data.train.len(), cfg.seed),
        params: init_params::<T>(spec, cfg.seed)?,
    };
    let original_params = tr.params.count();
    let log_every = cfg.log_interval;
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut it = 0u64;

    let mut sched = Scheduler::new(
        cfg.scheduler,
        spec,
        &tr.params,
        cfg.group_type,
        cfg.penalty_cap,
        cfg.threshold,
        cfg.update_interval,
    )?;
    let idle_stats = layer_stats(&sched);

    for k in 0..cfg.pretrain_iterations {
        let (loss, objective) = tr.step(&[], 0.0, cfg.pretrain_learning_rate)?;
        if k % log_every == 0 || k + 1 == cfg.pretrain_iterations {
            rows.push(IterationRow { iteration: it, phase: RunPhase::Pretrain, loss, objective, layers: idle_stats.clone() });
        }
        it += 1;
    }
    let accuracy_before_prune = accuracy(spec, &tr.params, &data.eval)?;

    let prune_start = it;
    let mut all_reached_at = None;
    for k in 0..cfg.prune_iterations {
        let ev = sched.tick(&mut tr.params, it)?;
        let done = sched.all_reached();
        events.extend(ev);
        if done {
            all_reached_at = Some(it);
            rows.push(IterationRow {
                iteration: it,
                phase: RunPhase::Prune,
                loss: f64::NAN,
                objective: f64::NAN,
                layers: layer_stats(&sched),
            });
            it += 1;
            break;
        }
        let penalty = sched.group_penalty(&tr.params);
        let terms = sched.terms();
        let (loss, objective) = tr.step(&terms, penalty, cfg.learning_rate)?;
        if k % log_every == 0 || k + 1 == cfg.prune_iterations {
            rows.push(IterationRow { iteration: it, phase: RunPhase::Prune, loss, objective, layers: layer_stats(&sched) });
        }
        it += 1;
    }
    let prune_iterations_run = it - prune_start;

    let layers: Vec<LayerOutcome> = sched
        .layers()
        .iter()
        .map(|l| LayerOutcome {
            layer: l.layer_id(),
            groups: l.partition().len(),
            ratio: l.settings().ratio,
            target_count: target_count(l.settings().ratio, l.partition().len()),
            pruned_count: l.pruned_count(),
            sparsity: l.sparsity(),
        })
        .collect();
    let (status, masks) = match all_reached_at {
        Some(at) => (RunStatus::Complete { all_reached_at: at }, sched.finalize()?),
        None => {
            let shortfall = layers.iter().filter(|l| l.shortfall() > 0).map(|l| (l.layer, l.shortfall())).collect();
            (RunStatus::Incomplete { shortfall }, sched.release_incomplete())
        }
    };
    let accuracy_before_retrain = accuracy(spec, &tr.params, &data.eval)?;

    let frozen: Vec<(usize, Vec<f64>)> = sched.layers().iter().map(|l| (l.layer_id(), vec![0.0; l.partition().len()])).collect();
    let final_stats = layer_stats(&sched);
    for k in 0..cfg.retrain_iterations {
        let mut terms: Vec<Option<GroupTerms<'_>>> = vec![None; spec.layers.len()];
        for ((li, zeros), (l, mask)) in frozen.iter().zip(sched.layers().iter().zip(&masks)) {
            terms[*li] = Some(GroupTerms { partition: l.partition(), lambdas: zeros, mask: Some(mask) });
        }
        let (loss, objective) = tr.step(&terms, 0.0, cfg.retrain.lr_at(k))?;
        if k % log_every == 0 || k + 1 == cfg.retrain_iterations {
            rows.push(IterationRow { iteration: it, phase: RunPhase::Retrain, loss, objective, layers: final_stats.clone() });
        }
        it += 1;
    }
    let accuracy_after_retrain = accuracy(spec, &tr.params, &data.eval)?;

    let (compact_model, compact_params, compact_error) = match build_compact(spec, &tr.params, &masks, cfg.group_type) {
        Ok((model, _)) => (Some(encode_compact(&model)?), Some(model.param_count()), None),
        Err(e) => (None, None, Some(e.to_string())),
    };

    let summary = RunSummary {
        scheduler: cfg.scheduler,
        group_type: cfg.group_type,
        network_name: cfg.network_name.clone(),
        network: spec.clone(),
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        status,
        layers,
        prune_iterations_run,
        eval_split: data.eval_split.into(),
        accuracy_before_prune,
        accuracy_before_retrain,
        accuracy_after_retrain,
        original_params,
        compact_params,
        compact_error,
    };
    Ok(RunOutcome {
        record: RunRecord { summary, rows, events, masks, compact_model },
        spec: spec.clone(),
        params: tr.params,
    })
}

/// Runs in the configured precision and writes the artifacts when an output
/// directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let record = match cfg.dtype {
        Dtype::F32 => run_experiment_typed::<f32>(cfg)?.record,
        Dtype::F64 => run_experiment_typed::<f64>(cfg)?.record,
    };
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, &record)?;
    }
    Ok(record)
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// `iteration,phase,loss,objective` then `sparsity_L`, `lambda_min_L`,
/// `lambda_mean_L`, `lambda_max_L` for every conv layer index `L`.
pub fn run_record_csv(record: &RunRecord) -> String {
    let mut out = String::from("iteration,phase,loss,objective");
    for l in &record.summary.layers {
        let i = l.layer;
        write!(out, ",sparsity_{i},lambda_min_{i},lambda_mean_{i},lambda_max_{i}").unwrap();
    }
    out.push('\n');
    for r in &record.rows {
        let phase = match r.phase {
            RunPhase::Pretrain => "pretrain",
            RunPhase::Prune => "prune",
            RunPhase::Retrain => "retrain",
        };
        write!(out, "{},{phase},{},{}", r.iteration, fmt_f64(r.loss), fmt_f64(r.objective)).unwrap();
        for s in &r.layers {
            write!(out, ",{},{},{},{}", s.sparsity, s.lambda_min, s.lambda_mean, s.lambda_max).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn events_jsonl(events: &[SchedulerEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub const RUN_RECORD_FILE: &str = "run_record.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPACT_FILE: &str = "compact_model.bin";

pub fn write_artifacts(dir: &Path, record: &RunRecord) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put(RUN_RECORD_FILE, run_record_csv(record).as_bytes())?;
    put(EVENTS_FILE, events_jsonl(&record.events)?.as_bytes())?;
    put(SUMMARY_FILE, serde_json::to_string_pretty(&record.summary)?.as_bytes())?;
    if let Some(bin) = &record.compact_model {
        put(COMPACT_FILE, bin)?;
    }
    Ok(written)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub scheduler: String,
    pub group_type: GroupType,
    pub complete: bool,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub accuracy_before_retrain: f64,
    pub accuracy_after_retrain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Tabulates runs that share a network, dataset, group type and targets.
pub fn compare_runs(runs: &[(String, RunSummary)]) -> Result<ComparisonTable> {
    let Some((first_label, first)) = runs.first() else {
        return Err(Error::Comparison("no runs given".into()));
    };
    for (label, r) in &runs[1..] {
        let mismatch = if r.network != first.network {
            Some("network")
        } else if r.dataset != first.dataset {
            Some("dataset")
        } else if r.group_type != first.group_type {
            Some("group type")
        } else if r.layers.iter().map(|l| l.target_count).ne(first.layers.iter().map(|l| l.target_count)) {
            Some("target sparsity")
        } else {
            None
        };
        if let Some(what) = mismatch {
            return Err(Error::Comparison(format!("{label} and {first_label} differ in {what}")));
        }
    }
    let rows = runs
        .iter()
        .map(|(label, r)| ComparisonRow {
            label: label.clone(),
            scheduler: match r.scheduler {
                SchedulerKind::Constant { lambda } => format!("constant({lambda})"),
                k => k.name().to_string(),
            },
            group_type: r.group_type,
            complete: r.is_complete(),
            target_sparsity: mean(r.layers.iter().map(|l| l.target_count as f64 / l.groups as f64)),
            achieved_sparsity: mean(r.layers.iter().map(|l| l.sparsity)),
            accuracy_before_retrain: r.accuracy_before_retrain,
            accuracy_after_retrain: r.accuracy_after_retrain,
        })
        .collect();
    Ok(ComparisonTable { rows })
}
