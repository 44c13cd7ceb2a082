//! Iterative sensitivity-driven pruning.
//!
//! Each iteration sweeps the current model, selects layer rates, prunes,
//! optionally recalibrates batch norms and scores the result against the
//! original model. Every iteration's model, plan and CSV reports are written
//! to the output directory next to a `trace.json` that is rewritten after
//! each step, so an interrupted run can be resumed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{cost_report, diff_reports, sparsity, CostReport};
use crate::error::{Error, Result};
use crate::eval::{calibration_batch, proxy_score, recalibrate_bn};
use crate::graph::build_graph;
use crate::io::{load_model, read_json, save_model, write_json};
use crate::ir::{LayerId, NetworkIR};
use crate::prune::{apply_plan, select_filters, Criterion, PruningPlan, SelectionMode};
use crate::sensitivity::{self, select, sweep_against, Selection, SelectionConfig};
use crate::tensor::TensorBuf;

pub const TRACE_FILE: &str = "trace.json";
pub const CONFIG_FILE: &str = "config.json";
pub const BASE_MODEL: &str = "base.json";
pub const TRACE_FORMAT: &str = "catprune-trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    None,
    /// Refresh batch norm running statistics on a calibration batch.
    #[default]
    BnRecalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopRules {
    /// Stop once the proxy score after recovery drops below this.
    pub min_score: f64,
    /// Stop once an iteration adds less sparsity than this (larger of the
    /// parameter and FLOP gains).
    pub min_new_sparsity: f64,
}

impl Default for StopRules {
    fn default() -> Self {
        StopRules {
            min_score: 0.0,
            min_new_sparsity: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { samples: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    pub max_iterations: usize,
    pub selection: SelectionConfig,
    pub criterion: Criterion,
    pub mode: SelectionMode,
    pub recovery: Recovery,
    pub stop_rules: StopRules,
    pub calibration: CalibrationConfig,
    /// Fine-tuning epochs a training setup would spend per score range.
    /// Informational only; copied into the trace as a suggestion.
    pub recovery_budget_note: BTreeMap<String, u32>,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            max_iterations: 14,
            selection: SelectionConfig::default(),
            criterion: Criterion::SmallestL2,
            mode: SelectionMode::Independent,
            recovery: Recovery::BnRecalibration,
            stop_rules: StopRules::default(),
            calibration: CalibrationConfig::default(),
            recovery_budget_note: BTreeMap::from([
                (">0.3".to_string(), 15),
                ("<=0.3".to_string(), 20),
                ("<0.1".to_string(), 25),
            ]),
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Parse("max_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_rules.min_score) {
            return Err(Error::Parse(format!(
                "min_score must be in [0, 1], got {}",
                self.stop_rules.min_score
            )));
        }
        if !(0.0..=1.0).contains(&self.stop_rules.min_new_sparsity) {
            return Err(Error::Parse(format!(
                "min_new_sparsity must be in [0, 1], got {}",
                self.stop_rules.min_new_sparsity
            )));
        }
        if self.calibration.samples == 0 {
            return Err(Error::Parse("calibration.samples must be at least 1".into()));
        }
        self.selection.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: IterationConfig = read_json(path.as_ref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    /// Hex SHA-256 of the config's JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Fine-tuning epochs suggested by `recovery_budget_note` for a score.
    pub fn suggested_epochs(&self, score: f64) -> Option<u32> {
        let key = if score > 0.3 {
            ">0.3"
        } else if score < 0.1 {
            "<0.1"
        } else {
            "<=0.3"
        };
        self.recovery_budget_note.get(key).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EmptySelection,
    ScoreBelowFloor,
    SparsityPlateau,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxIterations => "max iterations",
            StopReason::EmptySelection => "empty selection",
            StopReason::ScoreBelowFloor => "score below floor",
            StopReason::SparsityPlateau => "sparsity plateau",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub selections: Vec<Selection>,
    pub removed_filters: usize,
    pub params: u64,
    pub flops: u64,
    /// Cumulative, relative to the original model.
    pub params_sparsity: f64,
    pub flops_sparsity: f64,
    pub score_before_recovery: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested_finetune_epochs: Option<u32>,
    /// Paths relative to the run directory.
    pub model: String,
    pub plan: String,
    pub sensitivity_csv: String,
    pub cost_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub format: String,
    pub config_hash: String,
    pub base_model: String,
    pub base_params: u64,
    pub base_flops: u64,
    pub iterations: Vec<IterationRecord>,
    /// `None` while the run is unfinished.
    pub stop_reason: Option<StopReason>,
}

impl IterationTrace {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(TRACE_FILE);
        let trace: IterationTrace = read_json(&path).map_err(|e| match e {
            Error::Parse(msg) => Error::CorruptTrace(msg),
            other => other,
        })?;
        if trace.format != TRACE_FORMAT {
            return Err(Error::CorruptTrace(format!("unexpected format `{}`", trace.format)));
        }
        Ok(trace)
    }

    pub fn is_finished(&self) -> bool {
        self.stop_reason.is_some()
    }

    /// Path of the latest model, relative to the run directory.
    pub fn latest_model(&self) -> &str {
        self.iterations.last().map_or(&self.base_model, |r| &r.model)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop without a stop reason once this many iterations exist, as if
    /// the process had been killed. Used to exercise [`resume`].
    pub halt_after: Option<usize>,
}

/// Start a fresh run in `out_dir`, which is created if needed.
pub fn run(ir: &NetworkIR, config: &IterationConfig, out_dir: impl AsRef<Path>, opts: RunOptions) -> Result<IterationTrace> {
    config.validate()?;
    ir.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config.save(dir.join(CONFIG_FILE))?;
    save_model(ir, dir.join(BASE_MODEL))?;
    let base_cost = cost_report(ir)?;
    let trace = IterationTrace {
        format: TRACE_FORMAT.to_string(),
        config_hash: config.hash(),
        base_model: BASE_MODEL.to_string(),
        base_params: base_cost.total_params,
        base_flops: base_cost.total_flops,
        iterations: Vec::new(),
        stop_reason: None,
    };
    write_json(&dir.join(TRACE_FILE), &trace)?;
    drive(dir, config, ir, ir.clone(), trace, opts)
}

/// Continue the run in `dir` from its last completed iteration. A finished
/// run is returned unchanged.
pub fn resume(dir: impl AsRef<Path>, config: &IterationConfig, opts: RunOptions) -> Result<IterationTrace> {
    config.validate()?;
    let dir = dir.as_ref();
    let trace = IterationTrace::load(dir)?;
    if trace.config_hash != config.hash() {
        return Err(Error::CorruptTrace(format!(
            "config hash {} does not match the trace's {}",
            config.hash(),
            trace.config_hash
        )));
    }
    if trace.is_finished() {
        return Ok(trace);
    }
    let corrupt = |what: &str, e: Error| Error::CorruptTrace(format!("{what}: {e}"));
    let base = load_model(dir.join(&trace.base_model)).map_err(|e| corrupt("base model", e))?;
    let current = load_model(dir.join(trace.latest_model())).map_err(|e| corrupt("latest model", e))?;
    let base_cost = cost_report(&base)?;
    if (base_cost.total_params, base_cost.total_flops) != (trace.base_params, trace.base_flops) {
        return Err(Error::CorruptTrace("base model costs differ from the trace".into()));
    }
    for (i, rec) in trace.iterations.iter().enumerate() {
        if rec.index != i + 1 {
            return Err(Error::CorruptTrace(format!("iteration {} recorded as {}", i + 1, rec.index)));
        }
    }
    drive(dir, config, &base, current, trace, opts)
}

fn artifact(index: usize, suffix: &str) -> String {
    format!("iter_{index:02}{suffix}")
}

fn drive(
    dir: &Path,
    config: &IterationConfig,
    base: &NetworkIR,
    mut current: NetworkIR,
    mut trace: IterationTrace,
    opts: RunOptions,
) -> Result<IterationTrace> {
    let input = base.input_shape;
    let calibration = calibration_batch(input, config.calibration.samples, config.calibration.seed);
    let recalibration = calibration_batch(input, config.calibration.samples, config.calibration.seed.wrapping_add(1));
    let base_cost = cost_report(base)?;
    let mut selection = config.selection.clone();
    selection.exclusions = Some(selection.exclusions_for(base));

    let trace_path = dir.join(TRACE_FILE);
    loop {
        let done = trace.iterations.len();
        if done >= config.max_iterations {
            trace.stop_reason = Some(StopReason::MaxIterations);
            break;
        }
        if opts.halt_after.is_some_and(|h| done >= h) {
            break;
        }
        let index = done + 1;
        let step = step(dir, index, config, &selection, base, &base_cost, &current, &calibration, &recalibration)?;
        let Some((record, model)) = step else {
            log::info!("iteration {index}: no layer qualifies");
            trace.stop_reason = Some(StopReason::EmptySelection);
            break;
        };
        let (prev_p, prev_f) = trace
            .iterations
            .last()
            .map_or((0.0, 0.0), |r| (r.params_sparsity, r.flops_sparsity));
        let gain = (record.params_sparsity - prev_p).max(record.flops_sparsity - prev_f);
        log::info!(
            "iteration {index}: {} layers, params sparsity {:.4}, flops sparsity {:.4}, score {:.6}",
            record.selections.len(),
            record.params_sparsity,
            record.flops_sparsity,
            record.score
        );
        let score = record.score;
        trace.iterations.push(record);
        write_json(&trace_path, &trace)?;
        current = model;
        if score < config.stop_rules.min_score {
            trace.stop_reason = Some(StopReason::ScoreBelowFloor);
            break;
        }
        if gain < config.stop_rules.min_new_sparsity {
            trace.stop_reason = Some(StopReason::SparsityPlateau);
            break;
        }
    }
    write_json(&trace_path, &trace)?;
    Ok(trace)
}

/// One sweep, select, prune, recover, score cycle. `None` when nothing
/// qualifies for pruning.
#[allow(clippy::too_many_arguments)]
fn step(
    dir: &Path,
    index: usize,
    config: &IterationConfig,
    selection: &SelectionConfig,
    base: &NetworkIR,
    base_cost: &CostReport,
    current: &NetworkIR,
    calibration: &[TensorBuf],
    recalibration: &[TensorBuf],
) -> Result<Option<(IterationRecord, NetworkIR)>> {
    let graph = build_graph(current)?;
    let records = sweep_against(current, &graph, config.criterion, selection, calibration, base, base_cost)?;
    let sensitivity_csv = artifact(index, ".sensitivity.csv");
    write_file(&dir.join(&sensitivity_csv), |w| sensitivity::write_csv(&records, selection.a, w))?;

    let chosen = select(&records, selection);
    if chosen.is_empty() {
        return Ok(None);
    }
    let rates: Vec<(LayerId, f64)> = chosen.iter().map(|s| (s.layer, s.rate)).collect();
    let plan: PruningPlan = select_filters(current, &rates, config.criterion, config.mode)?;
    let pruned = apply_plan(current, &graph, &plan)?;
    let score_before_recovery = proxy_score(&pruned.ir, base, calibration)?.value();
    let model = match config.recovery {
        Recovery::None => pruned.ir,
        Recovery::BnRecalibration => recalibrate_bn(&pruned.ir, recalibration)?,
    };
    let score = proxy_score(&model, base, calibration)?.value();

    let cost = cost_report(&model)?;
    let diff = diff_reports(base_cost, &cost)?;
    let cost_csv = artifact(index, ".cost.csv");
    write_file(&dir.join(&cost_csv), |w| diff.write_csv(w))?;
    let model_file = artifact(index, ".json");
    save_model(&model, dir.join(&model_file))?;
    let plan_file = artifact(index, ".plan.json");
    plan.save(dir.join(&plan_file))?;

    let record = IterationRecord {
        index,
        selections: chosen,
        removed_filters: plan.removed_count(),
        params: cost.total_params,
        flops: cost.total_flops,
        params_sparsity: sparsity(base_cost.total_params, cost.total_params),
        flops_sparsity: sparsity(base_cost.total_flops, cost.total_flops),
        score_before_recovery,
        score,
        suggested_finetune_epochs: config.suggested_epochs(score),
        model: model_file,
        plan: plan_file,
        sensitivity_csv,
        cost_csv,
    };
    Ok(Some((record, model)))
}

fn write_file(path: &PathBuf, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| std::io::Write::flush(&mut w)).map_err(|e| Error::io(path, e))
}
