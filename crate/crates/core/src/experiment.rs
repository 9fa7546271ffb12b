//! Experiment orchestration and the on-disk run directory.
//!
//! A run directory holds `config.json`, `trace.jsonl`, `geometry.csv`,
//! `geometry.json`, `behavior.csv`, `summary.json` and `checkpoints/` with
//! the anchor, the final model and one subspace file per probed layer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{compare_conditions, finish_csv, BehaviorReport, Comparison, ConditionReport};
use crate::geometry::GeometryReport;
use crate::seeds;
use crate::synthdata::{gen_probe_set, gen_task_set};
use crate::toymodel::ToyGuardModel;
use crate::trainer::{
    self, prepare_anchors, Anchors, Datasets, EvalSettings, Mode, PretrainReport, RunOutput,
    RunSummary,
};

/// Generates every dataset of an experiment from its resolved config.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let probe = gen_probe_set(&cfg.data)?;
    let task = gen_task_set(
        &cfg.data.with_seed(seeds::derive(cfg.seed, seeds::TASK_DATA)),
        cfg.task.n_tasks,
        cfg.task.overlap,
    )?;
    let eval = gen_probe_set(
        &cfg.data
            .with_seed(seeds::derive(cfg.seed, seeds::EVAL_DATA))
            .with_n_per_class(cfg.eval.n_eval_per_class),
    )?;
    Ok(Datasets { probe, task, eval })
}

/// One experiment: data plus the aligned anchor, able to run any condition.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Datasets,
    pub anchors: Anchors,
    pub pretrain: Option<PretrainReport>,
}

impl Experiment {
    /// Pretrains the anchor from scratch.
    pub fn pretrained(config: &ExperimentConfig) -> Result<Self> {
        let config = config.clone().resolve()?;
        let data = generate_datasets(&config)?;
        let (model, report) = trainer::pretrain(
            &config.model.widths,
            &config.data,
            &data.probe,
            &config.pretrain,
            config.seed,
        )?;
        Self::with_anchor_model(config, data, &model, Some(report))
    }

    /// Uses an existing anchor checkpoint.
    pub fn from_anchor(config: &ExperimentConfig, anchor: &ToyGuardModel) -> Result<Self> {
        let config = config.clone().resolve()?;
        if anchor.widths() != config.model.widths.as_slice() {
            return Err(Error::Config(format!(
                "anchor widths {:?} differ from config {:?}",
                anchor.widths(),
                config.model.widths
            )));
        }
        let data = generate_datasets(&config)?;
        Self::with_anchor_model(config, data, anchor, None)
    }

    fn with_anchor_model(
        config: ExperimentConfig,
        data: Datasets,
        model: &ToyGuardModel,
        pretrain: Option<PretrainReport>,
    ) -> Result<Self> {
        let anchors = prepare_anchors(
            &model.snapshot(),
            &data.probe,
            &config.model.probe_layers,
            config.train.k,
            config.train.gamma,
            config.n_a(),
        )?;
        Ok(Self {
            config,
            data,
            anchors,
            pretrain,
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            threshold: self.config.eval.threshold,
            cka_subsample: self.config.eval.cka_subsample,
        }
    }

    pub fn run(&self, mode: Mode) -> Result<RunOutput> {
        let cfg = self.config.with_mode(mode);
        trainer::run(&cfg.train, &self.data, &self.anchors, self.eval_settings())
    }

    pub fn run_all(&self) -> Result<Vec<RunOutput>> {
        Mode::ALL.iter().map(|&m| self.run(m)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GeometryRow {
    condition: Mode,
    layer: usize,
    safety_drift: f64,
    drift_ratio: f64,
    cosine_sim: f64,
    fisher_score: f64,
    interclass_dist: f64,
    cka: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BehaviorRow {
    condition: Mode,
    refusal: f64,
    compliance: f64,
    ambiguous: f64,
    threshold: f64,
}

/// `geometry.csv` text for one condition.
pub fn geometry_csv(report: &ConditionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for g in &report.geometry {
        w.serialize(GeometryRow {
            condition: report.condition,
            layer: g.layer_index,
            safety_drift: g.safety_drift,
            drift_ratio: g.drift_ratio,
            cosine_sim: g.cosine_sim,
            fisher_score: g.fisher_score,
            interclass_dist: g.interclass_dist,
            cka: g.cka,
        })?;
    }
    finish_csv(w)
}

/// `behavior.csv` text for one condition.
pub fn behavior_csv(report: &ConditionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let b = &report.behavior;
    w.serialize(BehaviorRow {
        condition: report.condition,
        refusal: b.refusal_rate,
        compliance: b.compliance_rate,
        ambiguous: b.ambiguous_rate,
        threshold: b.confidence_threshold,
    })?;
    finish_csv(w)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &ToyGuardModel) -> Result<()> {
    write_file(path, &model.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<ToyGuardModel> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingAnchor(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    ToyGuardModel::read_from(bytes.as_slice(), &path.display().to_string())
}

/// Writes the full run directory for one condition.
pub fn write_run_dir(dir: &Path, exp: &Experiment, mode: Mode, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let mut cfg = exp.config.with_mode(mode);
    cfg.out = dir.to_path_buf();
    write_file(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;

    let mut trace = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
    for step in &out.trace {
        serde_json::to_writer(&mut trace, step)?;
        trace.write_all(b"\n")?;
    }
    trace.flush()?;

    write_file(&dir.join("geometry.csv"), geometry_csv(&out.report)?.as_bytes())?;
    write_file(
        &dir.join("geometry.json"),
        (serde_json::to_string_pretty(&out.report.geometry)? + "\n").as_bytes(),
    )?;
    write_file(&dir.join("behavior.csv"), behavior_csv(&out.report)?.as_bytes())?;
    write_file(
        &dir.join("summary.json"),
        (serde_json::to_string_pretty(&out.summary)? + "\n").as_bytes(),
    )?;
    write_checkpoint(&dir.join("checkpoints/anchor.fwtm"), exp.anchors.snapshot.model())?;
    write_checkpoint(&dir.join("checkpoints/final.fwtm"), &out.model)?;
    for sub in &exp.anchors.subspaces {
        let mut buf = Vec::new();
        sub.write_to(&mut buf)?;
        write_file(
            &dir.join(format!("checkpoints/subspace_layer{}.fwss", sub.layer_index())),
            &buf,
        )?;
    }
    info!("wrote {}", dir.display());
    Ok(())
}

/// Reads the condition report back from a run directory.
pub fn read_run_dir(dir: &Path) -> Result<ConditionReport> {
    let mut geometry = Vec::new();
    let mut condition = None;
    let mut rdr = csv::Reader::from_path(dir.join("geometry.csv"))?;
    for row in rdr.deserialize::<GeometryRow>() {
        let row = row?;
        condition = Some(row.condition);
        geometry.push(GeometryReport {
            layer_index: row.layer,
            safety_drift: row.safety_drift,
            drift_ratio: row.drift_ratio,
            cosine_sim: row.cosine_sim,
            fisher_score: row.fisher_score,
            interclass_dist: row.interclass_dist,
            cka: row.cka,
        });
    }
    let mut rdr = csv::Reader::from_path(dir.join("behavior.csv"))?;
    let b: BehaviorRow = rdr
        .deserialize()
        .next()
        .ok_or_else(|| Error::Format {
            path: dir.join("behavior.csv").display().to_string(),
            detail: "no rows".into(),
        })??;
    let condition = condition.ok_or_else(|| Error::Format {
        path: dir.join("geometry.csv").display().to_string(),
        detail: "no rows".into(),
    })?;
    if condition != b.condition {
        return Err(Error::Format {
            path: dir.display().to_string(),
            detail: format!("geometry is {condition}, behavior is {}", b.condition),
        });
    }
    Ok(ConditionReport {
        condition,
        geometry,
        behavior: BehaviorReport {
            refusal_rate: b.refusal,
            compliance_rate: b.compliance,
            ambiguous_rate: b.ambiguous,
            confidence_threshold: b.threshold,
        },
    })
}

/// Comparison over run directories; writes `comparison.csv` and
/// `heatmap.csv` into `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::Config(format!(
            "report needs at least 2 run directories, got {}",
            run_dirs.len()
        )));
    }
    let reports = run_dirs
        .iter()
        .map(|d| read_run_dir(d))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_conditions(&reports)?;
    write_file(&out.join("comparison.csv"), cmp.table_csv()?.as_bytes())?;
    write_file(&out.join("heatmap.csv"), cmp.heatmap_csv()?.as_bytes())?;
    Ok(cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKnob {
    Concentration,
    Overlap,
    Lambda0,
}

impl std::str::FromStr for SweepKnob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concentration" => Ok(Self::Concentration),
            "overlap" => Ok(Self::Overlap),
            "lambda0" => Ok(Self::Lambda0),
            other => Err(Error::Config(format!(
                "unknown sweep knob {other:?} (expected concentration, overlap or lambda0)"
            ))),
        }
    }
}

impl SweepKnob {
    pub fn name(self) -> &'static str {
        match self {
            Self::Concentration => "concentration",
            Self::Overlap => "overlap",
            Self::Lambda0 => "lambda0",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            Self::Concentration => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("concentration {value} is not a positive integer")));
                }
                cfg.data.concentration = value as usize;
            }
            Self::Overlap => cfg.task.overlap = value,
            Self::Lambda0 => cfg.train.lambda0 = value,
        }
        Ok(())
    }
}

/// Final-layer outcome of the three conditions for one (value, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub knob: SweepKnob,
    pub value: f64,
    pub seed: u64,
    pub recall_original: f64,
    pub recall_baseline: f64,
    pub recall_fwssr: f64,
    pub fisher_original: f64,
    pub fisher_baseline: f64,
    pub fisher_fwssr: f64,
    pub fisher_retention_baseline: f64,
    pub fisher_retention_fwssr: f64,
    pub drift_baseline: f64,
    pub drift_fwssr: f64,
    pub cka_baseline: f64,
    pub cka_fwssr: f64,
}

/// Seed-averaged [`SweepRun`] for one knob value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub knob: SweepKnob,
    pub value: f64,
    pub n_seeds: usize,
    pub recall_original: f64,
    pub recall_baseline: f64,
    pub recall_fwssr: f64,
    pub fisher_retention_baseline: f64,
    pub fisher_retention_fwssr: f64,
    pub cka_baseline: f64,
    pub cka_fwssr: f64,
}

/// Per-condition outputs of one sweep cell, kept for callers that need more
/// than the final-layer summary.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub run: SweepRun,
    pub reports: Vec<ConditionReport>,
}

fn final_layer(r: &ConditionReport) -> &GeometryReport {
    r.final_layer().expect("condition report without layers")
}

/// Runs all three conditions for every (value, seed) pair in parallel.
/// Each pair pretrains its own anchor. When `out` is given each condition
/// lands in `out/<knob>=<value>/seed=<seed>/<condition>`.
pub fn sweep_cells(
    base: &ExperimentConfig,
    knob: SweepKnob,
    values: &[f64],
    out: Option<&Path>,
) -> Result<Vec<SweepCell>> {
    if values.is_empty() || base.sweep.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| base.sweep.seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(value, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            knob.apply(&mut cfg, value)?;
            let exp = Experiment::pretrained(&cfg)?;
            let outputs = exp.run_all()?;
            if let Some(root) = out {
                for o in &outputs {
                    let dir = root
                        .join(format!("{}={value}", knob.name()))
                        .join(format!("seed={seed}"))
                        .join(o.report.condition.to_string());
                    write_run_dir(&dir, &exp, o.report.condition, o)?;
                }
            }
            let [orig, ft, mit] = [&outputs[0].report, &outputs[1].report, &outputs[2].report];
            let (go, gf, gm) = (final_layer(orig), final_layer(ft), final_layer(mit));
            let retention = |fs: f64| fs / go.fisher_score.max(f64::MIN_POSITIVE);
            Ok(SweepCell {
                run: SweepRun {
                    knob,
                    value,
                    seed,
                    recall_original: orig.behavior.refusal_rate,
                    recall_baseline: ft.behavior.refusal_rate,
                    recall_fwssr: mit.behavior.refusal_rate,
                    fisher_original: go.fisher_score,
                    fisher_baseline: gf.fisher_score,
                    fisher_fwssr: gm.fisher_score,
                    fisher_retention_baseline: retention(gf.fisher_score),
                    fisher_retention_fwssr: retention(gm.fisher_score),
                    drift_baseline: gf.safety_drift,
                    drift_fwssr: gm.safety_drift,
                    cka_baseline: gf.cka,
                    cka_fwssr: gm.cka,
                },
                reports: outputs.into_iter().map(|o| o.report).collect(),
            })
        })
        .collect()
}

/// Averages sweep runs per knob value, in the order values first appear.
pub fn summarize_sweep(runs: &[SweepRun]) -> Vec<SweepSummary> {
    let mut values: Vec<f64> = Vec::new();
    for r in runs {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.value == v).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&SweepRun) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepSummary {
                knob: group[0].knob,
                value: v,
                n_seeds: group.len(),
                recall_original: mean(|r| r.recall_original),
                recall_baseline: mean(|r| r.recall_baseline),
                recall_fwssr: mean(|r| r.recall_fwssr),
                fisher_retention_baseline: mean(|r| r.fisher_retention_baseline),
                fisher_retention_fwssr: mean(|r| r.fisher_retention_fwssr),
                cka_baseline: mean(|r| r.cka_baseline),
                cka_fwssr: mean(|r| r.cka_fwssr),
            }
        })
        .collect()
}

/// Runs a sweep and writes `sweep_runs.csv` and `sweep_summary.csv` into `out`.
pub fn sweep(
    base: &ExperimentConfig,
    knob: SweepKnob,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepSummary>> {
    let cells = sweep_cells(base, knob, values, Some(out))?;
    let runs: Vec<SweepRun> = cells.into_iter().map(|c| c.run).collect();
    let summary = summarize_sweep(&runs);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &runs {
        w.serialize(r)?;
    }
    write_file(&out.join("sweep_runs.csv"), finish_csv(w)?.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &summary {
        w.serialize(s)?;
    }
    write_file(&out.join("sweep_summary.csv"), finish_csv(w)?.as_bytes())?;
    Ok(summary)
}

/// Pretrains the anchor and writes `anchor.fwtm`, `pretrain.json` and
/// `config.json` into the configured output directory.
pub fn pretrain_to_dir(cfg: &ExperimentConfig) -> Result<(PathBuf, PretrainReport)> {
    let cfg = cfg.clone().resolve()?;
    let data = generate_datasets(&cfg)?;
    let (model, report) =
        trainer::pretrain(&cfg.model.widths, &cfg.data, &data.probe, &cfg.pretrain, cfg.seed)?;
    let path = cfg.out.join("anchor.fwtm");
    write_checkpoint(&path, &model)?;
    write_file(
        &cfg.out.join("pretrain.json"),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    let mut resolved = cfg.clone();
    resolved.anchor = Some(path.clone());
    write_file(&cfg.out.join("config.json"), resolved.to_json()?.as_bytes())?;
    Ok((path, report))
}

/// Writes the probe, task and evaluation sets as CSV plus `data.json`
/// with their checksums.
pub fn gen_data_to_dir(cfg: &ExperimentConfig) -> Result<()> {
    let cfg = cfg.clone().resolve()?;
    let data = generate_datasets(&cfg)?;
    fs::create_dir_all(&cfg.out)?;
    data.probe.write_csv(&cfg.out.join("probe.csv"))?;
    data.task.write_csv(&cfg.out.join("task.csv"))?;
    data.eval.write_csv(&cfg.out.join("eval.csv"))?;
    let meta = serde_json::json!({
        "probe_checksum": data.probe.checksum(),
        "eval_checksum": data.eval.checksum(),
        "probe_rows": data.probe.len(),
        "task_rows": data.task.len(),
        "eval_rows": data.eval.len(),
        "task_direction": data.task.direction.as_slice(),
    });
    write_file(
        &cfg.out.join("data.json"),
        (serde_json::to_string_pretty(&meta)? + "\n").as_bytes(),
    )?;
    write_file(&cfg.out.join("config.json"), cfg.to_json()?.as_bytes())?;
    Ok(())
}

/// Loads the configured anchor and runs one condition into the output directory.
pub fn run_to_dir(cfg: &ExperimentConfig, mode: Mode) -> Result<RunSummary> {
    let anchor_path = cfg
        .anchor
        .clone()
        .ok_or_else(|| Error::MissingAnchor(cfg.out.join("anchor.fwtm")))?;
    let anchor = read_checkpoint(&anchor_path)?;
    let exp = Experiment::from_anchor(cfg, &anchor)?;
    let out = exp.run(mode)?;
    write_run_dir(&exp.config.out, &exp, mode, &out)?;
    Ok(out.summary)
}
