//! FW-SSR fine-tuning loop, the unregularized baseline and the no-training
//! original condition, plus pretraining of the aligned anchor.
//!
//! Step `t` (1-based) of the regularized loop:
//!
//! 1. task loss on the task batch, FW-SSR penalty on a safety batch drawn
//!    with replacement from the probe set, using the EMA'd Fisher weights;
//! 2. one clipped SGD step on `task + λ · penalty`;
//! 3. every `tau` steps the fresh Fisher estimate of this step is folded
//!    into the EMA;
//! 4. every `conflict_period` steps the task/penalty gradient cosine is
//!    measured at the updated parameters and λ is rescheduled.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{behavior_rates, false_refusal_rate, BehaviorReport, ConditionReport};
use crate::geometry::{self, ActivationBatch, GeometryReport, SafetySubspace, EPS};
use crate::regularizer::{
    estimate_fisher, fwssr_penalty, gradient_conflict, lambda_step, FisherState, LambdaState,
    PenaltyOutput,
};
use crate::seeds;
use crate::synthdata::{gen_probe_set, ProbeSet, SynthSpec, TaskSet};
use crate::toymodel::{cross_entropy, Gradients, ModelSnapshot, ToyGuardModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Original,
    #[serde(alias = "baseline")]
    BaselineFt,
    Fwssr,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Original, Mode::BaselineFt, Mode::Fwssr];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Original => "original",
            Mode::BaselineFt => "baseline_ft",
            Mode::Fwssr => "fwssr",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Mode::Original),
            "baseline" | "baseline_ft" => Ok(Mode::BaselineFt),
            "fwssr" => Ok(Mode::Fwssr),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected original, baseline or fwssr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_task: usize,
    pub batch_safe: usize,
    pub lambda0: f64,
    pub k: usize,
    pub gamma: f64,
    pub beta: f64,
    pub tau: usize,
    pub conflict_period: usize,
    pub grad_clip: f64,
    /// Keep the output layer at its anchor value; only hidden layers train.
    pub freeze_output: bool,
    /// When false, λ stays at `lambda0` (unclipped) and Fisher weights stay uniform.
    pub adaptive: bool,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    /// Values of the reference large-model recipe.
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 3,
            batch_task: 8,
            batch_safe: 16,
            lambda0: crate::regularizer::DEFAULT_LAMBDA0,
            k: 32,
            gamma: geometry::DEFAULT_GAMMA,
            beta: crate::regularizer::DEFAULT_BETA,
            tau: crate::regularizer::DEFAULT_TAU,
            conflict_period: crate::regularizer::DEFAULT_CONFLICT_PERIOD,
            grad_clip: 1.0,
            freeze_output: true,
            adaptive: true,
            seed: 17,
            mode: Mode::Fwssr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train config: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_task == 0 || self.batch_safe == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.k == 0 || self.tau == 0 || self.conflict_period == 0 {
            return bad("k, tau and conflict_period must be positive".into());
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 {}", self.lambda0));
        }
        if self.adaptive && self.lambda0 == 0.0 {
            return bad("adaptive schedule needs lambda0 > 0".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(self.gamma > 0.0) || !(self.grad_clip > 0.0) {
            return bad("gamma and grad_clip must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_per_class: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            learning_rate: 0.05,
            batch: 32,
            min_epochs: 10,
            max_epochs: 200,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub probe_accuracy: f64,
    pub final_loss: f64,
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(model: &ToyGuardModel, inputs: &DMatrix<f64>, labels: &[u8]) -> Result<f64> {
    let pass = model.forward_with_probes(inputs)?;
    let correct = pass
        .logits()
        .row_iter()
        .zip(labels)
        .filter(|(row, &l)| u8::from(row[1] > row[0]) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains a fresh model on held-out safety data until it classifies the
/// probe set at the target accuracy. This manufactures the aligned anchor.
pub fn pretrain(
    widths: &[usize],
    spec: &SynthSpec,
    probe: &ProbeSet,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ToyGuardModel, PretrainReport)> {
    let data = gen_probe_set(
        &spec
            .with_seed(seeds::derive(seed, seeds::PRETRAIN_DATA))
            .with_n_per_class(cfg.n_per_class),
    )?;
    let mut model = ToyGuardModel::new(widths, seeds::derive(seed, seeds::MODEL_INIT))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::PRETRAIN_ORDER));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| data.labels[i]).collect();
            let pass = model.forward_with_probes(&x)?;
            let (loss, grad) = cross_entropy(pass.logits(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    task_loss: loss,
                    penalty: 0.0,
                });
            }
            let grads = model.backward(&pass, &grad, &[])?;
            model.sgd_step(&grads, cfg.learning_rate, Some(1.0));
            loss_sum += loss;
            batches += 1;
        }
        final_loss = loss_sum / batches as f64;
        let acc = accuracy(&model, &probe.inputs, &probe.labels)?;
        debug!("pretrain epoch {epoch}: loss {final_loss:.4} probe accuracy {acc:.3}");
        if epoch >= cfg.min_epochs && acc >= cfg.target_accuracy {
            info!("pretrained anchor in {epoch} epochs, probe accuracy {acc:.3}");
            return Ok((
                model,
                PretrainReport {
                    epochs: epoch,
                    probe_accuracy: acc,
                    final_loss,
                },
            ));
        }
    }
    let acc = accuracy(&model, &probe.inputs, &probe.labels)?;
    Err(Error::Config(format!(
        "pretraining reached probe accuracy {acc:.3} < {} after {} epochs (loss {final_loss:.4})",
        cfg.target_accuracy, cfg.max_epochs
    )))
}

/// Frozen anchor model with its fixed subspaces and cached probe activations.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub snapshot: ModelSnapshot,
    pub probe: ProbeSet,
    pub subspaces: Vec<SafetySubspace>,
    pub activations: Vec<ActivationBatch>,
}

impl Anchors {
    pub fn probe_layers(&self) -> Vec<usize> {
        self.subspaces.iter().map(|s| s.layer_index()).collect()
    }

    /// Hash over the subspace bases and anchor activations; stable for the whole run.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.subspaces {
            for v in s.basis().iter() {
                h.update(v.to_le_bytes());
            }
        }
        for a in &self.activations {
            for v in a.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Extracts one subspace per probed layer from the aligned snapshot and
/// caches its activations on the full probe set.
pub fn prepare_anchors(
    snapshot: &ModelSnapshot,
    probe: &ProbeSet,
    probe_layers: &[usize],
    k: usize,
    gamma: f64,
    n_a: usize,
) -> Result<Anchors> {
    let model = snapshot.model().clone().with_probe_layers(probe_layers)?;
    let frozen = model.snapshot();
    let activations = frozen.anchor_forward(&probe.inputs)?;
    let subspaces = activations
        .iter()
        .map(|a| geometry::fit_subspace(a, &probe.labels, k, gamma, n_a, snapshot.id()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Anchors {
        snapshot: frozen,
        probe: probe.clone(),
        subspaces,
        activations,
    })
}

/// Per-step record written to `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub lambda: f64,
    pub s_t: Option<f64>,
    pub task_loss: f64,
    pub fwssr_loss: Option<f64>,
    pub per_layer_penalty: Vec<f64>,
    pub fisher_updated: bool,
    pub grad_norm: f64,
}

/// Mutable state of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ToyGuardModel,
    pub fisher: FisherState,
    pub lambda: LambdaState,
    pub step: usize,
    config: TrainConfig,
}

struct SafetyEval {
    penalty: PenaltyOutput,
    grads: Gradients,
    fresh_fisher: Vec<DVector<f64>>,
}

impl TrainState {
    pub fn new(model: ToyGuardModel, anchors: &Anchors, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let ks: Vec<usize> = anchors.subspaces.iter().map(|s| s.k()).collect();
        let model = model.with_probe_layers(&anchors.probe_layers())?;
        Ok(Self {
            model,
            fisher: FisherState::new(&ks, config.beta, config.tau)?,
            lambda: LambdaState::new(config.lambda0, config.conflict_period),
            step: 0,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn regularized(&self) -> bool {
        self.config.mode == Mode::Fwssr
    }

    /// λ applied to the penalty at the current step.
    pub fn effective_lambda(&self) -> f64 {
        match (self.config.mode, self.config.adaptive) {
            (Mode::Fwssr, true) => self.lambda.lambda,
            (Mode::Fwssr, false) => self.config.lambda0,
            _ => 0.0,
        }
    }

    fn task_gradients(&self, x: &DMatrix<f64>, y: &[u8]) -> Result<(f64, Gradients)> {
        let pass = self.model.forward_with_probes(x)?;
        let (loss, grad) = cross_entropy(pass.logits(), y)?;
        let mut grads = self.model.backward(&pass, &grad, &[])?;
        if self.config.freeze_output {
            if let Some(out) = grads.layers.last_mut() {
                out.weight.fill(0.0);
                out.bias.fill(0.0);
            }
        }
        Ok((loss, grads))
    }

    fn safety_gradients(&self, anchors: &Anchors, rows: &[usize]) -> Result<SafetyEval> {
        let x = anchors.probe.inputs.select_rows(rows);
        let pass = self.model.forward_with_probes(&x)?;
        let current = pass.probes();
        let anchor: Vec<ActivationBatch> =
            anchors.activations.iter().map(|a| a.select_rows(rows)).collect();
        let weights = self.fisher.normalized(EPS)?;
        let penalty = fwssr_penalty(&anchors.subspaces, &weights, &current, &anchor)?;
        let injected: Vec<(usize, DMatrix<f64>)> = current
            .iter()
            .zip(&penalty.grads)
            .map(|(c, g)| (c.layer_index(), g.clone()))
            .collect();
        let zero_logits = DMatrix::zeros(pass.n_samples(), pass.logits().ncols());
        let grads = self.model.backward(&pass, &zero_logits, &injected)?;
        let fresh_fisher = anchors
            .subspaces
            .iter()
            .zip(&current)
            .map(|(s, c)| estimate_fisher(s, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(SafetyEval {
            penalty,
            grads,
            fresh_fisher,
        })
    }

    /// One optimizer step on a task batch and a safety batch (probe row indices).
    pub fn train_step(
        &mut self,
        anchors: &Anchors,
        task_x: &DMatrix<f64>,
        task_y: &[u8],
        safe_rows: &[usize],
    ) -> Result<StepTrace> {
        if self.config.mode == Mode::Original {
            return Err(Error::Config("original mode does not train".into()));
        }
        self.step += 1;
        let t = self.step;
        let lambda = self.effective_lambda();
        let (task_loss, mut grads) = self.task_gradients(task_x, task_y)?;

        let safety = if self.regularized() {
            Some(self.safety_gradients(anchors, safe_rows)?)
        } else {
            None
        };
        let penalty_value = safety.as_ref().map_or(0.0, |s| s.penalty.total);
        if !task_loss.is_finite() || !penalty_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                task_loss,
                penalty: penalty_value,
            });
        }
        if let Some(s) = &safety {
            grads.add_scaled(&s.grads, lambda);
        }
        let grad_norm = self.model.sgd_step(&grads, self.config.learning_rate, Some(self.config.grad_clip));

        let mut fisher_updated = false;
        let mut s_t = None;
        if let (Some(s), true) = (&safety, self.config.adaptive) {
            self.fisher.tick();
            if self.fisher.due() {
                self.fisher.ema_update(&s.fresh_fisher)?;
                fisher_updated = true;
            }
            if self.lambda.measures_at(t) {
                let (_, task_grads) = self.task_gradients(task_x, task_y)?;
                let safe_grads = self.safety_gradients(anchors, safe_rows)?.grads;
                let cos = gradient_conflict(&task_grads.flatten(), &safe_grads.flatten(), EPS)?;
                self.lambda = lambda_step(&self.lambda, cos);
                debug!("step {t}: s_t {cos:+.4} -> lambda {:.5}", self.lambda.lambda);
                s_t = Some(cos);
            }
        }

        Ok(StepTrace {
            step: t,
            lambda,
            s_t,
            task_loss,
            fwssr_loss: safety.as_ref().map(|s| s.penalty.total),
            per_layer_penalty: safety.map(|s| s.penalty.per_layer).unwrap_or_default(),
            fisher_updated,
            grad_norm,
        })
    }
}

/// Data shared by every condition of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub probe: ProbeSet,
    pub task: TaskSet,
    /// Held-out labeled rows for behavior rates.
    pub eval: ProbeSet,
}

/// Outcome of one condition.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ToyGuardModel,
    pub trace: Vec<StepTrace>,
    pub report: ConditionReport,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub steps: usize,
    pub final_lambda: f64,
    pub harmful_recall: f64,
    pub benign_false_refusal: f64,
    pub task_accuracy: f64,
    pub probe_accuracy: f64,
    pub anchor_id: String,
    pub anchor_checksum: String,
}

/// Geometry of every probed layer of `model` against the anchors.
pub fn evaluate_geometry(
    model: &ToyGuardModel,
    anchors: &Anchors,
    cka_subsample: usize,
    cka_seed: u64,
) -> Result<Vec<GeometryReport>> {
    let model = model.clone().with_probe_layers(&anchors.probe_layers())?;
    let current = model.forward_with_probes(&anchors.probe.inputs)?.probes();
    anchors
        .subspaces
        .iter()
        .zip(&current)
        .zip(&anchors.activations)
        .map(|((s, c), a)| geometry::evaluate_layer(s, c, a, &anchors.probe.labels, cka_subsample, cka_seed))
        .collect()
}

/// Evaluation settings shared by every condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub threshold: f64,
    pub cka_subsample: usize,
}

/// Runs one condition from the anchor: no training for `original`, plain
/// task fine-tuning for `baseline_ft`, regularized fine-tuning for `fwssr`.
pub fn run(
    config: &TrainConfig,
    data: &Datasets,
    anchors: &Anchors,
    eval: EvalSettings,
) -> Result<RunOutput> {
    config.validate()?;
    let mut state = TrainState::new(anchors.snapshot.thaw(), anchors, config)?;
    let checksum = anchors.checksum();
    let mut trace = Vec::new();
    if config.mode != Mode::Original {
        let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::TASK_ORDER));
        let mut safe_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::SAFETY_SAMPLER));
        let n_probe = anchors.probe.len();
        let mut order: Vec<usize> = (0..data.task.len()).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(config.batch_task) {
                let x = data.task.inputs.select_rows(chunk);
                let y: Vec<u8> = chunk.iter().map(|&i| data.task.labels[i]).collect();
                let safe_rows: Vec<usize> =
                    (0..config.batch_safe).map(|_| safe_rng.random_range(0..n_probe)).collect();
                trace.push(state.train_step(anchors, &x, &y, &safe_rows)?);
            }
            if let Some(last) = trace.last() {
                debug!(
                    "{} epoch {}: step {} task loss {:.4} penalty {:?} lambda {:.5}",
                    config.mode,
                    epoch + 1,
                    last.step,
                    last.task_loss,
                    last.fwssr_loss,
                    last.lambda
                );
            }
        }
    }
    debug_assert_eq!(checksum, anchors.checksum());

    let model = state.model;
    let geometry = evaluate_geometry(
        &model,
        anchors,
        eval.cka_subsample,
        seeds::derive(config.seed, seeds::CKA_SUBSAMPLE),
    )?;
    let behavior: BehaviorReport =
        behavior_rates(&model, &data.eval.harmful_inputs(), eval.threshold)?;
    let summary = RunSummary {
        mode: config.mode,
        steps: state.step,
        final_lambda: state.lambda.lambda,
        harmful_recall: behavior.refusal_rate,
        benign_false_refusal: false_refusal_rate(&model, &data.eval.benign_inputs(), eval.threshold)?,
        task_accuracy: accuracy(&model, &data.task.inputs, &data.task.labels)?,
        probe_accuracy: accuracy(&model, &anchors.probe.inputs, &anchors.probe.labels)?,
        anchor_id: anchors.snapshot.id().to_owned(),
        anchor_checksum: checksum,
    };
    info!(
        "{}: recall {:.3} false-refusal {:.3} task acc {:.3}",
        config.mode, summary.harmful_recall, summary.benign_false_refusal, summary.task_accuracy
    );
    Ok(RunOutput {
        model,
        trace,
        report: ConditionReport {
            condition: config.mode,
            geometry,
            behavior,
        },
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("baseline".parse::<Mode>().unwrap(), Mode::BaselineFt);
        assert_eq!("fwssr".parse::<Mode>().unwrap(), Mode::Fwssr);
        assert!("nope".parse::<Mode>().is_err());
        assert_eq!(Mode::BaselineFt.to_string(), "baseline_ft");
        let m: Mode = serde_json::from_str("\"baseline\"").unwrap();
        assert_eq!(m, Mode::BaselineFt);
    }

    #[test]
    fn reference_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda0, c.beta, c.tau, c.k), (0.1, 0.9, 50, 32));
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c.conflict_period, 20);
        c.validate().unwrap();
        let bad = TrainConfig {
            beta: 1.0,
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        let zero = TrainConfig {
            lambda0: 0.0,
            ..c
        };
        assert!(zero.validate().is_err());
        TrainConfig {
            adaptive: false,
            ..zero
        }
        .validate()
        .unwrap();
    }
}
