//! Fisher-weighted subspace penalty, diagonal Fisher weights and the
//! conflict-driven λ schedule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ActivationBatch, SafetySubspace};

pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1.0;
pub const DEFAULT_LAMBDA0: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_TAU: usize = 50;
pub const DEFAULT_CONFLICT_PERIOD: usize = 20;
/// Weights of the previous λ and of the freshly clipped target.
pub const LAMBDA_SMOOTHING: (f64, f64) = (0.95, 0.05);

/// Penalty value split by layer, with its gradient w.r.t. each layer's
/// current activations (same shape as the activation batch).
#[derive(Debug, Clone)]
pub struct PenaltyOutput {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub grads: Vec<DMatrix<f64>>,
}

fn check_layer_sets(
    subspaces: &[SafetySubspace],
    weights: &[DVector<f64>],
    current: &[ActivationBatch],
    anchor: &[ActivationBatch],
) -> Result<()> {
    let n = subspaces.len();
    if weights.len() != n || current.len() != n || anchor.len() != n {
        return Err(Error::LayerMismatch(format!(
            "{n} subspaces, {} weight vectors, {} current batches, {} anchor batches",
            weights.len(),
            current.len(),
            anchor.len()
        )));
    }
    for (((sub, w), cur), anc) in subspaces.iter().zip(weights).zip(current).zip(anchor) {
        let layer = sub.layer_index();
        if cur.layer_index() != layer || anc.layer_index() != layer {
            return Err(Error::LayerMismatch(format!(
                "subspace layer {layer} paired with current layer {} and anchor layer {}",
                cur.layer_index(),
                anc.layer_index()
            )));
        }
        if w.len() != sub.k() {
            return Err(Error::shape("fisher weights", sub.k(), w.len()));
        }
        if cur.n_samples() != anc.n_samples() || cur.dim() != sub.dim() || anc.dim() != sub.dim() {
            return Err(Error::shape(
                "penalty batches",
                format!("{}x{}", anc.n_samples(), sub.dim()),
                format!("{}x{}", cur.n_samples(), cur.dim()),
            ));
        }
    }
    Ok(())
}

/// Sum over layers of the batch mean of `|F ⊙ U (h - h0)|²`.
///
/// Anchor activations are constants; the returned gradient is taken only
/// w.r.t. the current activations.
pub fn fwssr_penalty(
    subspaces: &[SafetySubspace],
    weights: &[DVector<f64>],
    current: &[ActivationBatch],
    anchor: &[ActivationBatch],
) -> Result<PenaltyOutput> {
    check_layer_sets(subspaces, weights, current, anchor)?;
    let mut per_layer = Vec::with_capacity(subspaces.len());
    let mut grads = Vec::with_capacity(subspaces.len());
    for (((sub, w), cur), anc) in subspaces.iter().zip(weights).zip(current).zip(anchor) {
        let n = cur.n_samples() as f64;
        let diff = cur.data() - anc.data();
        let mut proj = sub.project_rows(&diff);
        let mut value = 0.0;
        for (j, mut col) in proj.column_iter_mut().enumerate() {
            let f = w[j];
            value += col.norm_squared() * f * f;
            col *= f * f;
        }
        per_layer.push(value / n);
        grads.push(proj * sub.basis() * (2.0 / n));
    }
    Ok(PenaltyOutput {
        total: per_layer.iter().sum(),
        per_layer,
        grads,
    })
}

/// Per-direction mean of the squared projection coordinates `(U h)²`.
pub fn estimate_fisher(sub: &SafetySubspace, acts: &ActivationBatch) -> Result<DVector<f64>> {
    if acts.dim() != sub.dim() {
        return Err(Error::shape("fisher activations", sub.dim(), acts.dim()));
    }
    let proj = sub.project_rows(acts.data());
    let n = acts.n_samples() as f64;
    Ok(DVector::from_iterator(
        sub.k(),
        proj.column_iter().map(|c| c.norm_squared() / n),
    ))
}

/// Rescales raw weights to mean one. A total mass at or below `eps` counts
/// as "no estimate yet" and yields the uniform all-ones vector.
pub fn normalize_fisher(raw: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
    if raw.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(
            "fisher weights",
            "entries must be finite and nonnegative",
        ));
    }
    let total: f64 = raw.iter().sum();
    if total <= eps {
        return Ok(DVector::from_element(raw.len(), 1.0));
    }
    Ok(raw * (raw.len() as f64 / total))
}

/// Raw per-layer Fisher weights with EMA bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherState {
    weights: Vec<DVector<f64>>,
    beta: f64,
    update_period: usize,
    steps_since_update: usize,
}

impl FisherState {
    /// Uniform weights `1_k` for every layer.
    pub fn new(ks: &[usize], beta: f64, update_period: usize) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid("fisher beta", beta));
        }
        if update_period == 0 {
            return Err(Error::invalid("fisher update period", 0));
        }
        Ok(Self {
            weights: ks.iter().map(|&k| DVector::from_element(k, 1.0)).collect(),
            beta,
            update_period,
            steps_since_update: 0,
        })
    }

    pub fn weights(&self) -> &[DVector<f64>] {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn update_period(&self) -> usize {
        self.update_period
    }

    pub fn steps_since_update(&self) -> usize {
        self.steps_since_update
    }

    /// Counts one optimizer step.
    pub fn tick(&mut self) {
        self.steps_since_update += 1;
    }

    pub fn due(&self) -> bool {
        self.steps_since_update >= self.update_period
    }

    /// Mean-normalized weights as applied inside the penalty.
    pub fn normalized(&self, eps: f64) -> Result<Vec<DVector<f64>>> {
        self.weights.iter().map(|w| normalize_fisher(w, eps)).collect()
    }

    /// `F <- beta F + (1 - beta) fresh` on every layer; resets the step counter.
    pub fn ema_update(&mut self, fresh: &[DVector<f64>]) -> Result<()> {
        if fresh.len() != self.weights.len() {
            return Err(Error::LayerMismatch(format!(
                "{} fresh fisher vectors for {} layers",
                fresh.len(),
                self.weights.len()
            )));
        }
        for (w, f) in self.weights.iter().zip(fresh) {
            if w.len() != f.len() {
                return Err(Error::shape("fresh fisher weights", w.len(), f.len()));
            }
            if f.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(
                    "fresh fisher weights",
                    "entries must be finite and nonnegative",
                ));
            }
        }
        let beta = self.beta;
        for (w, f) in self.weights.iter_mut().zip(fresh) {
            w.zip_apply(f, |a, b| *a = beta * *a + (1.0 - beta) * b);
        }
        self.steps_since_update = 0;
        Ok(())
    }
}

/// Cosine similarity of two flattened gradients. A side whose norm is at
/// most `eps` counts as zero and yields 0.
pub fn gradient_conflict(task_grad: &[f64], safety_grad: &[f64], eps: f64) -> Result<f64> {
    if task_grad.len() != safety_grad.len() {
        return Err(Error::shape(
            "gradient conflict",
            task_grad.len(),
            safety_grad.len(),
        ));
    }
    let dot: f64 = task_grad.iter().zip(safety_grad).map(|(a, b)| a * b).sum();
    let na = task_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = safety_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= eps || nb <= eps {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Adaptive regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub lambda: f64,
    pub lambda0: f64,
    pub conflict_period: usize,
    pub smoothing: (f64, f64),
    pub last_cosine: f64,
}

impl LambdaState {
    pub fn new(lambda0: f64, conflict_period: usize) -> Self {
        Self {
            lambda: lambda0.clamp(LAMBDA_MIN, LAMBDA_MAX),
            lambda0,
            conflict_period,
            smoothing: LAMBDA_SMOOTHING,
            last_cosine: 0.0,
        }
    }

    /// Whether step `t` (1-based) is a conflict-measurement step.
    pub fn measures_at(&self, step: usize) -> bool {
        self.conflict_period > 0 && step.is_multiple_of(self.conflict_period)
    }
}

/// One λ update from the measured task/safety gradient cosine `s`.
pub fn lambda_step(state: &LambdaState, s: f64) -> LambdaState {
    let s = s.clamp(-1.0, 1.0);
    let target = (state.lambda * (1.0 - 0.5 * s)).clamp(LAMBDA_MIN, LAMBDA_MAX);
    let (keep, take) = state.smoothing;
    let lambda = (keep * state.lambda + take * target).clamp(LAMBDA_MIN, LAMBDA_MAX);
    LambdaState {
        lambda,
        last_cosine: s,
        ..*state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SnapshotTag, SubspaceMeta, EPS};
    use nalgebra::dmatrix;

    fn sub(basis: DMatrix<f64>, layer: usize) -> SafetySubspace {
        SafetySubspace::new(
            basis,
            SubspaceMeta {
                layer_index: layer,
                ..SubspaceMeta::default()
            },
        )
        .unwrap()
    }

    fn acts(layer: usize, m: DMatrix<f64>) -> ActivationBatch {
        ActivationBatch::new(layer, m, SnapshotTag::Current).unwrap()
    }

    #[test]
    fn penalty_direct_arithmetic() {
        let s = [sub(dmatrix![1.0, 0.0], 1)];
        let w = [DVector::from_element(1, 1.0)];
        let cur = [acts(1, dmatrix![3.0, 4.0])];
        let anc = [acts(1, dmatrix![0.0, 0.0])];
        let out = fwssr_penalty(&s, &w, &cur, &anc).unwrap();
        assert_eq!(out.total, 9.0);
        assert_eq!(out.grads[0].as_slice(), &[6.0, 0.0]);

        let same = fwssr_penalty(&s, &w, &anc, &anc).unwrap();
        assert_eq!(same.total, 0.0);
        assert!(same.grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn penalty_layer_mismatch() {
        let s = [sub(dmatrix![1.0, 0.0], 1)];
        let w = [DVector::from_element(1, 1.0)];
        let wrong = [acts(2, dmatrix![3.0, 4.0])];
        let anc = [acts(1, dmatrix![0.0, 0.0])];
        assert!(matches!(
            fwssr_penalty(&s, &w, &wrong, &anc),
            Err(Error::LayerMismatch(_))
        ));
        assert!(matches!(
            fwssr_penalty(&s, &[], &anc, &anc),
            Err(Error::LayerMismatch(_))
        ));
    }

    #[test]
    fn fisher_estimate_cases() {
        let s = sub(dmatrix![1.0, 0.0; 0.0, 1.0], 0);
        let f = estimate_fisher(&s, &acts(0, dmatrix![1.0, 0.0; 3.0, 0.0])).unwrap();
        assert_eq!(f.as_slice(), &[5.0, 0.0]);
        let z = estimate_fisher(&s, &acts(0, DMatrix::zeros(3, 2))).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_cases() {
        let n = normalize_fisher(&DVector::from_vec(vec![1.0, 2.0, 3.0]), EPS).unwrap();
        assert_eq!(n.as_slice(), &[0.5, 1.0, 1.5]);
        let ones = DVector::from_element(4, 1.0);
        assert_eq!(normalize_fisher(&ones, EPS).unwrap(), ones);
        assert_eq!(normalize_fisher(&DVector::zeros(4), EPS).unwrap(), ones);
        assert!(normalize_fisher(&DVector::from_vec(vec![1.0, -0.5]), EPS).is_err());
    }

    #[test]
    fn ema_cases() {
        let mut st = FisherState::new(&[1], 0.9, 50).unwrap();
        for _ in 0..50 {
            st.tick();
        }
        assert!(st.due());
        st.ema_update(&[DVector::from_element(1, 2.0)]).unwrap();
        assert!((st.weights()[0][0] - 1.1).abs() < 1e-15);
        assert_eq!(st.steps_since_update(), 0);
        assert!(!st.due());

        let before = st.weights()[0].clone();
        st.ema_update(std::slice::from_ref(&before)).unwrap();
        assert!((st.weights()[0][0] - before[0]).abs() < 1e-15);

        assert!(st.ema_update(&[DVector::from_element(2, 1.0)]).is_err());
        assert!(st.ema_update(&[]).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut st = FisherState::new(&[1], 0.9, 1).unwrap();
        let v = 3.0;
        for n in 1..=40 {
            st.ema_update(&[DVector::from_element(1, v)]).unwrap();
            let expected = 0.9f64.powi(n) * (1.0 - v).abs();
            assert!(((st.weights()[0][0] - v).abs() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn conflict_cases() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((gradient_conflict(&g, &g, EPS).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_conflict(&g, &neg, EPS).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(gradient_conflict(&[1.0, 0.0], &[0.0, 2.0], EPS).unwrap(), 0.0);
        assert_eq!(gradient_conflict(&g, &[0.0; 3], EPS).unwrap(), 0.0);
        assert!(gradient_conflict(&g, &[1.0], EPS).is_err());
    }

    #[test]
    fn lambda_step_examples() {
        let st = LambdaState::new(0.1, 20);
        assert!((lambda_step(&st, 1.0).lambda - 0.0975).abs() < 1e-15);
        assert!((lambda_step(&st, -1.0).lambda - 0.1025).abs() < 1e-15);
        let high = LambdaState {
            lambda: 0.8,
            ..st
        };
        assert!((lambda_step(&high, -1.0).lambda - 0.81).abs() < 1e-15);
        assert_eq!(lambda_step(&st, 0.3).last_cosine, 0.3);
        assert!(st.measures_at(20) && st.measures_at(40) && !st.measures_at(21));
    }
}
