//! Safety-subspace extraction and latent-geometry metrics.
//!
//! Every metric compares a `current` batch of hidden states against an
//! `anchor` batch captured from the frozen aligned model on the same probe
//! rows, in the same order. The subspace itself is extracted once from the
//! anchor and never updated.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};

/// Guard used by every ratio in this crate.
pub const EPS: f64 = 1e-8;

/// Amplification of the class-mean difference rows in the augmented matrix.
pub const DEFAULT_GAMMA: f64 = 5.0;

/// Rows used for CKA.
pub const DEFAULT_CKA_SUBSAMPLE: usize = 64;

/// Orthonormality tolerance for subspace bases.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

const SUBSPACE_MAGIC: &[u8; 4] = b"FWSS";
const SUBSPACE_VERSION: u32 = 1;

/// Number of amplified mean-difference rows: `min(32, n_harmful)`.
pub fn default_n_a(n_harmful: usize) -> usize {
    n_harmful.min(32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotTag {
    Anchor,
    Current,
}

/// Per-sample hidden states at one probed layer, rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    layer_index: usize,
    data: DMatrix<f64>,
    snapshot: SnapshotTag,
}

impl ActivationBatch {
    pub fn new(layer_index: usize, data: DMatrix<f64>, snapshot: SnapshotTag) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape(
                "activation batch",
                "N >= 1 and d >= 1",
                format!("{}x{}", data.nrows(), data.ncols()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("activation batch", "non-finite entry"));
        }
        Ok(Self {
            layer_index,
            data,
            snapshot,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn snapshot(&self) -> SnapshotTag {
        self.snapshot
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Gathers the given rows (duplicates allowed) into a new batch.
    pub fn select_rows(&self, rows: &[usize]) -> ActivationBatch {
        ActivationBatch {
            layer_index: self.layer_index,
            data: self.data.select_rows(rows),
            snapshot: self.snapshot,
        }
    }
}

/// Class-conditional means and spreads at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean_harmful: DVector<f64>,
    pub mean_benign: DVector<f64>,
    pub spread_harmful: f64,
    pub spread_benign: f64,
    pub delta_mu: DVector<f64>,
    pub n_harmful: usize,
    pub n_benign: usize,
}

fn check_labels(labels: &[u8], n: usize) -> Result<(usize, usize)> {
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("labels", format!("non-binary label {bad}")));
    }
    let harmful = labels.iter().filter(|&&l| l == 1).count();
    let benign = n - harmful;
    if harmful == 0 || benign == 0 {
        return Err(Error::DegenerateClasses { harmful, benign });
    }
    Ok((harmful, benign))
}

fn class_mean(data: &DMatrix<f64>, labels: &[u8], class: u8, count: usize) -> DVector<f64> {
    let mut sum = DVector::zeros(data.ncols());
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
        sum += data.row(i).transpose();
    }
    sum / count as f64
}

fn class_spread(data: &DMatrix<f64>, labels: &[u8], class: u8, mean: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
        total += (data.row(i).transpose() - mean).norm();
        count += 1;
    }
    total / count as f64
}

/// Per-class means and mean L2 spreads; label 1 is harmful, 0 benign.
pub fn compute_class_stats(acts: &ActivationBatch, labels: &[u8]) -> Result<ClassStats> {
    let (n_harmful, n_benign) = check_labels(labels, acts.n_samples())?;
    let data = acts.data();
    let mean_harmful = class_mean(data, labels, 1, n_harmful);
    let mean_benign = class_mean(data, labels, 0, n_benign);
    let spread_harmful = class_spread(data, labels, 1, &mean_harmful);
    let spread_benign = class_spread(data, labels, 0, &mean_benign);
    let delta_mu = &mean_harmful - &mean_benign;
    Ok(ClassStats {
        mean_harmful,
        mean_benign,
        spread_harmful,
        spread_benign,
        delta_mu,
        n_harmful,
        n_benign,
    })
}

/// Splits a batch by class and subtracts each class mean: `(harmful, benign)`.
pub fn class_centered(
    acts: &ActivationBatch,
    labels: &[u8],
    stats: &ClassStats,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_labels(labels, acts.n_samples())?;
    let rows_of = |class: u8| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    };
    let mut harmful = acts.data().select_rows(&rows_of(1));
    let mut benign = acts.data().select_rows(&rows_of(0));
    for mut row in harmful.row_iter_mut() {
        row -= stats.mean_harmful.transpose();
    }
    for mut row in benign.row_iter_mut() {
        row -= stats.mean_benign.transpose();
    }
    Ok((harmful, benign))
}

/// Stacks the centered harmful rows, the centered benign rows and `n_a`
/// copies of `gamma * delta_mu`, in that order.
pub fn build_augmented(
    stats: &ClassStats,
    centered_h: &DMatrix<f64>,
    centered_b: &DMatrix<f64>,
    gamma: f64,
    n_a: usize,
) -> Result<DMatrix<f64>> {
    let d = stats.delta_mu.len();
    if centered_h.ncols() != d || centered_b.ncols() != d {
        return Err(Error::shape(
            "augmented matrix",
            format!("{d} columns"),
            format!("{} and {}", centered_h.ncols(), centered_b.ncols()),
        ));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", gamma));
    }
    let (nh, nb) = (centered_h.nrows(), centered_b.nrows());
    let mut aug = DMatrix::zeros(nh + nb + n_a, d);
    aug.rows_mut(0, nh).copy_from(centered_h);
    aug.rows_mut(nh, nb).copy_from(centered_b);
    let amplified = stats.delta_mu.transpose() * gamma;
    for r in 0..n_a {
        aug.row_mut(nh + nb + r).copy_from(&amplified);
    }
    Ok(aug)
}

/// Where a subspace came from; carried along for reporting and persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceMeta {
    pub layer_index: usize,
    pub gamma: f64,
    pub n_a: usize,
    pub anchor_id: String,
}

impl Default for SubspaceMeta {
    fn default() -> Self {
        Self {
            layer_index: 0,
            gamma: DEFAULT_GAMMA,
            n_a: 0,
            anchor_id: String::new(),
        }
    }
}

/// Fixed row-orthonormal `k x d` basis for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetySubspace {
    basis: DMatrix<f64>,
    meta: SubspaceMeta,
}

impl SafetySubspace {
    /// Wraps an existing basis, rejecting anything that is not row-orthonormal.
    pub fn new(basis: DMatrix<f64>, meta: SubspaceMeta) -> Result<Self> {
        if basis.nrows() == 0 || basis.nrows() > basis.ncols() {
            return Err(Error::RankTooLarge {
                k: basis.nrows(),
                max: basis.ncols(),
            });
        }
        let err = orthonormality_error(&basis);
        if !(err < ORTHONORMAL_TOL) {
            return Err(Error::invalid(
                "subspace basis",
                format!("rows not orthonormal (max deviation {err:e})"),
            ));
        }
        Ok(Self { basis, meta })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn layer_index(&self) -> usize {
        self.meta.layer_index
    }

    pub fn gamma(&self) -> f64 {
        self.meta.gamma
    }

    pub fn n_a(&self) -> usize {
        self.meta.n_a
    }

    pub fn anchor_id(&self) -> &str {
        &self.meta.anchor_id
    }

    /// Projection coordinates of every row: `rows * basis^T`, shape `N x k`.
    pub fn project_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        rows * self.basis.transpose()
    }

    /// Binary layout: `"FWSS"`, version, layer, k, d as little-endian u32,
    /// then the basis as row-major little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(SUBSPACE_MAGIC)?;
        for v in [
            SUBSPACE_VERSION,
            self.meta.layer_index as u32,
            self.k() as u32,
            self.dim() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        binfmt::write_row_major(&mut w, &self.basis)?;
        Ok(())
    }

    /// Reads a basis written by [`SafetySubspace::write_to`]. Gamma, `n_a` and the
    /// anchor id are not stored and come back as defaults.
    pub fn read_from(mut r: impl Read, path: &str) -> Result<Self> {
        binfmt::expect_magic(&mut r, SUBSPACE_MAGIC, path)?;
        let version = binfmt::read_u32(&mut r)?;
        if version != SUBSPACE_VERSION {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("unsupported version {version}"),
            });
        }
        let layer_index = binfmt::read_u32(&mut r)? as usize;
        let k = binfmt::read_u32(&mut r)? as usize;
        let d = binfmt::read_u32(&mut r)? as usize;
        let basis = binfmt::read_row_major(&mut r, k, d)?;
        Self::new(
            basis,
            SubspaceMeta {
                layer_index,
                ..SubspaceMeta::default()
            },
        )
    }
}

/// `max |B B^T - I|` over all entries.
pub fn orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let gram = basis * basis.transpose();
    let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
    (gram - eye).amax()
}

/// Flips `v` so that its largest-magnitude coordinate (first on ties) is positive.
pub(crate) fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` right singular vectors of `aug`, ordered by descending singular value.
pub fn extract_subspace(aug: &DMatrix<f64>, k: usize, meta: SubspaceMeta) -> Result<SafetySubspace> {
    let max = aug.nrows().min(aug.ncols());
    if k == 0 || k > max {
        return Err(Error::RankTooLarge { k, max });
    }
    if aug.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("augmented matrix", "non-finite entry"));
    }
    let svd = nalgebra::SVD::try_new(aug.clone(), false, true, f64::EPSILON, 10_000)
        .ok_or(Error::SvdNonConvergence)?;
    let v_t = svd.v_t.ok_or(Error::SvdNonConvergence)?;
    let mut basis = v_t.rows(0, k).into_owned();
    for r in 0..k {
        let mut row: Vec<f64> = basis.row(r).iter().copied().collect();
        canonical_sign(&mut row);
        basis.row_mut(r).copy_from_slice(&row);
    }
    SafetySubspace::new(basis, meta)
}

/// Full pipeline on anchor activations: class stats, centering, augmentation, SVD.
pub fn fit_subspace(
    anchor: &ActivationBatch,
    labels: &[u8],
    k: usize,
    gamma: f64,
    n_a: usize,
    anchor_id: &str,
) -> Result<SafetySubspace> {
    let stats = compute_class_stats(anchor, labels)?;
    let (ch, cb) = class_centered(anchor, labels, &stats)?;
    let aug = build_augmented(&stats, &ch, &cb, gamma, n_a)?;
    extract_subspace(
        &aug,
        k,
        SubspaceMeta {
            layer_index: anchor.layer_index(),
            gamma,
            n_a,
            anchor_id: anchor_id.to_owned(),
        },
    )
}

fn paired_diff(
    current: &ActivationBatch,
    anchor: &ActivationBatch,
    dim: Option<usize>,
) -> Result<DMatrix<f64>> {
    if current.n_samples() != anchor.n_samples() {
        return Err(Error::shape(
            "paired batches (rows)",
            anchor.n_samples(),
            current.n_samples(),
        ));
    }
    if current.dim() != anchor.dim() {
        return Err(Error::shape("paired batches (columns)", anchor.dim(), current.dim()));
    }
    if let Some(d) = dim {
        if current.dim() != d {
            return Err(Error::shape("subspace dimension", d, current.dim()));
        }
    }
    Ok(current.data() - anchor.data())
}

fn mean_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).sum::<f64>() / m.nrows() as f64
}

/// Mean over samples of the projected activation change `|U (h - h0)|`.
pub fn safety_drift(
    sub: &SafetySubspace,
    current: &ActivationBatch,
    anchor: &ActivationBatch,
) -> Result<f64> {
    let diff = paired_diff(current, anchor, Some(sub.dim()))?;
    Ok(mean_row_norm(&sub.project_rows(&diff)))
}

/// Share of the mean activation change that lies inside the subspace.
pub fn drift_ratio(
    sub: &SafetySubspace,
    current: &ActivationBatch,
    anchor: &ActivationBatch,
    eps: f64,
) -> Result<f64> {
    let diff = paired_diff(current, anchor, Some(sub.dim()))?;
    let inside = mean_row_norm(&sub.project_rows(&diff));
    Ok(inside / (mean_row_norm(&diff) + eps))
}

/// Mean per-sample cosine between paired rows. A pair where either row has
/// norm at most `eps` contributes 0.
pub fn activation_cosine(current: &ActivationBatch, anchor: &ActivationBatch, eps: f64) -> Result<f64> {
    paired_diff(current, anchor, None)?;
    let total: f64 = current
        .data()
        .row_iter()
        .zip(anchor.data().row_iter())
        .map(|(a, b)| {
            let (na, nb) = (a.norm(), b.norm());
            if na <= eps || nb <= eps {
                0.0
            } else {
                (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    Ok(total / current.n_samples() as f64)
}

pub fn interclass_distance(stats: &ClassStats) -> f64 {
    stats.delta_mu.norm()
}

/// Class separation relative to summed intra-class spread.
pub fn fisher_score(stats: &ClassStats, eps: f64) -> Result<f64> {
    let num = interclass_distance(stats);
    let denom = stats.spread_harmful + stats.spread_benign + eps;
    if !num.is_finite() || !denom.is_finite() {
        return Err(Error::invalid("fisher score", "non-finite class stats"));
    }
    Ok(num / denom)
}

/// Ascending row indices kept for CKA: the first `subsample` entries of a
/// seeded permutation of `0..n`, or every row when `n <= subsample`.
pub fn cka_indices(n: usize, subsample: usize, seed: u64) -> Vec<usize> {
    if n <= subsample {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..subsample].to_vec();
    keep.sort_unstable();
    keep
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Linear CKA with the biased HSIC estimator, evaluated in feature space.
///
/// Returns 0 when either side has no variance across the kept rows.
pub fn linear_cka(
    current: &ActivationBatch,
    anchor: &ActivationBatch,
    subsample: usize,
    seed: u64,
) -> Result<f64> {
    let n = current.n_samples();
    if n != anchor.n_samples() {
        return Err(Error::shape("CKA batches (rows)", anchor.n_samples(), n));
    }
    if n < 2 {
        return Err(Error::CkaUndefined { n });
    }
    let keep = cka_indices(n, subsample, seed);
    if keep.len() < 2 {
        return Err(Error::CkaUndefined { n: keep.len() });
    }
    let x = center_columns(&current.data().select_rows(&keep));
    let y = center_columns(&anchor.data().select_rows(&keep));
    let cross = (y.transpose() * &x).norm_squared();
    let self_x = (x.transpose() * &x).norm_squared();
    let self_y = (y.transpose() * &y).norm_squared();
    let denom = (self_x * self_y).sqrt();
    if denom <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    Ok(cross / denom)
}

/// All latent metrics for one layer of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub layer_index: usize,
    pub safety_drift: f64,
    pub drift_ratio: f64,
    pub cosine_sim: f64,
    pub fisher_score: f64,
    pub interclass_dist: f64,
    pub cka: f64,
}

/// Computes every metric of [`GeometryReport`] for one probed layer.
pub fn evaluate_layer(
    sub: &SafetySubspace,
    current: &ActivationBatch,
    anchor: &ActivationBatch,
    labels: &[u8],
    cka_subsample: usize,
    cka_seed: u64,
) -> Result<GeometryReport> {
    let stats = compute_class_stats(current, labels)?;
    Ok(GeometryReport {
        layer_index: current.layer_index(),
        safety_drift: safety_drift(sub, current, anchor)?,
        drift_ratio: drift_ratio(sub, current, anchor, EPS)?,
        cosine_sim: activation_cosine(current, anchor, EPS)?,
        fisher_score: fisher_score(&stats, EPS)?,
        interclass_dist: interclass_distance(&stats),
        cka: linear_cka(current, anchor, cka_subsample, cka_seed)?,
    })
}
