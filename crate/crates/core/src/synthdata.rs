//! Seeded synthetic data: the balanced harmful/benign probe set and the
//! benign fine-tuning task.
//!
//! Harmful and benign class means differ only on the first `concentration`
//! input coordinates, by `separation / sqrt(concentration)` each, so the
//! total inter-class distance is `separation` regardless of how many
//! coordinates carry it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub d_in: usize,
    pub n_per_class: usize,
    pub concentration: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d_in: 64,
            n_per_class: 40,
            concentration: 2,
            separation: 6.0,
            noise_sigma: 1.0,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth spec: {msg}")));
        if self.d_in == 0 {
            return bad("d_in must be positive".into());
        }
        if self.concentration == 0 || self.concentration > self.d_in {
            return bad(format!(
                "concentration {} outside 1..={}",
                self.concentration, self.d_in
            ));
        }
        if self.n_per_class < 2 {
            return bad(format!("n_per_class {} < 2", self.n_per_class));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation {}", self.separation));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_n_per_class(&self, n_per_class: usize) -> Self {
        Self {
            n_per_class,
            ..self.clone()
        }
    }

    /// Class mean for label 1 (harmful) or 0 (benign).
    pub fn class_mean(&self, label: u8) -> DVector<f64> {
        let offset = 0.5 * self.separation / (self.concentration as f64).sqrt();
        let sign = if label == 1 { 1.0 } else { -1.0 };
        DVector::from_fn(self.d_in, |j, _| {
            if j < self.concentration {
                sign * offset
            } else {
                0.0
            }
        })
    }
}

/// Labeled probe inputs; label 1 is harmful, 0 benign.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<u8>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn harmful_inputs(&self) -> DMatrix<f64> {
        self.rows_with_label(1)
    }

    pub fn benign_inputs(&self) -> DMatrix<f64> {
        self.rows_with_label(0)
    }

    fn rows_with_label(&self, label: u8) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.inputs.select_rows(&rows)
    }

    /// SHA-256 over the row-major little-endian inputs followed by the labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for row in self.inputs.row_iter() {
            for v in row.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(&self.labels);
        hex::encode(h.finalize())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(path, &self.inputs, &self.labels)
    }
}

fn noise_row(rng: &mut ChaCha8Rng, mean: &DVector<f64>, sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect()
}

/// Balanced probe set: `n_per_class` rows per class with isotropic Gaussian
/// noise around the class means, rows shuffled by the seed.
pub fn gen_probe_set(spec: &SynthSpec) -> Result<ProbeSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_per_class;
    let mut rows = Vec::with_capacity(2 * n);
    for label in [1u8, 0u8] {
        let mean = spec.class_mean(label);
        for _ in 0..n {
            rows.push((noise_row(&mut rng, &mean, spec.noise_sigma), label));
        }
    }
    rows.shuffle(&mut rng);
    let flat: Vec<f64> = rows.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    Ok(ProbeSet {
        inputs: DMatrix::from_row_slice(2 * n, spec.d_in, &flat),
        labels: rows.into_iter().map(|(_, l)| l).collect(),
    })
}

/// Benign fine-tuning data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<u8>,
    /// Unit direction the labels threshold on.
    pub direction: DVector<f64>,
    pub overlap: f64,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(path, &self.inputs, &self.labels)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Benign task rows drawn from the benign class distribution, labeled by the
/// sign of their centered projection on a random unit direction.
///
/// The direction puts squared mass `overlap` on the safety coordinates
/// (the first `concentration`) and `1 - overlap` on the rest. When every
/// coordinate carries safety signal the direction lies entirely in them.
pub fn gen_task_set(spec: &SynthSpec, n_tasks: usize, overlap: f64) -> Result<TaskSet> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Config(format!("task overlap {overlap} outside [0, 1]")));
    }
    if n_tasks == 0 {
        return Err(Error::Config("n_tasks must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.concentration;
    let d = spec.d_in;
    let safe = random_unit(&mut rng, c);
    let rest = if c < d { random_unit(&mut rng, d - c) } else { Vec::new() };
    let (w_safe, w_rest) = if c < d {
        (overlap.sqrt(), (1.0 - overlap).sqrt())
    } else {
        (1.0, 0.0)
    };
    let direction = DVector::from_iterator(
        d,
        safe.iter().map(|v| v * w_safe).chain(rest.iter().map(|v| v * w_rest)),
    );

    let mean = spec.class_mean(0);
    let mut flat = Vec::with_capacity(n_tasks * d);
    let mut labels = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let row = noise_row(&mut rng, &mean, spec.noise_sigma);
        let score: f64 = row
            .iter()
            .zip(mean.iter())
            .zip(direction.iter())
            .map(|((x, m), w)| (x - m) * w)
            .sum();
        labels.push(u8::from(score > 0.0));
        flat.extend(row);
    }
    Ok(TaskSet {
        inputs: DMatrix::from_row_slice(n_tasks, d, &flat),
        labels,
        direction,
        overlap,
    })
}

fn write_labeled_csv(path: &Path, inputs: &DMatrix<f64>, labels: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..inputs.ncols()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in inputs.row_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
