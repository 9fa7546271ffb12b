//! Small tanh MLP classifier with activation probes and exact reverse-mode
//! gradients, standing in for a guard model.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::geometry::{ActivationBatch, SnapshotTag};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FWTM";
const CHECKPOINT_VERSION: u32 = 1;

/// Default widths: 64 inputs, three hidden layers of 64, two logits.
pub const DEFAULT_WIDTHS: [usize; 5] = [64, 64, 64, 64, 2];

/// One affine map, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGuardModel {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    probe_layers: Vec<usize>,
}

/// Cached activations of one forward pass. `hidden[0]` is the input,
/// `hidden[l]` the post-tanh output of hidden layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    hidden: Vec<DMatrix<f64>>,
    logits: DMatrix<f64>,
    probe_layers: Vec<usize>,
}

impl ForwardPass {
    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn hidden(&self, layer: usize) -> Option<&DMatrix<f64>> {
        if layer == 0 {
            return None;
        }
        self.hidden.get(layer)
    }

    /// Probe batches in probe-layer order, tagged as `current`.
    pub fn probes(&self) -> Vec<ActivationBatch> {
        self.probes_tagged(SnapshotTag::Current)
    }

    pub(crate) fn probes_tagged(&self, tag: SnapshotTag) -> Vec<ActivationBatch> {
        self.probe_layers
            .iter()
            .map(|&l| {
                ActivationBatch::new(l, self.hidden[l].clone(), tag)
                    .expect("forward pass produced an invalid activation batch")
            })
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        self.logits.nrows()
    }
}

/// Parameter gradients, one entry per dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyGuardModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Layer by layer: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for row in l.weight.row_iter() {
                out.extend(row.iter().copied());
            }
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.zip_apply(&b.weight, |x, y| *x += scale * y);
            a.bias.zip_apply(&b.bias, |x, y| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[u8]) -> Result<(f64, DMatrix<f64>)> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(Error::shape("cross-entropy labels", n, labels.len()));
    }
    let classes = logits.ncols();
    let mut grad = DMatrix::zeros(n, classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= classes {
            return Err(Error::invalid("cross-entropy labels", format!("class {y}")));
        }
        let row = logits.row(i);
        let max = row.max();
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[y];
        for c in 0..classes {
            let p = (row[c] - log_z).exp();
            grad[(i, c)] = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Row-wise softmax.
pub fn softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

impl ToyGuardModel {
    /// Glorot-uniform weights drawn from `seed`, zero biases. Probes every hidden layer.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                Dense {
                    weight,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            probe_layers: (1..widths.len() - 1).collect(),
        })
    }

    /// Builds a model from explicit layers.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model layers", "no layers"));
        }
        let mut widths = vec![layers[0].weight.ncols()];
        for l in &layers {
            if l.weight.ncols() != *widths.last().unwrap() || l.bias.len() != l.weight.nrows() {
                return Err(Error::shape(
                    "model layers",
                    format!("input width {}", widths.last().unwrap()),
                    format!("{}x{} weight, {} bias", l.weight.nrows(), l.weight.ncols(), l.bias.len()),
                ));
            }
            widths.push(l.weight.nrows());
        }
        Self::check_widths(&widths)?;
        Ok(Self {
            probe_layers: (1..widths.len() - 1).collect(),
            widths,
            layers,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("layer widths", format!("{widths:?}")));
        }
        Ok(())
    }

    /// Restricts probing to the given hidden layers (1-based, sorted, deduplicated).
    pub fn with_probe_layers(mut self, probe_layers: &[usize]) -> Result<Self> {
        let hidden = self.n_hidden();
        let mut layers = probe_layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        if layers.iter().any(|&l| l == 0 || l > hidden) {
            return Err(Error::invalid(
                "probe layers",
                format!("{probe_layers:?} outside hidden layers 1..={hidden}"),
            ));
        }
        self.probe_layers = layers;
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn probe_layers(&self) -> &[usize] {
        &self.probe_layers
    }

    pub fn n_hidden(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward_with_probes(&self, inputs: &DMatrix<f64>) -> Result<ForwardPass> {
        if inputs.ncols() != self.widths[0] {
            return Err(Error::shape("model input width", self.widths[0], inputs.ncols()));
        }
        let mut hidden = Vec::with_capacity(self.layers.len());
        hidden.push(inputs.clone());
        let last = self.layers.len() - 1;
        let mut logits = DMatrix::zeros(0, 0);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &hidden[i] * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            if i == last {
                logits = z;
            } else {
                z.apply(|v| *v = v.tanh());
                hidden.push(z);
            }
        }
        Ok(ForwardPass {
            hidden,
            logits,
            probe_layers: self.probe_layers.clone(),
        })
    }

    /// Reverse-mode gradients of a scalar loss given its gradient w.r.t. the
    /// logits, plus optional extra gradients injected at hidden layers
    /// (`(layer, N x width)` pairs, e.g. from the subspace penalty).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_logits: &DMatrix<f64>,
        injected: &[(usize, DMatrix<f64>)],
    ) -> Result<Gradients> {
        if pass.hidden.len() != self.layers.len()
            || pass
                .hidden
                .iter()
                .zip(&self.widths)
                .any(|(h, &w)| h.ncols() != w)
        {
            return Err(Error::BackwardWithoutForward);
        }
        let n = pass.n_samples();
        let out_width = *self.widths.last().unwrap();
        if grad_logits.nrows() != n || grad_logits.ncols() != out_width {
            return Err(Error::shape(
                "logit gradient",
                format!("{n}x{out_width}"),
                format!("{}x{}", grad_logits.nrows(), grad_logits.ncols()),
            ));
        }
        for (layer, g) in injected {
            if *layer == 0 || *layer > self.n_hidden() {
                return Err(Error::invalid("injected gradient layer", layer));
            }
            if g.nrows() != n || g.ncols() != self.widths[*layer] {
                return Err(Error::shape(
                    "injected gradient",
                    format!("{n}x{}", self.widths[*layer]),
                    format!("{}x{}", g.nrows(), g.ncols()),
                ));
            }
        }

        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &pass.hidden[i];
            grads.layers[i].weight = delta.transpose() * input;
            grads.layers[i].bias = delta.row_sum().transpose();
            if i == 0 {
                break;
            }
            let mut upstream = &delta * &self.layers[i].weight;
            for (layer, g) in injected.iter().filter(|(l, _)| *l == i) {
                debug_assert_eq!(*layer, i);
                upstream += g;
            }
            upstream.zip_apply(input, |g, h| *g *= 1.0 - h * h);
            delta = upstream;
        }
        Ok(grads)
    }

    /// Plain SGD step, after rescaling `grads` to norm at most `clip` when
    /// given. Returns the gradient norm before clipping.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, clip: Option<f64>) -> f64 {
        let norm = grads.norm();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            p.weight.zip_apply(&g.weight, |w, d| *w -= lr * scale * d);
            p.bias.zip_apply(&g.bias, |b, d| *b -= lr * scale * d);
        }
        norm
    }

    /// Flattened parameters, same order as [`Gradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        Gradients {
            layers: self.layers.clone(),
        }
        .flatten()
    }

    /// Binary checkpoint: `"FWTM"`, version, width count and widths as
    /// little-endian u32, then each layer's weight (row-major) and bias as
    /// little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &width in &self.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            binfmt::write_row_major(&mut w, &l.weight)?;
            binfmt::write_f64s(&mut w, l.bias.iter().copied())?;
        }
        Ok(())
    }

    /// Reads a checkpoint; probe layers default to every hidden layer.
    pub fn read_from(mut r: impl Read, path: &str) -> Result<Self> {
        binfmt::expect_magic(&mut r, CHECKPOINT_MAGIC, path)?;
        let version = binfmt::read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("unsupported version {version}"),
            });
        }
        let count = binfmt::read_u32(&mut r)? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("implausible width count {count}"),
            });
        }
        let widths = (0..count)
            .map(|_| binfmt::read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count - 1);
        for w in widths.windows(2) {
            let weight = binfmt::read_row_major(&mut r, w[1], w[0])?;
            let bias = DVector::from_vec(binfmt::read_f64s(&mut r, w[1])?);
            layers.push(Dense { weight, bias });
        }
        Self::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Content hash of the checkpoint bytes (hex, 16 chars).
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            id: self.fingerprint(),
            model: self.clone(),
        }
    }
}

/// Frozen deep copy of a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    id: String,
    model: ToyGuardModel,
}

impl ModelSnapshot {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn model(&self) -> &ToyGuardModel {
        &self.model
    }

    /// A trainable copy of the frozen parameters.
    pub fn thaw(&self) -> ToyGuardModel {
        self.model.clone()
    }

    /// Probe activations of the frozen model, tagged as `anchor`.
    pub fn anchor_forward(&self, inputs: &DMatrix<f64>) -> Result<Vec<ActivationBatch>> {
        Ok(self
            .model
            .forward_with_probes(inputs)?
            .probes_tagged(SnapshotTag::Anchor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn zero_model_gives_zero_probes() {
        let mut m = ToyGuardModel::new(&[3, 4, 4, 2], 1).unwrap();
        for l in m.layers_mut() {
            l.weight.fill(0.0);
        }
        let pass = m.forward_with_probes(&dmatrix![1.0, -2.0, 0.5]).unwrap();
        assert!(pass.logits().iter().all(|&v| v == 0.0));
        for p in pass.probes() {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layer_is_tanh() {
        let m = ToyGuardModel::from_layers(vec![
            Dense {
                weight: DMatrix::identity(3, 3),
                bias: DVector::zeros(3),
            },
            Dense {
                weight: DMatrix::zeros(2, 3),
                bias: DVector::zeros(2),
            },
        ])
        .unwrap();
        let pass = m.forward_with_probes(&dmatrix![0.0, 1.0, 0.0]).unwrap();
        let probe = &pass.probes()[0];
        assert_eq!(probe.layer_index(), 1);
        assert_eq!(probe.data().as_slice(), &[0.0, 1.0f64.tanh(), 0.0]);
    }

    #[test]
    fn width_mismatch() {
        let m = ToyGuardModel::new(&[3, 4, 2], 1).unwrap();
        assert!(m.forward_with_probes(&dmatrix![1.0, 2.0]).is_err());
        assert!(ToyGuardModel::new(&[3], 1).is_err());
        assert!(m.clone().with_probe_layers(&[2]).is_err());
    }

    #[test]
    fn backward_rejects_foreign_pass() {
        let small = ToyGuardModel::new(&[3, 4, 2], 1).unwrap();
        let deep = ToyGuardModel::new(&[3, 4, 4, 2], 1).unwrap();
        let pass = small.forward_with_probes(&dmatrix![1.0, 2.0, 3.0]).unwrap();
        let g = DMatrix::zeros(1, 2);
        assert!(matches!(
            deep.backward(&pass, &g, &[]),
            Err(Error::BackwardWithoutForward)
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, grad) = cross_entropy(&DMatrix::zeros(2, 2), &[1, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad.as_slice(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn snapshot_is_a_frozen_copy() {
        let mut m = ToyGuardModel::new(&[3, 4, 4, 2], 9).unwrap();
        let x = dmatrix![0.3, -0.1, 0.8; 1.0, 0.0, -1.0];
        let snap = m.snapshot();
        let live = m.forward_with_probes(&x).unwrap().probes();
        let frozen = snap.anchor_forward(&x).unwrap();
        for (a, b) in live.iter().zip(&frozen) {
            assert_eq!(a.data(), b.data());
            assert_eq!(b.snapshot(), SnapshotTag::Anchor);
        }
        m.layers_mut()[0].weight[(0, 0)] += 1.0;
        assert_eq!(snap.anchor_forward(&x).unwrap(), frozen);
        assert_ne!(m.fingerprint(), snap.id());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyGuardModel::new(&DEFAULT_WIDTHS, 5).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"FWTM");
        let back = ToyGuardModel::read_from(bytes.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ToyGuardModel::read_from(&bytes[..20], "mem").is_err());
    }

    #[test]
    fn sgd_clips_gradient_norm() {
        let mut m = ToyGuardModel::new(&[2, 2], 3).unwrap();
        let before = m.flatten();
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].bias[0] = 10.0;
        let norm = m.sgd_step(&g, 0.5, Some(1.0));
        assert_eq!(norm, 10.0);
        let after = m.flatten();
        assert!((before[4] - after[4] - 0.5).abs() < 1e-15);
    }
}
