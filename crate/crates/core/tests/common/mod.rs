#![allow(dead_code)]

use fwssr::config::ExperimentConfig;
use fwssr::geometry::{
    extract_subspace, linear_cka, ActivationBatch, SafetySubspace, SnapshotTag, SubspaceMeta,
};
use fwssr::regularizer::fwssr_penalty;
use fwssr::toymodel::{cross_entropy, Dense, ToyGuardModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn batch(layer: usize, data: DMatrix<f64>, tag: SnapshotTag) -> ActivationBatch {
    ActivationBatch::new(layer, data, tag).unwrap()
}

/// Random orthogonal `n x n` matrix via Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    let mut q = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut v = g.column(j).clone_owned();
        for i in 0..j {
            let qi = q.column(i).clone_owned();
            v -= &qi * qi.dot(&v);
        }
        q.set_column(j, &(&v / v.norm()));
    }
    q
}

/// Random row-orthonormal `k x d` basis.
pub fn random_subspace(rng: &mut ChaCha8Rng, layer: usize, k: usize, d: usize) -> SafetySubspace {
    let q = random_orthogonal(rng, d);
    SafetySubspace::new(
        q.rows(0, k).into_owned(),
        SubspaceMeta {
            layer_index: layer,
            ..SubspaceMeta::default()
        },
    )
    .unwrap()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues sorted descending with eigenvectors as matching columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Linear CKA straight from the definition: Gram matrices, centering
/// matrix `H`, biased HSIC `tr(K H L H) / (n-1)^2`.
pub fn cka_from_definition(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let k = x * x.transpose();
    let l = y * y.transpose();
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let hsic = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * &h * b * &h).trace() / ((n - 1) * (n - 1)) as f64;
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Random model with every dense layer drawn from a standard normal scaled
/// by `scale`, so activations stay in tanh's sensitive range.
pub fn random_model(rng: &mut ChaCha8Rng, widths: &[usize], scale: f64) -> ToyGuardModel {
    let layers = widths
        .windows(2)
        .map(|w| Dense {
            weight: gaussian(rng, w[1], w[0]) * scale,
            bias: DVector::from_fn(w[1], |_, _| rng.sample::<f64, _>(StandardNormal) * scale),
        })
        .collect();
    ToyGuardModel::from_layers(layers).unwrap()
}

pub fn set_params(model: &mut ToyGuardModel, flat: &[f64]) {
    let mut i = 0;
    for l in model.layers_mut() {
        for r in 0..l.weight.nrows() {
            for c in 0..l.weight.ncols() {
                l.weight[(r, c)] = flat[i];
                i += 1;
            }
        }
        for r in 0..l.bias.len() {
            l.bias[r] = flat[i];
            i += 1;
        }
    }
    assert_eq!(i, flat.len());
}

/// Central differences of `f` around `model`'s flattened parameters.
pub fn finite_difference(
    model: &ToyGuardModel,
    h: f64,
    f: impl Fn(&ToyGuardModel) -> f64,
) -> Vec<f64> {
    let base = model.flatten();
    let mut probe = model.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            set_params(&mut probe, &p);
            let up = f(&probe);
            p[i] = base[i] - h;
            set_params(&mut probe, &p);
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn ce_loss(model: &ToyGuardModel, x: &DMatrix<f64>, y: &[u8]) -> f64 {
    cross_entropy(model.forward_with_probes(x).unwrap().logits(), y).unwrap().0
}

/// Small, fast experiment config for tests that train.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.task.n_tasks = 320;
    cfg.train.epochs = 2;
    cfg.train.tau = 10;
    cfg.train.conflict_period = 5;
    cfg.eval.n_eval_per_class = 50;
    cfg
}

/// Central-difference step.
pub const H: f64 = 1e-5;

/// One (model, batch, λ, F̂) gradient-check case.
pub struct Tuple {
    pub model: ToyGuardModel,
    pub task_x: DMatrix<f64>,
    pub task_y: Vec<u8>,
    pub safe_x: DMatrix<f64>,
    pub anchor: Vec<ActivationBatch>,
    pub subspaces: Vec<fwssr::geometry::SafetySubspace>,
    pub weights: Vec<DVector<f64>>,
    pub lambda: f64,
}

pub fn tuple(seed: u64) -> Tuple {
    let mut rng = rng(seed);
    let d_in = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..3).map(|_| rng.random_range(2..=6)).collect();
    let widths = [vec![d_in], hidden.clone(), vec![2]].concat();
    let model = random_model(&mut rng, &widths, 0.6);
    let reference = random_model(&mut rng, &widths, 0.6);
    let n_task = rng.random_range(1..=6);
    let n_safe = rng.random_range(1..=6);
    let task_x = gaussian(&mut rng, n_task, d_in);
    let task_y = (0..n_task).map(|_| rng.random_range(0..2u8)).collect();
    let safe_x = gaussian(&mut rng, n_safe, d_in);
    let anchor = reference.forward_with_probes(&safe_x).unwrap().probes();
    let subspaces: Vec<_> = (1..=3)
        .map(|l| {
            let d = hidden[l - 1];
            let k = rng.random_range(1..=d);
            random_subspace(&mut rng, l, k, d)
        })
        .collect();
    let weights = subspaces
        .iter()
        .map(|s| {
            let raw = DVector::from_fn(s.k(), |_, _| rng.random_range(0.05..2.0));
            &raw * (s.k() as f64 / raw.sum())
        })
        .collect();
    Tuple {
        model,
        task_x,
        task_y,
        safe_x,
        anchor,
        subspaces,
        weights,
        lambda: rng.random_range(0.0..1.0),
    }
}

pub fn combined_loss(t: &Tuple, m: &ToyGuardModel) -> f64 {
    let task = ce_loss(m, &t.task_x, &t.task_y);
    let cur = m.forward_with_probes(&t.safe_x).unwrap().probes();
    task + t.lambda * fwssr_penalty(&t.subspaces, &t.weights, &cur, &t.anchor).unwrap().total
}

pub fn combined_grad(t: &Tuple) -> Vec<f64> {
    let pass = t.model.forward_with_probes(&t.task_x).unwrap();
    let (_, g) = cross_entropy(pass.logits(), &t.task_y).unwrap();
    let mut grads = t.model.backward(&pass, &g, &[]).unwrap();
    let safe = t.model.forward_with_probes(&t.safe_x).unwrap();
    let cur = safe.probes();
    let pen = fwssr_penalty(&t.subspaces, &t.weights, &cur, &t.anchor).unwrap();
    let injected: Vec<(usize, DMatrix<f64>)> =
        cur.iter().zip(pen.grads).map(|(c, g)| (c.layer_index(), g)).collect();
    let zeros = DMatrix::zeros(t.safe_x.nrows(), 2);
    let pg = t.model.backward(&safe, &zeros, &injected).unwrap();
    grads.add_scaled(&pg, t.lambda);
    grads.flatten()
}

/// Relative error between the analytic combined gradient and central
/// differences for tuple `seed`.
pub fn gradient_check_error(seed: u64) -> f64 {
    let t = tuple(seed);
    relative_error(&combined_grad(&t), &finite_difference(&t.model, H, |m| combined_loss(&t, m)))
}

/// Largest per-direction error (up to sign) between `extract_subspace` and
/// the Jacobi eigenvectors of `A^T A` on one random matrix up to 8x8.
pub fn jacobi_case_error(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(2..=8);
    let n = rng.random_range(2..=8);
    let a = gaussian(rng, m, n);
    let k = rng.random_range(1..=m.min(n));
    let sub = extract_subspace(&a, k, SubspaceMeta::default()).unwrap();
    let (_, vectors) = jacobi_eigen(&(a.transpose() * &a));
    (0..k)
        .map(|j| {
            let oracle = vectors.column(j);
            let got = sub.basis().row(j).transpose();
            (&got - oracle).norm().min((&got + oracle).norm())
        })
        .fold(0.0, f64::max)
}

/// Largest CKA change under an orthogonal rotation or positive scaling of
/// either side, for one random pair of representations.
pub fn cka_invariance_error(rng: &mut ChaCha8Rng, case: u64) -> f64 {
    let n = rng.random_range(4..=40);
    let d = rng.random_range(2..=10);
    let x = gaussian(rng, n, d);
    let y = &x * gaussian(rng, d, d) + gaussian(rng, n, d) * 0.5;
    let q = random_orthogonal(rng, d);
    let c = rng.random_range(0.01..100.0);
    let cka = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        linear_cka(
            &batch(1, a.clone(), SnapshotTag::Current),
            &batch(1, b.clone(), SnapshotTag::Anchor),
            64,
            case,
        )
        .unwrap()
    };
    let base = cka(&x, &y);
    [cka(&(&x * &q), &y), cka(&x, &(&y * &q)), cka(&(&x * c), &y), cka(&x, &(&y * c))]
        .iter()
        .map(|v| (v - base).abs())
        .fold(0.0, f64::max)
}
