//! Oracles shared by the integration tests. None of them reuse the code they
//! check beyond building networks and running the forward pass.
#![allow(dead_code)]

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use varprop::gradients;
use varprop::network::{self, DenseNet, NetworkSpec, SampleBatch};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Arc-cosine kernel for ReLU: `2 E[relu(z1) relu(c z1 + sqrt(1-c^2) z2)]`.
pub fn k_closed_form(c: f64) -> f64 {
    ((1.0 - c * c).max(0.0).sqrt() + (PI - c.acos()) * c) / PI
}

pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Plain Monte Carlo estimate of the correlation map at `c` from `draws`
/// standard-normal pairs.
pub fn k_monte_carlo(c: f64, draws: usize, seed: u64) -> McEstimate {
    let mut rng = rng(seed);
    let s = (1.0 - c * c).sqrt();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let v = 2.0 * z1.max(0.0) * (c * z1 + s * z2).max(0.0);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// Monte Carlo estimate of `K(c + h) - K(c - h)` with common random numbers.
pub fn k_monte_carlo_difference(c: f64, h: f64, draws: usize, seed: u64) -> McEstimate {
    let mut rng = rng(seed);
    let (a, b) = (c + h, c - h);
    let (sa, sb) = ((1.0 - a * a).sqrt(), (1.0 - b * b).sqrt());
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let r = 2.0 * z1.max(0.0);
        let v = r * ((a * z1 + sa * z2).max(0.0) - (b * z1 + sb * z2).max(0.0));
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn normal_vector(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

/// The layers `from+1..=L` of `net` as a network of their own, so a loss can
/// be evaluated as a function of `x^from`.
pub fn tail(net: &DenseNet, from: usize) -> DenseNet {
    let spec = net.spec();
    let tail_spec = NetworkSpec::new(spec.widths[from..].to_vec(), spec.init_scheme, spec.seed)
        .unwrap()
        .with_batchnorm(spec.batchnorm);
    DenseNet::from_layers(tail_spec, net.layers()[from..].to_vec()).unwrap()
}

pub fn loss_at(net: &DenseNet, x: &Array2<f64>, w: &Array1<f64>) -> f64 {
    let rec = network::forward(net, &SampleBatch::new(x.clone()).unwrap()).unwrap();
    gradients::linear_loss(rec.output(), w)
}

/// Sign pattern of every ReLU input.
pub fn relu_mask(net: &DenseNet, x: &Array2<f64>) -> Vec<bool> {
    let rec = network::forward(net, &SampleBatch::new(x.clone()).unwrap()).unwrap();
    rec.layers()
        .iter()
        .flat_map(|l| l.normalized().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdComparison {
    pub worst_relative_error: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

impl FdComparison {
    fn merge(&mut self, other: FdComparison) {
        self.worst_relative_error = self.worst_relative_error.max(other.worst_relative_error);
        self.checked += other.checked;
        self.skipped_at_kinks += other.skipped_at_kinks;
    }
}

/// Compares an analytic `dL/dx` with a five-point central difference of the
/// loss of `net` at `x`. Coordinates whose perturbation flips a ReLU are
/// skipped. Relative error uses `max(|a|, |fd|, floor)` as the denominator.
pub fn compare_with_fd(
    net: &DenseNet,
    x: &Array2<f64>,
    w: &Array1<f64>,
    analytic: &Array2<f64>,
    step: f64,
    floor: f64,
) -> FdComparison {
    let base_mask = relu_mask(net, x);
    let mut out = FdComparison::default();
    for t in 0..x.nrows() {
        for j in 0..x.ncols() {
            let shifted = |k: f64| {
                let mut y = x.clone();
                y[[t, j]] += k * step;
                y
            };
            let points = [shifted(-2.0), shifted(-1.0), shifted(1.0), shifted(2.0)];
            if points.iter().any(|p| relu_mask(net, p) != base_mask) {
                out.skipped_at_kinks += 1;
                continue;
            }
            let l: Vec<f64> = points.iter().map(|p| loss_at(net, p, w)).collect();
            let fd = (l[0] - 8.0 * l[1] + 8.0 * l[2] - l[3]) / (12.0 * step);
            let a = analytic[[t, j]];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            out.worst_relative_error = out.worst_relative_error.max(rel);
            out.checked += 1;
        }
    }
    out
}

/// Checks `dL/dx^l` for every `l = 0..L-1` of a random linear loss against
/// finite differences through the corresponding tail network.
pub fn check_all_layers(
    net: &DenseNet,
    input: &Array2<f64>,
    loss_seed: u64,
    bn: gradients::BnBackward,
) -> FdComparison {
    let record = network::forward(net, &SampleBatch::new(input.clone()).unwrap()).unwrap();
    let w = gradients::loss_vector(net.spec().output_dim(), loss_seed);
    let out_grad = gradients::random_linear_loss_grad(record.output(), loss_seed);
    let grads = gradients::backward_full(net, &record, &out_grad, bn).unwrap();
    // Round-off in the differenced loss scales with |L|, so coordinates whose
    // gradient is far below that are compared in absolute terms.
    let floor = 1e-6 * (1.0 + gradients::linear_loss(record.output(), &w).abs());
    let mut total = FdComparison::default();
    for (l, grad) in grads.iter().take(net.depth()).enumerate() {
        let x_l = record.activation(l).to_owned();
        total.merge(compare_with_fd(&tail(net, l), &x_l, &w, grad, 1e-3, floor));
    }
    total
}

/// Squared feature means, feature variances and second moment, each averaged
/// over features, computed with explicit loops.
pub fn naive_moments(u: &Array2<f64>) -> (f64, f64, f64) {
    let (t, n) = u.dim();
    let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let col = u.slice(s![.., i]);
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64;
        m += mean * mean;
        v += var;
        p += col.iter().map(|x| x * x).sum::<f64>() / t as f64;
    }
    (m / n as f64, v / n as f64, p / n as f64)
}
