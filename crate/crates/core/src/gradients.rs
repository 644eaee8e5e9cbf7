//! Activation gradients under a random linear loss `L = sum_t w . x^L_t`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DenseNet, ForwardRecord};
use crate::seed;

/// How the batch-norm backward pass treats the batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnBackward {
    /// Differentiate through the batch mean and variance.
    #[default]
    Full,
    /// Treat `mu_s` and `sigma_s` as constants.
    FrozenStats,
}

/// Per-layer `<(dL/dx^l)^2>` averaged over samples and features, `l = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub g2: Vec<f64>,
    pub loss_seed: u64,
    pub network_seed: u64,
}

impl GradientTrace {
    pub fn depth(&self) -> usize {
        self.g2.len() - 1
    }

    pub fn slope(&self, l_min: usize, l_max: usize) -> Result<f64> {
        gradient_slope(self, l_min, l_max)
    }

    /// Slope over the default fit range `1..=L-1`.
    pub fn default_slope(&self) -> Result<f64> {
        let (lo, hi) = default_fit_range(self.depth())?;
        gradient_slope(self, lo, hi)
    }
}

/// Layers `1..=L-1`, the input and output layers excluded.
pub fn default_fit_range(depth: usize) -> Result<(usize, usize)> {
    if depth < 3 {
        return Err(Error::Config(format!(
            "default slope fit range needs depth >= 3, got {depth}"
        )));
    }
    Ok((1, depth - 1))
}

/// Draws `w` with IID standard-normal entries.
pub fn loss_vector(dim: usize, w_seed: u64) -> Array1<f64> {
    let mut rng = seed::stream_rng(w_seed, 0);
    Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// `dL/dx^L`: the loss vector `w` broadcast to every sample row.
pub fn random_linear_loss_grad(x_out: &Array2<f64>, w_seed: u64) -> Array2<f64> {
    let w = loss_vector(x_out.ncols(), w_seed);
    let rows = x_out.nrows();
    w.broadcast((rows, w.len()))
        .expect("row broadcast")
        .to_owned()
}

/// `L = sum_t w . x^L_t`.
pub fn linear_loss(x_out: &Array2<f64>, w: &Array1<f64>) -> f64 {
    x_out.dot(w).sum()
}

/// Backpropagates `out_grad` and returns `dL/dx^l` for every `l in 0..=L`.
pub fn backward_full(
    net: &DenseNet,
    record: &ForwardRecord,
    out_grad: &Array2<f64>,
    bn: BnBackward,
) -> Result<Vec<Array2<f64>>> {
    check_consistency(net, record, out_grad)?;
    let depth = net.depth();
    let mut grads = vec![Array2::<f64>::zeros((0, 0)); depth + 1];
    grads[depth] = out_grad.clone();

    for l in (1..=depth).rev() {
        let layer_rec = &record.layers()[l - 1];
        let u_hat = layer_rec.normalized();
        let mut d = grads[l].clone();
        d.zip_mut_with(u_hat, |g, &u| {
            if u <= 0.0 {
                *g = 0.0;
            }
        });
        if let Some(stats) = &layer_rec.batch_stats {
            d = match bn {
                BnBackward::FrozenStats => d / &stats.denom,
                BnBackward::Full => {
                    let mean_d = d.mean_axis(Axis(0)).expect("non-empty batch");
                    let mean_du = (&d * u_hat).mean_axis(Axis(0)).expect("non-empty batch");
                    ((d - &mean_d) - &(u_hat * &mean_du)) / &stats.denom
                }
            };
        }
        grads[l - 1] = d.dot(&net.layers()[l - 1].weight);
    }
    Ok(grads)
}

fn check_consistency(net: &DenseNet, record: &ForwardRecord, out_grad: &Array2<f64>) -> Result<()> {
    if record.depth() != net.depth() || record.batchnorm() != net.spec().batchnorm {
        return Err(Error::Consistency(
            "forward record was not produced by this network".into(),
        ));
    }
    for (l, (rec, layer)) in record.layers().iter().zip(net.layers()).enumerate() {
        if rec.pre.ncols() != layer.fan_out() || record.activation(l).ncols() != layer.fan_in() {
            return Err(Error::Consistency(format!(
                "layer {} shapes differ between record and network",
                l + 1
            )));
        }
    }
    let expected = (record.samples(), net.spec().output_dim());
    if out_grad.dim() != expected {
        return Err(Error::Dimension(format!(
            "output gradient has shape {:?}, expected {:?}",
            out_grad.dim(),
            expected
        )));
    }
    Ok(())
}

pub fn backward(
    net: &DenseNet,
    record: &ForwardRecord,
    out_grad: &Array2<f64>,
    bn: BnBackward,
) -> Result<GradientTrace> {
    let grads = backward_full(net, record, out_grad, bn)?;
    let g2 = grads
        .iter()
        .map(|g| g.mapv(|v| v * v).mean().expect("non-empty gradient"))
        .collect();
    Ok(GradientTrace {
        g2,
        loss_seed: 0,
        network_seed: net.spec().seed,
    })
}

/// Forward record plus random linear loss with seed `w_seed`, in one call.
pub fn trace_for_loss(
    net: &DenseNet,
    record: &ForwardRecord,
    w_seed: u64,
    bn: BnBackward,
) -> Result<GradientTrace> {
    let out_grad = random_linear_loss_grad(record.output(), w_seed);
    let mut trace = backward(net, record, &out_grad, bn)?;
    trace.loss_seed = w_seed;
    Ok(trace)
}

/// Least-squares slope of `ln g2[l]` against `l` over `l_min..=l_max`.
pub fn gradient_slope(trace: &GradientTrace, l_min: usize, l_max: usize) -> Result<f64> {
    if l_min >= l_max || l_max > trace.depth() {
        return Err(Error::Domain(format!(
            "fit range {l_min}..={l_max} invalid for depth {}",
            trace.depth()
        )));
    }
    let points: Vec<(f64, f64)> = (l_min..=l_max)
        .map(|l| {
            let g = trace.g2[l];
            if g > 0.0 && g.is_finite() {
                Ok((l as f64, g.ln()))
            } else {
                Err(Error::Degenerate(format!(
                    "gradient magnitude at layer {l} is {g}; log slope undefined"
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok(least_squares_slope(&points))
}

pub(crate) fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        (sxy + (x - mx) * (y - my), sxx + (x - mx) * (x - mx))
    });
    sxy / sxx
}
