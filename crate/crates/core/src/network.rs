//! Dense ReLU MLPs: construction, initialization and forward propagation.
//!
//! Layer `l` (1-based in the math, index `l - 1` in the vectors here) maps
//! activations `X^{l-1}` (samples x features) to pre-activations
//! `U^l = X^{l-1} W^l^T + b^l`, optionally standardizes them per feature over
//! the batch (batch normalization with unit scale and zero shift), and applies
//! the ReLU.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default batch-norm epsilon.
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
/// Epsilon added to the calibration second moment by the scale initializers.
pub const SCALE_INIT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `W ~ N(0, 2 / fan_in)`, `b = 0`.
    Kaiming,
    /// Unit-normal weights rescaled per layer to unit calibration second moment.
    Scale,
    /// Per-feature bias centering followed by per-layer rescaling.
    ScaleBias,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Kaiming => "kaiming",
            InitScheme::Scale => "scale",
            InitScheme::ScaleBias => "scale_bias",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            InitScheme::Kaiming => 0,
            InitScheme::Scale => 1,
            InitScheme::ScaleBias => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InitScheme::Kaiming),
            1 => Some(InitScheme::Scale),
            2 => Some(InitScheme::ScaleBias),
            _ => None,
        }
    }

    /// Whether the scheme needs calibration data.
    pub fn is_data_dependent(self) -> bool {
        !matches!(self, InitScheme::Kaiming)
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming" => Ok(InitScheme::Kaiming),
            "scale" => Ok(InitScheme::Scale),
            "scale_bias" | "scale+bias" => Ok(InitScheme::ScaleBias),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

/// Architecture, initialization recipe and seed of one random MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[n^0, n^1, ..., n^L]`.
    pub widths: Vec<usize>,
    pub init_scheme: InitScheme,
    pub batchnorm: bool,
    pub seed: u64,
    pub bn_epsilon: f64,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, init_scheme: InitScheme, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            widths,
            init_scheme,
            batchnorm: false,
            seed,
            bn_epsilon: DEFAULT_BN_EPSILON,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `depth` layers of equal width, input dimension included.
    pub fn uniform(width: usize, depth: usize, init_scheme: InitScheme, seed: u64) -> Result<Self> {
        Self::new(vec![width; depth + 1], init_scheme, seed)
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "a network needs at least one layer (two widths)".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "bn_epsilon must be positive, got {}",
                self.bn_epsilon
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }
}

/// One affine layer: `weight` is `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    fn gaussian(seed: u64, layer: usize, fan_out: usize, fan_in: usize, std: f64) -> Self {
        let mut rng = seed::stream_rng(seed, layer as u64);
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        DenseLayer {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    spec: NetworkSpec,
    layers: Vec<DenseLayer>,
}

impl DenseNet {
    pub fn from_layers(spec: NetworkSpec, layers: Vec<DenseLayer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.depth() {
            return Err(Error::Dimension(format!(
                "spec has depth {} but {} layers were given",
                spec.depth(),
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
            if layer.weight.dim() != (n_out, n_in) || layer.bias.len() != n_out {
                return Err(Error::Dimension(format!(
                    "layer {}: expected weight {n_out}x{n_in} and bias {n_out}, got {:?} and {}",
                    l + 1,
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        Ok(DenseNet { spec, layers })
    }

    /// Draws a network for `spec` without calibration: Kaiming weights for the
    /// Kaiming scheme, unit-normal weights for the data-dependent schemes.
    pub fn sample(spec: &NetworkSpec) -> Result<Self> {
        match spec.init_scheme {
            InitScheme::Kaiming => kaiming_init(spec),
            InitScheme::Scale | InitScheme::ScaleBias => unit_normal_init(spec),
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn set_batchnorm(&mut self, on: bool) {
        self.spec.batchnorm = on;
    }
}

fn gaussian_net(spec: &NetworkSpec, std_for_fan_in: impl Fn(usize) -> f64) -> Result<DenseNet> {
    spec.validate()?;
    let layers = spec
        .widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| DenseLayer::gaussian(spec.seed, l, w[1], w[0], std_for_fan_in(w[0])))
        .collect();
    DenseNet::from_layers(spec.clone(), layers)
}

/// Kaiming initialization: `W^l_ij ~ N(0, 2 / n^{l-1})`, `b^l = 0`.
pub fn kaiming_init(spec: &NetworkSpec) -> Result<DenseNet> {
    if spec.init_scheme != InitScheme::Kaiming {
        return Err(Error::Config(format!(
            "kaiming_init called with scheme '{}'",
            spec.init_scheme
        )));
    }
    gaussian_net(spec, |fan_in| (2.0 / fan_in as f64).sqrt())
}

/// Unit-normal weights and zero biases: the starting point of the scale
/// initializers.
pub fn unit_normal_init(spec: &NetworkSpec) -> Result<DenseNet> {
    gaussian_net(spec, |_| 1.0)
}

/// A batch of input vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch(Array2<f64>);

impl SampleBatch {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "sample batch must be non-empty, got {:?}",
                samples.dim()
            )));
        }
        Ok(SampleBatch(samples))
    }

    /// IID standard-normal entries drawn from stream 0 of `seed`.
    pub fn standard_normal(samples: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::stream_rng(seed, 0);
        Self::new(Array2::from_shape_simple_fn((samples, dim), || {
            rng.sample(StandardNormal)
        }))
    }

    /// Stacks batches row-wise.
    pub fn concat(batches: &[SampleBatch]) -> Result<Self> {
        let views: Vec<ArrayView2<f64>> = batches.iter().map(|b| b.0.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(format!("cannot stack batches: {e}")))?;
        Self::new(stacked)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }

    pub fn samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Batch statistics captured by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Per-feature batch mean `mu_s`.
    pub mean: Array1<f64>,
    /// Per-feature batch standard deviation `sigma_s` (population, no epsilon).
    pub std: Array1<f64>,
    /// Per-feature divisor actually applied, `sqrt(sigma_s^2 + eps)`.
    pub denom: Array1<f64>,
}

/// Intermediate matrices of one layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// `U^l`, before batch norm and ReLU.
    pub pre: Array2<f64>,
    normalized: Option<Array2<f64>>,
    /// `X^l = ReLU(normalized)`.
    pub act: Array2<f64>,
    pub batch_stats: Option<BatchStats>,
}

impl LayerRecord {
    /// `Û^l`: the batch-normalized pre-activation, or `U^l` when batch norm is off.
    pub fn normalized(&self) -> &Array2<f64> {
        self.normalized.as_ref().unwrap_or(&self.pre)
    }
}

/// Everything `forward` computed, kept for statistics and backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    input: Array2<f64>,
    layers: Vec<LayerRecord>,
    batchnorm: bool,
}

impl ForwardRecord {
    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }

    /// Layer records; entry `l - 1` belongs to layer `l`.
    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn samples(&self) -> usize {
        self.input.nrows()
    }

    pub fn batchnorm(&self) -> bool {
        self.batchnorm
    }

    /// `X^l` for `l in 0..=depth`, with `X^0` the input batch.
    pub fn activation(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].act
        }
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activation(self.depth())
    }
}

fn affine(x: &Array2<f64>, layer: &DenseLayer) -> Array2<f64> {
    let mut u = x.dot(&layer.weight.t());
    u += &layer.bias;
    u
}

fn relu(u: &Array2<f64>) -> Array2<f64> {
    u.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

fn batch_normalize(u: &Array2<f64>, eps: f64) -> (Array2<f64>, BatchStats) {
    let mean = u.mean_axis(Axis(0)).expect("non-empty batch");
    let var = u.var_axis(Axis(0), 0.0);
    let denom = var.mapv(|v| (v + eps).sqrt());
    let normalized = (u - &mean) / &denom;
    let stats = BatchStats {
        mean,
        std: var.mapv(f64::sqrt),
        denom,
    };
    (normalized, stats)
}

fn propagate_layer(x: &Array2<f64>, layer: &DenseLayer, batchnorm: bool, eps: f64) -> LayerRecord {
    let pre = affine(x, layer);
    if batchnorm {
        let (normalized, stats) = batch_normalize(&pre, eps);
        let act = relu(&normalized);
        LayerRecord {
            pre,
            normalized: Some(normalized),
            act,
            batch_stats: Some(stats),
        }
    } else {
        let act = relu(&pre);
        LayerRecord {
            pre,
            normalized: None,
            act,
            batch_stats: None,
        }
    }
}

pub fn forward(net: &DenseNet, batch: &SampleBatch) -> Result<ForwardRecord> {
    let spec = net.spec();
    if batch.dim() != spec.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} columns but the network expects {}",
            batch.dim(),
            spec.input_dim()
        )));
    }
    if spec.batchnorm && batch.samples() < 2 {
        return Err(Error::InsufficientBatch(batch.samples()));
    }
    let mut layers: Vec<LayerRecord> = Vec::with_capacity(net.depth());
    for layer in net.layers() {
        let x = layers.last().map_or(batch.matrix(), |r| &r.act);
        let record = propagate_layer(x, layer, spec.batchnorm, spec.bn_epsilon);
        layers.push(record);
    }
    Ok(ForwardRecord {
        input: batch.matrix().clone(),
        layers,
        batchnorm: spec.batchnorm,
    })
}

/// Applies the initializer named by `net.spec().init_scheme`. Kaiming nets are
/// returned unchanged.
pub fn initialize(net: DenseNet, calibration: &[SampleBatch]) -> Result<DenseNet> {
    match net.spec().init_scheme {
        InitScheme::Kaiming => Ok(net),
        InitScheme::Scale => scale_init(net, calibration),
        InitScheme::ScaleBias => scale_bias_init(net, calibration),
    }
}

/// Rescales each layer's weights, first to last, so the pooled second moment
/// of its pre-activations over the calibration samples becomes
/// `s / (s + 1e-5)`, i.e. one up to the epsilon floor.
pub fn scale_init(net: DenseNet, calibration: &[SampleBatch]) -> Result<DenseNet> {
    calibrate(net, calibration, false)
}

/// Per-feature bias centering, then per-layer rescaling of weights and biases
/// by a common factor, first layer to last.
pub fn scale_bias_init(net: DenseNet, calibration: &[SampleBatch]) -> Result<DenseNet> {
    calibrate(net, calibration, true)
}

fn calibrate(mut net: DenseNet, calibration: &[SampleBatch], center: bool) -> Result<DenseNet> {
    if calibration.is_empty() {
        return Err(Error::Config("calibration data is empty".into()));
    }
    let data = SampleBatch::concat(calibration)?;
    if data.dim() != net.spec().input_dim() {
        return Err(Error::Dimension(format!(
            "calibration batches have {} columns but the network expects {}",
            data.dim(),
            net.spec().input_dim()
        )));
    }
    let batchnorm = net.spec().batchnorm;
    if batchnorm && data.samples() < 2 {
        return Err(Error::InsufficientBatch(data.samples()));
    }
    let eps = net.spec().bn_epsilon;

    let mut x = data.into_matrix();
    for layer in net.layers_mut() {
        let mut u = affine(&x, layer);
        if center {
            let mean = u.mean_axis(Axis(0)).expect("non-empty batch");
            layer.bias -= &mean;
            u -= &mean;
        }
        let second_moment = u.mapv(|v| v * v).mean().expect("non-empty batch");
        let factor = 1.0 / (second_moment + SCALE_INIT_EPSILON).sqrt();
        layer.weight *= factor;
        if center {
            layer.bias *= factor;
        }
        u *= factor;

        x = if batchnorm {
            relu(&batch_normalize(&u, eps).0)
        } else {
            relu(&u)
        };
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn kaiming(widths: Vec<usize>, seed: u64) -> DenseNet {
        kaiming_init(&NetworkSpec::new(widths, InitScheme::Kaiming, seed).unwrap()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3], InitScheme::Kaiming, 0).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], InitScheme::Kaiming, 0).is_err());
        let mut s = NetworkSpec::new(vec![3, 2], InitScheme::Kaiming, 0).unwrap();
        s.bn_epsilon = 0.0;
        assert!(s.validate().is_err());
        let s = NetworkSpec::uniform(5, 3, InitScheme::Scale, 1).unwrap();
        assert_eq!(s.widths, vec![5; 4]);
        assert_eq!(s.depth(), 3);
    }

    #[test]
    fn kaiming_requires_kaiming_scheme() {
        let s = NetworkSpec::new(vec![3, 2], InitScheme::Scale, 0).unwrap();
        assert!(matches!(kaiming_init(&s), Err(Error::Config(_))));
    }

    #[test]
    fn kaiming_shapes_zero_bias_and_determinism() {
        let a = kaiming(vec![4, 6, 3], 11);
        assert_eq!(a.layers()[0].weight.dim(), (6, 4));
        assert_eq!(a.layers()[1].weight.dim(), (3, 6));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(a, kaiming(vec![4, 6, 3], 11));
        assert_ne!(a, kaiming(vec![4, 6, 3], 12));
    }

    #[test]
    fn deeper_net_keeps_earlier_layers() {
        let shallow = kaiming(vec![5, 5, 5], 3);
        let deep = kaiming(vec![5, 5, 5, 5, 5], 3);
        assert_eq!(shallow.layers()[..], deep.layers()[..2]);
    }

    #[test]
    fn zero_input_gives_zero_everywhere() {
        let net = kaiming(vec![3, 4, 4, 2], 5);
        let batch = SampleBatch::new(Array2::zeros((5, 3))).unwrap();
        let rec = forward(&net, &batch).unwrap();
        for l in rec.layers() {
            assert!(l.pre.iter().all(|&v| v == 0.0));
            assert!(l.act.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layer_by_hand() {
        let spec = NetworkSpec::new(vec![2, 2], InitScheme::Kaiming, 0).unwrap();
        let layer = DenseLayer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let net = DenseNet::from_layers(spec, vec![layer]).unwrap();
        let batch = SampleBatch::new(array![[1.0, -1.0]]).unwrap();
        let rec = forward(&net, &batch).unwrap();
        assert_eq!(rec.layers()[0].pre, array![[1.0, -1.0]]);
        assert_eq!(rec.layers()[0].act, array![[1.0, 0.0]]);
        assert_eq!(rec.output(), &array![[1.0, 0.0]]);
    }

    #[test]
    fn forward_shape_errors() {
        let net = kaiming(vec![3, 4], 0);
        let batch = SampleBatch::new(Array2::zeros((4, 2))).unwrap();
        assert!(matches!(forward(&net, &batch), Err(Error::Dimension(_))));

        let mut net = kaiming(vec![3, 4], 0);
        net.set_batchnorm(true);
        let one = SampleBatch::new(Array2::ones((1, 3))).unwrap();
        assert!(matches!(
            forward(&net, &one),
            Err(Error::InsufficientBatch(1))
        ));
    }

    #[test]
    fn from_layers_checks_shapes() {
        let spec = NetworkSpec::new(vec![2, 3], InitScheme::Kaiming, 0).unwrap();
        let bad = DenseLayer {
            weight: Array2::zeros((2, 3)),
            bias: Array1::zeros(3),
        };
        assert!(matches!(
            DenseNet::from_layers(spec, vec![bad]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn batchnorm_standardizes_every_layer() {
        let spec = NetworkSpec::uniform(16, 4, InitScheme::Kaiming, 9)
            .unwrap()
            .with_batchnorm(true);
        let net = kaiming_init(&spec).unwrap();
        let batch = SampleBatch::standard_normal(32, 16, 1).unwrap();
        let rec = forward(&net, &batch).unwrap();
        for l in rec.layers() {
            let u = l.normalized();
            for col in u.columns() {
                let mean = col.mean().unwrap();
                let var = col.var(0.0);
                assert!(mean.abs() < 1e-6);
                assert!(var <= 1.0 && var >= 1.0 - 10.0 * spec.bn_epsilon, "{var}");
            }
            assert!(l.act.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn scale_init_halves_when_sigma_is_two() {
        // Single layer whose calibration pre-activations have second moment 4.
        let spec = NetworkSpec::new(vec![1, 1], InitScheme::Scale, 0).unwrap();
        let layer = DenseLayer {
            weight: array![[2.0]],
            bias: array![0.0],
        };
        let net = DenseNet::from_layers(spec, vec![layer]).unwrap();
        let calib = SampleBatch::new(array![[1.0], [-1.0]]).unwrap();
        let net = scale_init(net, &[calib]).unwrap();
        let expected = 2.0 / (4.0f64 + SCALE_INIT_EPSILON).sqrt();
        assert_abs_diff_eq!(net.layers()[0].weight[[0, 0]], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn calibration_errors() {
        let spec = NetworkSpec::uniform(4, 2, InitScheme::Scale, 0).unwrap();
        let net = unit_normal_init(&spec).unwrap();
        assert!(matches!(
            scale_init(net.clone(), &[]),
            Err(Error::Config(_))
        ));
        let wrong = SampleBatch::standard_normal(8, 3, 0).unwrap();
        assert!(matches!(
            scale_bias_init(net, &[wrong]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scale_bias_on_constant_input_completes() {
        let spec = NetworkSpec::uniform(6, 3, InitScheme::ScaleBias, 4).unwrap();
        let net = unit_normal_init(&spec).unwrap();
        let calib = SampleBatch::new(Array2::from_elem((10, 6), 0.7)).unwrap();
        let net = scale_bias_init(net, std::slice::from_ref(&calib)).unwrap();
        let rec = forward(&net, &calib).unwrap();
        for l in rec.layers() {
            for col in l.pre.columns() {
                assert!(col.mean().unwrap().abs() < 1e-6);
            }
        }
    }
}
