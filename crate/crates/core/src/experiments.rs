//! Ensemble drivers for the finite-width, gradient and initializer
//! experiments. Each network is one work item for [`crate::par`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{self, BnBackward, GradientTrace};
use crate::network::{self, DenseNet, InitScheme, NetworkSpec, SampleBatch};
use crate::par;
use crate::seed::{self, experiment, purpose};
use crate::stats::{self, EnsembleSummary, LayerStatsRecord, MatrixMoments, PreActivation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteWidthConfig {
    pub width: usize,
    pub depth: usize,
    pub networks: usize,
    pub samples: usize,
    pub seed: u64,
    pub batchnorm: bool,
    pub measure: PreActivation,
}

impl FiniteWidthConfig {
    pub fn new(width: usize, depth: usize, networks: usize, samples: usize, seed: u64) -> Self {
        FiniteWidthConfig {
            width,
            depth,
            networks,
            samples,
            seed,
            batchnorm: false,
            measure: PreActivation::Normalized,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.networks < 2 {
            return Err(Error::Config(
                "finite-width ensembles need at least 2 networks".into(),
            ));
        }
        if self.samples < 2 {
            return Err(Error::Config(
                "finite-width ensembles need at least 2 samples".into(),
            ));
        }
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("width and depth must be positive".into()));
        }
        Ok(())
    }

    fn network_seed(&self, index: usize, what: u64) -> u64 {
        seed::derive(
            self.seed,
            &[
                experiment::FINITE_WIDTH,
                self.width as u64,
                index as u64,
                what,
            ],
        )
    }

    fn run_one(&self, index: usize) -> Result<LayerStatsRecord> {
        let spec = NetworkSpec::uniform(
            self.width,
            self.depth,
            InitScheme::Kaiming,
            self.network_seed(index, purpose::WEIGHTS),
        )?
        .with_batchnorm(self.batchnorm);
        let net = network::kaiming_init(&spec)?;
        let batch = SampleBatch::standard_normal(
            self.samples,
            self.width,
            self.network_seed(index, purpose::INPUTS),
        )?;
        let record = network::forward(&net, &batch)?;
        stats::layer_stats_of(&record, self.measure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteWidthResult {
    pub records: Vec<LayerStatsRecord>,
    pub summary: EnsembleSummary,
}

/// Kaiming MLPs of uniform width fed IID standard-normal inputs; per-network
/// layer statistics and their per-layer ensemble summary.
pub fn finite_width_ensemble(cfg: &FiniteWidthConfig) -> Result<FiniteWidthResult> {
    cfg.validate()?;
    let bytes = 8 * cfg.depth * cfg.width * (cfg.width + 3 * cfg.samples);
    let records =
        par::try_map_indices_bounded(cfg.networks, par::max_concurrent_for(bytes), |k| {
            cfg.run_one(k)
        })?;
    let summary = stats::aggregate(&records)?;
    Ok(FiniteWidthResult { records, summary })
}

/// Same as [`finite_width_ensemble`] without rayon.
pub fn finite_width_ensemble_seq(cfg: &FiniteWidthConfig) -> Result<FiniteWidthResult> {
    cfg.validate()?;
    let records = par::try_map_indices_seq(cfg.networks, |k| cfg.run_one(k))?;
    let summary = stats::aggregate(&records)?;
    Ok(FiniteWidthResult { records, summary })
}

/// Network setups compared in the gradient experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradientScheme {
    #[serde(rename = "kaiming")]
    Kaiming,
    #[serde(rename = "kaiming+bn")]
    KaimingBn,
    #[serde(rename = "scale_bias")]
    ScaleBias,
}

impl GradientScheme {
    pub const ALL: [GradientScheme; 3] = [
        GradientScheme::Kaiming,
        GradientScheme::ScaleBias,
        GradientScheme::KaimingBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradientScheme::Kaiming => "kaiming",
            GradientScheme::KaimingBn => "kaiming+bn",
            GradientScheme::ScaleBias => "scale_bias",
        }
    }

    /// File-name friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            GradientScheme::Kaiming => "kaiming",
            GradientScheme::KaimingBn => "kaiming_bn",
            GradientScheme::ScaleBias => "scale_bias",
        }
    }
}

impl fmt::Display for GradientScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradientScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming" => Ok(GradientScheme::Kaiming),
            "kaiming+bn" | "kaiming_bn" | "bn" => Ok(GradientScheme::KaimingBn),
            "scale_bias" | "scale+bias" => Ok(GradientScheme::ScaleBias),
            other => Err(Error::Config(format!("unknown gradient scheme '{other}'"))),
        }
    }
}

/// Calibration data shape for the data-dependent initializers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            batches: 5,
            batch_size: 128,
        }
    }
}

impl CalibrationConfig {
    /// `batches` IID standard-normal batches, batch `b` on stream seed `derive(seed, [b])`.
    pub fn draw(&self, dim: usize, seed_value: u64) -> Result<Vec<SampleBatch>> {
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "calibration needs at least one non-empty batch".into(),
            ));
        }
        (0..self.batches)
            .map(|b| {
                SampleBatch::standard_normal(
                    self.batch_size,
                    dim,
                    seed::derive(seed_value, &[b as u64]),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub scheme: GradientScheme,
    pub width: usize,
    pub depth: usize,
    pub networks: usize,
    pub samples: usize,
    pub seed: u64,
    pub calibration: CalibrationConfig,
    pub bn_backward: BnBackward,
}

impl GradientConfig {
    pub fn new(
        scheme: GradientScheme,
        width: usize,
        depth: usize,
        networks: usize,
        samples: usize,
        seed: u64,
    ) -> Self {
        GradientConfig {
            scheme,
            width,
            depth,
            networks,
            samples,
            seed,
            calibration: CalibrationConfig::default(),
            bn_backward: BnBackward::Full,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.networks < 2 {
            return Err(Error::Config(
                "gradient ensembles need at least 2 networks".into(),
            ));
        }
        if self.samples < 2 {
            return Err(Error::Config(
                "gradient ensembles need at least 2 samples".into(),
            ));
        }
        gradients::default_fit_range(self.depth)?;
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        Ok(())
    }

    // Schemes share the weight stream, so kaiming and kaiming+bn see the same
    // matrices and scale_bias sees their unit-normal counterparts.
    fn network_seed(&self, index: usize, what: u64) -> u64 {
        seed::derive(
            self.seed,
            &[experiment::GRADIENTS, self.width as u64, index as u64, what],
        )
    }

    fn build(&self, index: usize) -> Result<DenseNet> {
        let weights = self.network_seed(index, purpose::WEIGHTS);
        match self.scheme {
            GradientScheme::Kaiming | GradientScheme::KaimingBn => {
                let spec =
                    NetworkSpec::uniform(self.width, self.depth, InitScheme::Kaiming, weights)?
                        .with_batchnorm(self.scheme == GradientScheme::KaimingBn);
                network::kaiming_init(&spec)
            }
            GradientScheme::ScaleBias => {
                let spec =
                    NetworkSpec::uniform(self.width, self.depth, InitScheme::ScaleBias, weights)?;
                let calib = self
                    .calibration
                    .draw(self.width, self.network_seed(index, purpose::CALIBRATION))?;
                network::scale_bias_init(network::unit_normal_init(&spec)?, &calib)
            }
        }
    }

    /// Rough peak memory of one work item: weights, forward record and
    /// calibration activations.
    pub fn bytes_per_network(&self) -> usize {
        let f64s = self.depth * self.width * self.width
            + 3 * self.depth * self.samples * self.width
            + 2 * self.calibration.batches * self.calibration.batch_size * self.width;
        8 * f64s
    }

    fn run_one(&self, index: usize) -> Result<GradientTrace> {
        let net = self.build(index)?;
        let batch = SampleBatch::standard_normal(
            self.samples,
            self.width,
            self.network_seed(index, purpose::INPUTS),
        )?;
        let record = network::forward(&net, &batch)?;
        gradients::trace_for_loss(
            &net,
            &record,
            self.network_seed(index, purpose::LOSS),
            self.bn_backward,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEnsemble {
    pub scheme: GradientScheme,
    pub traces: Vec<GradientTrace>,
    /// `<(dL/dx^l)^2>` averaged over networks.
    pub mean_g2: Vec<f64>,
    /// Per-network slopes over `fit_range`.
    pub slopes: Vec<f64>,
    pub mean_slope: f64,
    pub std_slope: f64,
    /// Slope of `ln mean_g2`.
    pub pooled_slope: f64,
    pub fit_range: (usize, usize),
}

pub fn gradient_ensemble(cfg: &GradientConfig) -> Result<GradientEnsemble> {
    cfg.validate()?;
    let concurrent = par::max_concurrent_for(cfg.bytes_per_network());
    let traces = par::try_map_indices_bounded(cfg.networks, concurrent, |k| cfg.run_one(k))?;
    summarize_gradients(cfg, traces)
}

pub fn gradient_ensemble_seq(cfg: &GradientConfig) -> Result<GradientEnsemble> {
    cfg.validate()?;
    let traces = par::try_map_indices_seq(cfg.networks, |k| cfg.run_one(k))?;
    summarize_gradients(cfg, traces)
}

fn summarize_gradients(
    cfg: &GradientConfig,
    traces: Vec<GradientTrace>,
) -> Result<GradientEnsemble> {
    let fit_range = gradients::default_fit_range(cfg.depth)?;
    let k = traces.len() as f64;
    let mean_g2: Vec<f64> = (0..=cfg.depth)
        .map(|l| traces.iter().map(|t| t.g2[l]).sum::<f64>() / k)
        .collect();
    let slopes = traces
        .iter()
        .map(|t| t.slope(fit_range.0, fit_range.1))
        .collect::<Result<Vec<_>>>()?;
    let (mean_slope, std_slope) = stats::population_moments(&slopes);
    let pooled = GradientTrace {
        g2: mean_g2.clone(),
        loss_seed: 0,
        network_seed: 0,
    };
    let pooled_slope = pooled.slope(fit_range.0, fit_range.1)?;
    Ok(GradientEnsemble {
        scheme: cfg.scheme,
        traces,
        mean_g2,
        slopes,
        mean_slope,
        std_slope,
        pooled_slope,
        fit_range,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitCheckConfig {
    pub scheme: InitScheme,
    pub width: usize,
    pub depth: usize,
    pub calibration: CalibrationConfig,
    pub heldout_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitCheckRow {
    pub layer: usize,
    pub calibration: MatrixMoments,
    pub heldout: MatrixMoments,
}

/// Applies a data-dependent initializer, then measures per-layer moments on
/// the calibration data and on a fresh batch from the same distribution.
pub fn init_check(cfg: &InitCheckConfig) -> Result<(DenseNet, Vec<InitCheckRow>)> {
    if !cfg.scheme.is_data_dependent() {
        return Err(Error::Config(format!(
            "init-check needs a data-dependent scheme, got '{}'",
            cfg.scheme
        )));
    }
    if cfg.heldout_samples < 2 {
        return Err(Error::Config(
            "held-out batch needs at least 2 samples".into(),
        ));
    }
    let path =
        |what: u64| seed::derive(cfg.seed, &[experiment::INIT_CHECK, cfg.width as u64, what]);
    let spec = NetworkSpec::uniform(cfg.width, cfg.depth, cfg.scheme, path(purpose::WEIGHTS))?;
    let calib = cfg
        .calibration
        .draw(cfg.width, path(purpose::CALIBRATION))?;
    let net = network::initialize(network::unit_normal_init(&spec)?, &calib)?;

    let calib_rec = network::forward(&net, &SampleBatch::concat(&calib)?)?;
    let heldout =
        SampleBatch::standard_normal(cfg.heldout_samples, cfg.width, path(purpose::HELDOUT))?;
    let heldout_rec = network::forward(&net, &heldout)?;
    let rows = calib_rec
        .layers()
        .iter()
        .zip(heldout_rec.layers())
        .enumerate()
        .map(|(l, (c, h))| InitCheckRow {
            layer: l + 1,
            calibration: stats::matrix_moments(&c.pre),
            heldout: stats::matrix_moments(&h.pre),
        })
        .collect();
    Ok((net, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_width_is_reproducible_and_width_isolated() {
        let cfg = FiniteWidthConfig::new(8, 4, 3, 6, 42);
        let a = finite_width_ensemble(&cfg).unwrap();
        let b = finite_width_ensemble_seq(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary.depth, 4);
        assert_eq!(a.records.len(), 3);
    }

    #[test]
    fn scheme_parsing() {
        for s in GradientScheme::ALL {
            assert_eq!(s.name().parse::<GradientScheme>().unwrap(), s);
            assert_eq!(s.slug().parse::<GradientScheme>().unwrap(), s);
        }
        assert!("nope".parse::<GradientScheme>().is_err());
    }

    #[test]
    fn small_gradient_ensembles_run() {
        for scheme in GradientScheme::ALL {
            let mut cfg = GradientConfig::new(scheme, 12, 5, 2, 8, 1);
            cfg.calibration = CalibrationConfig {
                batches: 2,
                batch_size: 16,
            };
            let e = gradient_ensemble(&cfg).unwrap();
            assert_eq!(e.mean_g2.len(), 6);
            assert_eq!(e.slopes.len(), 2);
            assert_eq!(e, gradient_ensemble_seq(&cfg).unwrap());
        }
    }

    #[test]
    fn init_check_rejects_kaiming() {
        let cfg = InitCheckConfig {
            scheme: InitScheme::Kaiming,
            width: 4,
            depth: 2,
            calibration: CalibrationConfig::default(),
            heldout_samples: 8,
            seed: 0,
        };
        assert!(init_check(&cfg).is_err());
    }

    #[test]
    fn validation_errors() {
        assert!(finite_width_ensemble(&FiniteWidthConfig::new(4, 3, 1, 5, 0)).is_err());
        assert!(finite_width_ensemble(&FiniteWidthConfig::new(4, 3, 2, 1, 0)).is_err());
        let cfg = GradientConfig::new(GradientScheme::Kaiming, 4, 2, 2, 4, 0);
        assert!(gradient_ensemble(&cfg).is_err());
    }
}
