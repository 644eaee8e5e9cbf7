//! Wide-network predictions for ReLU MLPs under Kaiming initialization.
//!
//! The central object is the correlation map
//!
//! ```text
//! K(c) = 2 E[ f(z1) f(c z1 + sqrt(1 - c^2) z2) ],   z1, z2 ~ N(0, 1) iid,  f = ReLU
//! ```
//!
//! which carries the expected cosine similarity of two samples' activations
//! from one layer to the next. Iterating it from `c = 0` (IID unit-variance
//! inputs) gives the squared sample mean `m^2 = 2 K^l(0)` and sample variance
//! `v^2 = 2 (1 - K^l(0))` of the pre-activations at every depth.
//!
//! `K` is evaluated by a two-dimensional product rule over the standard normal
//! measure written in polar coordinates: Gauss-Laguerre in `rho = r^2 / 2` and
//! piecewise Gauss-Legendre in the angle, with the angular pieces split at the
//! four lines where one of the two ReLU factors switches on. The integrand is
//! smooth on every piece, so the rule converges to machine precision with a
//! few dozen nodes per axis.

use std::f64::consts::PI;

use gauss_quad::{GaussLaguerre, GaussLegendre};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted number of quadrature nodes per axis.
pub const MIN_NODE_COUNT: usize = 16;
/// Largest accepted clamp tolerance.
pub const MAX_CLAMP_TOLERANCE: f64 = 1e-6;
/// Total pre-activation variance for unit-variance inputs under Kaiming init.
pub const TOTAL_VARIANCE: f64 = 2.0;

const DERIVATIVE_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Number of quadrature nodes per axis.
    pub node_count: usize,
    /// How far outside `[-1, 1]` an input correlation may stray before it is
    /// rejected instead of clamped.
    pub clamp_tolerance: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            node_count: 64,
            clamp_tolerance: 1e-9,
        }
    }
}

impl QuadratureConfig {
    pub fn new(node_count: usize, clamp_tolerance: f64) -> Result<Self> {
        let config = QuadratureConfig {
            node_count,
            clamp_tolerance,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_nodes(node_count: usize) -> Result<Self> {
        Self::new(node_count, QuadratureConfig::default().clamp_tolerance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count < MIN_NODE_COUNT {
            return Err(Error::Config(format!(
                "quadrature node count {} is below the minimum of {MIN_NODE_COUNT}",
                self.node_count
            )));
        }
        if !(0.0..=MAX_CLAMP_TOLERANCE).contains(&self.clamp_tolerance) {
            return Err(Error::Config(format!(
                "clamp tolerance {} must lie in [0, {MAX_CLAMP_TOLERANCE}]",
                self.clamp_tolerance
            )));
        }
        Ok(())
    }
}

/// Per-layer mean-field predictions for a Kaiming-initialized ReLU MLP fed
/// IID unit-variance inputs.
///
/// `c` has `depth + 1` entries (`c[0]` is the input correlation); `m_sq[l]` and
/// `v_sq[l]` are built from `c[l + 1]`, so index 0 describes the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldTrajectory {
    pub depth: usize,
    pub c: Vec<f64>,
    pub m_sq: Vec<f64>,
    pub v_sq: Vec<f64>,
    pub sigma_sq: f64,
}

impl MeanFieldTrajectory {
    pub fn m(&self, layer: usize) -> f64 {
        self.m_sq[layer].sqrt()
    }

    pub fn v(&self, layer: usize) -> f64 {
        self.v_sq[layer].sqrt()
    }

    /// Predicted mean-to-std ratio `sqrt(m^2 / v^2)` at 0-based layer index.
    pub fn ratio(&self, layer: usize) -> Result<f64> {
        theoretical_ratio(self, layer)
    }
}

/// Batch-norm predictions: the per-layer sample standard deviation that BN
/// divides out, and the resulting slope of `log <(dL/dx^l)^2>` against `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormPrediction {
    pub sigma_s: f64,
    pub slope: f64,
}

/// Precomputed quadrature rule for the correlation map.
#[derive(Debug, Clone)]
pub struct CorrelationMap {
    config: QuadratureConfig,
    /// Gauss-Laguerre (alpha = 0) pairs on `rho in [0, inf)`.
    radial: Vec<(f64, f64)>,
    /// Gauss-Legendre pairs on `[-1, 1]`.
    angular: Vec<(f64, f64)>,
}

impl CorrelationMap {
    pub fn new(config: QuadratureConfig) -> Result<Self> {
        config.validate()?;
        let n = config.node_count;
        let radial = GaussLaguerre::new(n, 0.0)
            .map_err(|e| Error::Config(format!("gauss-laguerre rule: {e}")))?
            .into_node_weight_pairs();
        let angular = GaussLegendre::new(n)
            .map_err(|e| Error::Config(format!("gauss-legendre rule: {e}")))?
            .into_node_weight_pairs();
        Ok(CorrelationMap {
            config,
            radial,
            angular,
        })
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.config
    }

    fn check_correlation(&self, c: f64) -> Result<f64> {
        if !c.is_finite() || c.abs() > 1.0 + self.config.clamp_tolerance {
            return Err(Error::Domain(format!(
                "correlation {c} lies outside [-1, 1] (tolerance {})",
                self.config.clamp_tolerance
            )));
        }
        Ok(c.clamp(-1.0, 1.0))
    }

    /// `K(c)`.
    pub fn eval(&self, c: f64) -> Result<f64> {
        let c = self.check_correlation(c)?;
        Ok(self.integrate(c))
    }

    fn integrate(&self, c: f64) -> f64 {
        let s = (1.0 - c * c).max(0.0).sqrt();
        let phi = c.acos();

        // Kinks of f(z1) at theta = pi/2, 3pi/2 and of f(c z1 + s z2) = f(r cos(theta - phi))
        // at theta = phi +- pi/2.
        let mut breaks = [
            0.0,
            0.5 * PI,
            1.5 * PI,
            (phi + 0.5 * PI).rem_euclid(2.0 * PI),
            (phi - 0.5 * PI).rem_euclid(2.0 * PI),
            2.0 * PI,
        ];
        breaks.sort_by(f64::total_cmp);

        let integrand = |z1: f64, z2: f64| relu(z1) * relu(c * z1 + s * z2);

        let mut total = 0.0;
        for arc in breaks.windows(2) {
            let (lo, hi) = (arc[0], arc[1]);
            if hi - lo <= 0.0 {
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            let mut arc_sum = 0.0;
            for &(x, wx) in &self.angular {
                let theta = mid + half * x;
                let (sin_t, cos_t) = theta.sin_cos();
                let mut radial_sum = 0.0;
                for &(rho, wr) in &self.radial {
                    let r = (2.0 * rho).sqrt();
                    radial_sum += wr * integrand(r * cos_t, r * sin_t);
                }
                arc_sum += wx * radial_sum;
            }
            total += half * arc_sum;
        }
        // Normal measure in polar form is e^{-rho} d rho d theta / (2 pi).
        2.0 * total / (2.0 * PI)
    }

    /// `dK/dc` at an interior point by finite differences.
    ///
    /// Central differences with step `1e-6`; within one step of `+-1` the
    /// second-order one-sided stencil pointing into the domain is used.
    pub fn derivative(&self, c: f64) -> Result<f64> {
        if !c.is_finite() || c.abs() >= 1.0 {
            return Err(Error::Domain(format!(
                "derivative requested at {c}; only |c| < 1 is accepted"
            )));
        }
        let h = DERIVATIVE_STEP.max(DERIVATIVE_STEP * (1.0 - c.abs()));
        let k = |x: f64| self.integrate(x);
        let d = if c + h > 1.0 {
            (3.0 * k(c) - 4.0 * k(c - h) + k(c - 2.0 * h)) / (2.0 * h)
        } else if c - h < -1.0 {
            (-3.0 * k(c) + 4.0 * k(c + h) - k(c + 2.0 * h)) / (2.0 * h)
        } else {
            (k(c + h) - k(c - h)) / (2.0 * h)
        };
        Ok(d)
    }

    /// `[c0, K(c0), K(K(c0)), ...]`, `depth + 1` entries.
    pub fn iterate(&self, c0: f64, depth: usize) -> Result<Vec<f64>> {
        let mut c = self.check_correlation(c0)?;
        let mut out = Vec::with_capacity(depth + 1);
        out.push(c);
        for _ in 0..depth {
            c = self.eval(c)?;
            out.push(c);
        }
        Ok(out)
    }

    pub fn trajectory(&self, depth: usize) -> Result<MeanFieldTrajectory> {
        if depth == 0 {
            return Err(Error::Config("trajectory depth must be at least 1".into()));
        }
        let c = self.iterate(0.0, depth)?;
        let m_sq: Vec<f64> = c[1..].iter().map(|&k| TOTAL_VARIANCE * k).collect();
        let v_sq: Vec<f64> = m_sq.iter().map(|&m| TOTAL_VARIANCE - m).collect();
        Ok(MeanFieldTrajectory {
            depth,
            c,
            m_sq,
            v_sq,
            sigma_sq: TOTAL_VARIANCE,
        })
    }

    pub fn bn_predictions(&self) -> BatchNormPrediction {
        let k0 = self.integrate(0.0);
        let sigma_sq = 1.0 - k0;
        BatchNormPrediction {
            sigma_s: sigma_sq.sqrt(),
            slope: sigma_sq.ln(),
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn k_map(c: f64, q: &QuadratureConfig) -> Result<f64> {
    CorrelationMap::new(*q)?.eval(c)
}

pub fn iterate_k(c0: f64, depth: usize, q: &QuadratureConfig) -> Result<Vec<f64>> {
    CorrelationMap::new(*q)?.iterate(c0, depth)
}

pub fn trajectory(depth: usize, q: &QuadratureConfig) -> Result<MeanFieldTrajectory> {
    CorrelationMap::new(*q)?.trajectory(depth)
}

pub fn k_derivative(c: f64, q: &QuadratureConfig) -> Result<f64> {
    CorrelationMap::new(*q)?.derivative(c)
}

pub fn theoretical_ratio(traj: &MeanFieldTrajectory, layer: usize) -> Result<f64> {
    if layer >= traj.depth {
        return Err(Error::Domain(format!(
            "layer index {layer} out of range for depth {}",
            traj.depth
        )));
    }
    let v_sq = traj.v_sq[layer];
    if v_sq <= 0.0 {
        return Err(Error::Divergence(format!(
            "sample variance vanishes at layer index {layer}; ratio is unbounded"
        )));
    }
    Ok((traj.m_sq[layer] / v_sq).sqrt())
}

pub fn bn_predictions(q: &QuadratureConfig) -> Result<BatchNormPrediction> {
    Ok(CorrelationMap::new(*q)?.bn_predictions())
}
