//! Sample statistics of pre-activations and their ensemble aggregates.
//!
//! For a layer with pre-activations `u_{ti}` (sample `t`, feature `i`):
//!
//! ```text
//! mhat_sq   = (1/n) sum_i <u_i>_t^2
//! vhat_sq   = (1/n) sum_i (<u_i^2>_t - <u_i>_t^2)
//! pooled_sq = (1/(nT)) sum_{t,i} u_{ti}^2      = mhat_sq + vhat_sq
//! r         = sqrt(mhat_sq / vhat_sq)
//! ```
//!
//! All variances divide by `T`; only then is the decomposition exact.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ForwardRecord;
use crate::seed;

/// Allowed slack in `mhat_sq + vhat_sq = pooled_sq`, relative to `max(1, pooled_sq)`.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-10;

/// Which pre-activation a statistic is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreActivation {
    /// `Û^l` (equal to `U^l` without batch norm).
    #[default]
    Normalized,
    /// `U^l` before batch norm.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStatsRecord {
    /// `n^l` for `l = 1..=L`.
    pub widths: Vec<usize>,
    pub mhat_sq: Vec<f64>,
    pub vhat_sq: Vec<f64>,
    pub pooled_sq: Vec<f64>,
    /// `+inf` where `vhat_sq` is zero.
    pub r: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl LayerStatsRecord {
    pub fn depth(&self) -> usize {
        self.r.len()
    }
}

/// Moments of a single `T x n` pre-activation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixMoments {
    pub mhat_sq: f64,
    pub vhat_sq: f64,
    pub pooled_sq: f64,
    /// Largest `|<u_i>_t|` over features.
    pub max_abs_mean: f64,
}

pub fn matrix_moments(u: &Array2<f64>) -> MatrixMoments {
    let means = u.mean_axis(Axis(0)).expect("non-empty matrix");
    let centered = u - &means;
    let mhat_sq = means.mapv(|m| m * m).mean().expect("non-empty");
    let vhat_sq = centered.mapv(|v| v * v).mean().expect("non-empty");
    let pooled_sq = u.mapv(|v| v * v).mean().expect("non-empty");
    let max_abs_mean = means.iter().fold(0.0f64, |acc, m| acc.max(m.abs()));
    MatrixMoments {
        mhat_sq,
        vhat_sq,
        pooled_sq,
        max_abs_mean,
    }
}

/// Statistics of `Û^l` at every layer.
pub fn layer_stats(record: &ForwardRecord) -> Result<LayerStatsRecord> {
    layer_stats_of(record, PreActivation::Normalized)
}

pub fn layer_stats_of(record: &ForwardRecord, which: PreActivation) -> Result<LayerStatsRecord> {
    if record.samples() < 2 {
        return Err(Error::InsufficientBatch(record.samples()));
    }
    let depth = record.depth();
    let mut out = LayerStatsRecord {
        widths: Vec::with_capacity(depth),
        mhat_sq: Vec::with_capacity(depth),
        vhat_sq: Vec::with_capacity(depth),
        pooled_sq: Vec::with_capacity(depth),
        r: Vec::with_capacity(depth),
        degenerate: Vec::with_capacity(depth),
    };
    for layer in record.layers() {
        let u = match which {
            PreActivation::Normalized => layer.normalized(),
            PreActivation::Raw => &layer.pre,
        };
        let m = matrix_moments(u);
        debug_assert!(
            (m.mhat_sq + m.vhat_sq - m.pooled_sq).abs()
                <= DECOMPOSITION_TOLERANCE * m.pooled_sq.max(1.0),
            "decomposition identity violated: {m:?}"
        );
        let degenerate = m.vhat_sq <= 0.0;
        out.widths.push(u.ncols());
        out.mhat_sq.push(m.mhat_sq);
        out.vhat_sq.push(m.vhat_sq);
        out.pooled_sq.push(m.pooled_sq);
        out.r.push(if degenerate {
            f64::INFINITY
        } else {
            (m.mhat_sq / m.vhat_sq).sqrt()
        });
        out.degenerate.push(degenerate);
    }
    Ok(out)
}

/// Per-layer mean and population standard deviation of `r` over networks.
/// Degenerate entries are excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub r_mean: Vec<f64>,
    pub r_std: Vec<f64>,
    pub degenerate_count: Vec<usize>,
    pub network_count: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
}

impl EnsembleSummary {
    /// `r_std[l] / sqrt(valid count)`.
    pub fn standard_error(&self, layer: usize) -> f64 {
        let valid = self.network_count - self.degenerate_count[layer];
        self.r_std[layer] / (valid as f64).sqrt()
    }
}

pub fn aggregate(records: &[LayerStatsRecord]) -> Result<EnsembleSummary> {
    if records.len() < 2 {
        return Err(Error::Config(format!(
            "ensemble aggregation needs at least 2 records, got {}",
            records.len()
        )));
    }
    let first = &records[0];
    if let Some(bad) = records.iter().position(|r| r.widths != first.widths) {
        return Err(Error::Consistency(format!(
            "record {bad} has a different shape from record 0"
        )));
    }
    let depth = first.depth();
    let mut summary = EnsembleSummary {
        r_mean: Vec::with_capacity(depth),
        r_std: Vec::with_capacity(depth),
        degenerate_count: Vec::with_capacity(depth),
        network_count: records.len(),
        widths: first.widths.clone(),
        depth,
    };
    for l in 0..depth {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| !r.degenerate[l])
            .map(|r| r.r[l])
            .collect();
        let (mean, std) = population_moments(&values);
        summary.r_mean.push(mean);
        summary.r_std.push(std);
        summary.degenerate_count.push(records.len() - values.len());
    }
    Ok(summary)
}

/// Population mean and standard deviation; `NaN` for an empty slice.
pub fn population_moments(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(mean(ReLU(x)) - mean(x), meansq(ReLU(x)) - meansq(x))`.
pub fn relu_moment_shift(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config(
            "relu_moment_shift needs at least one sample".into(),
        ));
    }
    let n = samples.len() as f64;
    // Only negative samples move, so accumulate their contribution directly.
    let (neg_sum, neg_sq) = samples
        .iter()
        .filter(|&&x| x < 0.0)
        .fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
    Ok((-neg_sum / n, -neg_sq / n))
}

/// Outcome of the matrix-multiplication ratio check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    /// Network-averaged numerator over network-averaged denominator for `W x`.
    pub lhs: f64,
    /// The same ratio for `x` itself.
    pub rhs: f64,
    /// Delta-method standard error of `lhs`.
    pub std_error: f64,
}

fn mean_and_spread(x: &Array2<f64>) -> (f64, f64) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mean_sq = mean.dot(&mean);
    let avg_norm_sq = x.mapv(|v| v * v).sum() / x.nrows() as f64;
    (mean_sq, avg_norm_sq - mean_sq)
}

/// Compares the squared-mean / variance ratio of a batch with its average
/// under multiplication by `trials` random square unit-normal matrices.
pub fn ratio_preservation_check(
    x: &Array2<f64>,
    trials: usize,
    seed_value: u64,
) -> Result<RatioCheck> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientBatch(x.nrows()));
    }
    if trials == 0 {
        return Err(Error::Config(
            "ratio_preservation_check needs trials >= 1".into(),
        ));
    }
    let (num, den) = mean_and_spread(x);
    if den <= 0.0 {
        return Err(Error::Degenerate(
            "batch has zero spread; the ratio is undefined".into(),
        ));
    }
    let rhs = num / den;

    let n = x.ncols();
    let mut nums = Vec::with_capacity(trials);
    let mut dens = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = seed::stream_rng(seed_value, trial as u64);
        let w = Array2::from_shape_simple_fn((n, n), || rng.sample::<f64, _>(StandardNormal));
        let y = x.dot(&w.t());
        let (a, b) = mean_and_spread(&y);
        nums.push(a);
        dens.push(b);
    }
    let k = trials as f64;
    let mean_num = nums.iter().sum::<f64>() / k;
    let mean_den = dens.iter().sum::<f64>() / k;
    if mean_den <= 0.0 {
        return Err(Error::Degenerate(
            "transformed batch has zero spread".into(),
        ));
    }
    let lhs = mean_num / mean_den;
    let resid_var = nums
        .iter()
        .zip(&dens)
        .map(|(a, b)| (a - lhs * b).powi(2))
        .sum::<f64>()
        / (k - 1.0).max(1.0);
    let std_error = (resid_var / k).sqrt() / mean_den;
    Ok(RatioCheck {
        lhs,
        rhs,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, kaiming_init, InitScheme, NetworkSpec, SampleBatch};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn record_for(batch: Array2<f64>, widths: Vec<usize>) -> ForwardRecord {
        let net = kaiming_init(&NetworkSpec::new(widths, InitScheme::Kaiming, 2).unwrap()).unwrap();
        forward(&net, &SampleBatch::new(batch).unwrap()).unwrap()
    }

    #[test]
    fn symmetric_pair() {
        let m = matrix_moments(&array![[1.0], [-1.0]]);
        assert_eq!(m.mhat_sq, 0.0);
        assert_eq!(m.vhat_sq, 1.0);
        assert_eq!(m.pooled_sq, 1.0);
    }

    #[test]
    fn constant_batch_is_flagged() {
        let rec = record_for(Array2::from_elem((5, 3), 1.5), vec![3, 4, 4]);
        let s = layer_stats(&rec).unwrap();
        for l in 0..s.depth() {
            assert!(s.degenerate[l]);
            assert!(s.r[l].is_infinite());
            assert_eq!(s.vhat_sq[l], 0.0);
            assert_abs_diff_eq!(s.pooled_sq[l], s.mhat_sq[l], epsilon = 1e-12);
        }
    }

    #[test]
    fn needs_two_samples() {
        let rec = record_for(Array2::ones((1, 3)), vec![3, 2]);
        assert!(matches!(
            layer_stats(&rec),
            Err(Error::InsufficientBatch(1))
        ));
    }

    #[test]
    fn aggregate_two_point() {
        let rec = |r: f64| LayerStatsRecord {
            widths: vec![4],
            mhat_sq: vec![0.0],
            vhat_sq: vec![1.0],
            pooled_sq: vec![1.0],
            r: vec![r],
            degenerate: vec![false],
        };
        let s = aggregate(&[rec(1.0), rec(3.0)]).unwrap();
        assert_eq!(s.r_mean, vec![2.0]);
        assert_eq!(s.r_std, vec![1.0]);
        let s = aggregate(&[rec(1.5), rec(1.5)]).unwrap();
        assert_eq!(s.r_std, vec![0.0]);
        assert!(aggregate(&[rec(1.0)]).is_err());

        let mut other = rec(1.0);
        other.widths = vec![5];
        assert!(matches!(
            aggregate(&[rec(1.0), other]),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn aggregate_skips_degenerate() {
        let mut a = LayerStatsRecord {
            widths: vec![1],
            mhat_sq: vec![1.0],
            vhat_sq: vec![0.0],
            pooled_sq: vec![1.0],
            r: vec![f64::INFINITY],
            degenerate: vec![true],
        };
        let s = aggregate(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.degenerate_count, vec![2]);
        assert!(s.r_mean[0].is_nan());
        a.r = vec![2.0];
        a.degenerate = vec![false];
        let b = LayerStatsRecord {
            r: vec![f64::INFINITY],
            degenerate: vec![true],
            ..a.clone()
        };
        let s = aggregate(&[a, b]).unwrap();
        assert_eq!(s.r_mean, vec![2.0]);
        assert_eq!(s.degenerate_count, vec![1]);
    }

    #[test]
    fn relu_shift_cases() {
        assert_eq!(relu_moment_shift(&[0.0, 1.0, 2.5]).unwrap(), (0.0, 0.0));
        assert_eq!(relu_moment_shift(&[-1.0, 1.0]).unwrap(), (0.5, -0.5));
        assert!(relu_moment_shift(&[]).is_err());
    }

    #[test]
    fn ratio_check_degenerate_and_zero_mean() {
        let same = Array2::from_elem((4, 3), 2.0);
        assert!(matches!(
            ratio_preservation_check(&same, 10, 0),
            Err(Error::Degenerate(_))
        ));
        let sym = array![[1.0, -2.0], [-1.0, 2.0]];
        let c = ratio_preservation_check(&sym, 50, 0).unwrap();
        assert_eq!(c.rhs, 0.0);
        assert!(c.lhs.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relu_shift_signs(xs in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let (dm, ds) = relu_moment_shift(&xs).unwrap();
            prop_assert!(dm >= 0.0);
            prop_assert!(ds <= 0.0);
            if xs.iter().any(|&x| x < 0.0) {
                prop_assert!(dm > 0.0);
                prop_assert!(ds < 0.0);
            }
        }

        #[test]
        fn decomposition_holds(rows in 2usize..12, cols in 1usize..9, seed in any::<u64>()) {
            let batch = SampleBatch::standard_normal(rows, cols, seed).unwrap();
            let m = matrix_moments(batch.matrix());
            prop_assert!((m.mhat_sq + m.vhat_sq - m.pooled_sq).abs() <= 1e-12 * m.pooled_sq.max(1.0));
        }
    }
}
