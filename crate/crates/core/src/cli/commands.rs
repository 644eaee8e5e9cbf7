use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::table::{svg_with_provenance, write_file, Provenance, ResultTable};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    self, CalibrationConfig, FiniteWidthConfig, GradientConfig, GradientScheme, InitCheckConfig,
};
use crate::gradients::BnBackward;
use crate::meanfield::{CorrelationMap, QuadratureConfig};
use crate::network::{self, InitScheme, NetworkSpec};
use crate::plot::{LinePlot, Series};
use crate::seed::{self, experiment, purpose};
use crate::serialize;

const DEFAULT_DEPTH: usize = 50;
const DEFAULT_NETWORKS: usize = 30;
const DEFAULT_SAMPLES: usize = 100;
const DEFAULT_WIDTHS: [usize; 5] = [30, 100, 300, 1000, 3000];
const FAST_MAX_WIDTH: usize = 1000;
const DEFAULT_GRADIENT_WIDTH: usize = 3000;
const DEFAULT_INIT_WIDTH: usize = 256;
const FAST_INIT_DEPTH: usize = 20;
const DEFAULT_DUMP_WIDTH: usize = 100;

const KAIMING_SLOPE_TOLERANCE: f64 = 0.02;
const EXPLOSION_SLOPE_TOLERANCE: f64 = 0.05;

/// Files written by a command plus one-line summaries for the terminal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandReport {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

fn config_hash<T: Serialize>(resolved: &T) -> String {
    let canonical = serde_json::to_string(resolved).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn quadrature(cfg: &ExperimentConfig) -> Result<QuadratureConfig> {
    match cfg.nodes {
        Some(n) => QuadratureConfig::with_nodes(n),
        None => Ok(QuadratureConfig::default()),
    }
}

fn calibration(cfg: &ExperimentConfig) -> CalibrationConfig {
    let d = CalibrationConfig::default();
    CalibrationConfig {
        batches: cfg.calib_batches.unwrap_or(d.batches),
        batch_size: cfg.calib_batch_size.unwrap_or(d.batch_size),
    }
}

#[derive(Serialize)]
struct TheorySettings {
    command: &'static str,
    depth: usize,
    nodes: usize,
}

pub fn cmd_theory(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let q = quadrature(cfg)?;
    let settings = TheorySettings {
        command: "theory",
        depth: cfg.depth.unwrap_or(DEFAULT_DEPTH),
        nodes: q.node_count,
    };
    let prov = Provenance::new(config_hash(&settings), cfg.seed());
    let table = theory_table(settings.depth, q, prov.clone())?;

    let plot = LinePlot::new("Mean-field sample statistics", "layer", "value")
        .with_series(Series::new("m (sample mean)", table.points("layer", "m")))
        .with_series(Series::new("v (sample std)", table.points("layer", "v")))
        .with_series(Series::new("sigma (total std)", table.points("layer", "sigma")).dashed());

    let dir = cfg.out_dir();
    let last = table.rows.last().expect("depth >= 1");
    Ok(CommandReport {
        files: vec![
            write_file(&dir, "theory.csv", &table.to_csv()?)?,
            write_file(
                &dir,
                "theory.svg",
                &svg_with_provenance(&plot.to_svg(), &prov),
            )?,
        ],
        summary: vec![format!(
            "layer {}: m = {:.4}, v = {:.4}, ratio = {:.4}",
            settings.depth,
            last[2].as_f64(),
            last[3].as_f64(),
            last[5].as_f64()
        )],
    })
}

fn theory_table(depth: usize, q: QuadratureConfig, prov: Provenance) -> Result<ResultTable> {
    let traj = CorrelationMap::new(q)?.trajectory(depth)?;
    let mut table = ResultTable::new(&["layer", "c", "m", "v", "sigma", "ratio"], prov);
    for l in 1..=depth {
        table.push(vec![
            l.into(),
            traj.c[l].into(),
            traj.m(l - 1).into(),
            traj.v(l - 1).into(),
            traj.sigma_sq.sqrt().into(),
            traj.ratio(l - 1)?.into(),
        ]);
    }
    Ok(table)
}

#[derive(Serialize)]
struct FiniteWidthSettings {
    command: &'static str,
    widths: Vec<usize>,
    depth: usize,
    networks: usize,
    samples: usize,
    seed: u64,
    batchnorm: bool,
    nodes: usize,
}

pub fn cmd_finite_width(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let q = quadrature(cfg)?;
    let widths = match &cfg.widths {
        Some(w) => w.clone(),
        None if cfg.fast() => DEFAULT_WIDTHS
            .into_iter()
            .filter(|&w| w <= FAST_MAX_WIDTH)
            .collect(),
        None => DEFAULT_WIDTHS.to_vec(),
    };
    let settings = FiniteWidthSettings {
        command: "finite-width",
        widths,
        depth: cfg.depth.unwrap_or(DEFAULT_DEPTH),
        networks: cfg.networks.unwrap_or(DEFAULT_NETWORKS),
        samples: cfg.samples.unwrap_or(DEFAULT_SAMPLES),
        seed: cfg.seed(),
        batchnorm: cfg.batchnorm.unwrap_or(false),
        nodes: q.node_count,
    };
    let mut prov = Provenance::new(config_hash(&settings), settings.seed);
    if cfg.fast() {
        prov = prov.with_note(format!("fast mode: widths above {FAST_MAX_WIDTH} dropped"));
    }
    let traj = CorrelationMap::new(q)?.trajectory(settings.depth)?;
    let theory: Vec<f64> = (0..settings.depth)
        .map(|l| traj.ratio(l))
        .collect::<Result<_>>()?;

    let dir = cfg.out_dir();
    let mut report = CommandReport::default();
    let mut plot = LinePlot::new("Mean-to-std ratio of pre-activations", "layer", "r");
    for &width in &settings.widths {
        let mut ecfg = FiniteWidthConfig::new(
            width,
            settings.depth,
            settings.networks,
            settings.samples,
            settings.seed,
        );
        ecfg.batchnorm = settings.batchnorm;
        let result = experiments::finite_width_ensemble(&ecfg)?;
        let s = &result.summary;
        let mut table = ResultTable::new(
            &[
                "layer",
                "r_mean",
                "r_std",
                "r_stderr",
                "degenerate",
                "theory",
            ],
            prov.clone(),
        );
        for (l, &th) in theory.iter().enumerate() {
            table.push(vec![
                (l + 1).into(),
                s.r_mean[l].into(),
                s.r_std[l].into(),
                s.standard_error(l).into(),
                s.degenerate_count[l].into(),
                th.into(),
            ]);
        }
        plot = plot.with_series(Series::new(
            format!("width {width}"),
            table.points("layer", "r_mean"),
        ));
        report.summary.push(format!(
            "width {width}: layer {} mean r = {:.4} (theory {:.4})",
            settings.depth,
            s.r_mean[settings.depth - 1],
            theory[settings.depth - 1]
        ));
        report.files.push(write_file(
            &dir,
            &format!("ratio_w{width}.csv"),
            &table.to_csv()?,
        )?);
    }
    let theory_points = theory
        .iter()
        .enumerate()
        .map(|(l, &r)| ((l + 1) as f64, r))
        .collect();
    plot = plot.with_series(Series::new("theory", theory_points).dashed());
    report.files.push(write_file(
        &dir,
        "ratio.svg",
        &svg_with_provenance(&plot.to_svg(), &prov),
    )?);
    Ok(report)
}

#[derive(Serialize)]
struct GradientSettings {
    command: &'static str,
    schemes: Vec<GradientScheme>,
    width: usize,
    depth: usize,
    networks: usize,
    samples: usize,
    seed: u64,
    calibration: CalibrationConfig,
    bn_backward: BnBackward,
    nodes: usize,
}

#[derive(Serialize)]
struct SchemeSlope {
    mean_slope: f64,
    std_slope: f64,
    pooled_slope: f64,
    networks: usize,
}

#[derive(Serialize)]
struct SlopesReport {
    provenance: Provenance,
    theory_slope: f64,
    sigma_s: f64,
    fit_range: (usize, usize),
    width: usize,
    depth: usize,
    fast: bool,
    tolerances: BTreeMap<&'static str, f64>,
    schemes: BTreeMap<&'static str, SchemeSlope>,
}

fn parse_schemes(cfg: &ExperimentConfig) -> Result<Vec<GradientScheme>> {
    let mut schemes = match &cfg.scheme {
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<GradientScheme>>>()?,
        None => GradientScheme::ALL.to_vec(),
    };
    if cfg.batchnorm == Some(true) && !schemes.contains(&GradientScheme::KaimingBn) {
        schemes.push(GradientScheme::KaimingBn);
    }
    Ok(schemes)
}

pub fn cmd_gradients(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let q = quadrature(cfg)?;
    let width = match &cfg.widths {
        Some(w) => w[0],
        None if cfg.fast() => FAST_MAX_WIDTH,
        None => DEFAULT_GRADIENT_WIDTH,
    };
    let settings = GradientSettings {
        command: "gradients",
        schemes: parse_schemes(cfg)?,
        width,
        depth: cfg.depth.unwrap_or(DEFAULT_DEPTH),
        networks: cfg.networks.unwrap_or(DEFAULT_NETWORKS),
        samples: cfg.samples.unwrap_or(DEFAULT_SAMPLES),
        seed: cfg.seed(),
        calibration: calibration(cfg),
        bn_backward: if cfg.frozen_bn_stats.unwrap_or(false) {
            BnBackward::FrozenStats
        } else {
            BnBackward::Full
        },
        nodes: q.node_count,
    };
    let mut prov = Provenance::new(config_hash(&settings), settings.seed);
    if cfg.fast() && cfg.widths.is_none() {
        prov = prov.with_note(format!("fast mode: width reduced to {FAST_MAX_WIDTH}"));
    }
    let prediction = CorrelationMap::new(q)?.bn_predictions();

    let dir = cfg.out_dir();
    let mut report = CommandReport::default();
    let mut plot = LinePlot::new("Activation gradients vs. layer", "layer", "ln <(dL/dx)^2>");
    let mut schemes = BTreeMap::new();
    let mut fit_range = (0, 0);
    for &scheme in &settings.schemes {
        let mut gcfg = GradientConfig::new(
            scheme,
            settings.width,
            settings.depth,
            settings.networks,
            settings.samples,
            settings.seed,
        );
        gcfg.calibration = settings.calibration;
        gcfg.bn_backward = settings.bn_backward;
        let ens = experiments::gradient_ensemble(&gcfg)?;
        fit_range = ens.fit_range;

        let mut table =
            ResultTable::new(&["layer", "g2_mean", "ln_g2_mean", "g2_std"], prov.clone());
        for l in 0..=settings.depth {
            let values: Vec<f64> = ens.traces.iter().map(|t| t.g2[l]).collect();
            let (_, std) = crate::stats::population_moments(&values);
            table.push(vec![
                l.into(),
                ens.mean_g2[l].into(),
                ens.mean_g2[l].ln().into(),
                std.into(),
            ]);
        }
        plot = plot.with_series(Series::new(
            scheme.name(),
            table.points("layer", "ln_g2_mean"),
        ));
        report.summary.push(format!(
            "{scheme}: mean slope {:.4} (std {:.4}), slope of ensemble mean {:.4}",
            ens.mean_slope, ens.std_slope, ens.pooled_slope
        ));
        report.files.push(write_file(
            &dir,
            &format!("grads_{}.csv", scheme.slug()),
            &table.to_csv()?,
        )?);
        schemes.insert(
            scheme.name(),
            SchemeSlope {
                mean_slope: ens.mean_slope,
                std_slope: ens.std_slope,
                pooled_slope: ens.pooled_slope,
                networks: ens.traces.len(),
            },
        );
    }
    let slopes = SlopesReport {
        provenance: prov.clone(),
        theory_slope: prediction.slope,
        sigma_s: prediction.sigma_s,
        fit_range,
        width: settings.width,
        depth: settings.depth,
        fast: cfg.fast(),
        tolerances: BTreeMap::from([
            ("kaiming_abs", KAIMING_SLOPE_TOLERANCE),
            ("explosion_abs", EXPLOSION_SLOPE_TOLERANCE),
        ]),
        schemes,
    };
    let json = serde_json::to_string_pretty(&slopes).map_err(|e| Error::Format(e.to_string()))?;
    report
        .files
        .push(write_file(&dir, "slopes.json", &(json + "\n"))?);
    report.files.push(write_file(
        &dir,
        "grads.svg",
        &svg_with_provenance(&plot.to_svg(), &prov),
    )?);
    report
        .summary
        .push(format!("theory slope {:.4}", prediction.slope));
    Ok(report)
}

#[derive(Serialize)]
struct InitCheckSettings {
    command: &'static str,
    scheme: InitScheme,
    width: usize,
    depth: usize,
    calibration: CalibrationConfig,
    heldout: usize,
    seed: u64,
}

fn single_scheme(cfg: &ExperimentConfig, default: InitScheme) -> Result<InitScheme> {
    match cfg.scheme.as_deref() {
        None => Ok(default),
        Some([one]) => one.parse(),
        Some(_) => Err(Error::Config("this command takes a single --scheme".into())),
    }
}

pub fn cmd_init_check(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let settings = InitCheckSettings {
        command: "init-check",
        scheme: single_scheme(cfg, InitScheme::ScaleBias)?,
        width: cfg.widths.as_ref().map_or(DEFAULT_INIT_WIDTH, |w| w[0]),
        depth: cfg.depth.unwrap_or(if cfg.fast() {
            FAST_INIT_DEPTH
        } else {
            DEFAULT_DEPTH
        }),
        calibration: calibration(cfg),
        heldout: cfg
            .heldout
            .unwrap_or(CalibrationConfig::default().batch_size),
        seed: cfg.seed(),
    };
    let mut prov = Provenance::new(config_hash(&settings), settings.seed);
    if cfg.fast() && cfg.depth.is_none() {
        prov = prov.with_note(format!("fast mode: depth reduced to {FAST_INIT_DEPTH}"));
    }
    let (_, rows) = experiments::init_check(&InitCheckConfig {
        scheme: settings.scheme,
        width: settings.width,
        depth: settings.depth,
        calibration: settings.calibration,
        heldout_samples: settings.heldout,
        seed: settings.seed,
    })?;
    let mut table = ResultTable::new(
        &[
            "layer",
            "calib_max_abs_mean",
            "calib_second_moment",
            "calib_variance",
            "heldout_max_abs_mean",
            "heldout_second_moment",
            "heldout_variance",
        ],
        prov,
    );
    for row in &rows {
        table.push(vec![
            row.layer.into(),
            row.calibration.max_abs_mean.into(),
            row.calibration.pooled_sq.into(),
            row.calibration.vhat_sq.into(),
            row.heldout.max_abs_mean.into(),
            row.heldout.pooled_sq.into(),
            row.heldout.vhat_sq.into(),
        ]);
    }
    let worst_mean = rows
        .iter()
        .fold(0.0f64, |a, r| a.max(r.calibration.max_abs_mean));
    let worst_var = rows
        .iter()
        .fold(0.0f64, |a, r| a.max((r.calibration.pooled_sq - 1.0).abs()));
    Ok(CommandReport {
        files: vec![write_file(
            &cfg.out_dir(),
            "init_check.csv",
            &table.to_csv()?,
        )?],
        summary: vec![format!(
            "{}: calibration max |mean| {worst_mean:.3e}, max |second moment - 1| {worst_var:.3e}",
            settings.scheme
        )],
    })
}

pub fn cmd_dump_net(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let scheme = single_scheme(cfg, InitScheme::Kaiming)?;
    let widths = match &cfg.widths {
        Some(w) if w.len() >= 2 => w.clone(),
        Some(_) => return Err(Error::Config("dump-net needs --widths n0,n1,...,nL".into())),
        None => vec![DEFAULT_DUMP_WIDTH; cfg.depth.unwrap_or(DEFAULT_DEPTH) + 1],
    };
    let path_seed = |what| seed::derive(cfg.seed(), &[experiment::DUMP, what]);
    let spec = NetworkSpec::new(widths, scheme, path_seed(purpose::WEIGHTS))?
        .with_batchnorm(cfg.batchnorm.unwrap_or(false));
    let net = if scheme.is_data_dependent() {
        let calib = calibration(cfg).draw(spec.input_dim(), path_seed(purpose::CALIBRATION))?;
        network::initialize(network::unit_normal_init(&spec)?, &calib)?
    } else {
        network::kaiming_init(&spec)?
    };
    let path = cfg.out_dir().join("net.bin");
    serialize::save(&net, &path)?;
    Ok(CommandReport {
        files: vec![path],
        summary: vec![format!(
            "{} network, depth {}, seed {:#018x}",
            scheme,
            net.depth(),
            net.spec().seed
        )],
    })
}
