//! Monte Carlo scenario runner.
//!
//! A drop draws user positions in the served disc, a constellation epoch with
//! enough visible satellites and one set of link parameters, then compares
//! three ways of precoding at one evaluation instant:
//!
//! - `perfect`: the current channel `G(n)`, no error moments;
//! - `nonrobust`: the outdated channel `G(n − n_delay)`, error assumed zero;
//! - `robust`: the outdated channel plus causal moments of the delay error.
//!
//! All rates are measured on the true `G(n)`. Cluster sizes are swept over
//! nearest-first prefixes of one cluster. Drops share nothing but the master
//! seed and run in parallel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    self, build_history, delayed_estimate, required_samples, uncertainty_moments, ArrayGeometry, ChannelError,
    ChannelModel, LinkModelConfig, UncertaintyStats,
};
use crate::geometry::{
    propagate_constellation, select_cluster, Cluster, ConstellationConfig, GeometryError, GroundUser,
};
use crate::precoder::{
    mse_objective, receive_gain, robust_precode, sum_rate, PowerBudget, PrecoderError, SolverOptions,
};

/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380649e-23;
/// Signal bandwidth as a fraction of the carrier frequency.
pub const BANDWIDTH_FRACTION: f64 = 0.02;

/// Header of the results CSV.
pub const RESULTS_HEADER: &str = "f_hz,L,method,mean_rate_bits,std_rate_bits,n_drops,seed";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("no feasible epoch after {attempts} attempts: {last}")]
    Infeasible { attempts: usize, last: GeometryError },

    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Channel(#[from] ChannelError),

    #[error(transparent)]
    Precoder(#[from] PrecoderError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ============================================================================
// Scenario
// ============================================================================

/// Every knob of a simulation campaign. Field names are the scenario-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Carrier frequencies (Hz).
    pub frequencies: Vec<f64>,
    /// Receiver temperature (K).
    pub temperature: f64,
    /// Number of single-antenna users.
    pub users: usize,
    pub region_latitude_deg: f64,
    pub region_longitude_deg: f64,
    /// Radius of the served disc (m).
    pub region_radius: f64,
    pub array_x: usize,
    pub array_y: usize,
    /// Cluster sizes to evaluate (nearest-first prefixes).
    pub cluster_sizes: Vec<usize>,
    /// Per-satellite power budget.
    pub power_budget: f64,
    /// CSI sampling period (s).
    pub sample_period: f64,
    /// Delay between true channel and estimate, in samples.
    pub n_delay: usize,
    /// Derive `n_delay` from each drop's `d_max / c` instead of `n_delay`.
    pub geometric_delay: bool,
    /// Samples of the delay error averaged into its moments.
    pub moment_window: usize,
    pub drops: usize,
    pub seed: u64,
    pub min_elevation_deg: f64,
    /// Epochs are drawn uniformly in `[0, epoch_span)` seconds.
    pub epoch_span: f64,
    pub max_epoch_attempts: usize,
    /// Solve on the channel scaled by the noise-aware receive gain.
    pub normalize_receive_gain: bool,
    /// Also evaluate one satellite carrying all `M·L` antennas.
    pub single_satellite: bool,
    pub constellation: ConstellationConfig,
    pub link: LinkModelConfig,
    pub solver: SolverOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frequencies: vec![1e8, 5e8, 1e9],
            temperature: 280.0,
            users: 10,
            region_latitude_deg: 54.526,
            region_longitude_deg: -3.3,
            region_radius: 50e3,
            array_x: 3,
            array_y: 3,
            cluster_sizes: (1..=10).collect(),
            power_budget: 10.0,
            sample_period: channel::DEFAULT_SAMPLE_PERIOD,
            n_delay: channel::DEFAULT_DELAY_SAMPLES,
            geometric_delay: false,
            moment_window: channel::DEFAULT_MOMENT_WINDOW,
            drops: 50,
            seed: 42,
            min_elevation_deg: 30.0,
            epoch_span: 86_400.0,
            max_epoch_attempts: 32,
            normalize_receive_gain: true,
            single_satellite: true,
            constellation: ConstellationConfig::starlink_like(),
            link: LinkModelConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_owned(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text).map_err(|source| HarnessError::Config {
            path: path.to_owned(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(invalid("frequencies", "at least one frequency is required"));
        }
        if let Some(f) = self.frequencies.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(invalid("frequencies", format!("{f} Hz is not positive")));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature", "must be positive"));
        }
        if self.users == 0 {
            return Err(invalid("users", "must be at least 1"));
        }
        if !(self.region_radius > 0.0) {
            return Err(invalid("region_radius", "must be positive"));
        }
        if !(-90.0..=90.0).contains(&self.region_latitude_deg) {
            return Err(invalid("region_latitude_deg", "must lie in [-90, 90]"));
        }
        if !self.region_longitude_deg.is_finite() {
            return Err(invalid("region_longitude_deg", "must be finite"));
        }
        if self.array_x == 0 || self.array_y == 0 {
            return Err(invalid("array_x", "array dimensions must be at least 1"));
        }
        if self.cluster_sizes.is_empty() || self.cluster_sizes.contains(&0) {
            return Err(invalid("cluster_sizes", "sizes must be at least 1"));
        }
        if !(self.power_budget > 0.0) {
            return Err(invalid("power_budget", "must be positive"));
        }
        if !(self.sample_period > 0.0) {
            return Err(invalid("sample_period", "must be positive"));
        }
        if self.moment_window == 0 {
            return Err(invalid("moment_window", "must be at least 1"));
        }
        if self.drops == 0 {
            return Err(invalid("drops", "must be at least 1"));
        }
        if !(0.0..90.0).contains(&self.min_elevation_deg) {
            return Err(invalid("min_elevation_deg", "must lie in [0, 90)"));
        }
        if !(self.epoch_span > 0.0) {
            return Err(invalid("epoch_span", "must be positive"));
        }
        if self.max_epoch_attempts == 0 {
            return Err(invalid("max_epoch_attempts", "must be at least 1"));
        }
        self.constellation
            .validate()
            .map_err(|e| invalid("constellation", e.to_string()))?;
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        Ok(())
    }

    pub fn max_cluster_size(&self) -> usize {
        self.cluster_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn elements(&self) -> usize {
        self.array_x * self.array_y
    }

    pub fn region_center(&self) -> GroundUser {
        GroundUser::from_lat_lon(
            u32::MAX,
            self.region_latitude_deg.to_radians(),
            self.region_longitude_deg.to_radians(),
        )
    }

    /// Index at which every method is evaluated: the earliest causal one.
    pub fn evaluation_index(&self, n_delay: usize) -> usize {
        2 * n_delay + self.moment_window
    }
}

/// `BW = 0.02 f`.
pub fn bandwidth(frequency: f64) -> f64 {
    BANDWIDTH_FRACTION * frequency
}

/// Thermal noise power `K_B · T · BW` (W).
pub fn noise_power(temperature: f64, frequency: f64) -> f64 {
    BOLTZMANN * temperature * bandwidth(frequency)
}

/// Near-square `Mx × My` factorisation of an antenna count, `Mx ≤ My`.
pub fn array_shape(elements: usize) -> (usize, usize) {
    let mut mx = (elements as f64).sqrt().floor() as usize;
    while mx > 1 && !elements.is_multiple_of(mx) {
        mx -= 1;
    }
    (mx.max(1), elements / mx.max(1))
}

/// Independent per-index seed derived from a master seed (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ============================================================================
// Drops
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Perfect,
    Robust,
    Nonrobust,
    SingleSatellite,
}

impl Method {
    pub const CLUSTER: [Method; 3] = [Method::Perfect, Method::Robust, Method::Nonrobust];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Perfect => "perfect",
            Method::Robust => "robust",
            Method::Nonrobust => "nonrobust",
            Method::SingleSatellite => "single_satellite",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perfect" => Ok(Method::Perfect),
            "robust" => Ok(Method::Robust),
            "nonrobust" => Ok(Method::Nonrobust),
            "single_satellite" => Ok(Method::SingleSatellite),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// One method at one (frequency, cluster size) in one drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub frequency: f64,
    pub cluster_size: usize,
    pub method: Method,
    /// Sum rate on the true channel (bits per channel use).
    pub rate: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the returned precoder, in solver units.
    pub mse: f64,
    pub block_powers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropResult {
    pub drop_index: usize,
    pub seed: u64,
    /// Constellation epoch used (s).
    pub epoch: f64,
    /// `d_max / c` of the largest cluster (s).
    pub delay: f64,
    pub n_delay: usize,
    pub cells: Vec<CellResult>,
}

impl DropResult {
    pub fn cell(&self, frequency: f64, cluster_size: usize, method: Method) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.frequency == frequency && c.cluster_size == cluster_size && c.method == method)
    }
}

/// Users uniformly distributed over the disc around `center`.
pub fn place_users<R: Rng + ?Sized>(rng: &mut R, center: &GroundUser, radius: f64, count: usize) -> Vec<GroundUser> {
    (0..count)
        .map(|k| {
            let r = radius * rng.random::<f64>().sqrt();
            let bearing = 2.0 * PI * rng.random::<f64>();
            center.destination(k as u32, bearing, r)
        })
        .collect()
}

/// Geometry shared by every frequency of a drop.
#[derive(Debug, Clone)]
pub struct DropGeometry {
    pub epoch: f64,
    pub users: Vec<GroundUser>,
    pub cluster: Cluster,
}

/// Draws users and an epoch at which the largest requested cluster is visible.
pub fn draw_geometry(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<DropGeometry> {
    let center = cfg.region_center();
    let users = place_users(rng, &center, cfg.region_radius, cfg.users);
    let min_el = cfg.min_elevation_deg.to_radians();
    let l = cfg.max_cluster_size();
    let mut last = None;
    for attempt in 0..cfg.max_epoch_attempts {
        let epoch = rng.random::<f64>() * cfg.epoch_span;
        let states = propagate_constellation(&cfg.constellation, epoch)?;
        match select_cluster(&states, &center, &users, l, min_el) {
            Ok(cluster) => return Ok(DropGeometry { epoch, users, cluster }),
            Err(e @ GeometryError::InsufficientVisibility { .. }) => {
                warn!(
                    "epoch {epoch:.1} s infeasible ({e}); resampling (attempt {})",
                    attempt + 1
                );
                last = Some(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(HarnessError::Infeasible {
        attempts: cfg.max_epoch_attempts,
        last: last.expect("at least one attempt"),
    })
}

/// Outcome of one precoder solve scored on the true channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub mse: f64,
    pub block_powers: Vec<f64>,
}

/// Solves on `(Ĝ, stats)` and scores the result on `g_true`.
pub fn solve_and_score(
    cfg: &ScenarioConfig,
    g_true: &DMatrix<Complex64>,
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    budgets: &PowerBudget,
    noise: f64,
) -> Result<Scored> {
    let gain = if cfg.normalize_receive_gain {
        receive_gain(g_hat, budgets, noise)
    } else {
        1.0
    };
    let g_solve = g_hat.scale(gain);
    let stats_solve = stats.scaled(gain);
    let noise_solve = noise * gain * gain;
    let (v, report) = robust_precode(
        &g_solve,
        &stats_solve,
        budgets,
        |v| sum_rate(&g_solve, v, noise_solve),
        &cfg.solver,
    )?;
    Ok(Scored {
        rate: sum_rate(g_true, v.matrix(), noise),
        iterations: report.iterations,
        converged: report.converged,
        mse: mse_objective(v.matrix(), &g_solve, &stats_solve, noise_solve)?,
        block_powers: report.block_powers,
    })
}

/// Seed of the link-parameter stream of a drop; identical for all carriers.
fn link_seed(drop_seed: u64) -> u64 {
    derive_seed(drop_seed, 0x4C49_4E4B)
}

fn drop_delay_samples(cfg: &ScenarioConfig, cluster: &Cluster) -> usize {
    if cfg.geometric_delay {
        (cluster.delay / cfg.sample_period).round() as usize
    } else {
        cfg.n_delay
    }
}

/// Runs one Monte Carlo drop over every frequency and cluster size.
pub fn run_drop(cfg: &ScenarioConfig, drop_index: usize, drop_seed: u64) -> Result<DropResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
    let geo = draw_geometry(cfg, &mut rng)?;
    let center = cfg.region_center();
    let n_delay = drop_delay_samples(cfg, &geo.cluster);
    let n = cfg.evaluation_index(n_delay);
    let m = cfg.elements();

    let mut cells = Vec::new();
    for &f in &cfg.frequencies {
        let noise = noise_power(cfg.temperature, f);
        let geometry = ArrayGeometry::new(cfg.array_x, cfg.array_y, f)?;
        let mut link_rng = ChaCha8Rng::seed_from_u64(link_seed(drop_seed));
        let model = ChannelModel::draw(
            &mut link_rng,
            &geo.cluster.members,
            &center,
            &geo.users,
            geometry,
            f,
            &cfg.link,
        )?;
        let history = build_history(&model, required_samples(n_delay, cfg.moment_window), cfg.sample_period)?;
        let g_now = history.get(n).ok_or(ChannelError::MissingSample(n))?.entries.clone();
        let g_old = delayed_estimate(&history, n, n_delay)?.g_hat;
        let stats = uncertainty_moments(&history, n, n_delay, cfg.moment_window)?;

        for &l in &cfg.cluster_sizes {
            let rows = l * m;
            let budgets = PowerBudget::uniform(l, cfg.power_budget)?;
            let g_true = g_now.rows(0, rows).into_owned();
            let g_stale = g_old.rows(0, rows).into_owned();
            let stats_l = stats.leading_rows(rows);
            let zeros = UncertaintyStats::zeros(rows, cfg.users);
            for method in Method::CLUSTER {
                let scored = match method {
                    Method::Perfect => solve_and_score(cfg, &g_true, &g_true, &zeros, &budgets, noise)?,
                    Method::Nonrobust => solve_and_score(cfg, &g_true, &g_stale, &zeros, &budgets, noise)?,
                    Method::Robust => solve_and_score(cfg, &g_true, &g_stale, &stats_l, &budgets, noise)?,
                    Method::SingleSatellite => unreachable!(),
                };
                cells.push(cell(f, l, method, scored));
            }
            if cfg.single_satellite {
                let scored = single_satellite_rate(cfg, &model, l, n, noise)?;
                cells.push(cell(f, l, Method::SingleSatellite, scored));
            }
        }
    }

    Ok(DropResult {
        drop_index,
        seed: drop_seed,
        epoch: geo.epoch,
        delay: geo.cluster.delay,
        n_delay,
        cells,
    })
}

fn cell(frequency: f64, cluster_size: usize, method: Method, s: Scored) -> CellResult {
    CellResult {
        frequency,
        cluster_size,
        method,
        rate: s.rate,
        iterations: s.iterations,
        converged: s.converged,
        mse: s.mse,
        block_powers: s.block_powers,
    }
}

/// Perfect-CSI rate of the nearest satellite carrying `M·L` antennas and the
/// same per-satellite budget, reusing that satellite's link parameters.
fn single_satellite_rate(
    cfg: &ScenarioConfig,
    cluster_model: &ChannelModel,
    cluster_size: usize,
    n: usize,
    noise: f64,
) -> Result<Scored> {
    let (mx, my) = array_shape(cfg.elements() * cluster_size);
    let geometry = ArrayGeometry::new(mx, my, cluster_model.frequency)?;
    let model = ChannelModel::from_links(vec![cluster_model.links[0].clone()], geometry, cluster_model.frequency)?;
    let g = model.matrix_at(n as f64 * cfg.sample_period);
    let budgets = PowerBudget::uniform(1, cfg.power_budget)?;
    let zeros = UncertaintyStats::zeros(g.nrows(), g.ncols());
    solve_and_score(cfg, &g, &g, &zeros, &budgets, noise)
}

/// Single-satellite baseline for one drop: rate at every frequency for a
/// satellite with `total_antennas` elements.
pub fn single_satellite_baseline(
    cfg: &ScenarioConfig,
    drop_seed: u64,
    total_antennas: usize,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if !total_antennas.is_multiple_of(cfg.elements()) {
        return Err(invalid(
            "array_x",
            "total antennas must be a multiple of the per-satellite array",
        ));
    }
    let cluster_size = total_antennas / cfg.elements();
    let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
    let geo = draw_geometry(cfg, &mut rng)?;
    let center = cfg.region_center();
    let n = cfg.evaluation_index(drop_delay_samples(cfg, &geo.cluster));
    cfg.frequencies
        .iter()
        .map(|&f| {
            let geometry = ArrayGeometry::new(cfg.array_x, cfg.array_y, f)?;
            let mut link_rng = ChaCha8Rng::seed_from_u64(link_seed(drop_seed));
            let model = ChannelModel::draw(
                &mut link_rng,
                &geo.cluster.members,
                &center,
                &geo.users,
                geometry,
                f,
                &cfg.link,
            )?;
            let noise = noise_power(cfg.temperature, f);
            let s = single_satellite_rate(cfg, &model, cluster_size, n, noise)?;
            Ok((f, s.rate))
        })
        .collect()
}

// ============================================================================
// Sweeps and results
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub f_hz: f64,
    #[serde(rename = "L")]
    pub cluster_size: usize,
    #[serde(with = "method_str")]
    pub method: Method,
    pub mean_rate_bits: f64,
    pub std_rate_bits: f64,
    pub n_drops: usize,
    pub seed: u64,
}

mod method_str {
    use super::Method;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Method, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Method, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ResultRow {
    pub fn std_error(&self) -> f64 {
        self.std_rate_bits / (self.n_drops as f64).sqrt()
    }
}

/// One row per (frequency, cluster size, method).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Mean and sample standard deviation of every cell over `drops`.
    pub fn aggregate(drops: &[DropResult], seed: u64) -> Self {
        let mut sorted: Vec<&DropResult> = drops.iter().collect();
        sorted.sort_by_key(|d| d.drop_index);
        let mut cells: BTreeMap<(u64, usize, Method), Vec<f64>> = BTreeMap::new();
        for d in sorted {
            for c in &d.cells {
                cells
                    .entry((c.frequency.to_bits(), c.cluster_size, c.method))
                    .or_default()
                    .push(c.rate);
            }
        }
        let mut rows: Vec<ResultRow> = cells
            .into_iter()
            .map(|((f, l, method), rates)| {
                let n = rates.len();
                let mean = rates.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                ResultRow {
                    f_hz: f64::from_bits(f),
                    cluster_size: l,
                    method,
                    mean_rate_bits: mean,
                    std_rate_bits: std,
                    n_drops: n,
                    seed,
                }
            })
            .collect();
        rows.sort_by(|a, b| {
            a.f_hz
                .total_cmp(&b.f_hz)
                .then(a.cluster_size.cmp(&b.cluster_size))
                .then(a.method.cmp(&b.method))
        });
        Self { rows }
    }

    pub fn get(&self, f_hz: f64, cluster_size: usize, method: Method) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.f_hz == f_hz && r.cluster_size == cluster_size && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        writer.write_record(RESULTS_HEADER.split(','))?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> std::result::Result<Self, csv::Error> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Runs every drop (in parallel) for the configured seed.
pub fn run_drops(cfg: &ScenarioConfig) -> Result<Vec<DropResult>> {
    cfg.validate()?;
    (0..cfg.drops)
        .into_par_iter()
        .map(|i| run_drop(cfg, i, derive_seed(cfg.seed, i as u64)))
        .collect()
}

pub fn sweep(cfg: &ScenarioConfig) -> Result<ResultsTable> {
    Ok(ResultsTable::aggregate(&run_drops(cfg)?, cfg.seed))
}

/// Paths written by [`emit_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub plot_script: PathBuf,
}

/// Writes `results.csv` and `plot_results.py` into `dir`.
pub fn emit_results(table: &ResultsTable, dir: &Path) -> Result<EmittedFiles> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join("results.csv");
    let file = fs::File::create(&csv_path).map_err(io(&csv_path))?;
    table.write_csv(file).map_err(|source| HarnessError::Csv {
        path: csv_path.clone(),
        source,
    })?;
    let script = dir.join("plot_results.py");
    fs::write(&script, PLOT_SCRIPT).map_err(io(&script))?;
    Ok(EmittedFiles {
        csv: csv_path,
        plot_script: script,
    })
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Sum rate versus cluster size, one panel per carrier frequency.

Usage: python3 plot_results.py [results.csv] [output.png]
"""
import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

STYLE = {
    "perfect": ("Perfect CSI", "k-o"),
    "robust": ("Robust", "b-s"),
    "nonrobust": ("Non-robust", "r-^"),
    "single_satellite": ("Single satellite, perfect CSI", "g--"),
}


def main():
    src = sys.argv[1] if len(sys.argv) > 1 else "results.csv"
    out = sys.argv[2] if len(sys.argv) > 2 else "results.png"
    data = defaultdict(lambda: defaultdict(list))
    with open(src, newline="") as fh:
        for row in csv.DictReader(fh):
            f = float(row["f_hz"])
            data[f][row["method"]].append(
                (int(row["L"]), float(row["mean_rate_bits"]), float(row["std_rate_bits"]), int(row["n_drops"]))
            )
    freqs = sorted(data)
    fig, axes = plt.subplots(1, max(len(freqs), 1), figsize=(5 * max(len(freqs), 1), 4), squeeze=False)
    for ax, f in zip(axes[0], freqs):
        for method, (label, fmt) in STYLE.items():
            pts = sorted(data[f].get(method, []))
            if not pts:
                continue
            ls = [p[0] for p in pts]
            means = [p[1] for p in pts]
            errs = [p[2] / max(p[3], 1) ** 0.5 for p in pts]
            ax.errorbar(ls, means, yerr=errs, fmt=fmt, label=label, capsize=2)
        ax.set_title(f"f = {f / 1e6:g} MHz, BW = {0.02 * f / 1e6:g} MHz")
        ax.set_xlabel("Number of satellites in the cluster, L")
        ax.set_ylabel("Sum rate (bit/s/Hz)")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
"#;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            frequencies: vec![1e8, 1e9],
            users: 3,
            cluster_sizes: vec![1, 2, 3],
            n_delay: 6,
            moment_window: 4,
            drops: 3,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn noise_power_matches_formula() {
        let expected = 1.380649e-23 * 280.0 * 2e7;
        assert_eq!(noise_power(280.0, 1e9), expected);
        assert!((expected - 7.73e-14).abs() < 1e-16);
        assert_eq!(bandwidth(5e8), 1e7);
    }

    #[test]
    fn array_shapes() {
        assert_eq!(array_shape(90), (9, 10));
        assert_eq!(array_shape(9), (3, 3));
        assert_eq!(array_shape(7), (1, 7));
        assert_eq!(array_shape(1), (1, 1));
        assert_eq!(array_shape(36), (6, 6));
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Perfect,
            Method::Robust,
            Method::Nonrobust,
            Method::SingleSatellite,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("zf".parse::<Method>().is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ScenarioConfig {
            drops: 0,
            ..ScenarioConfig::default()
        };
        match cfg.validate() {
            Err(HarnessError::Invalid { field, .. }) => assert_eq!(field, "drops"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ScenarioConfig {
            frequencies: vec![-1.0],
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(HarnessError::Invalid {
                field: "frequencies",
                ..
            })
        ));
        let cfg = ScenarioConfig {
            region_radius: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(HarnessError::Invalid {
                field: "region_radius",
                ..
            })
        ));
    }

    #[test]
    fn unknown_scenario_key_is_rejected() {
        assert!(ScenarioConfig::from_toml_str("drops = 3\nbogus = 1\n").is_err());
        let cfg = ScenarioConfig::from_toml_str("drops = 3\nseed = 9\n").unwrap();
        assert_eq!(cfg.drops, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.users, 10);
    }

    #[test]
    fn scenario_toml_round_trip() {
        let cfg = small();
        assert_eq!(ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn users_stay_inside_the_disc() {
        let center = ScenarioConfig::default().region_center();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for u in place_users(&mut rng, &center, 50e3, 200) {
            let ground = crate::geometry::EARTH_RADIUS
                * (u.position.dot(&center.position) / (u.position.norm() * center.position.norm()))
                    .clamp(-1.0, 1.0)
                    .acos();
            assert!(ground <= 50e3 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn drops_are_deterministic() {
        let cfg = small();
        assert_eq!(run_drop(&cfg, 0, 77).unwrap(), run_drop(&cfg, 0, 77).unwrap());
        assert_ne!(
            run_drop(&cfg, 0, 77).unwrap().cells,
            run_drop(&cfg, 0, 78).unwrap().cells
        );
    }

    #[test]
    fn zero_doppler_methods_coincide() {
        let mut cfg = small();
        cfg.link.zero_doppler = true;
        let d = run_drop(&cfg, 0, 11).unwrap();
        for &f in &cfg.frequencies {
            for &l in &cfg.cluster_sizes {
                let p = d.cell(f, l, Method::Perfect).unwrap().rate;
                for m in [Method::Robust, Method::Nonrobust] {
                    let r = d.cell(f, l, m).unwrap().rate;
                    assert!((p - r).abs() <= 1e-6 * p.abs().max(1e-12), "{f} {l} {m}: {p} vs {r}");
                }
            }
        }
    }

    #[test]
    fn single_satellite_with_one_array_equals_perfect_cluster_of_one() {
        let d = run_drop(&small(), 0, 3).unwrap();
        for f in [1e8, 1e9] {
            let a = d.cell(f, 1, Method::SingleSatellite).unwrap().rate;
            let b = d.cell(f, 1, Method::Perfect).unwrap().rate;
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        let cfg = small();
        let baseline = single_satellite_baseline(&cfg, 3, 9).unwrap();
        assert_eq!(baseline.len(), 2);
        assert_eq!(baseline[0].1, d.cell(1e8, 1, Method::SingleSatellite).unwrap().rate);
        assert!(single_satellite_baseline(&cfg, 3, 10).is_err());
    }

    #[test]
    fn every_cell_is_reported() {
        let mut cfg = small();
        cfg.single_satellite = false;
        let d = run_drop(&cfg, 0, 1).unwrap();
        assert_eq!(d.cells.len(), 2 * 3 * 3);
        cfg.single_satellite = true;
        assert_eq!(run_drop(&cfg, 0, 1).unwrap().cells.len(), 2 * 3 * 4);
    }

    #[test]
    fn paper_scale_table_has_ninety_rows() {
        let cfg = ScenarioConfig {
            drops: 1,
            single_satellite: false,
            ..ScenarioConfig::default()
        };
        let table = sweep(&cfg).unwrap();
        assert_eq!(table.rows.len(), 90);
        for row in &table.rows {
            assert!(row.mean_rate_bits.is_finite() && row.mean_rate_bits >= 0.0);
        }
    }

    #[test]
    fn single_drop_table_equals_the_drop() {
        let cfg = small();
        let d = run_drop(&cfg, 0, 5).unwrap();
        let table = ResultsTable::aggregate(std::slice::from_ref(&d), 5);
        assert_eq!(table.rows.len(), d.cells.len());
        for row in &table.rows {
            let cell = d.cell(row.f_hz, row.cluster_size, row.method).unwrap();
            assert_eq!(row.mean_rate_bits, cell.rate);
            assert_eq!(row.std_rate_bits, 0.0);
            assert_eq!(row.n_drops, 1);
            assert_eq!(row.seed, 5);
        }
    }

    #[test]
    fn aggregation_ignores_drop_order() {
        let cfg = small();
        let mut drops = run_drops(&cfg).unwrap();
        let forward = ResultsTable::aggregate(&drops, cfg.seed);
        drops.reverse();
        drops.swap(0, 1);
        assert_eq!(ResultsTable::aggregate(&drops, cfg.seed), forward);
        let row = &forward.rows[0];
        let rates: Vec<f64> = drops
            .iter()
            .map(|d| d.cell(row.f_hz, row.cluster_size, row.method).unwrap().rate)
            .collect();
        let mean = rates.iter().sum::<f64>() / 3.0;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((row.mean_rate_bits - mean).abs() < 1e-12 * mean.abs().max(1.0));
        assert!((row.std_rate_bits - var.sqrt()).abs() < 1e-12 * mean.abs().max(1.0));
    }

    #[test]
    fn empty_table_writes_header_only() {
        let mut buf = Vec::new();
        ResultsTable::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{RESULTS_HEADER}\n"));
    }

    #[test]
    fn results_csv_round_trip() {
        let cfg = small();
        let table = sweep(&cfg).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
        assert_eq!(ResultsTable::read_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn emitted_files_exist() {
        let dir = tempfile::tempdir().unwrap();
        let table = ResultsTable::aggregate(&[run_drop(&small(), 0, 2).unwrap()], 2);
        let files = emit_results(&table, &dir.path().join("out")).unwrap();
        let csv = fs::read_to_string(&files.csv).unwrap();
        assert!(csv.starts_with(RESULTS_HEADER));
        assert!(fs::read_to_string(&files.plot_script).unwrap().contains("results.csv"));
    }

    #[test]
    fn robust_solver_meets_budgets() {
        let d = run_drop(&small(), 0, 8).unwrap();
        for c in d.cells.iter().filter(|c| c.converged) {
            assert!(c.block_powers.iter().all(|&p| p <= 10.0 * 1.01), "{c:?}");
        }
    }
}
