//! Time-varying Rician satellite channels.
//!
//! Every satellite-to-user link is the sum of a LOS ray and `P` scattered
//! rays, each carrying a planar-array response, a propagation-delay phase and
//! a Doppler rotation, all divided by the free-space path-loss amplitude:
//!
//! ```text
//! g(t) = (h_los(t) + h_nlos(t)) / PL,       PL = 4π d f / c
//! h_los(t)  = sqrt(κ/(1+κ)) e^{j2πt(ν_sat+ν_ue)} e^{-j2πfτ} u(θ, ψ)
//! h_nlos(t) = sqrt(1/(P(1+κ))) Σ_p g_p e^{j2πt(ν_sat,p+ν_ue,p)} e^{-j2πfτ_p} u(θ_p, ψ_p)
//! ```
//!
//! Link parameters are frozen per drop; time only enters through the Doppler
//! exponentials. The channel matrix `G(n)` stacks the per-satellite `M × K`
//! blocks row-wise in cluster order.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, EcefVector, GroundUser, SatelliteState, SPEED_OF_LIGHT};

/// Default CSI sampling period (s).
pub const DEFAULT_SAMPLE_PERIOD: f64 = 10e-6;
/// Default number of delay samples between a true channel and its estimate.
pub const DEFAULT_DELAY_SAMPLES: usize = 190;
/// Default number of uncertainty samples averaged into the moments.
pub const DEFAULT_MOMENT_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("warm-up: index {index} needs at least {required} past samples")]
    WarmUp { index: usize, required: usize },

    #[error("sample {0} is not held in the channel history")]
    MissingSample(usize),

    #[error("history of {got} samples is too short, need {needed}")]
    HistoryTooShort { got: usize, needed: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),

    #[error("malformed channel dump: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

// ============================================================================
// Array model
// ============================================================================

/// Uniform planar array of `mx × my` half-wavelength-spaced elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub mx: usize,
    pub my: usize,
    /// Carrier wavelength `c / f` (m).
    pub wavelength: f64,
    /// Element spacing (m).
    pub spacing: f64,
}

impl ArrayGeometry {
    pub fn new(mx: usize, my: usize, frequency: f64) -> Result<Self> {
        positive("frequency", frequency)?;
        if mx == 0 || my == 0 {
            return Err(ChannelError::Dimension(format!("array {mx}x{my} has no elements")));
        }
        let wavelength = SPEED_OF_LIGHT / frequency;
        Ok(Self {
            mx,
            my,
            wavelength,
            spacing: wavelength / 2.0,
        })
    }

    pub fn elements(&self) -> usize {
        self.mx * self.my
    }

    pub fn spacing_ratio(&self) -> f64 {
        self.spacing / self.wavelength
    }
}

/// Free-space path-loss amplitude divisor `4π d f / c`.
pub fn path_loss(distance: f64, frequency: f64) -> Result<f64> {
    positive("distance", distance)?;
    positive("frequency", frequency)?;
    Ok(4.0 * PI * distance * frequency / SPEED_OF_LIGHT)
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ChannelError::NonPositive { name, value })
    }
}

/// Uniform linear steering vector with entries `exp(-j2π r k φ)/√N`.
pub fn steering_vector(phi: f64, n: usize, spacing_ratio: f64) -> DVector<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    DVector::from_fn(n, |k, _| {
        Complex64::from_polar(scale, -2.0 * PI * spacing_ratio * k as f64 * phi)
    })
}

/// Planar-array response `a(cosθ sinψ, Mx) ⊗ a(cosψ, My)`.
pub fn array_response(theta: f64, psi: f64, geom: &ArrayGeometry) -> DVector<Complex64> {
    let ratio = geom.spacing_ratio();
    let ax = steering_vector(theta.cos() * psi.sin(), geom.mx, ratio);
    let ay = steering_vector(psi.cos(), geom.my, ratio);
    ax.kronecker(&ay)
}

/// Local antenna frame of a satellite whose array boresight points at the
/// region centre.
///
/// `z` is the boresight, `x` the along-track direction projected off the
/// boresight and `y = z × x`. A unit direction with frame components
/// `(dx, dy, dz)` maps to angles with `cosψ = dy`, `cosθ sinψ = dx` and
/// `sinθ sinψ = dz`, so the boresight itself is `θ = ψ = π/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayFrame {
    pub x: EcefVector,
    pub y: EcefVector,
    pub z: EcefVector,
}

impl ArrayFrame {
    pub fn toward(sat: &SatelliteState, target: &GroundUser) -> Result<Self> {
        let z = (target.position - sat.position)
            .normalized()
            .ok_or(geometry::GeometryError::CoincidentPositions)?;
        let along = sat.velocity - z * sat.velocity.dot(&z);
        let x = along
            .normalized()
            .or_else(|| {
                // Velocity parallel to the boresight: any orthogonal axis will do.
                let helper = if z.x.abs() < 0.9 {
                    EcefVector::new(1.0, 0.0, 0.0)
                } else {
                    EcefVector::new(0.0, 1.0, 0.0)
                };
                (helper - z * helper.dot(&z)).normalized()
            })
            .expect("orthogonal axis exists");
        let y = z.cross(&x);
        Ok(Self { x, y, z })
    }

    /// Horizontal and vertical angles `(θ, ψ)` of the direction to `point`.
    pub fn angles_to(&self, origin: &EcefVector, point: &EcefVector) -> Result<(f64, f64)> {
        let d = (*point - *origin)
            .normalized()
            .ok_or(geometry::GeometryError::CoincidentPositions)?;
        let (dx, dy, dz) = (d.dot(&self.x), d.dot(&self.y), d.dot(&self.z));
        Ok((dz.atan2(dx), dy.clamp(-1.0, 1.0).acos()))
    }
}

// ============================================================================
// Link parameters
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct NlosPath {
    pub gain: Complex64,
    pub theta: f64,
    pub psi: f64,
    /// Propagation delay (s).
    pub delay: f64,
    /// Satellite-induced Doppler (Hz), equal to the LOS value.
    pub doppler_sat: f64,
    /// User-induced Doppler (Hz).
    pub doppler_ue: f64,
}

/// All random and geometric parameters of one satellite-to-user link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    /// Linear Rician factor.
    pub rician_factor: f64,
    pub los_theta: f64,
    pub los_psi: f64,
    /// Slant range (m).
    pub distance: f64,
    /// LOS delay `d / c` (s).
    pub los_delay: f64,
    pub los_doppler_sat: f64,
    pub los_doppler_ue: f64,
    pub paths: Vec<NlosPath>,
}

impl LinkParams {
    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }
}

/// Knobs for the parts of the link model that are modelling choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkModelConfig {
    /// Half-width of the angular box around the LOS direction from which
    /// scattered-path angles are drawn (rad).
    pub nlos_angle_spread: f64,
    /// Upper bound of the uniform excess delay of scattered paths (s).
    pub nlos_excess_delay: f64,
    /// Bound of the uniform user Doppler draw (Hz); 0 keeps users static.
    pub ue_doppler_bound: f64,
    /// Forces every Doppler term to zero (static channel).
    pub zero_doppler: bool,
}

impl Default for LinkModelConfig {
    fn default() -> Self {
        Self {
            nlos_angle_spread: 10f64.to_radians(),
            nlos_excess_delay: 1e-6,
            ue_doppler_bound: 0.0,
            zero_doppler: false,
        }
    }
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Draws the parameters of the link from `sat` to `user`.
///
/// The random draws consumed from `rng` do not depend on `frequency`, so
/// reseeding with the same seed reproduces the same link at another carrier.
pub fn draw_link_params<R: Rng + ?Sized>(
    rng: &mut R,
    sat: &SatelliteState,
    frame: &ArrayFrame,
    user: &GroundUser,
    frequency: f64,
    cfg: &LinkModelConfig,
) -> Result<LinkParams> {
    positive("frequency", frequency)?;
    let distance = geometry::slant_range(sat, user);
    positive("distance", distance)?;
    let (los_theta, los_psi) = frame.angles_to(&sat.position, &user.position)?;
    let omega = geometry::los_doppler_angle(sat, user)?;
    let speed = sat.velocity.norm();

    let doppler_scale = if cfg.zero_doppler { 0.0 } else { 1.0 };
    let los_doppler_sat = doppler_scale * speed / SPEED_OF_LIGHT * frequency * omega.cos();

    // (80, 90]
    let rician_factor = 90.0 - 10.0 * rng.random::<f64>();
    let num_paths: usize = rng.random_range(2..=7);
    let los_doppler_ue = doppler_scale * symmetric(rng, cfg.ue_doppler_bound);
    let los_delay = distance / SPEED_OF_LIGHT;

    let spread = cfg.nlos_angle_spread;
    let paths = (0..num_paths)
        .map(|_| {
            let gain = complex_normal(rng);
            let theta = los_theta + symmetric(rng, spread);
            let psi = los_psi + symmetric(rng, spread);
            let excess = if cfg.nlos_excess_delay > 0.0 {
                rng.random_range(0.0..cfg.nlos_excess_delay)
            } else {
                0.0
            };
            let doppler_ue = doppler_scale * symmetric(rng, cfg.ue_doppler_bound);
            NlosPath {
                gain,
                theta,
                psi,
                delay: los_delay + excess,
                doppler_sat: los_doppler_sat,
                doppler_ue,
            }
        })
        .collect();

    Ok(LinkParams {
        rician_factor,
        los_theta,
        los_psi,
        distance,
        los_delay,
        los_doppler_sat,
        los_doppler_ue,
        paths,
    })
}

fn rotation(doppler: f64, t: f64, frequency: f64, delay: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * t * doppler) * Complex64::from_polar(1.0, -2.0 * PI * frequency * delay)
}

/// LOS part of the link before path loss.
pub fn los_component(p: &LinkParams, geom: &ArrayGeometry, frequency: f64, t: f64) -> DVector<Complex64> {
    let k = p.rician_factor;
    let amp = (k / (1.0 + k)).sqrt();
    let phase = rotation(p.los_doppler_sat + p.los_doppler_ue, t, frequency, p.los_delay);
    array_response(p.los_theta, p.los_psi, geom) * (phase * amp)
}

/// Scattered part of the link before path loss.
pub fn nlos_component(p: &LinkParams, geom: &ArrayGeometry, frequency: f64, t: f64) -> DVector<Complex64> {
    let mut acc = DVector::zeros(geom.elements());
    if p.paths.is_empty() {
        return acc;
    }
    let amp = (1.0 / (p.paths.len() as f64 * (1.0 + p.rician_factor))).sqrt();
    for path in &p.paths {
        let phase = rotation(path.doppler_sat + path.doppler_ue, t, frequency, path.delay);
        acc += array_response(path.theta, path.psi, geom) * (path.gain * phase);
    }
    acc * Complex64::from(amp)
}

/// Full link vector `(h_los + h_nlos) / PL(d, f)`.
pub fn channel_vector(
    p: &LinkParams,
    geom: &ArrayGeometry,
    distance: f64,
    frequency: f64,
    t: f64,
) -> Result<DVector<Complex64>> {
    let pl = path_loss(distance, frequency)?;
    let h = los_component(p, geom, frequency, t) + nlos_component(p, geom, frequency, t);
    Ok(h.unscale(pl))
}

// ============================================================================
// Drop-level channel model
// ============================================================================

/// One ray of a link with everything except the Doppler rotation folded in.
#[derive(Debug, Clone)]
struct Ray {
    doppler: f64,
    response: DVector<Complex64>,
}

/// Frozen link parameters for every (satellite, user) pair of a drop.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub geometry: ArrayGeometry,
    pub frequency: f64,
    /// `links[l][k]` is the link from cluster member `l` to user `k`.
    pub links: Vec<Vec<LinkParams>>,
    rays: Vec<Vec<Vec<Ray>>>,
}

impl ChannelModel {
    /// Draws link parameters satellite by satellite, user by user.
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        satellites: &[SatelliteState],
        region_center: &GroundUser,
        users: &[GroundUser],
        geometry: ArrayGeometry,
        frequency: f64,
        cfg: &LinkModelConfig,
    ) -> Result<Self> {
        let mut links = Vec::with_capacity(satellites.len());
        for sat in satellites {
            let frame = ArrayFrame::toward(sat, region_center)?;
            let row = users
                .iter()
                .map(|u| draw_link_params(rng, sat, &frame, u, frequency, cfg))
                .collect::<Result<Vec<_>>>()?;
            links.push(row);
        }
        Self::from_links(links, geometry, frequency)
    }

    pub fn from_links(links: Vec<Vec<LinkParams>>, geometry: ArrayGeometry, frequency: f64) -> Result<Self> {
        let users = links.first().map_or(0, Vec::len);
        if links.iter().any(|row| row.len() != users) {
            return Err(ChannelError::Dimension("ragged link table".into()));
        }
        let rays = links
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| link_rays(p, &geometry, frequency))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry,
            frequency,
            links,
            rays,
        })
    }

    pub fn num_satellites(&self) -> usize {
        self.links.len()
    }

    pub fn num_users(&self) -> usize {
        self.links.first().map_or(0, Vec::len)
    }

    /// Channel matrix `G(t)` of size `ML × K`.
    pub fn matrix_at(&self, t: f64) -> DMatrix<Complex64> {
        let m = self.geometry.elements();
        let mut g = DMatrix::zeros(m * self.num_satellites(), self.num_users());
        for (l, row) in self.rays.iter().enumerate() {
            for (k, rays) in row.iter().enumerate() {
                let mut col = g.view_mut((l * m, k), (m, 1));
                for ray in rays {
                    let rot = Complex64::from_polar(1.0, 2.0 * PI * ray.doppler * t);
                    col.zip_apply(&ray.response, |a, b| *a += b * rot);
                }
            }
        }
        g
    }
}

fn link_rays(p: &LinkParams, geom: &ArrayGeometry, frequency: f64) -> Result<Vec<Ray>> {
    let pl = path_loss(p.distance, frequency)?;
    let k = p.rician_factor;
    let mut rays = Vec::with_capacity(p.paths.len() + 1);
    let los_amp = (k / (1.0 + k)).sqrt() / pl;
    rays.push(Ray {
        doppler: p.los_doppler_sat + p.los_doppler_ue,
        response: array_response(p.los_theta, p.los_psi, geom)
            * (Complex64::from_polar(los_amp, -2.0 * PI * frequency * p.los_delay)),
    });
    if !p.paths.is_empty() {
        let nlos_amp = (1.0 / (p.paths.len() as f64 * (1.0 + k))).sqrt() / pl;
        for path in &p.paths {
            let coeff = path.gain * Complex64::from_polar(nlos_amp, -2.0 * PI * frequency * path.delay);
            rays.push(Ray {
                doppler: path.doppler_sat + path.doppler_ue,
                response: array_response(path.theta, path.psi, geom) * coeff,
            });
        }
    }
    Ok(rays)
}

// ============================================================================
// History, delayed estimates and uncertainty moments
// ============================================================================

/// A true channel matrix at sample index `n` (time `n · sample_period`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: DMatrix<Complex64>,
    pub sample_index: usize,
    pub sample_period: f64,
}

/// Bounded buffer of consecutive channel samples at a fixed period.
#[derive(Debug, Clone)]
pub struct ChannelHistory {
    sample_period: f64,
    capacity: usize,
    samples: VecDeque<ChannelMatrix>,
}

impl ChannelHistory {
    pub fn new(sample_period: f64, capacity: usize) -> Result<Self> {
        positive("sample_period", sample_period)?;
        if capacity == 0 {
            return Err(ChannelError::HistoryTooShort { got: 0, needed: 1 });
        }
        Ok(Self {
            sample_period,
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    /// Appends the next sample, evicting the oldest one when full.
    pub fn push(&mut self, entries: DMatrix<Complex64>) -> Result<()> {
        if let Some(last) = self.samples.back() {
            if last.entries.shape() != entries.shape() {
                return Err(ChannelError::Dimension(format!(
                    "sample shape {:?} does not match history shape {:?}",
                    entries.shape(),
                    last.entries.shape()
                )));
            }
        }
        let sample_index = self.samples.back().map_or(0, |s| s.sample_index + 1);
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(ChannelMatrix {
            entries,
            sample_index,
            sample_period: self.sample_period,
        });
        Ok(())
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_index(&self) -> Option<usize> {
        self.samples.front().map(|s| s.sample_index)
    }

    pub fn last_index(&self) -> Option<usize> {
        self.samples.back().map(|s| s.sample_index)
    }

    pub fn get(&self, n: usize) -> Option<&ChannelMatrix> {
        let first = self.first_index()?;
        n.checked_sub(first).and_then(|i| self.samples.get(i))
    }

    fn entries(&self, n: usize) -> Result<&DMatrix<Complex64>> {
        self.get(n).map(|s| &s.entries).ok_or(ChannelError::MissingSample(n))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ChannelMatrix> {
        self.samples.iter()
    }

    /// Copy restricted to the first `rows` antenna rows of every sample.
    pub fn leading_rows(&self, rows: usize) -> Result<Self> {
        let mut out = Self::new(self.sample_period, self.capacity)?;
        for s in &self.samples {
            if rows > s.entries.nrows() {
                return Err(ChannelError::Dimension(format!(
                    "{rows} rows requested from {}",
                    s.entries.nrows()
                )));
            }
            out.samples.push_back(ChannelMatrix {
                entries: s.entries.rows(0, rows).into_owned(),
                sample_index: s.sample_index,
                sample_period: s.sample_period,
            });
        }
        Ok(out)
    }

    /// Writes the history as text: a header naming `ml,k,n_samples,sample_period_s`,
    /// one line with those values, then one line per sample holding the sample
    /// index followed by `re,im` pairs in row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (ml, k) = self.samples.front().map_or((0, 0), |s| s.entries.shape());
        writeln!(w, "ml,k,n_samples,sample_period_s")?;
        writeln!(w, "{ml},{k},{},{:e}", self.len(), self.sample_period)?;
        for s in &self.samples {
            write!(w, "{}", s.sample_index)?;
            for r in 0..ml {
                for c in 0..k {
                    let z = s.entries[(r, c)];
                    write!(w, ",{:e},{:e}", z.re, z.im)?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| ChannelError::Parse("unexpected end of input".into()))?
                .map_err(ChannelError::from)
        };
        if next()?.trim() != "ml,k,n_samples,sample_period_s" {
            return Err(ChannelError::Parse("bad header".into()));
        }
        let meta = next()?;
        let fields: Vec<&str> = meta.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(ChannelError::Parse("bad dimension line".into()));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| ChannelError::Parse(e.to_string()));
        let (ml, k, n) = (
            parse_usize(fields[0])?,
            parse_usize(fields[1])?,
            parse_usize(fields[2])?,
        );
        let period: f64 = fields[3]
            .parse()
            .map_err(|_| ChannelError::Parse("bad period".into()))?;

        let mut history = Self::new(period, n.max(1))?;
        for _ in 0..n {
            let line = next()?;
            let mut it = line.trim().split(',');
            let index = parse_usize(it.next().unwrap_or(""))?;
            let values = it
                .map(|v| v.parse::<f64>().map_err(|e| ChannelError::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != 2 * ml * k {
                return Err(ChannelError::Parse(format!(
                    "sample {index} has {} values",
                    values.len()
                )));
            }
            let entries = DMatrix::from_fn(ml, k, |r, c| {
                let i = 2 * (r * k + c);
                Complex64::new(values[i], values[i + 1])
            });
            history.samples.push_back(ChannelMatrix {
                entries,
                sample_index: index,
                sample_period: period,
            });
        }
        Ok(history)
    }
}

/// Evaluates `model` at `n_samples` consecutive sample instants starting at 0.
pub fn build_history(model: &ChannelModel, n_samples: usize, sample_period: f64) -> Result<ChannelHistory> {
    let mut history = ChannelHistory::new(sample_period, n_samples.max(1))?;
    for n in 0..n_samples {
        history.push(model.matrix_at(n as f64 * sample_period))?;
    }
    Ok(history)
}

/// Samples needed so that index `2·n_delay + window` is available.
pub fn required_samples(n_delay: usize, window: usize) -> usize {
    2 * n_delay + window + 1
}

/// Outdated channel estimate `Ĝ(n) = G(n − n_delay)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiEstimate {
    pub g_hat: DMatrix<Complex64>,
    pub n_delay: usize,
}

pub fn delayed_estimate(h: &ChannelHistory, n: usize, n_delay: usize) -> Result<CsiEstimate> {
    let past = n.checked_sub(n_delay).ok_or(ChannelError::WarmUp {
        index: n,
        required: n_delay,
    })?;
    Ok(CsiEstimate {
        g_hat: h.entries(past)?.clone(),
        n_delay,
    })
}

/// Delay error `G̃(m) = G(m − n_delay) − G(m)`.
pub fn uncertainty_sample(h: &ChannelHistory, m: usize, n_delay: usize) -> Result<DMatrix<Complex64>> {
    let past = m.checked_sub(n_delay).ok_or(ChannelError::WarmUp {
        index: m,
        required: n_delay,
    })?;
    Ok(h.entries(past)? - h.entries(m)?)
}

/// First and second moments of the delay error.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyStats {
    /// `E{G̃}`, `ML × K`.
    pub mean: DMatrix<Complex64>,
    /// `E{G̃ G̃ᴴ}`, `ML × ML`.
    pub second_moment: DMatrix<Complex64>,
}

impl UncertaintyStats {
    pub fn zeros(rows: usize, users: usize) -> Self {
        Self {
            mean: DMatrix::zeros(rows, users),
            second_moment: DMatrix::zeros(rows, rows),
        }
    }

    /// Sample mean and sample second moment of the given error matrices.
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DMatrix<Complex64>>,
    {
        let mut count = 0usize;
        let mut acc: Option<Self> = None;
        for s in samples {
            let stats = acc.get_or_insert_with(|| Self::zeros(s.nrows(), s.ncols()));
            if stats.mean.shape() != s.shape() {
                return Err(ChannelError::Dimension("uncertainty samples differ in shape".into()));
            }
            stats.mean += s;
            stats
                .second_moment
                .gemm(Complex64::new(1.0, 0.0), s, &s.adjoint(), Complex64::new(1.0, 0.0));
            count += 1;
        }
        let mut stats = acc.ok_or(ChannelError::HistoryTooShort { got: 0, needed: 1 })?;
        let inv = 1.0 / count as f64;
        stats.mean.scale_mut(inv);
        stats.second_moment.scale_mut(inv);
        Ok(stats)
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn users(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.mean
            .iter()
            .chain(self.second_moment.iter())
            .all(|z| *z == Complex64::new(0.0, 0.0))
    }

    /// `E{G̃_l}` for blocks of `m` rows.
    pub fn mean_block(&self, l: usize, m: usize) -> DMatrix<Complex64> {
        self.mean.rows(l * m, m).into_owned()
    }

    /// `E{G̃_l G̃_iᴴ}` for blocks of `m` rows.
    pub fn block(&self, l: usize, i: usize, m: usize) -> DMatrix<Complex64> {
        self.second_moment.view((l * m, i * m), (m, m)).into_owned()
    }

    /// Moments of the first `rows` antenna rows.
    pub fn leading_rows(&self, rows: usize) -> Self {
        Self {
            mean: self.mean.rows(0, rows).into_owned(),
            second_moment: self.second_moment.view((0, 0), (rows, rows)).into_owned(),
        }
    }

    /// Moments of `c · G̃`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            mean: self.mean.scale(c),
            second_moment: self.second_moment.scale(c * c),
        }
    }

    /// Covariance `E{G̃G̃ᴴ} − E{G̃}E{G̃}ᴴ`.
    pub fn covariance(&self) -> DMatrix<Complex64> {
        &self.second_moment - &self.mean * self.mean.adjoint()
    }
}

/// Sample moments of `G̃(m)` over `m = n − n_delay − window + 1 … n − n_delay`.
///
/// Only channels up to index `n − n_delay` are read, i.e. what is already
/// known at time `n` through delayed estimates.
pub fn uncertainty_moments(h: &ChannelHistory, n: usize, n_delay: usize, window: usize) -> Result<UncertaintyStats> {
    let required = 2 * n_delay + window;
    if window == 0 || n < required {
        return Err(ChannelError::WarmUp {
            index: n,
            required: required.max(1),
        });
    }
    let last = n - n_delay;
    let samples = (last + 1 - window..=last)
        .map(|m| uncertainty_sample(h, m, n_delay))
        .collect::<Result<Vec<_>>>()?;
    UncertaintyStats::from_samples(samples.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SatelliteId, EARTH_RADIUS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn toy_params(kappa: f64, paths: Vec<NlosPath>) -> LinkParams {
        LinkParams {
            rician_factor: kappa,
            los_theta: 0.3,
            los_psi: 1.2,
            distance: 600e3,
            los_delay: 0.0,
            los_doppler_sat: 150.0,
            los_doppler_ue: 0.0,
            paths,
        }
    }

    fn toy_path(gain: Complex64, theta: f64, psi: f64, delay: f64) -> NlosPath {
        NlosPath {
            gain,
            theta,
            psi,
            delay,
            doppler_sat: 150.0,
            doppler_ue: 3.0,
        }
    }

    fn scene() -> (SatelliteState, GroundUser, Vec<GroundUser>) {
        let center = GroundUser::from_lat_lon(0, 54.526f64.to_radians(), -3.3f64.to_radians());
        let sub = GroundUser::from_lat_lon(0, 55.5f64.to_radians(), -2.0f64.to_radians());
        let sat = SatelliteState {
            id: SatelliteId(1),
            position: sub.up() * (EARTH_RADIUS + 550e3),
            velocity: EcefVector::new(0.0, 0.0, 1.0).cross(&sub.up()).normalized().unwrap()
                * geometry::orbital_speed(550e3).unwrap(),
            altitude: 550e3,
        };
        let users = vec![center.destination(0, 0.4, 20e3), center.destination(1, 2.5, 35e3)];
        (sat, center, users)
    }

    #[test]
    fn path_loss_cases() {
        let f = 1e9;
        assert!((path_loss(SPEED_OF_LIGHT / (4.0 * PI * f), f).unwrap() - 1.0).abs() < 1e-12);
        let pl = path_loss(550e3, 1e9).unwrap();
        assert!((pl - 4.0 * PI * 550e3 * 1e9 / 299_792_458.0).abs() < 1e-6);
        assert!((pl - 2.305e7).abs() / 2.305e7 < 1e-3);
        assert_eq!(path_loss(2.0 * 550e3, f).unwrap(), 2.0 * pl);
        assert!(path_loss(0.0, f).is_err());
        assert!(path_loss(1.0, -1.0).is_err());
    }

    #[test]
    fn steering_vector_cases() {
        let a = steering_vector(0.0, 4, 0.5);
        assert!(a.iter().all(|z| close(*z, Complex64::new(0.5, 0.0), 1e-15)));
        let b = steering_vector(1.0, 2, 0.5);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(b[0], Complex64::new(s, 0.0), 1e-15));
        assert!(close(b[1], Complex64::new(-s, 0.0), 1e-15));
        for (phi, n) in [(0.37, 1), (-0.9, 5), (2.3, 9)] {
            assert!((steering_vector(phi, n, 0.5).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn array_response_cases() {
        let geom = ArrayGeometry::new(3, 3, 1e9).unwrap();
        assert!((geom.spacing_ratio() - 0.5).abs() < 1e-15);
        let u = array_response(PI / 2.0, PI / 2.0, &geom);
        assert!(u.iter().all(|z| close(*z, Complex64::new(1.0 / 3.0, 0.0), 1e-15)));

        let single = ArrayGeometry::new(1, 1, 1e9).unwrap();
        assert!(close(
            array_response(0.4, 0.9, &single)[0],
            Complex64::new(1.0, 0.0),
            1e-15
        ));

        // Element-wise Kronecker oracle.
        let (theta, psi) = (0.77, 2.1);
        let u = array_response(theta, psi, &geom);
        assert!((u.norm() - 1.0).abs() < 1e-12);
        for mx in 0..3 {
            for my in 0..3 {
                let a1 = Complex64::from_polar(1.0 / 3f64.sqrt(), -PI * mx as f64 * theta.cos() * psi.sin());
                let a2 = Complex64::from_polar(1.0 / 3f64.sqrt(), -PI * my as f64 * psi.cos());
                assert!(close(u[mx * 3 + my], a1 * a2, 1e-14));
            }
        }
    }

    #[test]
    fn los_component_cases() {
        let geom = ArrayGeometry::new(3, 3, 5e8).unwrap();
        let p = toy_params(85.0, vec![]);
        let amp = (85.0f64 / 86.0).sqrt();
        let u = array_response(p.los_theta, p.los_psi, &geom);
        let at0 = los_component(&p, &geom, 5e8, 0.0);
        assert!((at0 - u.clone() * Complex64::from(amp)).norm() < 1e-14);
        for t in [0.0, 1e-4, 0.37] {
            assert!((los_component(&p, &geom, 5e8, t).norm() - amp).abs() < 1e-12);
        }
        let half = 1.0 / (2.0 * p.los_doppler_sat);
        let flipped = los_component(&p, &geom, 5e8, half);
        assert!((flipped + u * Complex64::from(amp)).norm() < 1e-12);
    }

    #[test]
    fn nlos_component_cases() {
        let geom = ArrayGeometry::new(3, 3, 5e8).unwrap();
        let mut p = toy_params(85.0, vec![toy_path(Complex64::new(1.0, 0.0), 0.2, 1.0, 0.0)]);
        p.paths[0].doppler_sat = 0.0;
        p.paths[0].doppler_ue = 0.0;
        let expected = array_response(0.2, 1.0, &geom) * Complex64::from((1.0f64 / 86.0).sqrt());
        assert!((nlos_component(&p, &geom, 5e8, 0.0) - expected).norm() < 1e-14);

        let zero = toy_params(85.0, vec![toy_path(Complex64::new(0.0, 0.0), 0.1, 0.2, 1e-7); 3]);
        assert_eq!(nlos_component(&zero, &geom, 5e8, 0.01).norm(), 0.0);

        // Term-by-term oracle for three random paths.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let paths: Vec<_> = (0..3)
            .map(|_| {
                toy_path(
                    complex_normal(&mut rng),
                    rng.random(),
                    rng.random(),
                    rng.random::<f64>() * 1e-6,
                )
            })
            .collect();
        let p = toy_params(82.0, paths);
        let t = 3.3e-4;
        let got = nlos_component(&p, &geom, 5e8, t);
        let amp = 1.0 / (3.0 * 83.0f64).sqrt();
        for m in 0..9 {
            let mut want = Complex64::new(0.0, 0.0);
            for path in &p.paths {
                let u = array_response(path.theta, path.psi, &geom);
                let arg = 2.0 * PI * t * (path.doppler_sat + path.doppler_ue) - 2.0 * PI * 5e8 * path.delay;
                want += path.gain * Complex64::from_polar(amp, arg) * u[m];
            }
            assert!(close(got[m], want, 1e-13));
        }
    }

    #[test]
    fn channel_vector_composition() {
        let f = 1e9;
        let geom = ArrayGeometry::new(3, 3, f).unwrap();
        let p = toy_params(85.0, vec![toy_path(Complex64::new(0.0, 0.0), 0.1, 0.2, 0.0); 2]);
        let g = channel_vector(&p, &geom, 550e3, f, 0.0).unwrap();
        let pl = path_loss(550e3, f).unwrap();
        assert!((g.clone() - los_component(&p, &geom, f, 0.0).unscale(pl)).norm() < 1e-22);
        // Paper-scale magnitudes: per entry sqrt(κ/(1+κ)) / (3 PL).
        let expected = (85.0f64 / 86.0).sqrt() / (3.0 * pl);
        assert!(g.iter().all(|z| (z.norm() - expected).abs() / expected < 1e-12));
        assert!((expected - 1.44e-8).abs() < 0.01e-8);

        let p = toy_params(85.0, vec![toy_path(Complex64::new(0.3, 0.8), 0.1, 0.2, 1e-7)]);
        let unit = SPEED_OF_LIGHT / (4.0 * PI * f);
        let g = channel_vector(&p, &geom, unit, f, 2e-5).unwrap();
        let h = los_component(&p, &geom, f, 2e-5) + nlos_component(&p, &geom, f, 2e-5);
        assert!((g - h).norm() < 1e-12);
    }

    #[test]
    fn link_draws_are_deterministic() {
        let (sat, center, users) = scene();
        let frame = ArrayFrame::toward(&sat, &center).unwrap();
        let cfg = LinkModelConfig::default();
        let a = draw_link_params(&mut ChaCha8Rng::seed_from_u64(11), &sat, &frame, &users[0], 1e9, &cfg).unwrap();
        let b = draw_link_params(&mut ChaCha8Rng::seed_from_u64(11), &sat, &frame, &users[0], 1e9, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.rician_factor > 80.0 && a.rician_factor <= 90.0);
        assert!((2..=7).contains(&a.num_paths()));
        assert!(a
            .paths
            .iter()
            .all(|p| p.doppler_sat == a.los_doppler_sat && p.delay >= a.los_delay));
    }

    #[test]
    fn link_draw_statistics() {
        let (sat, center, users) = scene();
        let frame = ArrayFrame::toward(&sat, &center).unwrap();
        let cfg = LinkModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut kappa = 0.0;
        let mut gain_power = 0.0;
        let mut gains = 0usize;
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let p = draw_link_params(&mut rng, &sat, &frame, &users[1], 1e8, &cfg).unwrap();
            kappa += p.rician_factor;
            counts[p.num_paths()] += 1;
            for path in &p.paths {
                gain_power += path.gain.norm_sqr();
                gains += 1;
            }
        }
        assert!((kappa / draws as f64 - 85.0).abs() < 0.5);
        assert!((gain_power / gains as f64 - 1.0).abs() < 0.05);
        assert_eq!(counts[0] + counts[1], 0);
        assert!(counts[2..].iter().all(|&c| c > 1300));
    }

    #[test]
    fn unit_power_split_before_path_loss() {
        // |h_los|² + E|h_nlos|² = 1 over gain draws.
        let geom = ArrayGeometry::new(3, 3, 1e9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kappa = 84.0;
        let mut nlos = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let paths = (0..4)
                .map(|_| {
                    toy_path(
                        complex_normal(&mut rng),
                        rng.random::<f64>(),
                        rng.random::<f64>() + 0.5,
                        0.0,
                    )
                })
                .collect();
            let p = toy_params(kappa, paths);
            nlos += nlos_component(&p, &geom, 1e9, 0.0).norm_squared();
        }
        let nlos = nlos / draws as f64;
        assert!((nlos - 1.0 / (1.0 + kappa)).abs() / (1.0 / (1.0 + kappa)) < 0.03);
        let p = toy_params(kappa, vec![]);
        let total = los_component(&p, &geom, 1e9, 0.0).norm_squared() + nlos;
        assert!((total - 1.0).abs() < 0.03 / (1.0 + kappa));
    }

    #[test]
    fn array_frame_boresight() {
        let (sat, center, _) = scene();
        let frame = ArrayFrame::toward(&sat, &center).unwrap();
        let (theta, psi) = frame.angles_to(&sat.position, &center.position).unwrap();
        assert!((theta - PI / 2.0).abs() < 1e-9 && (psi - PI / 2.0).abs() < 1e-9);
        assert!(frame.x.dot(&frame.z).abs() < 1e-12 && (frame.y.norm() - 1.0).abs() < 1e-12);
    }

    fn model(cfg: &LinkModelConfig, f: f64, m: (usize, usize), seed: u64) -> ChannelModel {
        let (sat, center, users) = scene();
        let mut sat2 = sat;
        sat2.id = SatelliteId(2);
        sat2.position = sat.position.rotate_z(0.02);
        sat2.velocity = sat.velocity.rotate_z(0.02);
        let geom = ArrayGeometry::new(m.0, m.1, f).unwrap();
        ChannelModel::draw(
            &mut ChaCha8Rng::seed_from_u64(seed),
            &[sat, sat2],
            &center,
            &users,
            geom,
            f,
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn model_matrix_matches_link_reevaluation() {
        let f = 5e8;
        let model = model(&LinkModelConfig::default(), f, (3, 3), 17);
        let history = build_history(&model, 50, DEFAULT_SAMPLE_PERIOD).unwrap();
        for n in [0usize, 13, 49] {
            let g = &history.get(n).unwrap().entries;
            assert_eq!(g.shape(), (18, 2));
            let t = n as f64 * DEFAULT_SAMPLE_PERIOD;
            for l in 0..2 {
                for k in 0..2 {
                    let p = &model.links[l][k];
                    let v = channel_vector(p, &model.geometry, p.distance, f, t).unwrap();
                    for m in 0..9 {
                        let scale = v.norm();
                        assert!((g[(l * 9 + m, k)] - v[m]).norm() <= 1e-11 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_doppler_channel_is_static() {
        let cfg = LinkModelConfig {
            zero_doppler: true,
            ..Default::default()
        };
        let model = model(&cfg, 1e9, (3, 3), 4);
        let h = build_history(&model, 20, DEFAULT_SAMPLE_PERIOD).unwrap();
        let g0 = &h.get(0).unwrap().entries;
        assert!(h.iter().all(|s| &s.entries == g0));
        let stats = uncertainty_moments(&h, 19, 5, 9).unwrap();
        assert!(stats.is_zero());
    }

    #[test]
    fn delayed_estimate_cases() {
        let model = model(&LinkModelConfig::default(), 1e8, (2, 2), 8);
        let h = build_history(&model, 400, DEFAULT_SAMPLE_PERIOD).unwrap();
        assert_eq!(delayed_estimate(&h, 250, 0).unwrap().g_hat, h.get(250).unwrap().entries);
        assert_eq!(
            delayed_estimate(&h, 390, 190).unwrap().g_hat,
            h.get(200).unwrap().entries
        );
        assert!(matches!(
            delayed_estimate(&h, 189, 190),
            Err(ChannelError::WarmUp { .. })
        ));
        assert!(matches!(
            delayed_estimate(&h, 999, 190),
            Err(ChannelError::MissingSample(809))
        ));
    }

    #[test]
    fn uncertainty_sample_is_exact_difference() {
        let model = model(&LinkModelConfig::default(), 1e9, (3, 3), 21);
        let h = build_history(&model, 300, DEFAULT_SAMPLE_PERIOD).unwrap();
        let d = uncertainty_sample(&h, 250, 190).unwrap();
        assert_eq!(d, &h.get(60).unwrap().entries - &h.get(250).unwrap().entries);
    }

    #[test]
    fn moments_window_one_and_causality() {
        let model = model(&LinkModelConfig::default(), 1e9, (3, 3), 22);
        let h = build_history(&model, 40, DEFAULT_SAMPLE_PERIOD).unwrap();
        let (nd, w) = (10, 1);
        let n = 2 * nd + w;
        let stats = uncertainty_moments(&h, n, nd, w).unwrap();
        let s = uncertainty_sample(&h, n - nd, nd).unwrap();
        assert_eq!(stats.mean, s);
        assert!((&stats.second_moment - &s * s.adjoint()).norm() < 1e-30);
        assert!(matches!(
            uncertainty_moments(&h, n - 1, nd, w),
            Err(ChannelError::WarmUp { .. })
        ));

        // Samples after n − n_delay must not influence the result.
        let mut truncated = ChannelHistory::new(h.sample_period(), 64).unwrap();
        for s in h.iter().take(n - nd + 1) {
            truncated.push(s.entries.clone()).unwrap();
        }
        let t = uncertainty_moments(&truncated, n, nd, w).unwrap();
        assert_eq!(t, stats);
    }

    #[test]
    fn moments_are_hermitian_and_psd() {
        let model = model(&LinkModelConfig::default(), 1e9, (3, 3), 23);
        let h = build_history(&model, 120, DEFAULT_SAMPLE_PERIOD).unwrap();
        let stats = uncertainty_moments(&h, 119, 40, 30).unwrap();
        let s = &stats.second_moment;
        assert!((s - s.adjoint()).norm() <= 1e-12 * s.norm());
        let cov = stats.covariance();
        let eig = nalgebra::SymmetricEigen::new(cov.clone()).eigenvalues;
        let trace = cov.trace().re;
        assert!(eig.iter().all(|&e| e >= -1e-9 * trace));
    }

    #[test]
    fn history_is_bounded_and_consecutive() {
        let mut h = ChannelHistory::new(1e-5, 3).unwrap();
        for i in 0..5 {
            h.push(DMatrix::from_element(2, 1, Complex64::new(i as f64, 0.0)))
                .unwrap();
        }
        assert_eq!((h.first_index(), h.last_index(), h.len()), (Some(2), Some(4), 3));
        assert!(h.get(1).is_none());
        assert_eq!(h.get(3).unwrap().entries[(0, 0)].re, 3.0);
        assert!(h.push(DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let model = model(&LinkModelConfig::default(), 1e9, (2, 1), 2);
        let h = build_history(&model, 4, DEFAULT_SAMPLE_PERIOD).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let back = ChannelHistory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in h.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
    }
}
