//! Constellation geometry.
//!
//! Circular two-body propagation of a multi-shell constellation, ground-point
//! visibility, slant ranges and nearest-satellite cluster selection. Positions
//! are expressed in an Earth-centred Earth-fixed frame on a spherical Earth.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Gravitational constant (m³ kg⁻¹ s⁻²).
pub const GRAVITATIONAL_CONSTANT: f64 = 6.674e-11;
/// Mass of the Earth (kg).
pub const EARTH_MASS: f64 = 5.972e24;
/// Mean Earth radius (m).
pub const EARTH_RADIUS: f64 = 6.371e6;
/// Sidereal rotation rate of the Earth (rad/s).
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_0e-5;

/// Lowest altitude accepted for an orbital shell (m).
pub const MIN_SHELL_ALTITUDE: f64 = 400e3;
/// Highest altitude accepted for an orbital shell (m).
pub const MAX_SHELL_ALTITUDE: f64 = 2000e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("altitude must be positive, got {0} m")]
    NonPositiveAltitude(f64),

    #[error("invalid orbital shell: {0}")]
    InvalidShell(String),

    #[error("satellite and ground point coincide")]
    CoincidentPositions,

    #[error("satellite velocity is zero")]
    ZeroVelocity,

    #[error("minimum elevation must lie in [0, pi/2), got {0} rad")]
    InvalidElevation(f64),

    #[error("only {visible} satellites visible, cluster needs {required}")]
    InsufficientVisibility { visible: usize, required: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

// ============================================================================
// Vectors
// ============================================================================

/// Cartesian vector in the Earth-centred Earth-fixed frame (metres, or m/s
/// for velocities).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EcefVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| *self * (1.0 / n))
    }

    pub fn distance_to(&self, other: &Self) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation about the z axis by `angle` radians (counter-clockwise).
    pub fn rotate_z(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    /// Rotation about the x axis by `angle` radians (counter-clockwise).
    pub fn rotate_x(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(self.x, c * self.y - s * self.z, s * self.y + c * self.z)
    }
}

impl Add for EcefVector {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for EcefVector {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for EcefVector {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Neg for EcefVector {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

// ============================================================================
// Constellation description
// ============================================================================

/// One shell of circular orbits sharing altitude and inclination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitalShell {
    pub num_planes: u32,
    pub sats_per_plane: u32,
    /// Altitude above the mean Earth radius (m).
    pub altitude: f64,
    /// Inclination (rad).
    pub inclination: f64,
    /// Span over which the ascending nodes of the planes are spread (rad).
    #[serde(default = "default_raan_spread")]
    pub raan_spread: f64,
    /// Along-track phase shift applied per plane index (rad).
    #[serde(default)]
    pub phase_offset: f64,
}

fn default_raan_spread() -> f64 {
    2.0 * PI
}

impl OrbitalShell {
    pub fn new(num_planes: u32, sats_per_plane: u32, altitude: f64, inclination: f64) -> Self {
        Self {
            num_planes,
            sats_per_plane,
            altitude,
            inclination,
            raan_spread: default_raan_spread(),
            phase_offset: 0.0,
        }
    }

    pub fn satellite_count(&self) -> usize {
        self.num_planes as usize * self.sats_per_plane as usize
    }

    /// Orbital period of the shell (s).
    pub fn period(&self) -> Result<f64> {
        let speed = orbital_speed(self.altitude)?;
        Ok(2.0 * PI * (EARTH_RADIUS + self.altitude) / speed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_planes == 0 || self.sats_per_plane == 0 {
            return Err(GeometryError::InvalidShell(
                "plane and satellite counts must be at least 1".into(),
            ));
        }
        if !(MIN_SHELL_ALTITUDE..=MAX_SHELL_ALTITUDE).contains(&self.altitude) {
            return Err(GeometryError::InvalidShell(format!(
                "altitude {} m outside [{MIN_SHELL_ALTITUDE}, {MAX_SHELL_ALTITUDE}]",
                self.altitude
            )));
        }
        if !(0.0..=PI).contains(&self.inclination) {
            return Err(GeometryError::InvalidShell(format!(
                "inclination {} rad outside [0, pi]",
                self.inclination
            )));
        }
        if !self.raan_spread.is_finite() || !self.phase_offset.is_finite() {
            return Err(GeometryError::InvalidShell(
                "RAAN spread and phase offset must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A set of shells plus the epoch at which propagation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig {
    pub shells: Vec<OrbitalShell>,
    /// Seconds since the reference instant at which all shells are at
    /// their initial phasing and the Earth rotation angle is zero.
    #[serde(default)]
    pub epoch: f64,
}

impl ConstellationConfig {
    /// Four-shell Starlink-like constellation with 4236 satellites.
    pub fn starlink_like() -> Self {
        let deg = PI / 180.0;
        Self {
            shells: vec![
                OrbitalShell::new(72, 22, 550e3, 53.0 * deg),
                OrbitalShell::new(36, 20, 570e3, 70.0 * deg),
                OrbitalShell::new(6, 58, 560e3, 97.6 * deg),
                OrbitalShell::new(72, 22, 540e3, 53.2 * deg),
            ],
            epoch: 0.0,
        }
    }

    pub fn satellite_count(&self) -> usize {
        self.shells.iter().map(OrbitalShell::satellite_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.shells.iter().try_for_each(OrbitalShell::validate)?;
        if !self.epoch.is_finite() {
            return Err(GeometryError::InvalidShell("epoch must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self::starlink_like()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SatelliteId(pub u32);

impl fmt::Display for SatelliteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sat-{}", self.0)
    }
}

/// Position and inertial velocity of one satellite, both in ECEF axes.
///
/// The velocity is the inertial orbital velocity rotated into the Earth-fixed
/// axes; it does not include the frame-rotation term, so its magnitude is the
/// circular orbital speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState {
    pub id: SatelliteId,
    pub position: EcefVector,
    pub velocity: EcefVector,
    pub altitude: f64,
}

/// A single-antenna ground terminal (or the centre of the served region).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundUser {
    pub id: u32,
    pub latitude: f64,
    pub longitude: f64,
    pub position: EcefVector,
}

impl GroundUser {
    /// Point on the spherical Earth at the given latitude/longitude (rad).
    pub fn from_lat_lon(id: u32, latitude: f64, longitude: f64) -> Self {
        let (slat, clat) = latitude.sin_cos();
        let (slon, clon) = longitude.sin_cos();
        let position = EcefVector::new(
            EARTH_RADIUS * clat * clon,
            EARTH_RADIUS * clat * slon,
            EARTH_RADIUS * slat,
        );
        Self {
            id,
            latitude,
            longitude,
            position,
        }
    }

    /// Point reached by travelling `distance` metres along a great circle
    /// with initial `bearing` (rad, clockwise from north).
    pub fn destination(&self, id: u32, bearing: f64, distance: f64) -> Self {
        let delta = distance / EARTH_RADIUS;
        let (sd, cd) = delta.sin_cos();
        let (slat, clat) = self.latitude.sin_cos();
        let lat2 = (slat * cd + clat * sd * bearing.cos()).asin();
        let lon2 = self.longitude + (bearing.sin() * sd * clat).atan2(cd - slat * lat2.sin());
        Self::from_lat_lon(id, lat2, lon2)
    }

    /// Outward local vertical.
    pub fn up(&self) -> EcefVector {
        self.position.normalized().unwrap_or(EcefVector::new(0.0, 0.0, 1.0))
    }
}

/// Nearest-first group of satellites serving a region.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Members ordered by distance to the region centre, ties by id.
    pub members: Vec<SatelliteState>,
    /// Distance of each member to the region centre (m), non-decreasing.
    pub center_distances: Vec<f64>,
    /// Largest satellite-to-user distance over members × users (m).
    pub d_max: f64,
    /// CSI delay `d_max / c` (s).
    pub delay: f64,
}

impl Cluster {
    pub fn ids(&self) -> Vec<SatelliteId> {
        self.members.iter().map(|s| s.id).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The `l` nearest members, with `d_max` recomputed against `users`.
    pub fn prefix(&self, l: usize, users: &[GroundUser]) -> Cluster {
        let l = l.min(self.members.len());
        let members = self.members[..l].to_vec();
        let d_max = max_slant_range(&members, users);
        Cluster {
            center_distances: self.center_distances[..l].to_vec(),
            members,
            d_max,
            delay: d_max / SPEED_OF_LIGHT,
        }
    }
}

// ============================================================================
// Operations
// ============================================================================

/// Circular orbital speed at `altitude` metres: `sqrt(G·M_e / (R + h))`.
pub fn orbital_speed(altitude: f64) -> Result<f64> {
    if !(altitude > 0.0) {
        return Err(GeometryError::NonPositiveAltitude(altitude));
    }
    Ok((GRAVITATIONAL_CONSTANT * EARTH_MASS / (EARTH_RADIUS + altitude)).sqrt())
}

/// Position and velocity in the inertial frame for one satellite slot.
fn inertial_state(shell: &OrbitalShell, plane: u32, slot: u32, t: f64) -> Result<(EcefVector, EcefVector)> {
    let radius = EARTH_RADIUS + shell.altitude;
    let speed = orbital_speed(shell.altitude)?;
    let mean_motion = speed / radius;

    let raan = shell.raan_spread * plane as f64 / shell.num_planes as f64;
    let arg =
        2.0 * PI * slot as f64 / shell.sats_per_plane as f64 + shell.phase_offset * plane as f64 + mean_motion * t;

    let (s, c) = arg.sin_cos();
    let pos = EcefVector::new(radius * c, radius * s, 0.0)
        .rotate_x(shell.inclination)
        .rotate_z(raan);
    let vel = EcefVector::new(-speed * s, speed * c, 0.0)
        .rotate_x(shell.inclination)
        .rotate_z(raan);
    Ok((pos, vel))
}

/// Propagates every satellite of `config` to `config.epoch + t` seconds.
///
/// Satellite ids are assigned shell by shell, plane by plane, slot by slot.
pub fn propagate_constellation(config: &ConstellationConfig, t: f64) -> Result<Vec<SatelliteState>> {
    config.validate()?;
    let time = config.epoch + t;
    let earth_angle = EARTH_ROTATION_RATE * time;

    let mut states = Vec::with_capacity(config.satellite_count());
    let mut next_id = 0u32;
    for shell in &config.shells {
        for plane in 0..shell.num_planes {
            for slot in 0..shell.sats_per_plane {
                let (pos, vel) = inertial_state(shell, plane, slot, time)?;
                states.push(SatelliteState {
                    id: SatelliteId(next_id),
                    position: pos.rotate_z(-earth_angle),
                    velocity: vel.rotate_z(-earth_angle),
                    altitude: shell.altitude,
                });
                next_id += 1;
            }
        }
    }
    Ok(states)
}

/// Straight-line distance between a satellite and a ground point.
pub fn slant_range(sat: &SatelliteState, user: &GroundUser) -> f64 {
    sat.position.distance_to(&user.position)
}

/// Elevation of `sat` above the local horizon of `ground`, in [-pi/2, pi/2].
pub fn elevation_angle(sat: &SatelliteState, ground: &GroundUser) -> Result<f64> {
    let los = sat.position - ground.position;
    let range = los.norm();
    if range == 0.0 {
        return Err(GeometryError::CoincidentPositions);
    }
    let sin_el = (los.dot(&ground.up()) / range).clamp(-1.0, 1.0);
    Ok(sin_el.asin())
}

/// Ids of satellites at or above `min_elevation`, sorted by id.
pub fn visible_satellites(
    states: &[SatelliteState],
    ground: &GroundUser,
    min_elevation: f64,
) -> Result<Vec<SatelliteId>> {
    check_min_elevation(min_elevation)?;
    let mut ids: Vec<SatelliteId> = states
        .iter()
        .filter(|s| matches!(elevation_angle(s, ground), Ok(el) if el >= min_elevation))
        .map(|s| s.id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

fn check_min_elevation(min_elevation: f64) -> Result<()> {
    if !(0.0..PI / 2.0).contains(&min_elevation) {
        return Err(GeometryError::InvalidElevation(min_elevation));
    }
    Ok(())
}

fn max_slant_range(members: &[SatelliteState], users: &[GroundUser]) -> f64 {
    members
        .iter()
        .flat_map(|s| users.iter().map(move |u| slant_range(s, u)))
        .fold(0.0, f64::max)
}

/// Picks the `l` visible satellites nearest to `region_center`.
pub fn select_cluster(
    states: &[SatelliteState],
    region_center: &GroundUser,
    users: &[GroundUser],
    l: usize,
    min_elevation: f64,
) -> Result<Cluster> {
    check_min_elevation(min_elevation)?;
    let mut candidates: Vec<(f64, SatelliteState)> = states
        .iter()
        .filter(|s| matches!(elevation_angle(s, region_center), Ok(el) if el >= min_elevation))
        .map(|s| (slant_range(s, region_center), *s))
        .collect();
    if candidates.len() < l {
        return Err(GeometryError::InsufficientVisibility {
            visible: candidates.len(),
            required: l,
        });
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    candidates.truncate(l);

    let (center_distances, members): (Vec<f64>, Vec<SatelliteState>) = candidates.into_iter().unzip();
    let d_max = max_slant_range(&members, users);
    Ok(Cluster {
        members,
        center_distances,
        d_max,
        delay: d_max / SPEED_OF_LIGHT,
    })
}

/// Angle between the satellite's velocity and its boresight to `user`.
pub fn los_doppler_angle(sat: &SatelliteState, user: &GroundUser) -> Result<f64> {
    let v = sat.velocity.normalized().ok_or(GeometryError::ZeroVelocity)?;
    let b = (user.position - sat.position)
        .normalized()
        .ok_or(GeometryError::CoincidentPositions)?;
    Ok(v.dot(&b).clamp(-1.0, 1.0).acos())
}
