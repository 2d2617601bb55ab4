//! Geodesic distance for the 25-meter positive criterion and solar-position
//! day/night classification for query routing.
//!
//! Distances use a spherical Earth (R = 6,371,000 m); the 25 m criterion
//! tolerates the sub-0.5% error this introduces. Solar elevation follows the
//! NOAA solar position algorithm (declination + equation of time + hour
//! angle) and is geometric: sunrise/sunset conventionally sit at -0.833°,
//! which folds in refraction and the solar semi-diameter.

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spherical Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} out of range [-90, 90]")]
    LatitudeRange(f64),
    #[error("longitude {0} out of range [-180, 180]")]
    LongitudeRange(f64),
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("timestamp year {0} outside supported range 1900-2100")]
    TimestampRange(i32),
    #[error("night elevation threshold {night} must be below day threshold {day}")]
    ThresholdOrder { night: f64, day: f64 },
}

/// Latitude/longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeRange(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Local planar coordinates in meters (east, north). For UTM-style datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    x_m: f64,
    y_m: f64,
}

impl PlanarPoint {
    pub fn new(x_m: f64, y_m: f64) -> Result<Self, GeoError> {
        if !x_m.is_finite() || !y_m.is_finite() {
            return Err(GeoError::NonFinite);
        }
        Ok(Self { x_m, y_m })
    }

    pub fn x_m(&self) -> f64 {
        self.x_m
    }

    pub fn y_m(&self) -> f64 {
        self.y_m
    }
}

/// Time-of-day bucket for a query image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Day,
    Twilight,
    Night,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Day => write!(f, "day"),
            DomainTag::Twilight => write!(f, "twilight"),
            DomainTag::Night => write!(f, "night"),
        }
    }
}

/// Elevation thresholds separating day, twilight, and night.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarConfig {
    /// Above this elevation (degrees) a query counts as day.
    pub day_elevation_deg: f64,
    /// Below this elevation (degrees) a query counts as night. Default -6°
    /// (civil twilight).
    pub night_elevation_deg: f64,
}

impl Default for SolarConfig {
    fn default() -> Self {
        Self {
            day_elevation_deg: 0.0,
            night_elevation_deg: -6.0,
        }
    }
}

impl SolarConfig {
    pub fn new(day_elevation_deg: f64, night_elevation_deg: f64) -> Result<Self, GeoError> {
        if !(night_elevation_deg < day_elevation_deg) {
            return Err(GeoError::ThresholdOrder {
                night: night_elevation_deg,
                day: day_elevation_deg,
            });
        }
        Ok(Self {
            day_elevation_deg,
            night_elevation_deg,
        })
    }
}

/// Great-circle distance in meters. Exactly symmetric in its arguments.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let dphi = (a.lat - b.lat).abs().to_radians();
    let dlam = (a.lon - b.lon).abs().to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlam / 2.0).sin();
    let h = s1 * s1 + a.lat.to_radians().cos() * b.lat.to_radians().cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin()
}

/// Euclidean distance in meters between planar points.
pub fn planar_m(a: PlanarPoint, b: PlanarPoint) -> f64 {
    let dx = (a.x_m - b.x_m).abs();
    let dy = (a.y_m - b.y_m).abs();
    (dx * dx + dy * dy).sqrt()
}

fn check_timestamp(utc: DateTime<Utc>) -> Result<(), GeoError> {
    let year = utc.year();
    if !(1900..=2100).contains(&year) {
        return Err(GeoError::TimestampRange(year));
    }
    Ok(())
}

/// Julian day from a UTC timestamp.
fn julian_day(utc: DateTime<Utc>) -> f64 {
    let secs = utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_millis()) / 1000.0;
    secs / 86_400.0 + 2_440_587.5
}

/// Solar declination (radians) and equation of time (minutes) at a Julian
/// century offset from J2000.0.
fn declination_and_eot(t: f64) -> (f64, f64) {
    let mean_lon = (280.46646 + t * (36000.76983 + t * 0.0003032)).rem_euclid(360.0);
    let mean_anom = 357.52911 + t * (35999.05029 - 0.0001537 * t);
    let eccentricity = 0.016708634 - t * (0.000042037 + 0.0000001267 * t);

    let anom_rad = mean_anom.to_radians();
    let center = anom_rad.sin() * (1.914602 - t * (0.004817 + 0.000014 * t))
        + (2.0 * anom_rad).sin() * (0.019993 - 0.000101 * t)
        + (3.0 * anom_rad).sin() * 0.000289;
    let true_lon = mean_lon + center;
    let omega = (125.04 - 1934.136 * t).to_radians();
    let apparent_lon = true_lon - 0.00569 - 0.00478 * omega.sin();

    let mean_obliq = 23.0 + (26.0 + (21.448 - t * (46.815 + t * (0.00059 - t * 0.001813))) / 60.0) / 60.0;
    let obliq = (mean_obliq + 0.00256 * omega.cos()).to_radians();

    let declination = (obliq.sin() * apparent_lon.to_radians().sin()).asin();

    let y = (obliq / 2.0).tan().powi(2);
    let lon_rad = mean_lon.to_radians();
    let eot_rad = y * (2.0 * lon_rad).sin() - 2.0 * eccentricity * anom_rad.sin()
        + 4.0 * eccentricity * y * anom_rad.sin() * (2.0 * lon_rad).cos()
        - 0.5 * y * y * (4.0 * lon_rad).sin()
        - 1.25 * eccentricity * eccentricity * (2.0 * anom_rad).sin();
    let eot_minutes = 4.0 * eot_rad.to_degrees();

    (declination, eot_minutes)
}

/// Geometric sun elevation in degrees at a location and UTC instant,
/// following the NOAA solar position algorithm.
pub fn solar_elevation_deg(p: GeoPoint, utc: DateTime<Utc>) -> Result<f64, GeoError> {
    check_timestamp(utc)?;
    let jd = julian_day(utc);
    let t = (jd - 2_451_545.0) / 36_525.0;
    let (declination, eot_minutes) = declination_and_eot(t);

    let minutes_utc = f64::from(utc.hour()) * 60.0
        + f64::from(utc.minute())
        + f64::from(utc.second()) / 60.0
        + f64::from(utc.timestamp_subsec_millis()) / 60_000.0;
    // True solar time in minutes, wrapped to one day.
    let tst = (minutes_utc + eot_minutes + 4.0 * p.lon).rem_euclid(1440.0);
    let hour_angle_deg = if tst / 4.0 < 0.0 {
        tst / 4.0 + 180.0
    } else {
        tst / 4.0 - 180.0
    };

    let lat_rad = p.lat.to_radians();
    let ha_rad = hour_angle_deg.to_radians();
    let sin_elev = lat_rad.sin() * declination.sin()
        + lat_rad.cos() * declination.cos() * ha_rad.cos();
    Ok(sin_elev.clamp(-1.0, 1.0).asin().to_degrees())
}

/// Map an elevation angle onto a domain bucket with the given thresholds.
pub fn domain_for_elevation(elevation_deg: f64, cfg: SolarConfig) -> DomainTag {
    if elevation_deg > cfg.day_elevation_deg {
        DomainTag::Day
    } else if elevation_deg < cfg.night_elevation_deg {
        DomainTag::Night
    } else {
        DomainTag::Twilight
    }
}

/// Classify a (location, time) pair as day, twilight, or night.
pub fn classify_domain(
    p: GeoPoint,
    utc: DateTime<Utc>,
    cfg: SolarConfig,
) -> Result<DomainTag, GeoError> {
    Ok(domain_for_elevation(solar_elevation_deg(p, utc)?, cfg))
}
