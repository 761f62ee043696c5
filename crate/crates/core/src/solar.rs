//! Solar position, Haurwitz clear-sky GHI, daily-max normalization and the
//! smart-persistence baseline.
//!
//! Position uses the Spencer declination Fourier series plus the equation of
//! time (~0.5 deg accuracy). That is enough here: normalized GHI divides by a
//! daily maximum, so sub-degree zenith error moves the normalized value by
//! well under a percent.

use chrono::{DateTime, Datelike, Duration, FixedOffset, NaiveDate, TimeZone, Timelike, Utc};

use crate::error::{Error, Result};

/// Haurwitz clear-sky coefficients (modern restatement).
const HAURWITZ_SCALE: f64 = 1098.0;
const HAURWITZ_EXTINCTION: f64 = 0.059;

/// Below this clear-sky level the persistence ratio is numerically meaningless.
pub const CLEAR_SKY_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteConfig {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
    /// Offset of local civil time from UTC, in minutes.
    pub utc_offset_min: i32,
}

impl SiteConfig {
    pub fn new(latitude_deg: f64, longitude_deg: f64, altitude_m: f64, utc_offset_min: i32) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(Error::Config(format!("latitude {latitude_deg} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&longitude_deg) {
            return Err(Error::Config(format!("longitude {longitude_deg} outside [-180, 180]")));
        }
        Ok(SiteConfig { latitude_deg, longitude_deg, altitude_m, utc_offset_min })
    }

    pub fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_min * 60).expect("utc offset in range")
    }

    /// Civil date at the site for a UTC instant.
    pub fn local_date(&self, t: DateTime<Utc>) -> NaiveDate {
        t.with_timezone(&self.offset()).date_naive()
    }
}

/// Solar quantities the pipeline needs at one instant.
#[derive(Debug, Clone, Copy)]
pub struct SolarContext {
    pub timestamp: DateTime<Utc>,
    pub zenith_deg: f64,
    pub clear_sky_ghi: f64,
    pub day_max_clear_sky: f64,
}

impl SolarContext {
    pub fn compute(site: &SiteConfig, t: DateTime<Utc>) -> Result<Self> {
        let zenith_deg = solar_zenith(site, t);
        let clear_sky_ghi = haurwitz_ghi(zenith_deg);
        let day_max_clear_sky = day_max_clear_sky(site, site.local_date(t))?;
        Ok(SolarContext { timestamp: t, zenith_deg, clear_sky_ghi, day_max_clear_sky })
    }

    pub fn is_daytime(&self) -> bool {
        self.clear_sky_ghi > CLEAR_SKY_EPS
    }
}

/// Day angle in radians, with fractional-day correction.
fn day_angle(t: DateTime<Utc>) -> f64 {
    let day = t.ordinal() as f64;
    let hour = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;
    2.0 * std::f64::consts::PI / 365.0 * (day - 1.0 + (hour - 12.0) / 24.0)
}

/// Spencer declination series, radians.
fn declination(gamma: f64) -> f64 {
    0.006918 - 0.399912 * gamma.cos() + 0.070257 * gamma.sin() - 0.006758 * (2.0 * gamma).cos()
        + 0.000907 * (2.0 * gamma).sin()
        - 0.002697 * (3.0 * gamma).cos()
        + 0.00148 * (3.0 * gamma).sin()
}

/// Equation of time in minutes.
fn equation_of_time(gamma: f64) -> f64 {
    229.18
        * (0.000075 + 0.001868 * gamma.cos() - 0.032077 * gamma.sin()
            - 0.014615 * (2.0 * gamma).cos()
            - 0.04089 * (2.0 * gamma).sin())
}

/// Hour angle in degrees, 0 at true solar noon, negative in the morning.
fn hour_angle_deg(site: &SiteConfig, t: DateTime<Utc>) -> f64 {
    let gamma = day_angle(t);
    let utc_hours = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;
    let solar_hours = utc_hours + site.longitude_deg / 15.0 + equation_of_time(gamma) / 60.0;
    let mut h = 15.0 * (solar_hours - 12.0);
    while h <= -180.0 {
        h += 360.0;
    }
    while h > 180.0 {
        h -= 360.0;
    }
    h
}

/// Solar zenith angle in degrees, clamped to [0, 180].
pub fn solar_zenith(site: &SiteConfig, t: DateTime<Utc>) -> f64 {
    let gamma = day_angle(t);
    let decl = declination(gamma);
    let lat = site.latitude_deg.to_radians();
    let h = hour_angle_deg(site, t).to_radians();
    let cos_z = lat.sin() * decl.sin() + lat.cos() * decl.cos() * h.cos();
    cos_z.clamp(-1.0, 1.0).acos().to_degrees().clamp(0.0, 180.0)
}

/// Solar azimuth in degrees clockwise from north, [0, 360).
///
/// Used by the synthetic renderer to place the sun disk; undefined within a
/// fraction of a degree of the zenith, where it falls back to south.
pub fn solar_azimuth(site: &SiteConfig, t: DateTime<Utc>) -> f64 {
    let gamma = day_angle(t);
    let decl = declination(gamma);
    let lat = site.latitude_deg.to_radians();
    let z = solar_zenith(site, t).to_radians();
    if z.sin().abs() < 1e-9 {
        return 180.0;
    }
    let cos_a = ((decl.sin() - z.cos() * lat.sin()) / (z.sin() * lat.cos())).clamp(-1.0, 1.0);
    let a = cos_a.acos().to_degrees();
    if hour_angle_deg(site, t) > 0.0 {
        360.0 - a
    } else {
        a
    }
}

/// Haurwitz clear-sky GHI in W/m^2: 1098 cos(z) exp(-0.059 / cos(z)) for the
/// sun above the horizon, zero otherwise.
pub fn haurwitz_ghi(zenith_deg: f64) -> f64 {
    debug_assert!((0.0..=180.0).contains(&zenith_deg));
    if zenith_deg >= 90.0 {
        return 0.0;
    }
    let cos_z = zenith_deg.to_radians().cos();
    HAURWITZ_SCALE * cos_z * (-HAURWITZ_EXTINCTION / cos_z).exp()
}

fn day_max_with_step(site: &SiteConfig, local_date: NaiveDate, step_secs: u32) -> Result<f64> {
    let offset = site.offset();
    let midnight = local_date.and_hms_opt(0, 0, 0).expect("valid midnight");
    let start = offset
        .from_local_datetime(&midnight)
        .single()
        .expect("fixed offsets are unambiguous")
        .with_timezone(&Utc);
    let steps = 24 * 3600 / step_secs;
    let mut max = 0.0f64;
    for i in 0..steps {
        let t = start + Duration::seconds((i * step_secs) as i64);
        let ghi = haurwitz_ghi(solar_zenith(site, t));
        if ghi > max {
            max = ghi;
        }
    }
    if max <= 0.0 {
        return Err(Error::PolarNight { date: local_date.to_string() });
    }
    Ok(max)
}

/// Maximum Haurwitz clear-sky GHI over the local civil day, scanned at
/// 1-minute resolution. Errors on polar night; callers skip such days.
pub fn day_max_clear_sky(site: &SiteConfig, local_date: NaiveDate) -> Result<f64> {
    day_max_with_step(site, local_date, 60)
}

/// y* = y / day_max: the "degree of clear sky". Deliberately not clamped;
/// measured GHI can briefly exceed the clear-sky level at cloud edges.
pub fn normalize_ghi(y: f64, day_max: f64) -> Result<f64> {
    if day_max <= 0.0 {
        return Err(Error::Domain(format!("day_max must be positive, got {day_max}")));
    }
    Ok(y / day_max)
}

pub fn denormalize_ghi(y_star: f64, day_max: f64) -> Result<f64> {
    if day_max <= 0.0 {
        return Err(Error::Domain(format!("day_max must be positive, got {day_max}")));
    }
    Ok(y_star * day_max)
}

#[derive(Debug, Clone, Copy)]
pub struct PersistenceForecast {
    pub value: f64,
    /// Set when the clear-sky reference at t was too small to form a ratio
    /// (near sunset); the forecast falls back to the raw observation.
    pub degenerate: bool,
}

/// Smart persistence: assumes the cloudiness ratio y_t / clear(t) holds over
/// the horizon and rescales it by clear(t+h).
pub fn smart_persistence(y_t: f64, ctx_t: &SolarContext, ctx_h: &SolarContext) -> PersistenceForecast {
    if ctx_t.clear_sky_ghi <= CLEAR_SKY_EPS {
        return PersistenceForecast { value: y_t, degenerate: true };
    }
    let value = (ctx_h.clear_sky_ghi * y_t / ctx_t.clear_sky_ghi).max(0.0);
    PersistenceForecast { value, degenerate: false }
}
