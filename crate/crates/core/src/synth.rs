//! Deterministic synthetic datasets: a clear-sky curve times a stochastic
//! cloudiness factor, with rendered panoramas whose content actually predicts
//! the factor.
//!
//! The advecting regime spawns full-height cloud bands at the eastern frame
//! edge with seeded exponential inter-arrival times and drifts them across
//! the sky at a known mean speed. Occlusion is the fraction of the sun disk
//! covered in the rendered geometry, so a frame at time t shows the bands
//! that will reach the sun by t + h, while the GHI history alone cannot time
//! the next dip (arrivals are aperiodic).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::img::{write_ppm, RgbImage};
use crate::solar::{haurwitz_ghi, solar_azimuth, solar_zenith, SiteConfig, CLEAR_SKY_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudRegime {
    Clear,
    /// Constant cloudiness ratio k in [0, 1] (GHI = k * clear sky).
    Persistent { ratio: f64 },
    /// Blobs drifting at `speed` px per 10-minute step with seeded jitter.
    Advecting { speed: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub site: SiteConfig,
    pub start_date: NaiveDate,
    pub days: u32,
    pub seed: u64,
    pub regime: CloudRegime,
    pub image_w: usize,
    pub image_h: usize,
    pub step_min: i64,
}

impl SynthConfig {
    pub fn new(site: SiteConfig, start_date: NaiveDate, days: u32, seed: u64, regime: CloudRegime) -> Self {
        SynthConfig {
            site,
            start_date,
            days,
            seed,
            regime,
            image_w: 112,
            image_h: 64,
            step_min: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if let CloudRegime::Persistent { ratio } = self.regime {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Config(format!("persistent ratio {ratio} outside [0, 1]")));
            }
        }
        if self.image_w < 16 || self.image_h < 16 {
            return Err(Error::Config("synthetic images must be at least 16x16".into()));
        }
        Ok(())
    }
}

/// One cloud band: a soft-edged vertical stripe of half-width `rx` at `x`.
struct Band {
    x: f64,
    rx: f64,
}

/// Sun disk placement: x is an affine map of azimuth over the east-to-west
/// sweep; y tracks elevation above the horizon line. The track occupies the
/// right part of the frame, leaving the left as the upwind approach zone
/// where incoming cloud bands are visible well before they reach the sun.
fn sun_position(w: usize, h: usize, zenith: f64, azimuth: f64) -> (f64, f64) {
    let horizon = horizon_y(h);
    let left = 0.38 * w as f64;
    let right = w as f64 - sun_radius(h) - 1.0;
    let x = left + (right - left) * ((azimuth - 90.0) / 180.0).clamp(0.0, 1.0);
    let y = horizon * (zenith / 90.0).clamp(0.05, 1.0);
    (x, y)
}

fn sun_radius(h: usize) -> f64 {
    (h as f64 / 14.0).max(2.0)
}

fn horizon_y(h: usize) -> f64 {
    h as f64 * 0.75
}

fn inside_band(band: &Band, x: f64) -> bool {
    (x - band.x).abs() <= band.rx
}

/// Fraction of sun-disk pixels covered by any band, in rendered geometry.
fn sun_coverage(bands: &[Band], sun: (f64, f64), r: f64) -> f64 {
    let mut total = 0usize;
    let mut covered = 0usize;
    let (sx, sy) = sun;
    let r_i = r.ceil() as i64;
    for dy in -r_i..=r_i {
        for dx in -r_i..=r_i {
            let px = sx + dx as f64;
            let py = sy + dy as f64;
            if (px - sx).powi(2) + (py - sy).powi(2) > r * r {
                continue;
            }
            total += 1;
            if bands.iter().any(|b| inside_band(b, px)) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

fn render(cfg: &SynthConfig, bands: &[Band], sun: (f64, f64)) -> RgbImage {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let horizon = horizon_y(h);
    let r = sun_radius(h);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64;
            let fx = x as f64;
            let mut rgb: [f64; 3] = if fy < horizon {
                let t = fy / horizon;
                [90.0 + 80.0 * t, 130.0 + 70.0 * t, 200.0 + 40.0 * t]
            } else {
                [60.0, 80.0, 45.0] // ground
            };
            if fy < horizon {
                let d2 = (fx - sun.0).powi(2) + (fy - sun.1).powi(2);
                if d2 <= r * r {
                    rgb = [250.0, 240.0, 180.0];
                }
                if bands.iter().any(|b| inside_band(b, fx)) {
                    rgb = [45.0, 50.0, 75.0]; // dark front over everything
                }
            }
            img.put(x, y, [rgb[0] as u8, rgb[1] as u8, rgb[2] as u8]);
        }
    }
    img
}

#[derive(Debug)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
    pub rows: usize,
}

/// Generate `manifest.csv`, daytime PPM frames under `images/`, and a
/// `truth.csv` ground-truth log. Identical configs produce byte-identical
/// trees.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.image_w, cfg.image_h);
    let r_sun = sun_radius(h);

    let speed = match cfg.regime {
        CloudRegime::Advecting { speed } => speed,
        _ => 0.0,
    };
    // bands spawn just east of the frame with exponential inter-arrivals, so
    // dip timing is aperiodic and unrecoverable from the GHI history
    let mean_gap_steps = 15.0;
    let mut bands: Vec<Band> = Vec::new();
    let mut next_spawn: f64 = rng.gen_range(0.0..mean_gap_steps);

    let offset = cfg.site.offset();
    let start_local = cfg
        .start_date
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists");
    let start: DateTime<Utc> = offset
        .from_local_datetime(&start_local)
        .single()
        .expect("fixed offset")
        .with_timezone(&Utc);
    let steps = (cfg.days as i64) * 24 * 60 / cfg.step_min;

    let mut manifest = String::from("timestamp,image_path,ghi\n");
    let mut truth = String::from("timestamp,k,clear_sky_ghi\n");
    let mut rows = 0usize;

    for i in 0..steps {
        let t = start + Duration::minutes(i * cfg.step_min);
        // bands march every step, day and night, so motion stays continuous
        if speed > 0.0 {
            for b in bands.iter_mut() {
                b.x += speed + rng.gen_range(-0.5..0.5);
            }
            bands.retain(|b| b.x - b.rx <= w as f64 + 1.0);
            next_spawn -= 1.0;
            while next_spawn <= 0.0 {
                let rx = rng.gen_range(0.08..0.15) * w as f64;
                bands.push(Band { x: -rx, rx });
                // exponential inter-arrival via inverse transform
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                next_spawn += -mean_gap_steps * u.ln();
            }
        }

        let zenith = solar_zenith(&cfg.site, t);
        let clear = haurwitz_ghi(zenith);
        if clear <= CLEAR_SKY_EPS {
            continue; // cameras sleep at night
        }
        let azimuth = solar_azimuth(&cfg.site, t);
        let sun = sun_position(w, h, zenith, azimuth);
        let k = match cfg.regime {
            CloudRegime::Clear => 1.0,
            CloudRegime::Persistent { ratio } => ratio,
            CloudRegime::Advecting { .. } => 1.0 - 0.9 * sun_coverage(&bands, sun, r_sun),
        };
        let ghi = k * clear;

        let image_name = format!("images/{:06}.ppm", i);
        let img = render(cfg, &bands, sun);
        write_ppm(&out_dir.join(&image_name), &img)?;

        let local = t.with_timezone(&offset);
        writeln!(manifest, "{},{},{}", local.to_rfc3339(), image_name, ghi)
            .expect("string write");
        writeln!(truth, "{},{},{}", local.to_rfc3339(), k, clear).expect("string write");
        rows += 1;
    }

    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let truth_path = out_dir.join("truth.csv");
    std::fs::write(&truth_path, truth)
        .map_err(|e| Error::io(truth_path.display().to_string(), e))?;
    Ok(GeneratedDataset { manifest_path, truth_path, rows })
}
