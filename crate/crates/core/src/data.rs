//! Dataset ingestion: manifest parsing, image loading, 24-hour window
//! assembly with per-day normalization, and chronological splitting.
//!
//! Windows are wall-clock: night slots (clear-sky GHI at or below 1 W/m^2)
//! are zero-filled, short daytime gaps are linearly interpolated in raw
//! W/m^2, and every slot is normalized by its own day's clear-sky maximum,
//! so windows crossing midnight stay physically consistent.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};

use crate::error::{Error, Result};
use crate::img::{read_ppm, resize_bilinear};
use crate::model::ModelInput;
use crate::solar::{
    day_max_clear_sky, haurwitz_ghi, solar_zenith, SiteConfig, CLEAR_SKY_EPS,
};
use crate::train::TrainSample;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub timestamp: DateTime<Utc>,
    pub image_path: Option<String>,
    pub ghi: Option<f64>,
}

pub const MANIFEST_HEADER: &str = "timestamp,image_path,ghi";

/// Parse and validate a manifest CSV. Timestamps must be ISO-8601 with
/// offset, strictly increasing, on the 10-minute grid.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(err(1, format!("bad header {header:?}, expected {MANIFEST_HEADER:?}")))
        }
        None => return Err(err(1, "empty file".into())),
    }

    let mut rows: Vec<ManifestRow> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(line_no, format!("expected 3 fields, found {}", fields.len())));
        }
        let ts = DateTime::parse_from_rfc3339(fields[0])
            .map_err(|e| err(line_no, format!("bad timestamp {:?}: {e}", fields[0])))?
            .with_timezone(&Utc);
        if ts.minute() % 10 != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
            return Err(err(line_no, format!("timestamp {} not on the 10-minute grid", fields[0])));
        }
        if let Some(prev) = rows.last() {
            if ts <= prev.timestamp {
                return Err(err(
                    line_no,
                    format!("timestamp {} not strictly increasing", fields[0]),
                ));
            }
        }
        let image_path = match fields[1].trim() {
            "" => None,
            p => Some(p.to_string()),
        };
        let ghi = match fields[2].trim() {
            "" => None,
            v => {
                let parsed: f64 = v
                    .parse()
                    .map_err(|_| err(line_no, format!("bad GHI value {v:?}")))?;
                if !parsed.is_finite() || parsed < 0.0 {
                    return Err(err(line_no, format!("GHI {parsed} out of range")));
                }
                Some(parsed)
            }
        };
        rows.push(ManifestRow { timestamp: ts, image_path, ghi });
    }
    Ok(rows)
}

/// Load a P6 PPM and bilinearly resize to the model's input dimensions,
/// scaled to [0, 1].
pub fn load_image(path: &Path, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let img = read_ppm(path)?;
    Ok(resize_bilinear(&img, out_h, out_w))
}

/// How window values and targets are scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// y / max clear-sky GHI of the value's own day (the default).
    DayMax,
    /// y / constant, for the no-normalization ablation.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub site: SiteConfig,
    pub horizon_min: i64,
    /// Window length S in 10-minute slots.
    pub window_len: usize,
    /// Image frames per sample (t, t-10min, ...), oldest first in the output.
    pub frames: usize,
    pub step_min: i64,
    /// Longest daytime gap (in slots) bridged by linear interpolation.
    pub gap_tolerance: usize,
    pub norm: NormMode,
    pub image_h: usize,
    pub image_w: usize,
    /// Skip decoding pixels (time-series-only experiments).
    pub load_images: bool,
}

impl PipelineConfig {
    pub fn new(site: SiteConfig) -> Self {
        PipelineConfig {
            site,
            horizon_min: 120,
            window_len: 144,
            frames: 1,
            step_min: 10,
            gap_tolerance: 3,
            norm: NormMode::DayMax,
            image_h: 224,
            image_w: 224,
            load_images: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub t: DateTime<Utc>,
    /// F frames, oldest first; empty when images were not loaded.
    pub images: Vec<Vec<f64>>,
    /// S normalized values ending at t.
    pub ghi_window: Vec<f64>,
    /// Normalized GHI at t + horizon.
    pub target: f64,
    pub day_max_t: f64,
    pub day_max_target: f64,
}

impl SampleRecord {
    pub fn to_train_sample(&self, ts_count: usize) -> TrainSample {
        debug_assert_eq!(ts_count, 1, "only the GHI series is wired in");
        TrainSample {
            input: ModelInput { images: self.images.clone(), ts: vec![self.ghi_window.clone()] },
            target: self.target,
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct BuildReport {
    pub built: usize,
    pub dropped_missing_image: usize,
    pub dropped_missing_target: usize,
    pub dropped_night_target: usize,
    pub dropped_gap: usize,
}

impl std::fmt::Display for BuildReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "built {} samples (dropped: {} missing image, {} missing target, {} night target, {} window gaps)",
            self.built,
            self.dropped_missing_image,
            self.dropped_missing_target,
            self.dropped_night_target,
            self.dropped_gap
        )
    }
}

/// Cache of per-day clear-sky maxima and per-slot clear-sky values.
struct SolarCache<'a> {
    site: &'a SiteConfig,
    day_max: HashMap<NaiveDate, f64>,
    clear: HashMap<i64, f64>,
}

impl<'a> SolarCache<'a> {
    fn new(site: &'a SiteConfig) -> Self {
        SolarCache { site, day_max: HashMap::new(), clear: HashMap::new() }
    }

    fn clear_sky(&mut self, t: DateTime<Utc>) -> f64 {
        *self
            .clear
            .entry(t.timestamp())
            .or_insert_with(|| haurwitz_ghi(solar_zenith(self.site, t)))
    }

    fn day_max(&mut self, t: DateTime<Utc>) -> Result<f64> {
        let date = self.site.local_date(t);
        if let Some(&v) = self.day_max.get(&date) {
            return Ok(v);
        }
        let v = day_max_clear_sky(self.site, date)?;
        self.day_max.insert(date, v);
        Ok(v)
    }
}

fn normalize(cache: &mut SolarCache, norm: NormMode, t: DateTime<Utc>, y: f64) -> Result<f64> {
    match norm {
        NormMode::DayMax => Ok(y / cache.day_max(t)?),
        NormMode::Fixed(scale) => {
            if scale <= 0.0 {
                return Err(Error::Config(format!("fixed norm scale {scale} must be positive")));
            }
            Ok(y / scale)
        }
    }
}

fn scale_of(cache: &mut SolarCache, norm: NormMode, t: DateTime<Utc>) -> Result<f64> {
    match norm {
        NormMode::DayMax => cache.day_max(t),
        NormMode::Fixed(scale) => Ok(scale),
    }
}

/// Assemble training samples from manifest rows. Relative image paths
/// resolve against `base_dir`.
pub fn build_samples(
    rows: &[ManifestRow],
    base_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<(Vec<SampleRecord>, BuildReport)> {
    let step = Duration::minutes(cfg.step_min);
    let horizon = Duration::minutes(cfg.horizon_min);
    let by_time: HashMap<i64, usize> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.timestamp.timestamp(), i))
        .collect();
    let range = match (rows.first(), rows.last()) {
        (Some(first), Some(last)) => (first.timestamp, last.timestamp),
        _ => return Ok((Vec::new(), BuildReport::default())),
    };

    let mut cache = SolarCache::new(&cfg.site);
    let mut report = BuildReport::default();
    let mut samples = Vec::new();
    // rolling decode buffer: consecutive samples share frames when F > 1
    let mut recent_images: Vec<(String, std::sync::Arc<Vec<f64>>)> = Vec::new();

    'rows: for row in rows {
        let t = row.timestamp;

        // frame paths for t, t-10min, ... must all be present
        let mut frame_paths = Vec::with_capacity(cfg.frames);
        let mut frames_ok = true;
        for k in 0..cfg.frames {
            let ft = t - step * (cfg.frames - 1 - k) as i32;
            match by_time
                .get(&ft.timestamp())
                .and_then(|&i| rows[i].image_path.as_ref())
            {
                Some(p) => frame_paths.push(p.clone()),
                None => {
                    frames_ok = false;
                    break;
                }
            }
        }
        if !frames_ok {
            report.dropped_missing_image += 1;
            continue;
        }

        // target must exist, be daytime, and carry a reading
        let target_t = t + horizon;
        if cache.clear_sky(target_t) <= CLEAR_SKY_EPS {
            report.dropped_night_target += 1;
            continue;
        }
        let target_raw = match by_time.get(&target_t.timestamp()).and_then(|&i| rows[i].ghi) {
            Some(v) => v,
            None => {
                report.dropped_missing_target += 1;
                continue;
            }
        };

        // raw window: night slots are zero, daytime gaps are None
        let mut slot_times = Vec::with_capacity(cfg.window_len);
        let mut raw: Vec<Option<f64>> = Vec::with_capacity(cfg.window_len);
        for i in 0..cfg.window_len {
            let st = t - step * (cfg.window_len - 1 - i) as i32;
            slot_times.push(st);
            if cache.clear_sky(st) <= CLEAR_SKY_EPS {
                raw.push(Some(0.0));
            } else if st < range.0 || st > range.1 {
                raw.push(None);
            } else {
                raw.push(by_time.get(&st.timestamp()).and_then(|&i| rows[i].ghi));
            }
        }

        // interpolate short interior gaps, drop on anything longer
        let mut i = 0;
        while i < raw.len() {
            if raw[i].is_some() {
                i += 1;
                continue;
            }
            let start = i;
            while i < raw.len() && raw[i].is_none() {
                i += 1;
            }
            let len = i - start;
            let bracketed = start > 0 && i < raw.len();
            if len > cfg.gap_tolerance || !bracketed {
                report.dropped_gap += 1;
                continue 'rows;
            }
            let left = raw[start - 1].unwrap();
            let right = raw[i].unwrap();
            for (j, slot) in (0..len).zip(start..i) {
                let alpha = (j + 1) as f64 / (len + 1) as f64;
                raw[slot] = Some(left + (right - left) * alpha);
            }
        }

        // normalize each slot by its own day's scale
        let mut window = Vec::with_capacity(cfg.window_len);
        for (slot, value) in slot_times.iter().zip(&raw) {
            let v = value.expect("gaps resolved above");
            if v == 0.0 && cache.clear_sky(*slot) <= CLEAR_SKY_EPS {
                window.push(0.0); // avoid polar-night day-max lookups
            } else {
                window.push(normalize(&mut cache, cfg.norm, *slot, v)?);
            }
        }

        let images = if cfg.load_images {
            let mut frames = Vec::with_capacity(cfg.frames);
            for p in &frame_paths {
                let entry = match recent_images.iter().find(|(path, _)| path == p) {
                    Some((_, e)) => e.clone(),
                    None => {
                        let loaded = std::sync::Arc::new(load_image(
                            &base_dir.join(p),
                            cfg.image_h,
                            cfg.image_w,
                        )?);
                        if recent_images.len() >= 2 * cfg.frames + 2 {
                            recent_images.remove(0);
                        }
                        recent_images.push((p.clone(), loaded.clone()));
                        loaded
                    }
                };
                frames.push(entry.as_ref().clone());
            }
            frames
        } else {
            Vec::new()
        };

        let day_max_t = scale_of(&mut cache, cfg.norm, t)?;
        let day_max_target = scale_of(&mut cache, cfg.norm, target_t)?;
        let target = normalize(&mut cache, cfg.norm, target_t, target_raw)?;
        samples.push(SampleRecord {
            t,
            images,
            ghi_window: window,
            target,
            day_max_t,
            day_max_target,
        });
        report.built += 1;
    }
    Ok((samples, report))
}

/// Strict temporal split by sample timestamp's local date:
/// train up to `train_end`, validation up to `val_end`, test afterwards.
pub fn split_chronological(
    samples: Vec<SampleRecord>,
    site: &SiteConfig,
    train_end: NaiveDate,
    val_end: NaiveDate,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>, Vec<SampleRecord>)> {
    if train_end >= val_end {
        return Err(Error::Config(format!(
            "train_end {train_end} must precede val_end {val_end}"
        )));
    }
    if let Some(first) = samples.first() {
        if val_end < site.local_date(first.t) {
            return Err(Error::Config(format!(
                "split boundaries end before the data begins ({val_end} < {})",
                site.local_date(first.t)
            )));
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        let date = site.local_date(s.t);
        if date <= train_end {
            train.push(s);
        } else if date <= val_end {
            val.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, val, test))
}

/// Remove a held-out date span (inclusive), returning (kept, held_out).
pub fn exclude_date_range(
    samples: Vec<SampleRecord>,
    site: &SiteConfig,
    start: NaiveDate,
    end: NaiveDate,
) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for s in samples {
        let date = site.local_date(s.t);
        if date >= start && date <= end {
            held.push(s);
        } else {
            kept.push(s);
        }
    }
    (kept, held)
}
