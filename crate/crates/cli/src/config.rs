//! Plain-text key-value run configuration.
//!
//! One `key = value` per line, `#` comments. The effective configuration is
//! echoed into each run directory in the same format, so any echo is itself
//! a loadable config and experiments stay diffable.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use smt_core::data::NormMode;
use smt_core::model::{PatchShape, Pillars, SmtConfig};
use smt_core::solar::SiteConfig;
use smt_core::synth::CloudRegime;
use smt_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSettings {
    pub days: u32,
    pub start_date: NaiveDate,
    pub regime: CloudRegime,
    pub image_w: usize,
    pub image_h: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub site: SiteConfig,
    pub model: SmtConfig,
    pub train: TrainConfig,
    pub horizon_min: i64,
    pub step_min: i64,
    pub gap_tolerance: usize,
    pub norm: NormMode,
    pub train_end: Option<NaiveDate>,
    pub val_end: Option<NaiveDate>,
    pub holdout_start: Option<NaiveDate>,
    pub holdout_end: Option<NaiveDate>,
    pub synth: SynthSettings,
    /// Overrides applied from the command line, echoed as comments.
    pub overrides: Vec<String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_date(key: &str, value: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|e| usage(format!("config key {key}: bad date {value:?}: {e}")))
}

impl RunConfig {
    /// Parse a config file; every key is validated before any work starts.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut latitude = None;
        let mut longitude = None;
        let mut altitude_m = 0.0;
        let mut utc_offset_min = 0i32;
        let mut model = SmtConfig::default();
        let mut patch_kind: Option<String> = None;
        let mut patch_a = 16usize;
        let mut patch_b = 16usize;
        let mut train = TrainConfig::default();
        let mut horizon_min = 120i64;
        let mut step_min = 10i64;
        let mut gap_tolerance = 3usize;
        let mut norm = NormMode::DayMax;
        let mut train_end = None;
        let mut val_end = None;
        let mut holdout_start = None;
        let mut holdout_end = None;
        let mut synth = SynthSettings {
            days: 5,
            start_date: NaiveDate::from_ymd_opt(2023, 6, 1).expect("valid date"),
            regime: CloudRegime::Clear,
            image_w: 112,
            image_h: 64,
        };

        macro_rules! num {
            ($key:expr, $value:expr) => {
                $value
                    .parse()
                    .map_err(|_| usage(format!("config key {}: bad value {:?}", $key, $value)))?
            };
        }

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value", idx + 1)))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "latitude" => latitude = Some(num!(key, value)),
                "longitude" => longitude = Some(num!(key, value)),
                "altitude_m" => altitude_m = num!(key, value),
                "utc_offset_min" => utc_offset_min = num!(key, value),

                "image_h" => model.image_h = num!(key, value),
                "image_w" => model.image_w = num!(key, value),
                "image_c" => model.image_c = num!(key, value),
                "patch_shape" => patch_kind = Some(value.to_string()),
                "patch_a" => patch_a = num!(key, value),
                "patch_b" => patch_b = num!(key, value),
                "ts_count" => model.ts_count = num!(key, value),
                "window_len" => model.ts_len = num!(key, value),
                "embed_dim" => model.embed_dim = num!(key, value),
                "layers" => model.layers = num!(key, value),
                "heads" => model.heads = num!(key, value),
                "mlp_ratio" => model.mlp_ratio = num!(key, value),
                "frames" => model.frames = num!(key, value),
                "pillars" => model.pillars = parse_pillars(value)?,
                "final_layer_norm" => model.final_layer_norm = parse_bool(key, value)?,

                "batch_size" => train.batch_size = num!(key, value),
                "epochs" => train.epochs = num!(key, value),
                "lr_peak" => train.lr_peak = num!(key, value),
                "lr_warmup_start" => train.lr_warmup_start = num!(key, value),
                "warmup_epochs" => train.warmup_epochs = num!(key, value),
                "cosine_final_ratio" => train.cosine_final_ratio = num!(key, value),
                "early_stop_patience" => train.early_stop_patience = num!(key, value),
                "weight_decay" => train.weight_decay = num!(key, value),
                "beta1" => train.beta1 = num!(key, value),
                "beta2" => train.beta2 = num!(key, value),
                "eps" => train.eps = num!(key, value),
                "seed" => train.seed = num!(key, value),

                "horizon_min" => horizon_min = num!(key, value),
                "step_min" => step_min = num!(key, value),
                "gap_tolerance" => gap_tolerance = num!(key, value),
                "normalization" => norm = parse_norm(value)?,

                "train_end" => train_end = Some(parse_date(key, value)?),
                "val_end" => val_end = Some(parse_date(key, value)?),
                "holdout_start" => holdout_start = Some(parse_date(key, value)?),
                "holdout_end" => holdout_end = Some(parse_date(key, value)?),

                "synth_days" => synth.days = num!(key, value),
                "synth_start_date" => synth.start_date = parse_date(key, value)?,
                "synth_regime" => synth.regime = parse_regime(value)?,
                "synth_image_w" => synth.image_w = num!(key, value),
                "synth_image_h" => synth.image_h = num!(key, value),

                other => return Err(usage(format!("unknown config key {other:?}"))),
            }
        }

        let latitude =
            latitude.ok_or_else(|| usage("config is missing required key \"latitude\""))?;
        let longitude =
            longitude.ok_or_else(|| usage("config is missing required key \"longitude\""))?;
        let site = SiteConfig::new(latitude, longitude, altitude_m, utc_offset_min)
            .map_err(|e| usage(e.to_string()))?;

        model.patch_shape = match patch_kind.as_deref() {
            None | Some("square") => PatchShape::Square { a: patch_a, b: patch_b },
            Some("row") => PatchShape::Row,
            Some("column") => PatchShape::Column,
            Some(other) => {
                return Err(usage(format!(
                    "patch_shape {other:?} (expected square, row or column)"
                )))
            }
        };
        model.validate().map_err(|e| usage(e.to_string()))?;
        train.validate().map_err(|e| usage(e.to_string()))?;
        if horizon_min <= 0 || step_min <= 0 {
            return Err(usage("horizon_min and step_min must be positive"));
        }

        Ok(RunConfig {
            site,
            model,
            train,
            horizon_min,
            step_min,
            gap_tolerance,
            norm,
            train_end,
            val_end,
            holdout_start,
            holdout_end,
            synth,
            overrides: Vec::new(),
        })
    }

    /// Serialize every effective key; the output parses back to `self`.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for o in &self.overrides {
            writeln!(out, "# override: {o}").unwrap();
        }
        let s = &self.site;
        writeln!(out, "latitude = {}", s.latitude_deg).unwrap();
        writeln!(out, "longitude = {}", s.longitude_deg).unwrap();
        writeln!(out, "altitude_m = {}", s.altitude_m).unwrap();
        writeln!(out, "utc_offset_min = {}", s.utc_offset_min).unwrap();

        let m = &self.model;
        writeln!(out, "image_h = {}", m.image_h).unwrap();
        writeln!(out, "image_w = {}", m.image_w).unwrap();
        writeln!(out, "image_c = {}", m.image_c).unwrap();
        let (kind, a, b) = match m.patch_shape {
            PatchShape::Square { a, b } => ("square", a, b),
            PatchShape::Row => ("row", 1, m.image_w),
            PatchShape::Column => ("column", m.image_h, 1),
        };
        writeln!(out, "patch_shape = {kind}").unwrap();
        writeln!(out, "patch_a = {a}").unwrap();
        writeln!(out, "patch_b = {b}").unwrap();
        writeln!(out, "ts_count = {}", m.ts_count).unwrap();
        writeln!(out, "window_len = {}", m.ts_len).unwrap();
        writeln!(out, "embed_dim = {}", m.embed_dim).unwrap();
        writeln!(out, "layers = {}", m.layers).unwrap();
        writeln!(out, "heads = {}", m.heads).unwrap();
        writeln!(out, "mlp_ratio = {}", m.mlp_ratio).unwrap();
        writeln!(out, "frames = {}", m.frames).unwrap();
        let pillars = match m.pillars {
            Pillars::Both => "both",
            Pillars::ImageOnly => "image_only",
            Pillars::TsOnly => "ts_only",
        };
        writeln!(out, "pillars = {pillars}").unwrap();
        writeln!(out, "final_layer_norm = {}", m.final_layer_norm).unwrap();

        let t = &self.train;
        writeln!(out, "batch_size = {}", t.batch_size).unwrap();
        writeln!(out, "epochs = {}", t.epochs).unwrap();
        writeln!(out, "lr_peak = {}", t.lr_peak).unwrap();
        writeln!(out, "lr_warmup_start = {}", t.lr_warmup_start).unwrap();
        writeln!(out, "warmup_epochs = {}", t.warmup_epochs).unwrap();
        writeln!(out, "cosine_final_ratio = {}", t.cosine_final_ratio).unwrap();
        writeln!(out, "early_stop_patience = {}", t.early_stop_patience).unwrap();
        writeln!(out, "weight_decay = {}", t.weight_decay).unwrap();
        writeln!(out, "beta1 = {}", t.beta1).unwrap();
        writeln!(out, "beta2 = {}", t.beta2).unwrap();
        writeln!(out, "eps = {}", t.eps).unwrap();
        writeln!(out, "seed = {}", t.seed).unwrap();

        writeln!(out, "horizon_min = {}", self.horizon_min).unwrap();
        writeln!(out, "step_min = {}", self.step_min).unwrap();
        writeln!(out, "gap_tolerance = {}", self.gap_tolerance).unwrap();
        let norm = match self.norm {
            NormMode::DayMax => "day_max".to_string(),
            NormMode::Fixed(scale) => format!("fixed:{scale}"),
        };
        writeln!(out, "normalization = {norm}").unwrap();
        for (key, value) in [
            ("train_end", self.train_end),
            ("val_end", self.val_end),
            ("holdout_start", self.holdout_start),
            ("holdout_end", self.holdout_end),
        ] {
            if let Some(date) = value {
                writeln!(out, "{key} = {date}").unwrap();
            }
        }

        writeln!(out, "synth_days = {}", self.synth.days).unwrap();
        writeln!(out, "synth_start_date = {}", self.synth.start_date).unwrap();
        let regime = match self.synth.regime {
            CloudRegime::Clear => "clear".to_string(),
            CloudRegime::Persistent { ratio } => format!("persistent:{ratio}"),
            CloudRegime::Advecting { speed } => format!("advecting:{speed}"),
        };
        writeln!(out, "synth_regime = {regime}").unwrap();
        writeln!(out, "synth_image_w = {}", self.synth.image_w).unwrap();
        writeln!(out, "synth_image_h = {}", self.synth.image_h).unwrap();
        out
    }

    pub fn write_echo(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.echo())
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(usage(format!("config key {key}: bad boolean {value:?}"))),
    }
}

pub fn parse_pillars(value: &str) -> Result<Pillars, CliError> {
    match value {
        "both" => Ok(Pillars::Both),
        "image_only" => Ok(Pillars::ImageOnly),
        "ts_only" => Ok(Pillars::TsOnly),
        other => Err(usage(format!(
            "pillars {other:?} (expected both, image_only or ts_only)"
        ))),
    }
}

fn parse_norm(value: &str) -> Result<NormMode, CliError> {
    if value == "day_max" {
        return Ok(NormMode::DayMax);
    }
    if let Some(scale) = value.strip_prefix("fixed:") {
        let scale: f64 = scale
            .parse()
            .map_err(|_| usage(format!("normalization scale {scale:?}")))?;
        if scale <= 0.0 {
            return Err(usage("normalization scale must be positive"));
        }
        return Ok(NormMode::Fixed(scale));
    }
    Err(usage(format!(
        "normalization {value:?} (expected day_max or fixed:<scale>)"
    )))
}

fn parse_regime(value: &str) -> Result<CloudRegime, CliError> {
    if value == "clear" {
        return Ok(CloudRegime::Clear);
    }
    if let Some(k) = value.strip_prefix("persistent:") {
        let ratio: f64 = k.parse().map_err(|_| usage(format!("persistent ratio {k:?}")))?;
        return Ok(CloudRegime::Persistent { ratio });
    }
    if let Some(s) = value.strip_prefix("advecting:") {
        let speed: f64 = s.parse().map_err(|_| usage(format!("advecting speed {s:?}")))?;
        return Ok(CloudRegime::Advecting { speed });
    }
    Err(usage(format!(
        "synth_regime {value:?} (expected clear, persistent:<k> or advecting:<speed>)"
    )))
}
