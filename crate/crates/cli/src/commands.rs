//! The six pipeline commands: synth, train, eval, baseline, predict, attn.

use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use smt_core::attention::{export_heatmap, forward_traced, last_layer_attention, weighted_rollout};
use smt_core::checkpoint::Checkpoint;
use smt_core::data::{
    build_samples, exclude_date_range, load_image, parse_manifest, split_chronological,
    ManifestRow, PipelineConfig, SampleRecord,
};
use smt_core::metrics::{compute_metrics, daily_rmse, write_report, MetricsReport};
use smt_core::model::{ModelInput, Pillars, SmtConfig, SmtParams};
use smt_core::solar::{denormalize_ghi, smart_persistence, SolarContext};
use smt_core::synth::{generate, SynthConfig};
use smt_core::train::{train, write_history, TrainSample};

use crate::config::RunConfig;
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

pub fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
        cfg.overrides.push(format!("seed = {seed}"));
    }
    ensure_dir(out)?;
    let synth_cfg = SynthConfig {
        site: cfg.site,
        start_date: cfg.synth.start_date,
        days: cfg.synth.days,
        seed: cfg.train.seed,
        regime: cfg.synth.regime,
        image_w: cfg.synth.image_w,
        image_h: cfg.synth.image_h,
        step_min: cfg.step_min,
    };
    let dataset = generate(&synth_cfg, out).map_err(runtime)?;
    cfg.write_echo(&out.join("config.effective"))?;
    println!(
        "wrote {} daytime rows to {}",
        dataset.rows,
        dataset.manifest_path.display()
    );
    Ok(())
}

/// Samples plus the records they came from (records keep denormalization
/// scales and timestamps).
struct Dataset {
    records: Vec<SampleRecord>,
}

impl Dataset {
    fn train_samples(&self, pillars: Pillars) -> Vec<TrainSample> {
        self.records
            .iter()
            .map(|r| TrainSample {
                input: ModelInput {
                    images: if pillars == Pillars::TsOnly { Vec::new() } else { r.images.clone() },
                    ts: vec![r.ghi_window.clone()],
                },
                target: r.target,
            })
            .collect()
    }
}

fn pipeline_for(cfg: &RunConfig, model: &SmtConfig) -> PipelineConfig {
    PipelineConfig {
        site: cfg.site,
        horizon_min: cfg.horizon_min,
        window_len: model.ts_len,
        frames: model.frames,
        step_min: cfg.step_min,
        gap_tolerance: cfg.gap_tolerance,
        norm: cfg.norm,
        image_h: model.image_h,
        image_w: model.image_w,
        load_images: model.has_image(),
    }
}

fn load_dataset(
    manifest: &Path,
    cfg: &RunConfig,
    model: &SmtConfig,
) -> Result<(Dataset, String), CliError> {
    require_file(manifest, "manifest")?;
    let rows = parse_manifest(manifest).map_err(runtime)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let (records, report) = build_samples(&rows, base, &pipeline_for(cfg, model)).map_err(runtime)?;
    Ok((Dataset { records }, report.to_string()))
}


pub fn cmd_train_with(cfg: RunConfig, manifest: &Path, out: &Path) -> Result<(), CliError> {
    if cfg.model.has_ts() && cfg.model.ts_count != 1 {
        return Err(usage("only ts_count = 1 (the GHI series) has a data loader"));
    }
    let (dataset, report) = load_dataset(manifest, &cfg, &cfg.model)?;
    println!("{report}");
    let (train_end, val_end) = match (cfg.train_end, cfg.val_end) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(usage("training requires train_end and val_end dates in the config")),
    };
    let (mut train_split, mut val_split, _test) =
        split_chronological(dataset.records, &cfg.site, train_end, val_end).map_err(runtime)?;
    if let (Some(h0), Some(h1)) = (cfg.holdout_start, cfg.holdout_end) {
        let (kept_train, _) = exclude_date_range(std::mem::take(&mut train_split), &cfg.site, h0, h1);
        let (kept_val, _) = exclude_date_range(std::mem::take(&mut val_split), &cfg.site, h0, h1);
        train_split = kept_train;
        val_split = kept_val;
    }
    let to_samples = |records: &[SampleRecord]| -> Vec<TrainSample> {
        Dataset { records: records.to_vec() }.train_samples(cfg.model.pillars)
    };
    let train_samples = to_samples(&train_split);
    let val_samples = to_samples(&val_split);

    ensure_dir(out)?;
    let mut params = SmtParams::init(cfg.model, cfg.train.seed).map_err(runtime)?;
    println!(
        "training {} parameters on {} samples ({} validation)",
        cfg.model.count_params(),
        train_samples.len(),
        val_samples.len()
    );
    let outcome = train(&mut params, &train_samples, &val_samples, &cfg.train).map_err(runtime)?;

    let ckpt_path = out.join("checkpoint.smt");
    outcome.best.save(&ckpt_path).map_err(runtime)?;
    write_history(&out.join("history.csv"), &outcome.history).map_err(runtime)?;
    cfg.write_echo(&out.join("config.effective"))?;
    println!(
        "best val mse {:.6} at epoch {} ({} epochs run); checkpoint {}",
        outcome.best.best_val_loss,
        outcome.best.epoch,
        outcome.history.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_file(path, "checkpoint")?;
    Checkpoint::load(path).map_err(runtime)
}

/// Test-split records (when split dates are configured) or the whole set.
fn eval_records(cfg: &RunConfig, dataset: Dataset) -> Result<Vec<SampleRecord>, CliError> {
    match (cfg.train_end, cfg.val_end) {
        (Some(a), Some(b)) => {
            let (_, _, test) =
                split_chronological(dataset.records, &cfg.site, a, b).map_err(runtime)?;
            Ok(test)
        }
        _ => Ok(dataset.records),
    }
}

fn denormalized_series(
    records: &[SampleRecord],
    preds: &[f64],
    cfg: &RunConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<(chrono::NaiveDate, f64, f64)>), CliError> {
    let mut y = Vec::with_capacity(records.len());
    let mut y_hat = Vec::with_capacity(records.len());
    let mut dated = Vec::with_capacity(records.len());
    for (r, &p) in records.iter().zip(preds) {
        let obs = denormalize_ghi(r.target, r.day_max_target).map_err(runtime)?;
        let pred = denormalize_ghi(p, r.day_max_target).map_err(runtime)?;
        let target_time = r.t + Duration::minutes(cfg.horizon_min);
        y.push(obs);
        y_hat.push(pred);
        dated.push((cfg.site.local_date(target_time), obs, pred));
    }
    Ok((y, y_hat, dated))
}

fn report_and_print(
    report_path: &Path,
    y: &[f64],
    y_hat: &[f64],
    dated: &[(chrono::NaiveDate, f64, f64)],
    horizon_min: i64,
) -> Result<MetricsReport, CliError> {
    let metrics = compute_metrics(y, y_hat, horizon_min).map_err(runtime)?;
    let daily = daily_rmse(dated);
    write_report(report_path, &metrics, &daily).map_err(runtime)?;
    println!(
        "n={} rmse={:.3} rse={} corr={} -> {}",
        metrics.n,
        metrics.rmse,
        metrics.rse.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        metrics.corr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        report_path.display()
    );
    Ok(metrics)
}

pub fn cmd_eval(
    config: &Path,
    ckpt_path: &Path,
    manifest: &Path,
    report_path: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    println!(
        "# checkpoint best_val_mse={:.6} epoch={}",
        ckpt.best_val_loss, ckpt.epoch
    );
    let params = ckpt.restore_params().map_err(runtime)?;
    let (dataset, report) = load_dataset(manifest, &cfg, &params.config)?;
    println!("{report}");
    let records = eval_records(&cfg, dataset)?;
    if records.len() < 2 {
        return Err(runtime(format!(
            "only {} evaluable samples; checkpoint geometry and manifest may not match",
            records.len()
        )));
    }
    let samples = Dataset { records: records.clone() }.train_samples(params.config.pillars);
    let mut preds = Vec::with_capacity(samples.len());
    for s in &samples {
        preds.push(smt_core::model::predict(&params, &s.input).map_err(runtime)?);
    }
    let (y, y_hat, dated) = denormalized_series(&records, &preds, &cfg)?;
    report_and_print(report_path, &y, &y_hat, &dated, cfg.horizon_min)?;
    Ok(())
}

pub fn cmd_baseline(
    config: &Path,
    manifest: &Path,
    horizon_min: i64,
    report_path: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    require_file(manifest, "manifest")?;
    let rows = parse_manifest(manifest).map_err(runtime)?;

    // restrict to the configured test period when split dates are present
    let in_scope = |row: &ManifestRow| match (cfg.train_end, cfg.val_end) {
        (Some(_), Some(b)) => cfg.site.local_date(row.timestamp) > b,
        _ => true,
    };

    let mut y = Vec::new();
    let mut y_hat = Vec::new();
    let mut dated = Vec::new();
    let mut degenerate = 0usize;
    let horizon = Duration::minutes(horizon_min);
    let by_time: std::collections::HashMap<i64, &ManifestRow> =
        rows.iter().map(|r| (r.timestamp.timestamp(), r)).collect();
    for row in &rows {
        let (Some(ghi), true) = (row.ghi, in_scope(row)) else {
            continue;
        };
        let target_time = row.timestamp + horizon;
        let Some(target) = by_time.get(&target_time.timestamp()).and_then(|r| r.ghi) else {
            continue;
        };
        let ctx_t = SolarContext::compute(&cfg.site, row.timestamp).map_err(runtime)?;
        let ctx_h = SolarContext::compute(&cfg.site, target_time).map_err(runtime)?;
        if !ctx_t.is_daytime() || !ctx_h.is_daytime() {
            continue;
        }
        let forecast = smart_persistence(ghi, &ctx_t, &ctx_h);
        if forecast.degenerate {
            degenerate += 1;
        }
        y.push(target);
        y_hat.push(forecast.value);
        dated.push((cfg.site.local_date(target_time), target, forecast.value));
    }
    if y.len() < 2 {
        return Err(runtime("fewer than 2 persistence-evaluable samples in the manifest"));
    }
    if degenerate > 0 {
        println!("# {degenerate} near-sunset forecasts fell back to the raw observation");
    }
    report_and_print(report_path, &y, &y_hat, &dated, horizon_min)?;
    Ok(())
}

fn parse_timestamp(value: &str) -> Result<DateTime<Utc>, CliError> {
    DateTime::parse_from_rfc3339(value)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| usage(format!("bad timestamp {value:?}: {e}")))
}

pub fn cmd_predict(
    config: &Path,
    ckpt_path: &Path,
    image: &Path,
    window: &Path,
    t: &str,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let params = ckpt.restore_params().map_err(runtime)?;
    let model = &params.config;
    let t = parse_timestamp(t)?;

    // window file: `timestamp,ghi` rows covering the S grid slots ending at t
    require_file(window, "window file")?;
    let text = std::fs::read_to_string(window)
        .map_err(|e| runtime(format!("cannot read {}: {e}", window.display())))?;
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && line.trim_end() == "timestamp,ghi" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (ts, ghi) = line
            .split_once(',')
            .ok_or_else(|| usage(format!("{} line {}: expected timestamp,ghi", window.display(), idx + 1)))?;
        let ts = parse_timestamp(ts.trim())?;
        let ghi: f64 = ghi
            .trim()
            .parse()
            .map_err(|_| usage(format!("{} line {}: bad GHI", window.display(), idx + 1)))?;
        values.push((ts, ghi));
    }
    if values.len() != model.ts_len {
        return Err(usage(format!(
            "window has {} readings but the checkpoint expects exactly {} (10-minute slots ending at t)",
            values.len(),
            model.ts_len
        )));
    }
    for (i, (ts, _)) in values.iter().enumerate() {
        let expected = t - Duration::minutes(cfg.step_min * (model.ts_len - 1 - i) as i64);
        if *ts != expected {
            return Err(usage(format!(
                "window slot {} has timestamp {ts}, expected {expected}",
                i + 1
            )));
        }
    }

    let mut ts_values = Vec::with_capacity(model.ts_len);
    for (ts, ghi) in &values {
        let normalized = match cfg.norm {
            smt_core::data::NormMode::Fixed(scale) => ghi / scale,
            smt_core::data::NormMode::DayMax => {
                let ctx = SolarContext::compute(&cfg.site, *ts).map_err(runtime)?;
                if ctx.is_daytime() {
                    ghi / ctx.day_max_clear_sky
                } else {
                    0.0
                }
            }
        };
        ts_values.push(normalized);
    }

    let images = if model.has_image() {
        require_file(image, "image")?;
        let pixels = load_image(image, model.image_h, model.image_w).map_err(runtime)?;
        vec![pixels; model.effective_frames()]
    } else {
        Vec::new()
    };

    let input = ModelInput { images, ts: vec![ts_values] };
    let y_star = smt_core::model::predict(&params, &input).map_err(runtime)?;
    let target_time = t + Duration::minutes(cfg.horizon_min);
    let scale = match cfg.norm {
        smt_core::data::NormMode::Fixed(scale) => scale,
        smt_core::data::NormMode::DayMax => {
            SolarContext::compute(&cfg.site, target_time)
                .map_err(runtime)?
                .day_max_clear_sky
        }
    };
    let ghi = denormalize_ghi(y_star, scale).map_err(runtime)?;
    println!("y_star={y_star} ghi_wm2={ghi}");
    Ok(())
}

pub fn cmd_attn(
    config: &Path,
    ckpt_path: &Path,
    manifest: &Path,
    t: &str,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let params = ckpt.restore_params().map_err(runtime)?;
    let t = parse_timestamp(t)?;
    let (dataset, _) = load_dataset(manifest, &cfg, &params.config)?;

    let record = match dataset.records.iter().find(|r| r.t == t) {
        Some(r) => r,
        None => {
            let mut nearest: Vec<_> = dataset.records.iter().map(|r| r.t).collect();
            nearest.sort_by_key(|ts| (*ts - t).num_seconds().abs());
            let hint: Vec<String> =
                nearest.iter().take(3).map(|ts| ts.to_rfc3339()).collect();
            return Err(usage(format!(
                "timestamp {} has no evaluable sample; nearest available: {}",
                t.to_rfc3339(),
                hint.join(", ")
            )));
        }
    };

    ensure_dir(out)?;
    let samples = Dataset { records: vec![record.clone()] }.train_samples(params.config.pillars);
    let (pred, trace) = forward_traced(&params, &samples[0].input).map_err(runtime)?;

    let rollout = weighted_rollout(&trace).map_err(runtime)?;
    let last = last_layer_attention(&trace).map_err(runtime)?;
    export_heatmap(&rollout, &params.config, &out.join("rollout.pgm"), &out.join("rollout.csv"))
        .map_err(runtime)?;
    export_heatmap(
        &last,
        &params.config,
        &out.join("last_layer.pgm"),
        &out.join("last_layer.csv"),
    )
    .map_err(runtime)?;

    let token_count = params.config.image_tokens() + params.config.ts_tokens();
    println!(
        "prediction y_star={pred:.6}; {token_count} tokens ({} image + {} ts); outputs in {}",
        params.config.image_tokens(),
        params.config.ts_tokens(),
        out.display()
    );
    if rollout.degenerate {
        println!("# rollout degenerate: all mass stayed on the prediction token");
    }
    Ok(())
}
