//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! The two training-based criteria (multimodal advantage, normalization
//! effect) generate synthetic datasets and train real models; together they
//! dominate the suite's runtime.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smt_core::checkpoint::Checkpoint;
use smt_core::data::{build_samples, parse_manifest, NormMode, PipelineConfig, SampleRecord};
use smt_core::gradcheck::{central_diff, max_rel_err};
use smt_core::metrics::compute_metrics;
use smt_core::model::{
    bind_params, forward_on_tape, ModelInput, PatchShape, Pillars, SmtConfig, SmtParams,
};
use smt_core::solar::{smart_persistence, SiteConfig, SolarContext};
use smt_core::synth::{generate, CloudRegime, SynthConfig};
use smt_core::tensor::Tape;
use smt_core::train::{lr_schedule, train, TrainConfig, TrainSample};

fn site() -> SiteConfig {
    SiteConfig::new(46.52, 6.63, 405.0, 60).unwrap()
}

fn pass(criterion: u32, name: &str, details: String) {
    println!("ACCEPTANCE {criterion} ({name}): PASS - {details}");
}

/// Criterion 1: full-model gradients at the pinned reduced geometry match
/// central finite differences with relative error below 1e-4, within 60 s.
#[test]
fn acceptance_1_gradient_integrity() {
    let started = std::time::Instant::now();
    let config = SmtConfig {
        image_h: 32,
        image_w: 32,
        image_c: 3,
        patch_shape: PatchShape::Square { a: 16, b: 16 }, // N = 4
        ts_count: 1,
        ts_len: 16,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 4,
        frames: 1,
        pillars: Pillars::Both,
        final_layer_norm: false,
    };
    assert_eq!(config.n_patches(), 4);
    let params = SmtParams::init(config, 101).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let pixels = config.image_h * config.image_w * config.image_c;
    let input = ModelInput {
        images: vec![(0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect()],
        ts: vec![(0..config.ts_len).map(|_| rng.gen_range(0.0..1.0)).collect()],
    };
    let target = 0.63;

    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, &params);
    let nodes = forward_on_tape(&mut tape, &params, &binding, &input).unwrap();
    let t = tape.leaf(vec![target], vec![1, 1]);
    let loss = tape.mse_loss(nodes.pred, t).unwrap();
    tape.backward(loss).unwrap();

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (i, tensor) in params.tensors.iter().enumerate() {
        if !tensor.learnable {
            continue;
        }
        let analytic = tape.grad(binding.leaves[i]).unwrap().to_vec();
        let f = |vals: &[f64]| {
            let mut probe = SmtParams::init(config, 101).unwrap();
            probe.tensors[i].values = vals.to_vec();
            let mut tape = Tape::new();
            let binding = bind_params(&mut tape, &probe);
            let nodes = forward_on_tape(&mut tape, &probe, &binding, &input).unwrap();
            let t = tape.leaf(vec![target], vec![1, 1]);
            let loss = tape.mse_loss(nodes.pred, t).unwrap();
            tape.scalar(loss)
        };
        let numeric = central_diff(f, &tensor.values, 1e-5);
        let rel = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(rel < 1e-4, "{}: rel err {rel}", tensor.name);
        worst = worst.max(rel);
        checked += tensor.numel();
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}");
    pass(
        1,
        "gradient integrity",
        format!("{checked} parameters, max rel err {worst:.2e}, {elapsed:.1?}"),
    );
}

/// Criterion 2: 32 synthetic samples at D=64, L=2 overfit to train MSE
/// below 1e-3 within 500 epochs, in under 5 minutes.
#[test]
fn acceptance_2_overfitting_capacity() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::new(
        site(),
        NaiveDate::from_ymd_opt(2023, 6, 1).unwrap(),
        3,
        7,
        CloudRegime::Advecting { speed: 3.0 },
    );
    let dataset = generate(&synth, dir.path()).unwrap();
    let rows = parse_manifest(&dataset.manifest_path).unwrap();
    let pipe = PipelineConfig {
        window_len: 24,
        image_h: 16,
        image_w: 16,
        ..PipelineConfig::new(site())
    };
    let (records, _) = build_samples(&rows, dir.path(), &pipe).unwrap();
    assert!(records.len() >= 32);
    let samples: Vec<TrainSample> = records
        .iter()
        .step_by(records.len() / 32)
        .take(32)
        .map(|r| TrainSample {
            input: ModelInput { images: r.images.clone(), ts: vec![r.ghi_window.clone()] },
            target: r.target,
        })
        .collect();
    assert_eq!(samples.len(), 32);

    let config = SmtConfig {
        image_h: 16,
        image_w: 16,
        image_c: 3,
        patch_shape: PatchShape::Square { a: 8, b: 8 },
        ts_count: 1,
        ts_len: 24,
        embed_dim: 64,
        layers: 2,
        heads: 4,
        mlp_ratio: 4,
        frames: 1,
        pillars: Pillars::Both,
        final_layer_norm: false,
    };
    let mut params = SmtParams::init(config, 11).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 500,
        early_stop_patience: 500, // patience disabled
        lr_peak: 3e-3,
        lr_warmup_start: 3e-4,
        warmup_epochs: 10,
        seed: 11,
        ..TrainConfig::default()
    };
    let outcome = train(&mut params, &samples, &samples, &cfg).unwrap();
    let best = outcome
        .history
        .iter()
        .map(|h| h.train_mse)
        .fold(f64::INFINITY, f64::min);
    let elapsed = started.elapsed();
    assert!(best < 1e-3, "train MSE only reached {best}");
    assert!(elapsed.as_secs() < 300, "overfit run took {elapsed:?}");
    pass(
        2,
        "overfitting capacity",
        format!(
            "train MSE {best:.2e} after {} epochs, {elapsed:.1?}",
            outcome.history.len()
        ),
    );
}

/// Criterion 3: on persistent(k=0.8) synthetic data the smart-persistence
/// baseline is exact to 1e-6 W/m^2 at the 120-minute horizon.
#[test]
fn acceptance_3_persistence_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::new(
        site(),
        NaiveDate::from_ymd_opt(2023, 6, 1).unwrap(),
        5,
        13,
        CloudRegime::Persistent { ratio: 0.8 },
    );
    let dataset = generate(&synth, dir.path()).unwrap();
    let rows = parse_manifest(&dataset.manifest_path).unwrap();
    let s = site();
    let horizon = chrono::Duration::minutes(120);
    let by_time: std::collections::HashMap<i64, f64> = rows
        .iter()
        .filter_map(|r| r.ghi.map(|g| (r.timestamp.timestamp(), g)))
        .collect();
    let mut sse = 0.0;
    let mut n = 0usize;
    for row in &rows {
        let target_t = row.timestamp + horizon;
        let Some(&target) = by_time.get(&target_t.timestamp()) else {
            continue;
        };
        let ctx_t = SolarContext::compute(&s, row.timestamp).unwrap();
        let ctx_h = SolarContext::compute(&s, target_t).unwrap();
        let forecast = smart_persistence(row.ghi.unwrap(), &ctx_t, &ctx_h);
        if forecast.degenerate {
            continue;
        }
        sse += (forecast.value - target).powi(2);
        n += 1;
    }
    assert!(n > 200, "too few persistence pairs: {n}");
    let rmse = (sse / n as f64).sqrt();
    assert!(rmse < 1e-6, "persistence RMSE {rmse}");
    pass(3, "persistence oracle", format!("RMSE {rmse:.2e} over {n} forecasts"));
}

struct TrainedEval {
    test_rmse: f64,
    epochs: usize,
}

fn advantage_model(pillars: Pillars) -> SmtConfig {
    SmtConfig {
        image_h: 16,
        image_w: 32,
        image_c: 3,
        patch_shape: PatchShape::Column,
        ts_count: 1,
        ts_len: 48,
        embed_dim: 48,
        layers: 2,
        heads: 4,
        mlp_ratio: 4,
        frames: 1,
        pillars,
        final_layer_norm: false,
    }
}

fn train_and_eval(
    records: &[SampleRecord],
    model: SmtConfig,
    seed: u64,
    epochs: usize,
) -> TrainedEval {
    let n = records.len();
    let train_end = n * 70 / 100;
    let val_end = n * 85 / 100;
    let to_sample = |r: &SampleRecord| TrainSample {
        input: ModelInput {
            images: if model.pillars == Pillars::TsOnly { Vec::new() } else { r.images.clone() },
            ts: vec![r.ghi_window.clone()],
        },
        target: r.target,
    };
    let tr: Vec<_> = records[..train_end].iter().map(to_sample).collect();
    let va: Vec<_> = records[train_end..val_end].iter().map(to_sample).collect();
    let te: Vec<_> = records[val_end..].iter().map(to_sample).collect();

    let mut params = SmtParams::init(model, seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        early_stop_patience: 10,
        lr_peak: 1e-3,
        lr_warmup_start: 1e-4,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut params, &tr, &va, &cfg).unwrap();
    let best = outcome.best.restore_params().unwrap();
    let mut y = Vec::new();
    let mut y_hat = Vec::new();
    for (sample, record) in te.iter().zip(&records[val_end..]) {
        let pred = smt_core::model::predict(&best, &sample.input).unwrap();
        y.push(sample.target * record.day_max_target);
        y_hat.push(pred * record.day_max_target);
    }
    TrainedEval {
        test_rmse: compute_metrics(&y, &y_hat, 120).unwrap().rmse,
        epochs: outcome.history.len(),
    }
}

/// Criterion 4: on advecting synthetic data (60 days), the median over three
/// seeds of test RMSE(image+ts) is at most 0.9x the ts-only RMSE, under half
/// an hour in total.
#[test]
fn acceptance_4_multimodal_advantage() {
    let started = std::time::Instant::now();
    let mut ratios = Vec::new();
    for seed in [7u64, 8, 9] {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig::new(
            site(),
            NaiveDate::from_ymd_opt(2023, 4, 1).unwrap(),
            60,
            seed,
            CloudRegime::Advecting { speed: 3.0 },
        );
        let dataset = generate(&synth, dir.path()).unwrap();
        let rows = parse_manifest(&dataset.manifest_path).unwrap();
        let pipe = PipelineConfig {
            window_len: 48,
            image_h: 16,
            image_w: 32,
            ..PipelineConfig::new(site())
        };
        let (records, _) = build_samples(&rows, dir.path(), &pipe).unwrap();

        let multimodal = train_and_eval(&records, advantage_model(Pillars::Both), seed, 45);
        let ts_only = train_and_eval(&records, advantage_model(Pillars::TsOnly), seed, 45);
        let ratio = multimodal.test_rmse / ts_only.test_rmse;
        println!(
            "  seed {seed}: image+ts {:.2} ({} ep) vs ts-only {:.2} ({} ep) -> ratio {ratio:.3}",
            multimodal.test_rmse, multimodal.epochs, ts_only.test_rmse, ts_only.epochs
        );
        ratios.push(ratio);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[1];
    let elapsed = started.elapsed();
    assert!(
        median <= 0.9,
        "median RMSE ratio {median:.3} exceeds 0.9 (ratios {ratios:?})"
    );
    assert!(elapsed.as_secs() < 1800, "advantage runs took {elapsed:?}");
    pass(
        4,
        "multimodal advantage",
        format!("median ratio {median:.3} (all {ratios:?}), {elapsed:.0?}"),
    );
}

/// Criterion 5: over 92 days with a seasonal trend, day-max normalization
/// yields strictly lower test RMSE than a fixed scale, 3-seed median.
#[test]
fn acceptance_5_normalization_effect() {
    let started = std::time::Instant::now();
    let model = SmtConfig {
        image_h: 16,
        image_w: 16,
        image_c: 3,
        patch_shape: PatchShape::Square { a: 8, b: 8 },
        ts_count: 1,
        ts_len: 48,
        embed_dim: 48,
        layers: 2,
        heads: 4,
        mlp_ratio: 4,
        frames: 1,
        pillars: Pillars::Both,
        final_layer_norm: false,
    };
    let mut normalized = Vec::new();
    let mut unnormalized = Vec::new();
    for seed in [7u64, 8, 9] {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig::new(
            site(),
            NaiveDate::from_ymd_opt(2023, 2, 1).unwrap(),
            92,
            seed,
            CloudRegime::Advecting { speed: 3.0 },
        );
        let dataset = generate(&synth, dir.path()).unwrap();
        let rows = parse_manifest(&dataset.manifest_path).unwrap();
        for norm in [NormMode::DayMax, NormMode::Fixed(1000.0)] {
            let pipe = PipelineConfig {
                window_len: 48,
                image_h: 16,
                image_w: 16,
                norm,
                ..PipelineConfig::new(site())
            };
            let (records, _) = build_samples(&rows, dir.path(), &pipe).unwrap();
            let eval = train_and_eval(&records, model, seed, 35);
            println!("  seed {seed} {norm:?}: test RMSE {:.2} ({} ep)", eval.test_rmse, eval.epochs);
            match norm {
                NormMode::DayMax => normalized.push(eval.test_rmse),
                NormMode::Fixed(_) => unnormalized.push(eval.test_rmse),
            }
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[1]
    };
    let with = median(&mut normalized);
    let without = median(&mut unnormalized);
    let elapsed = started.elapsed();
    assert!(
        with < without,
        "normalized RMSE {with:.2} not lower than unnormalized {without:.2}"
    );
    pass(
        5,
        "normalization effect",
        format!("median RMSE {with:.2} (normalized) vs {without:.2} (fixed scale), {elapsed:.0?}"),
    );
}

/// Criterion 6: metrics agree with an independent brute-force implementation
/// to 1e-9 on 1000 random series, and the mean predictor has RSE exactly 1.
#[test]
fn acceptance_6_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..120);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1000.0)).collect();
        let yh: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1000.0)).collect();
        let report = compute_metrics(&y, &yh, 120).unwrap();

        // brute force, written independently of the metrics module
        let nf = n as f64;
        let rmse = (y.iter().zip(&yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nf).sqrt();
        let my = y.iter().sum::<f64>() / nf;
        let myh = yh.iter().sum::<f64>() / nf;
        let ss_y: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
        let ss_yh: f64 = yh.iter().map(|b| (b - myh).powi(2)).sum();
        let rse = (y.iter().zip(&yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ss_y).sqrt();
        let cov: f64 = y.iter().zip(&yh).map(|(a, b)| (a - my) * (b - myh)).sum();
        let corr = cov / (ss_y * ss_yh).sqrt();

        worst = worst
            .max((report.rmse - rmse).abs())
            .max((report.rse.unwrap() - rse).abs())
            .max((report.corr.unwrap() - corr).abs());
    }
    assert!(worst < 1e-9, "metrics diverge from oracle by {worst}");

    let y = [120.0, 450.0, 300.0, 684.0];
    let mean = y.iter().sum::<f64>() / 4.0;
    let report = compute_metrics(&y, &[mean; 4], 120).unwrap();
    assert_eq!(report.rse, Some(1.0));
    pass(6, "metrics oracle", format!("max deviation {worst:.2e}; mean predictor RSE = 1"));
}

/// Criterion 7: schedule endpoints are exact.
#[test]
fn acceptance_7_schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0.0, &cfg), 5e-5);
    assert_eq!(lr_schedule(2.0, &cfg), 5e-4);
    let final_lr = lr_schedule(100.0, &cfg);
    assert!((final_lr - 2.5e-4).abs() < f64::EPSILON);
    pass(7, "schedule endpoints", "lr(0)=5e-5, lr(2)=5e-4, lr(100)=2.5e-4".into());
}

/// Criterion 8: every attention row and every rollout-stage row sums to one
/// within 1e-6 on a full default-geometry forward pass (T = 198).
#[test]
fn acceptance_8_attention_invariants() {
    let config = SmtConfig { ts_len: 144, ..SmtConfig::default() };
    assert_eq!(config.seq_len(), 198);
    let params = SmtParams::init(config, 808).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(809);
    let pixels = config.image_h * config.image_w * config.image_c;
    let input = ModelInput {
        images: vec![(0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect()],
        ts: vec![(0..config.ts_len).map(|_| rng.gen_range(0.0..1.0)).collect()],
    };
    let (_pred, trace) = smt_core::attention::forward_traced(&params, &input).unwrap();
    assert_eq!(trace.seq_len, 198);
    let t = trace.seq_len;
    let mut rows = 0usize;
    let mut worst: f64 = 0.0;
    for layer in &trace.layers {
        for row in layer.attn.chunks(t) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    assert!(worst < 1e-6, "attention row sum deviates by {worst}");
    assert_eq!(rows, config.layers * config.heads * t);

    // rollout stages stay row-stochastic and the final attribution sums to 1
    let rollout = smt_core::attention::weighted_rollout(&trace).unwrap();
    assert!(!rollout.degenerate);
    let total: f64 = rollout.weights.iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    pass(
        8,
        "attention invariants",
        format!("{rows} rows, worst row-sum deviation {worst:.2e}"),
    );
}

/// Criterion 9: fixed seeds give bitwise-identical loss histories, byte-
/// identical synthetic datasets and byte-identical checkpoints.
#[test]
fn acceptance_9_determinism() {
    // synthetic data bytes
    let synth = SynthConfig::new(
        site(),
        NaiveDate::from_ymd_opt(2023, 6, 1).unwrap(),
        2,
        909,
        CloudRegime::Advecting { speed: 3.0 },
    );
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let out_a = generate(&synth, dir_a.path()).unwrap();
    let out_b = generate(&synth, dir_b.path()).unwrap();
    assert_eq!(
        std::fs::read(&out_a.manifest_path).unwrap(),
        std::fs::read(&out_b.manifest_path).unwrap()
    );

    // training determinism at a small configuration
    let rows = parse_manifest(&out_a.manifest_path).unwrap();
    let pipe = PipelineConfig {
        window_len: 24,
        image_h: 16,
        image_w: 16,
        ..PipelineConfig::new(site())
    };
    let (records, _) = build_samples(&rows, dir_a.path(), &pipe).unwrap();
    let samples: Vec<TrainSample> = records
        .iter()
        .map(|r| TrainSample {
            input: ModelInput { images: r.images.clone(), ts: vec![r.ghi_window.clone()] },
            target: r.target,
        })
        .collect();
    let config = SmtConfig {
        image_h: 16,
        image_w: 16,
        image_c: 3,
        patch_shape: PatchShape::Square { a: 8, b: 8 },
        ts_count: 1,
        ts_len: 24,
        embed_dim: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        frames: 1,
        pillars: Pillars::Both,
        final_layer_norm: false,
    };
    let cfg = TrainConfig {
        epochs: 3,
        early_stop_patience: 10,
        seed: 909,
        ..TrainConfig::default()
    };
    let mut ckpts = Vec::new();
    let mut histories = Vec::new();
    for _ in 0..2 {
        let mut params = SmtParams::init(config, 909).unwrap();
        let outcome = train(&mut params, &samples, &samples, &cfg).unwrap();
        histories.push(outcome.history.clone());
        ckpts.push(outcome.best.to_bytes());
    }
    assert_eq!(histories[0], histories[1], "loss history not reproducible");
    assert_eq!(ckpts[0], ckpts[1], "checkpoint bytes not reproducible");
    let reloaded = Checkpoint::from_bytes(&ckpts[0]).unwrap();
    assert_eq!(reloaded.to_bytes(), ckpts[0]);
    pass(
        9,
        "determinism",
        format!(
            "identical manifests, {}-epoch histories and {}-byte checkpoints",
            histories[0].len(),
            ckpts[0].len()
        ),
    );
}

/// Criterion 10 (non-gating, manual inspection): train briefly on advecting
/// data and export rollout heatmaps for a clear and an occluded frame plus
/// the time-series strip weights. Run with
/// `cargo test -p smt-core --test acceptance -- --ignored --nocapture`;
/// artifacts land in target/acceptance_artifacts.
#[test]
#[ignore = "manual-inspection artifact export (criterion 10)"]
fn acceptance_10_attention_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::new(
        site(),
        NaiveDate::from_ymd_opt(2023, 4, 1).unwrap(),
        30,
        7,
        CloudRegime::Advecting { speed: 3.0 },
    );
    let dataset = generate(&synth, dir.path()).unwrap();
    let rows = parse_manifest(&dataset.manifest_path).unwrap();
    let pipe = PipelineConfig {
        window_len: 48,
        image_h: 16,
        image_w: 32,
        ..PipelineConfig::new(site())
    };
    let (records, _) = build_samples(&rows, dir.path(), &pipe).unwrap();
    let model = advantage_model(Pillars::Both);
    let n = records.len();
    let to_sample = |r: &SampleRecord| TrainSample {
        input: ModelInput { images: r.images.clone(), ts: vec![r.ghi_window.clone()] },
        target: r.target,
    };
    let tr: Vec<_> = records[..n * 85 / 100].iter().map(to_sample).collect();
    let va: Vec<_> = records[n * 85 / 100..].iter().map(to_sample).collect();
    let mut params = SmtParams::init(model, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        early_stop_patience: 10,
        lr_peak: 1e-3,
        lr_warmup_start: 1e-4,
        seed: 7,
        ..TrainConfig::default()
    };
    let outcome = train(&mut params, &tr, &va, &cfg).unwrap();
    let best = outcome.best.restore_params().unwrap();

    let truth = std::fs::read_to_string(&dataset.truth_path).unwrap();
    let k_by_time: std::collections::HashMap<String, f64> = truth
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let ts = it.next().unwrap().to_string();
            (ts, it.next().unwrap().parse().unwrap())
        })
        .collect();
    let k_of = |r: &SampleRecord| {
        let local = r.t.with_timezone(&site().offset());
        k_by_time.get(&local.to_rfc3339()).copied().unwrap_or(1.0)
    };
    let clear = records.iter().find(|r| k_of(r) > 0.999).expect("clear frame");
    let occluded = records.iter().find(|r| k_of(r) < 0.5).expect("occluded frame");

    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_artifacts");
    std::fs::create_dir_all(&out_dir).unwrap();
    for (label, record) in [("clear", clear), ("occluded", occluded)] {
        let sample = to_sample(record);
        let (pred, trace) =
            smt_core::attention::forward_traced(&best, &sample.input).unwrap();
        let rollout = smt_core::attention::weighted_rollout(&trace).unwrap();
        smt_core::attention::export_heatmap(
            &rollout,
            &best.config,
            &out_dir.join(format!("{label}_rollout.pgm")),
            &out_dir.join(format!("{label}_rollout.csv")),
        )
        .unwrap();
        let last = smt_core::attention::last_layer_attention(&trace).unwrap();
        smt_core::attention::export_heatmap(
            &last,
            &best.config,
            &out_dir.join(format!("{label}_last_layer.pgm")),
            &out_dir.join(format!("{label}_last_layer.csv")),
        )
        .unwrap();
        let ts_weight: f64 = rollout.weights[best.config.image_tokens()..].iter().sum();
        println!(
            "criterion 10 [{label}]: k={:.3} pred={pred:.3} ts-strip weight {ts_weight:.4} -> {}",
            k_of(record),
            out_dir.display()
        );
    }
    println!("ACCEPTANCE 10 (manual inspection): artifacts exported to {}", out_dir.display());
}
