use chrono::NaiveDate;
use smt_core::data::{build_samples, parse_manifest, PipelineConfig};
use smt_core::metrics::compute_metrics;
use smt_core::model::{ModelInput, PatchShape, Pillars, SmtConfig, SmtParams};
use smt_core::solar::SiteConfig;
use smt_core::synth::{generate, CloudRegime, SynthConfig};
use smt_core::train::{train, TrainConfig, TrainSample};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let speed: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let site = SiteConfig::new(46.52, 6.63, 405.0, 60).unwrap();
    let synth = SynthConfig::new(
        site,
        NaiveDate::from_ymd_opt(2023, 4, 1).unwrap(),
        60,
        seed,
        CloudRegime::Advecting { speed },
    );
    let dir = tempfile::tempdir().unwrap();
    let out = generate(&synth, dir.path()).unwrap();

    let (ih, iw) = (16usize, 32usize);
    let pipe = PipelineConfig {
        window_len: 48,
        image_h: ih,
        image_w: iw,
        ..PipelineConfig::new(site)
    };
    let rows = parse_manifest(&out.manifest_path).unwrap();
    let (samples, _) = build_samples(&rows, dir.path(), &pipe).unwrap();
    let n = samples.len();
    let train_end = n * 70 / 100;
    let val_end = n * 85 / 100;
    println!("samples: {n}, speed: {speed}, epochs: {epochs}, seed: {seed}, lr: {lr}");

    let mut rmses = Vec::new();
    for pillars in [Pillars::Both, Pillars::TsOnly] {
        let model_cfg = SmtConfig {
            image_h: ih,
            image_w: iw,
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
        };
        let to_train = |s: &smt_core::data::SampleRecord| TrainSample {
            input: ModelInput {
                images: if pillars == Pillars::TsOnly { vec![] } else { s.images.clone() },
                ts: vec![s.ghi_window.clone()],
            },
            target: s.target,
        };
        let tr: Vec<_> = samples[..train_end].iter().map(to_train).collect();
        let va: Vec<_> = samples[train_end..val_end].iter().map(to_train).collect();
        let te: Vec<_> = samples[val_end..].iter().map(to_train).collect();

        let mut params = SmtParams::init(model_cfg, seed).unwrap();
        let cfg = TrainConfig {
            epochs,
            early_stop_patience: 15,
            lr_peak: lr,
            lr_warmup_start: lr / 10.0,
            seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let outcome = train(&mut params, &tr, &va, &cfg).unwrap();
        let best = outcome.best.restore_params().unwrap();
        let mut y = Vec::new();
        let mut yh = Vec::new();
        for (s, rec) in te.iter().zip(&samples[val_end..]) {
            let pred = smt_core::model::predict(&best, &s.input).unwrap();
            y.push(s.target * rec.day_max_target);
            yh.push(pred * rec.day_max_target);
        }
        let m = compute_metrics(&y, &yh, 120).unwrap();
        println!(
            "{pillars:?}: epochs={} best_val={:.5} test_rmse={:.2} time={:?}",
            outcome.history.len(),
            outcome.best.best_val_loss,
            m.rmse,
            t0.elapsed()
        );
        rmses.push(m.rmse);
    }
    println!("ratio: {:.3}", rmses[0] / rmses[1]);
}
