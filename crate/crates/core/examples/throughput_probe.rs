use chrono::NaiveDate;
use smt_core::data::{build_samples, parse_manifest, PipelineConfig};
use smt_core::model::{PatchShape, Pillars, SmtConfig, SmtParams};
use smt_core::solar::SiteConfig;
use smt_core::synth::{generate, CloudRegime, SynthConfig};
use smt_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let site = SiteConfig::new(46.52, 6.63, 405.0, 60).unwrap();
    let synth = SynthConfig::new(
        site,
        NaiveDate::from_ymd_opt(2023, 4, 1).unwrap(),
        60,
        7,
        CloudRegime::Advecting { speed: 3.0 },
    );
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = generate(&synth, dir.path()).unwrap();
    println!("generate 60 days: {:?} ({} rows)", t0.elapsed(), out.rows);

    let model_cfg = SmtConfig {
        image_h: 32,
        image_w: 64,
        image_c: 3,
        patch_shape: PatchShape::Square { a: 16, b: 16 },
        ts_count: 1,
        ts_len: 48,
        embed_dim: 48,
        layers: 2,
        heads: 2,
        mlp_ratio: 4,
        frames: 1,
        pillars: Pillars::Both,
        final_layer_norm: false,
    };
    let pipe = PipelineConfig {
        window_len: 48,
        image_h: 32,
        image_w: 64,
        ..PipelineConfig::new(site)
    };
    let t0 = Instant::now();
    let rows = parse_manifest(&out.manifest_path).unwrap();
    let (samples, report) = build_samples(&rows, dir.path(), &pipe).unwrap();
    println!("build {} samples: {:?} ({report})", samples.len(), t0.elapsed());

    let train_samples: Vec<_> = samples.iter().map(|s| s.to_train_sample(1)).collect();
    let n = train_samples.len();
    let (tr, va) = train_samples.split_at(n * 8 / 10);
    let mut params = SmtParams::init(model_cfg, 1).unwrap();
    let cfg = TrainConfig { epochs: 3, early_stop_patience: 100, seed: 1, ..TrainConfig::default() };
    let t0 = Instant::now();
    let outcome = train(&mut params, tr, va, &cfg).unwrap();
    println!(
        "3 epochs over {} train samples: {:?} (last {:?})",
        tr.len(),
        t0.elapsed(),
        outcome.history.last().unwrap()
    );
}
