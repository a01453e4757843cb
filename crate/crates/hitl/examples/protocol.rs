//! Trains a baseline on generated data and runs the four-group validation protocol.
//!
//! `cargo run --release -p idc-hitl --example protocol -- [per_class] [look_alike_rate] [epochs] [retrain_epochs] [duplication]`

use std::time::Instant;

use idc_core::data::synthetic::{write_patch_dataset, PatchStyle};
use idc_core::data::{materialize, prepare, DataSource, PadMode, PipelineConfig, Split};
use idc_core::model::{build_model, train, ModelConfig, TrainingConfig};
use idc_hitl::{run_validation_protocol_with, ProtocolConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let per_class: usize = arg(0, "500").parse()?;
    let rate: f32 = arg(1, "0.2").parse()?;
    let epochs: usize = arg(2, "6").parse()?;
    let retrain_epochs: usize = arg(3, "10").parse()?;
    let duplication: usize = arg(4, "1").parse()?;

    let dir = tempfile::tempdir()?;
    write_patch_dataset(dir.path(), per_class, per_class, PatchStyle::LookAlike { rate }, 1)?;
    let mut cfg = PipelineConfig::new(DataSource::PatchDir {
        root: dir.path().to_path_buf(),
        strict: true,
        pad: PadMode::Reject,
    });
    cfg.n_per_class = per_class;
    let manifest = prepare(&cfg)?;
    let (train_set, test) = (materialize(&manifest, Split::Train)?, materialize(&manifest, Split::Test)?);

    let start = Instant::now();
    let mut model = build_model(&ModelConfig::default(), 1)?;
    let tcfg = TrainingConfig {
        epochs,
        ..TrainingConfig::default()
    };
    let base = train(&mut model, &train_set, &test, &tcfg)?;
    println!(
        "baseline: best epoch {} test acc {:.4} [{:.1?}]",
        base.history.best_epoch + 1,
        base.history.best().unwrap().test_accuracy,
        start.elapsed()
    );
    let protocol = ProtocolConfig {
        seed: 3,
        duplication,
        training: TrainingConfig {
            epochs: retrain_epochs,
            ..TrainingConfig::default()
        },
        ..ProtocolConfig::default()
    };
    let report = run_validation_protocol_with(&base.best, &train_set, &test, &protocol, |g| {
        println!(
            "group {}: {}/{} after, held-out {:.4} [{:.1?}]",
            g.group_id,
            g.correct_after,
            g.sample_count,
            g.heldout_accuracy_after,
            start.elapsed()
        )
    })?;
    print!("{}", report.to_text());
    Ok(())
}
