//! Trains the default small-conv model on a generated two-class patch set and
//! prints the per-epoch history.
//!
//! `cargo run --release -p idc-core --example learnability -- [per_class] [epochs] [overlap]`

use std::time::Instant;

use idc_core::data::synthetic::{write_patch_dataset, PatchStyle};
use idc_core::data::{materialize, prepare, DataSource, PadMode, PipelineConfig, Split};
use idc_core::model::{build_model, train_with_progress, ModelConfig, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_class: usize = args.first().map_or(Ok(500), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(30), |s| s.parse())?;
    let overlap: f32 = args.get(2).map_or(Ok(0.0), |s| s.parse())?;

    let dir = tempfile::tempdir()?;
    write_patch_dataset(dir.path(), per_class, per_class, PatchStyle::Tissue { overlap }, 1)?;
    let mut cfg = PipelineConfig::new(DataSource::PatchDir {
        root: dir.path().to_path_buf(),
        strict: true,
        pad: PadMode::Reject,
    });
    cfg.n_per_class = per_class;
    let start = Instant::now();
    let manifest = prepare(&cfg)?;
    let (train, test) = (materialize(&manifest, Split::Train)?, materialize(&manifest, Split::Test)?);
    println!("train {} test {} prepared in {:.1?}", train.len(), test.len(), start.elapsed());

    let mut model = build_model(&ModelConfig::default(), 1)?;
    let tcfg = TrainingConfig {
        epochs,
        ..TrainingConfig::default()
    };
    let start = Instant::now();
    let out = train_with_progress(&mut model, &train, &test, &tcfg, |e, r| {
        println!(
            "epoch {e:3}  train {:.4} / {:.4}  test {:.4} / {:.4}  [{:.1?}]",
            r.train_accuracy,
            r.train_loss,
            r.test_accuracy,
            r.test_loss,
            start.elapsed()
        )
    })?;
    println!("best epoch {} test acc {:.4}", out.history.best_epoch + 1, out.history.best().unwrap().test_accuracy);
    Ok(())
}
