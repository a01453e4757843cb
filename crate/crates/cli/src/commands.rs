use std::path::{Path, PathBuf};

use idc_core::data::synthetic::{synthetic_features, write_patch_dataset, FeatureSynthConfig, PatchStyle};
use idc_core::data::{
    decode_and_normalize, materialize, prepare, write_feature_file, CorpusManifest, DataError, DataSource, PadMode,
    Samples, Split,
};
use idc_core::metrics::{compute_metrics, confusion_matrix, export_history, MetricsReport};
use idc_core::model::{
    build_model, evaluate, load_checkpoint, save_checkpoint, train_with_progress, Backbone, CheckpointError,
    CheckpointMeta, Model, TrainError,
};
use idc_hitl::{run_validation_protocol_with, HitlService, ProtocolError};

use crate::config::RunConfig;
use crate::{CliError, Command};

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Prepare => cmd_prepare(cfg).map(|_| ()),
        Command::Train { manifest } => cmd_train(cfg, manifest.as_deref()).map(|_| ()),
        Command::Evaluate { checkpoint, manifest } => {
            cmd_evaluate(cfg, checkpoint.as_deref(), manifest.as_deref()).map(|_| ())
        }
        Command::Experiment { checkpoint, manifest } => {
            cmd_experiment(cfg, checkpoint.as_deref(), manifest.as_deref()).map(|_| ())
        }
        Command::Serve {
            checkpoint,
            manifest,
            port,
        } => cmd_serve(cfg, checkpoint.as_deref(), manifest.as_deref(), *port),
        Command::Predict { image, checkpoint } => cmd_predict(cfg, image, checkpoint.as_deref()),
        Command::Synth {
            out,
            per_class,
            overlap,
            look_alike,
            features,
        } => {
            let style = match look_alike {
                Some(rate) => PatchStyle::LookAlike { rate: *rate },
                None => PatchStyle::Tissue { overlap: *overlap },
            };
            cmd_synth(cfg, out, *per_class, style, *features)
        }
    }
}

fn data_input(e: DataError) -> CliError {
    CliError::Input(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io { .. } => CliError::Input(e.to_string()),
        other => CliError::State(other.to_string()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_manifest(cfg: &RunConfig, path: Option<&Path>) -> Result<CorpusManifest, CliError> {
    let path = path.map_or_else(|| cfg.manifest_path(), Path::to_path_buf);
    CorpusManifest::load(&path).map_err(|e| match e {
        DataError::Io { .. } => CliError::Input(format!("{e} (run `idc prepare` first)")),
        other => CliError::State(other.to_string()),
    })
}

fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<(Model, CheckpointMeta, PathBuf), CliError> {
    let path = path.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    if !path.exists() {
        return Err(CliError::Input(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, meta) = load_checkpoint(&path).map_err(checkpoint_err)?;
    Ok((model, meta, path))
}

/// The checkpoint must have been trained on this manifest.
fn check_pairing(meta: &CheckpointMeta, manifest: &CorpusManifest, ckpt: &Path) -> Result<(), CliError> {
    if let Some(digest) = &meta.manifest_digest {
        if *digest != manifest.digest() {
            return Err(CliError::State(format!(
                "{} was trained on manifest {}, but the given manifest hashes to {}",
                ckpt.display(),
                &digest[..12.min(digest.len())],
                &manifest.digest()[..12]
            )));
        }
    }
    Ok(())
}

fn check_model_fits_data(model_shape: &[usize], samples: &Samples) -> Result<(), CliError> {
    if model_shape != samples.sample_shape.as_slice() {
        return Err(CliError::Input(format!(
            "model expects samples shaped {model_shape:?} but the manifest provides {:?}",
            samples.sample_shape
        )));
    }
    Ok(())
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<CorpusManifest, CliError> {
    cfg.validate()?;
    let pipeline = cfg.pipeline();
    if let DataSource::PatchDir { root, .. } = &pipeline.source {
        if !root.is_dir() {
            return Err(CliError::Input(format!("dataset root {} does not exist", root.display())));
        }
    }
    let manifest = prepare(&pipeline).map_err(data_input)?;
    ensure_dir(&cfg.data_dir)?;
    let path = cfg.manifest_path();
    manifest.save(&path).map_err(data_input)?;
    write(&cfg.data_dir.join("config.toml"), cfg.to_toml())?;

    let (tr, te) = (manifest.counts.train, manifest.counts.test);
    let (neg, pos) = (tr.negative + te.negative, tr.positive + te.positive);
    let bal = manifest.balanced_counts();
    println!("{:<12} {:>10} {:>10} {:>10}", "stage", "negative", "positive", "total");
    println!("{:<12} {:>10} {:>10} {:>10}", "balanced", bal.negative, bal.positive, bal.total());
    println!("{:<12} {:>10} {:>10} {:>10}", "corpus", neg, pos, neg + pos);
    println!("{:<12} {:>10} {:>10} {:>10}", "train", tr.negative, tr.positive, tr.total());
    println!("{:<12} {:>10} {:>10} {:>10}", "test", te.negative, te.positive, te.total());
    println!("manifest {} ({})", path.display(), &manifest.digest()[..16]);
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig, manifest_path: Option<&Path>) -> Result<MetricsReport, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, manifest_path)?;
    let train = materialize(&manifest, Split::Train).map_err(data_input)?;
    let test = materialize(&manifest, Split::Test).map_err(data_input)?;
    let training = cfg.training();
    let mut model = build_model(&model_config_for(cfg, &train), training.seed).map_err(|e| CliError::Input(e.to_string()))?;
    check_model_fits_data(&model.sample_shape(), &train)?;
    ensure_dir(&cfg.data_dir)?;
    let history_path = cfg.data_dir.join("history.csv");

    let outcome = train_with_progress(&mut model, &train, &test, &training, |epoch, r| {
        println!(
            "epoch {epoch:>3}/{}  train acc {:.4} loss {:.4}  test acc {:.4} loss {:.4}",
            training.epochs, r.train_accuracy, r.train_loss, r.test_accuracy, r.test_loss
        );
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, batch, history }) => {
            if !history.epochs.is_empty() {
                export_history(&history, &history_path).map_err(|e| CliError::Input(e.to_string()))?;
            }
            return Err(CliError::Training(format!(
                "training diverged at epoch {epoch}, batch {batch}; {} completed epochs written to {}",
                history.epochs.len(),
                history_path.display()
            )));
        }
        Err(TrainError::Model(e)) => return Err(CliError::Input(e.to_string())),
        Err(e) => return Err(CliError::Training(e.to_string())),
    };
    export_history(&outcome.history, &history_path).map_err(|e| CliError::Input(e.to_string()))?;

    let mut meta = CheckpointMeta::new(outcome.best.config());
    meta.training_config = Some(training);
    meta.best_epoch = Some(outcome.history.best_epoch);
    meta.best_metrics = outcome.history.best().copied();
    meta.manifest_digest = Some(manifest.digest());
    let ckpt = cfg.checkpoint_path();
    let written = save_checkpoint(&outcome.best, &meta, &ckpt).map_err(checkpoint_err)?;
    let report = score(&outcome.best, &test)?;
    println!(
        "best epoch {} of {}; checkpoint {} (crc32 {:08x})",
        outcome.history.best_epoch + 1,
        outcome.history.epochs.len(),
        ckpt.display(),
        written.crc32
    );
    println!("{}", report.summary());
    Ok(report)
}

/// The configured model, with a feature backbone sized to the data.
fn model_config_for(cfg: &RunConfig, train: &Samples) -> idc_core::model::ModelConfig {
    let mut m = cfg.model.clone();
    if let (Backbone::FeatureFile { dim }, [d]) = (&mut m.backbone, train.sample_shape.as_slice()) {
        *dim = *d;
    }
    m
}

fn score(model: &Model, samples: &Samples) -> Result<MetricsReport, CliError> {
    let ev = evaluate(model, samples).map_err(|e| CliError::Input(e.to_string()))?;
    let preds: Vec<u8> = ev.predictions.iter().map(|p| p.label).collect();
    let cm = confusion_matrix(&preds, &samples.labels).map_err(|e| CliError::Input(e.to_string()))?;
    compute_metrics(&cm).map_err(|e| CliError::Input(e.to_string()))
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    let manifest = load_manifest(cfg, manifest_path)?;
    let (model, meta, ckpt) = load_model(cfg, checkpoint)?;
    check_pairing(&meta, &manifest, &ckpt)?;
    let test = materialize(&manifest, Split::Test).map_err(data_input)?;
    if model.sample_shape() != test.sample_shape {
        return Err(CliError::State(format!(
            "{} expects samples shaped {:?}, manifest provides {:?}",
            ckpt.display(),
            model.sample_shape(),
            test.sample_shape
        )));
    }
    let report = score(&model, &test)?;
    println!("{}", report.summary());
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    ensure_dir(&cfg.data_dir)?;
    write(&cfg.data_dir.join("metrics.json"), json + "\n")?;
    Ok(report)
}

pub fn cmd_experiment(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<idc_hitl::ValidationReport, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, manifest_path)?;
    let (model, meta, ckpt) = load_model(cfg, checkpoint)?;
    check_pairing(&meta, &manifest, &ckpt)?;
    let train = materialize(&manifest, Split::Train).map_err(data_input)?;
    let test = materialize(&manifest, Split::Test).map_err(data_input)?;
    check_model_fits_data(&model.sample_shape(), &test)?;
    let protocol = cfg.protocol();
    let report = run_validation_protocol_with(&model, &train, &test, &protocol, |g| {
        println!(
            "group {}: {}/{} correct after retraining",
            g.group_id, g.correct_after, g.sample_count
        );
    })
    .map_err(|e| match e {
        ProtocolError::Insufficient { .. } | ProtocolError::NoGroups => CliError::Input(e.to_string()),
        other => CliError::Training(other.to_string()),
    })?;
    ensure_dir(&cfg.data_dir)?;
    let csv = report.to_csv();
    write(&cfg.data_dir.join("experiment.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&cfg.data_dir.join("experiment.json"), json + "\n")?;
    println!("{}", report.to_text());
    print!("{csv}");
    Ok(report)
}

fn cmd_serve(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest_path: Option<&Path>,
    port: Option<u16>,
) -> Result<(), CliError> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, manifest_path)?;
    let service = HitlService::open(cfg.service(), manifest).map_err(|e| CliError::State(e.to_string()))?;
    if service.active().is_none() {
        let (model, meta, _) = load_model(cfg, checkpoint)?;
        let version = service.install(&model, &meta).map_err(|e| CliError::State(e.to_string()))?;
        println!("installed checkpoint as {version}");
    }
    let addr = format!("{}:{}", cfg.service.host, port.unwrap_or(cfg.service.port));
    let ui_dir = cfg.service.ui_dir.clone();
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::State(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot listen on {addr}: {e}")))?;
        println!("serving on http://{}", listener.local_addr().map_err(|e| CliError::State(e.to_string()))?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        idc_hitl::api::serve(service, ui_dir, listener, shutdown)
            .await
            .map_err(|e| CliError::State(e.to_string()))
    })
}

fn cmd_predict(cfg: &RunConfig, image: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let (model, _, _) = load_model(cfg, checkpoint)?;
    let pixels = decode_and_normalize(image, PadMode::Reject).map_err(data_input)?;
    let pred = model.predict(&pixels).map_err(|e| CliError::Input(e.to_string()))?;
    let out = serde_json::json!({
        "image": image.display().to_string(),
        "label": pred.label,
        "class_name": if pred.label == 1 { "IDC-positive" } else { "IDC-negative" },
        "probabilities": pred.probabilities,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path, per_class: usize, style: PatchStyle, features: Option<usize>) -> Result<(), CliError> {
    match features {
        Some(dim) => {
            let synth = FeatureSynthConfig {
                dim,
                ..FeatureSynthConfig::default()
            };
            let recs = synthetic_features(per_class, per_class, &synth, cfg.seed, out);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            write_feature_file(out, &recs).map_err(data_input)?;
            println!("wrote {} feature vectors to {}", recs.len(), out.display());
        }
        None => {
            let n = write_patch_dataset(out, per_class, per_class, style, cfg.seed)
                .map_err(data_input)?;
            println!("wrote {n} patches under {}", out.display());
        }
    }
    Ok(())
}
