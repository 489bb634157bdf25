//! The pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use dermclass::augment::{augment_sample, cap_classes, class_weights, ClassWeights};
use dermclass::classes::{label_map, NUM_CLASSES};
use dermclass::dataset::{class_counts, encode_labels, impute_age, parse_manifest, split, SampleRecord};
use dermclass::image::{load_image, normalize};
use dermclass::metrics::confusion;
use dermclass::model::{
    build_network, init_parameters, load_checkpoint, Checkpoint, ModelError, Network, TrainingMeta,
};
use dermclass::synthetic::write_dataset;
use dermclass::training::{
    evaluate, fit, history_csv, resume_from_best, EpochRecord, LabeledImages, ResumeOutcome, Trainer,
    HISTORY_HEADER, PHASE2_CHECKPOINT,
};

use crate::config::{RunConfig, WeightSource};
use crate::context::RunContext;
use crate::data::{labeled_images, listing_csv, read_listing, ImageCache, ListingRow};

pub const PREPARE_DIR: &str = "prepare";
pub const TRAIN_DIR: &str = "train";
pub const RESUME_DIR: &str = "resume";
pub const EVALUATE_DIR: &str = "evaluate";
pub const PREVIEW_DIR: &str = "augment_preview";
pub const CACHE_FILE: &str = "prepare/cache.bin";

fn rows(records: &[SampleRecord]) -> Vec<ListingRow> {
    records
        .iter()
        .map(|r| ListingRow {
            image_id: r.image_id.clone(),
            label: r.dx.code() as usize,
        })
        .collect()
}

fn named_counts(counts: &[usize]) -> Map<String, Value> {
    label_map().into_iter().zip(counts).map(|(n, &c)| (n, c.into())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct WeightsFile {
    pub source: WeightSource,
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Parses, imputes, splits and caps the manifest, then writes the listings,
/// class weights, the report and the resized-image cache.
pub fn prepare(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let manifest = &cfg.paths.manifest;
    let bytes = fs::read(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let records = parse_manifest(&bytes).with_context(|| format!("in {}", manifest.display()))?;
    let missing_ages = records.iter().filter(|r| r.age.is_none()).count();
    let records = impute_age(encode_labels(records)).with_context(|| format!("in {}", manifest.display()))?;
    let imputed_age = records.iter().find_map(|r| r.age).filter(|_| missing_ages > 0);

    let parts = split(&records, cfg.split.ratio, cfg.split.seed, cfg.split.stratified)?;
    let capped = cap_classes(&parts.train, cfg.cap, cfg.split.seed);
    let precap_counts = class_counts(&parts.train);
    let capped_counts = class_counts(&capped);
    let (counts, weights) = match cfg.class_weight_source {
        WeightSource::Capped => (capped_counts.to_vec(), class_weights(&capped_counts)?),
        WeightSource::Precap => (precap_counts.to_vec(), class_weights(&precap_counts)?),
        WeightSource::None => (capped_counts.to_vec(), ClassWeights::uniform(NUM_CLASSES)),
    };

    ctx.write("prepare/train.csv", listing_csv(&rows(&parts.train)))?;
    ctx.write("prepare/validation.csv", listing_csv(&rows(&parts.validation)))?;
    ctx.write("prepare/train_capped.csv", listing_csv(&rows(&capped)))?;
    ctx.write_json(
        "prepare/class_weights.json",
        &WeightsFile {
            source: cfg.class_weight_source,
            classes: label_map(),
            counts,
            weights: weights.weights,
        },
    )?;
    let report = json!({
        "records": records.len(),
        "missing_ages": missing_ages,
        "imputed_age": imputed_age,
        "train": parts.train.len(),
        "validation": parts.validation.len(),
        "train_capped": capped.len(),
        "counts": {
            "all": named_counts(&class_counts(&records)),
            "train": named_counts(&precap_counts),
            "validation": named_counts(&class_counts(&parts.validation)),
            "train_capped": named_counts(&capped_counts),
        },
    });
    ctx.write_json("prepare/report.json", &report)?;

    let ids: Vec<String> = capped
        .iter()
        .chain(&parts.validation)
        .map(|r| r.image_id.clone())
        .collect();
    let cache = ImageCache::build(&cfg.paths.image_dir, &ids, cfg.network.input_hw)?;
    ctx.write(CACHE_FILE, cache.to_bytes(&ids))?;
    println!(
        "prepared {} records: {} train ({} after capping), {} validation",
        records.len(),
        parts.train.len(),
        capped.len(),
        parts.validation.len()
    );
    Ok(())
}

fn read_weights(ctx: &RunContext) -> Result<ClassWeights> {
    let path = ctx.path("prepare/class_weights.json");
    let file: WeightsFile = serde_json::from_slice(
        &fs::read(&path).with_context(|| format!("reading {}; run prepare first", path.display()))?,
    )?;
    Ok(ClassWeights { weights: file.weights })
}

fn load_cache(ctx: &RunContext) -> Result<Option<ImageCache>> {
    let path = ctx.path(CACHE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    ImageCache::load(&path).map(Some)
}

struct Splits {
    train: LabeledImages,
    validation: LabeledImages,
}

fn load_splits(cfg: &RunConfig, ctx: &RunContext) -> Result<Splits> {
    let train_rows = read_listing(&ctx.path("prepare/train_capped.csv")).context("run prepare first")?;
    let val_rows = read_listing(&ctx.path("prepare/validation.csv")).context("run prepare first")?;
    let cache = load_cache(ctx)?;
    let size = cfg.network.input_hw;
    Ok(Splits {
        train: labeled_images(&train_rows, &cfg.paths.image_dir, size, cache.as_ref())?,
        validation: labeled_images(&val_rows, &cfg.paths.image_dir, size, cache.as_ref())?,
    })
}

/// Validation metrics of `net` written as confusion CSVs and per-class TPR
/// JSON under `dir`; returns the summary block.
fn metrics_bundle(
    ctx: &mut RunContext,
    dir: &str,
    net: &Network<f32>,
    data: &LabeledImages,
    labels: &[String],
    batch: usize,
) -> Result<Value> {
    let eval = evaluate(net, data, batch)?;
    let cm = confusion(&eval.predictions, &data.labels, labels)?;
    let tpr: Map<String, Value> = labels
        .iter()
        .cloned()
        .zip(cm.per_class_tpr())
        .map(|(n, t)| (n, t.into()))
        .collect();
    ctx.write(&format!("{dir}/confusion.csv"), cm.to_csv())?;
    ctx.write(&format!("{dir}/confusion_normalized.csv"), cm.normalize_rows().to_csv())?;
    ctx.write_json(&format!("{dir}/per_class_tpr.json"), &tpr)?;
    Ok(json!({
        "samples": data.len(),
        "accuracy": eval.accuracy,
        "loss": eval.loss,
        "per_class_tpr": tpr,
    }))
}

fn check_classes(cfg: &RunConfig) -> Result<()> {
    if cfg.network.num_classes != NUM_CLASSES {
        bail!(ModelError::ShapeMismatch(format!(
            "network.num_classes is {}, the label map has {NUM_CLASSES} classes",
            cfg.network.num_classes
        )));
    }
    Ok(())
}

fn print_epoch(phase: u32, r: &EpochRecord) {
    println!(
        "phase {phase} epoch {:>3}: loss {:.4} acc {:.4} | val loss {:.4} val acc {:.4}",
        r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
    );
}

/// Phase one: trains a freshly initialized network with early stopping.
pub fn train(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    check_classes(cfg)?;
    let weights = read_weights(ctx)?;
    let data = load_splits(cfg, ctx)?;
    let mut graph = build_network(&cfg.network)?;
    if let Some(n) = cfg.train.fine_tune_last_n {
        graph.freeze_for_fine_tuning(n)?;
    }
    let net = init_parameters(graph, cfg.network.seed);
    let mut trainer = Trainer::new(
        net,
        cfg.optimizer.clone(),
        &data.train,
        &data.validation,
        cfg.augment.clone(),
        weights,
        cfg.train_config(),
    )?;
    let dir = ctx.path(TRAIN_DIR);
    fs::create_dir_all(&dir)?;
    let outcome = fit(&mut Logged(&mut trainer, 1), &cfg.train_config(), &dir)?;
    ctx.write("train/history.csv", history_csv(&outcome.state.history))?;
    let Some(best) = outcome.best_checkpoint else {
        bail!("training ran no epochs; no checkpoint to keep");
    };
    let best_path = ctx.path("train/best.ckpt");
    fs::rename(&best, &best_path)?;
    ctx.record("train/best.ckpt");
    if let Some(e) = outcome.stopped_early {
        ctx.note("early_stop_epoch", e);
    }

    let (ckpt, best_net) = load_checkpoint(&best_path)?;
    let metrics = metrics_bundle(ctx, TRAIN_DIR, &best_net, &data.validation, &ckpt.label_map, cfg.train.eval_batch_size)?;
    let summary = json!({
        "phase": 1,
        "epochs_run": outcome.state.history.len(),
        "best_epoch": outcome.state.best_epoch,
        "best_val_accuracy": outcome.state.best_metric,
        "early_stop_epoch": outcome.stopped_early,
        "checkpoint": "train/best.ckpt",
        "validation": metrics,
    });
    ctx.write_json("train/summary.json", &summary)?;
    println!(
        "best validation accuracy {:.4} at epoch {}",
        outcome.state.best_metric, outcome.state.best_epoch
    );
    Ok(())
}

/// Prints each epoch as it completes.
struct Logged<'a, R>(&'a mut R, u32);

impl<R: dermclass::training::EpochRunner> dermclass::training::EpochRunner for Logged<'_, R> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord, dermclass::training::TrainError> {
        let r = self.0.run_epoch(epoch)?;
        print_epoch(self.1, &r);
        Ok(r)
    }

    fn save_checkpoint(&mut self, path: &Path, meta: TrainingMeta) -> Result<(), dermclass::training::TrainError> {
        self.0.save_checkpoint(path, meta)
    }

    fn trainable_layers(&self) -> Vec<String> {
        self.0.trainable_layers()
    }
}

/// Summary of a two-phase run from the restored checkpoint's metadata and
/// the second phase's outcome.
pub fn resume_summary(meta: &TrainingMeta, outcome: &ResumeOutcome) -> Value {
    let history = &outcome.phase.state.history;
    let phase2_best = history
        .iter()
        .map(|r| (r.val_accuracy, r.epoch))
        .fold(None, |best: Option<(f64, usize)>, (m, e)| match best {
            Some((b, _)) if b >= m => best,
            _ => Some((m, e)),
        });
    json!({
        "phase1": {
            "best_epoch": meta.epoch,
            "best_val_accuracy": meta.best_val_accuracy,
        },
        "phase2": {
            "epochs_run": history.len(),
            "best_epoch": phase2_best.map(|b| b.1),
            "best_val_accuracy": phase2_best.map(|b| b.0),
            "early_stop_epoch": outcome.phase.stopped_early,
        },
        "final": {
            "best_epoch": outcome.phase.state.best_epoch,
            "best_val_accuracy": outcome.final_best_metric,
            "improved": outcome.phase.best_checkpoint.is_some(),
        },
    })
}

fn phased_history(phase1: Option<&str>, phase2: &[EpochRecord]) -> String {
    let mut out = format!("phase,{HISTORY_HEADER}\n");
    if let Some(text) = phase1 {
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            out.push_str(&format!("1,{line}\n"));
        }
    }
    for r in phase2 {
        out.push_str(&format!("2,{}\n", r.csv_row()));
    }
    out
}

/// Phase two: restores the best checkpoint and trains `resume_epochs` more.
pub fn resume(cfg: &RunConfig, ctx: &mut RunContext, checkpoint: Option<&Path>) -> Result<()> {
    check_classes(cfg)?;
    let input = checkpoint.map_or_else(|| ctx.path("train/best.ckpt"), Path::to_path_buf);
    let restored = Checkpoint::load(&input).with_context(|| format!("loading {}", input.display()))?;
    let weights = read_weights(ctx)?;
    let data = load_splits(cfg, ctx)?;
    let dir = ctx.path(RESUME_DIR);
    fs::create_dir_all(&dir)?;
    // A stale second-phase checkpoint must not be mistaken for this run's.
    fs::remove_file(dir.join(PHASE2_CHECKPOINT)).ok();

    let (outcome, _) = resume_from_best(
        &input,
        &data.train,
        &data.validation,
        cfg.augment.clone(),
        weights,
        cfg.optimizer.clone(),
        &cfg.train_config(),
        cfg.train.resume_epochs,
        &dir,
    )?;
    for r in &outcome.phase.state.history {
        print_epoch(2, r);
    }
    let final_path = ctx.path("resume/final.ckpt");
    if outcome.phase.best_checkpoint.is_some() {
        fs::rename(dir.join(PHASE2_CHECKPOINT), &final_path)?;
    } else {
        fs::copy(&input, &final_path)?;
    }
    ctx.record("resume/final.ckpt");
    if let Some(e) = outcome.phase.stopped_early {
        ctx.note("early_stop_epoch", e);
    }

    let phase1 = fs::read_to_string(ctx.path("train/history.csv")).ok();
    ctx.write(
        "resume/history.csv",
        phased_history(phase1.as_deref(), &outcome.phase.state.history),
    )?;
    let (ckpt, net) = load_checkpoint(&final_path)?;
    let metrics = metrics_bundle(ctx, RESUME_DIR, &net, &data.validation, &ckpt.label_map, cfg.train.eval_batch_size)?;
    let mut summary = resume_summary(&restored.metadata, &outcome);
    summary["checkpoint"] = "resume/final.ckpt".into();
    summary["validation"] = metrics;
    ctx.write_json("resume/summary.json", &summary)?;
    println!("final best validation accuracy {:.4}", outcome.final_best_metric);
    Ok(())
}

fn default_checkpoint(ctx: &RunContext) -> PathBuf {
    let resumed = ctx.path("resume/final.ckpt");
    if resumed.exists() {
        resumed
    } else {
        ctx.path("train/best.ckpt")
    }
}

/// Inference-mode metrics of a checkpoint on a listing.
pub fn evaluate_cmd(cfg: &RunConfig, ctx: &mut RunContext, checkpoint: Option<&Path>, listing: Option<&Path>) -> Result<()> {
    let ckpt_path = checkpoint.map_or_else(|| default_checkpoint(ctx), Path::to_path_buf);
    let listing = listing.map_or_else(|| ctx.path("prepare/validation.csv"), Path::to_path_buf);
    let (ckpt, net) = load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    if net.num_classes() != cfg.network.num_classes || net.num_classes() != ckpt.label_map.len() {
        bail!(ModelError::ShapeMismatch(format!(
            "checkpoint has {} classes, config {} and label map {}",
            net.num_classes(),
            cfg.network.num_classes,
            ckpt.label_map.len()
        )));
    }
    let rows = read_listing(&listing)?;
    let cache = load_cache(ctx)?;
    let size = net.graph.input_shape().h;
    let data = labeled_images(&rows, &cfg.paths.image_dir, size, cache.as_ref())?;
    let metrics = metrics_bundle(ctx, EVALUATE_DIR, &net, &data, &ckpt.label_map, cfg.train.eval_batch_size)?;
    let summary = json!({
        "checkpoint": ckpt_path,
        "listing": listing,
        "metrics": metrics,
    });
    ctx.write_json("evaluate/metrics.json", &summary)?;
    println!("accuracy {:.4} on {} samples", metrics["accuracy"].as_f64().unwrap_or(0.0), data.len());
    Ok(())
}

pub const TRANSFORM_HEADER: &str = "index,rotation_deg,shear_deg,tx,ty,hflip,vflip";

/// Writes `n` augmented copies of one image and the sampled parameters.
pub fn augment_preview(cfg: &RunConfig, ctx: &mut RunContext, image_id: &str, n: usize) -> Result<()> {
    let path = crate::data::find_image(&cfg.paths.image_dir, image_id)?;
    let img = normalize(&load_image(&path)?)?;
    let mut log = format!("{TRANSFORM_HEADER}\n");
    for i in 0..n {
        let (out, p) = augment_sample(&img, &cfg.augment, 0, i)?;
        let rel = format!("{PREVIEW_DIR}/{image_id}_{i:03}.png");
        let dest = ctx.path(&rel);
        fs::create_dir_all(dest.parent().expect("nested path"))?;
        out.save_png(&dest)?;
        ctx.record(&rel);
        log.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            p.rotation_deg, p.shear_deg, p.tx, p.ty, p.hflip, p.vflip
        ));
    }
    ctx.write(&format!("{PREVIEW_DIR}/transforms.csv"), log)?;
    println!("wrote {n} augmented copies of {image_id}");
    Ok(())
}

/// Writes the synthetic dataset to the configured manifest and image paths.
pub fn gen_synthetic(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let out = write_dataset(&cfg.synthetic, &cfg.paths.manifest, &cfg.paths.image_dir)?;
    ctx.note("rows", out.rows);
    ctx.note("manifest", out.manifest.display().to_string());
    println!("wrote {} synthetic images to {}", out.rows, out.image_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dermclass::training::{resume_phase, EpochRunner, TrainConfig, TrainError};

    struct Replay(Vec<f64>, usize);

    impl EpochRunner for Replay {
        fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord, TrainError> {
            let m = self.0[epoch - 1 - self.1];
            Ok(EpochRecord {
                epoch,
                train_loss: 0.5,
                train_accuracy: m,
                val_loss: 0.5,
                val_accuracy: m,
            })
        }

        fn save_checkpoint(&mut self, _: &Path, _: TrainingMeta) -> Result<(), TrainError> {
            Ok(())
        }
    }

    #[test]
    fn summary_shows_both_phase_bests() {
        let meta = TrainingMeta {
            epoch: 30,
            best_val_accuracy: 0.734,
            phase: 1,
            trainable_layers: vec![],
        };
        let mut r = Replay(vec![0.75, 0.789, 0.77], 30);
        let out = resume_phase(&mut r, Path::new("p1.ckpt"), &meta, &TrainConfig::default(), 3, Path::new("d")).unwrap();
        let s = resume_summary(&meta, &out);
        assert_eq!(s["phase1"]["best_val_accuracy"], 0.734);
        assert_eq!(s["phase2"]["best_val_accuracy"], 0.789);
        assert_eq!(s["phase2"]["best_epoch"], 32);
        assert_eq!(s["final"]["best_val_accuracy"], 0.789);
        assert!(s["final"]["best_val_accuracy"].as_f64() >= s["phase1"]["best_val_accuracy"].as_f64());
    }

    #[test]
    fn phase_column_prefixes_history() {
        let p2 = [EpochRecord {
            epoch: 3,
            train_loss: 1.0,
            train_accuracy: 0.5,
            val_loss: 1.0,
            val_accuracy: 0.25,
        }];
        let text = phased_history(Some("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n1,2,0.5,2,0.5\n"), &p2);
        assert_eq!(
            text,
            "phase,epoch,train_loss,train_accuracy,val_loss,val_accuracy\n1,1,2,0.5,2,0.5\n2,3,1,0.5,1,0.25\n"
        );
    }
}
