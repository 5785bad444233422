use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rangeseg::dataset::{list, load, load_dir};
use rangeseg::evaluation::ConfusionMatrix;
use rangeseg::model::{Model, ModelConfig, Preset};
use rangeseg::pipeline::{bench as run_bench, infer as run_infer};
use rangeseg::projection::build_range_image;
use rangeseg::scan_io::{read_labels, read_scan, write_predictions};
use rangeseg::synth::generate_dataset;
use rangeseg::training::{compute_class_weights, train as run_train, write_metrics_csv};
use rangeseg::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;

pub fn out_dir(out: &Option<PathBuf>) -> anyhow::Result<&Path> {
    let dir = out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Validates the config, writes it to `out` and sizes the thread pool.
fn start(c: &RunConfig, out: &Path) -> anyhow::Result<()> {
    c.validate()?;
    c.write(out)?;
    if c.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    }
    Ok(())
}

pub fn synth(c: &RunConfig, out: &Path) -> anyhow::Result<()> {
    start(c, out)?;
    let files = generate_dataset(out, c.synth.scans, &c.scene())?;
    println!("wrote {} scans to {}", files.len(), out.display());
    Ok(())
}

pub fn project(c: &RunConfig, scan: &Path, out: &Path) -> anyhow::Result<()> {
    start(c, out)?;
    let cloud = read_scan(scan)?;
    let img = build_range_image(&cloud, &c.projection()?)?;
    let stem = scan
        .file_stem()
        .ok_or_else(|| Error::Config(format!("bad scan path {}", scan.display())))?;
    let path = out.join(stem).with_extension("range");
    img.export(&path)?;
    println!(
        "{}: {} points, {} of {} pixels filled",
        path.display(),
        cloud.len(),
        img.valid_count(),
        img.width() * img.height()
    );
    Ok(())
}

pub fn train(c: &RunConfig, data: &Path, val: Option<&Path>, save_every: usize, out: &Path) -> anyhow::Result<()> {
    start(c, out)?;
    let train_set = load_dir(data, true)?;
    let val_set = val.map(|v| load_dir(v, true)).transpose()?;
    let cfg = c.model_config();
    let loss = compute_class_weights(
        train_set.iter().filter_map(|s| s.labels.as_ref()),
        cfg.num_classes,
        c.loss.power,
        c.loss.ignore_id,
    )?;
    std::fs::write(
        out.join("class_weights.toml"),
        toml::to_string(&loss).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|source| Error::Io {
        path: out.join("class_weights.toml"),
        source,
    })?;
    let mut model = Model::<f32>::new(cfg, c.seed)?;
    println!(
        "training {} preset ({} parameters) on {} scans",
        c.model.preset.name(),
        model.count_parameters(),
        train_set.len()
    );
    let metrics_path = out.join("metrics.csv");
    let mut history = Vec::new();
    let tcfg = c.train_config();
    run_train(
        &mut model,
        &train_set,
        val_set.as_deref(),
        &loss,
        &tcfg,
        &c.geometry()?,
        |m, model| {
            history.push(m.clone());
            write_metrics_csv(create(&metrics_path)?, &history)?;
            match m.val_miou {
                Some(v) => println!("epoch {:4}  lr {:.6}  loss {:.5}  val mIoU {:.4}", m.epoch, m.lr, m.train_loss, v),
                None => println!("epoch {:4}  lr {:.6}  loss {:.5}", m.epoch, m.lr, m.train_loss),
            }
            let done = m.epoch + 1;
            if save_every > 0 && done % save_every == 0 && done < tcfg.epochs {
                model.save(out.join(format!("checkpoint-{done:04}.ckpt")), done as u32)?;
            }
            Ok(())
        },
    )?;
    model.save(out.join("final.ckpt"), tcfg.epochs as u32)?;
    Ok(())
}

pub fn infer(c: &RunConfig, checkpoint: &Path, data: &Path, knn: bool, out: &Path) -> anyhow::Result<()> {
    start(c, out)?;
    let (model, _) = Model::<f32>::load(checkpoint)?;
    let geom = c.geometry()?;
    model.config().check_image(geom.projection.width, geom.projection.height)?;
    let knn = knn.then_some(&c.knn);
    let entries = list(data)?;
    entries
        .par_iter()
        .try_for_each(|e| -> Result<()> {
            let s = load(e)?;
            let labels = run_infer(&model, &s.cloud, &geom, knn)?;
            write_predictions(&labels, out.join(format!("{}.label", e.id)))
        })
        .context("inference")?;
    println!("wrote {} prediction files to {}", entries.len(), out.display());
    Ok(())
}

pub fn eval(c: &RunConfig, pred: &Path, truth: &Path, out: &Path) -> anyhow::Result<()> {
    start(c, out)?;
    let (nc, ignore) = (c.model.num_classes, c.loss.ignore_id);
    let entries = list(truth)?;
    let parts = entries
        .par_iter()
        .map(|e| -> Result<ConfusionMatrix> {
            if e.labels.is_none() {
                return Err(Error::Invalid(format!("scan {} has no ground truth", e.id)));
            }
            let s = load(e)?;
            let p = read_labels(pred.join(format!("{}.label", e.id)), s.cloud.len())?;
            let mut cm = ConfusionMatrix::new(nc, ignore);
            cm.accumulate(s.labels.as_ref().expect("checked above"), &p)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(nc, ignore);
    for p in &parts {
        cm.merge(p)?;
    }
    let report = cm.iou()?;
    report.write_csv(create(&out.join("iou.csv"))?)?;
    for (i, v) in report.per_class.iter().enumerate() {
        match v {
            Some(v) => println!("class {i:3}  IoU {v:.4}"),
            None => println!("class {i:3}  absent"),
        }
    }
    println!("mIoU {:.4} over {} scans", report.mean, entries.len());
    Ok(())
}

pub fn bench(
    c: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    scans: Option<usize>,
    warmup: usize,
    out: &Path,
) -> anyhow::Result<()> {
    start(c, out)?;
    let mut entries = list(data)?;
    if let Some(n) = scans {
        entries.truncate(n.max(1));
    }
    let clouds = entries
        .par_iter()
        .map(|e| read_scan(&e.scan))
        .collect::<Result<Vec<_>>>()?;
    let model = checkpoint.map(|p| Model::<f32>::load(p).map(|m| m.0)).transpose()?;
    let report = run_bench(model.as_ref(), &clouds, &c.geometry()?, &c.knn, warmup)?;
    report.write_csv(create(&out.join("bench.csv"))?)?;
    println!("{:<14}{:>12}{:>12}", "stage", "median_ms", "p95_ms");
    for s in &report.stages {
        println!("{:<14}{:>12.3}{:>12.3}", s.stage, s.median_ms, s.p95_ms);
    }
    Ok(())
}

pub fn params(preset: Option<Preset>, num_classes: usize) -> anyhow::Result<()> {
    let presets = preset.map_or(Preset::ALL.to_vec(), |p| vec![p]);
    for p in presets {
        let m = Model::<f32>::new(ModelConfig::preset(p, num_classes), 0)?;
        println!("{} {}", p.name(), m.count_parameters());
    }
    Ok(())
}
