use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use runet_core::eval::{
    boxplot_svg, ensemble, evaluate_testset, line_plot_svg, metrics_csv, moving_average, predict_volume,
    read_probability, summarize, summary_csv, write_probability, Method,
};
use runet_core::model::{parameter_matched_unet, Model};
use runet_core::tensor::Fault;
use runet_core::train::{
    fit, load_checkpoint, parse_curves_csv, prepare, FitOutput, Trainer,
};
use runet_core::verify::{run_all, VerifyOptions};
use runet_core::volume::{
    generate_dataset, pad_to_canonical, read_manifest, read_volume, split_dataset, write_manifest, write_volume,
    ManifestEntry, Orientation, Split, VolumeSample,
};
use runet_core::Error;

use crate::config::{Arch, RunConfig};

/// Usage problems exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

const MANIFEST: &str = "manifest.csv";
const CONFIG: &str = "config.txt";

fn write_config(dir: &Path, cfg: &RunConfig) -> CliResult {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG), cfg.to_text())?;
    Ok(())
}

pub fn generate(cfg: &RunConfig, out: &Path) -> CliResult {
    let volumes = generate_dataset(&cfg.generator, cfg.volumes, cfg.seed)?;
    let (train, val, _) = split_dataset(cfg.volumes, cfg.split, cfg.seed)?;
    std::fs::create_dir_all(out.join("volumes"))?;
    write_config(out, cfg)?;
    let mut entries = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let rel = PathBuf::from("volumes").join(format!("{}.vol", v.id));
        write_volume(&out.join(&rel), v)?;
        let split = if train.contains(&i) {
            Split::Train
        } else if val.contains(&i) {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            id: v.id.clone(),
            path: rel,
            split,
        });
    }
    write_manifest(&out.join(MANIFEST), &entries)?;
    let count = |s| entries.iter().filter(|e| e.split == s).count();
    eprintln!(
        "wrote {} volumes to {} (train {}, val {}, test {})",
        entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn load_split(data: &Path, split: Option<Split>) -> CliResult<Vec<VolumeSample>> {
    let manifest = read_manifest(&data.join(MANIFEST))?;
    let mut out = Vec::new();
    for e in manifest.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let mut v = read_volume(&data.join(&e.path))?;
        v.id = e.id.clone();
        out.push(v);
    }
    Ok(out)
}

/// Coronal and sagittal training crops deep volumes to `crop_depth` slices.
fn crop_for(cfg: &RunConfig, volumes: Vec<VolumeSample>) -> CliResult<Vec<VolumeSample>> {
    match cfg.generator.crop_depth {
        Some(d) if cfg.orientation != Orientation::Axial => volumes
            .into_iter()
            .map(|v| {
                let [x, y, z] = v.dims();
                if z > d {
                    pad_to_canonical(&v, [x, y, d]).map_err(CliError::from)
                } else {
                    Ok(v)
                }
            })
            .collect(),
        _ => Ok(volumes),
    }
}

pub fn train(cfg: &RunConfig, data: &Path, run: &Path, resume: bool, fault: Option<Fault>) -> CliResult {
    let train_set = crop_for(cfg, load_split(data, Some(Split::Train))?)?;
    let val_set = crop_for(cfg, load_split(data, Some(Split::Val))?)?;
    let first = train_set
        .first()
        .ok_or_else(|| CliError::Usage(format!("{} has no training volumes", data.display())))?;
    if val_set.is_empty() {
        return Err(CliError::Usage(format!("{} has no validation volumes", data.display())));
    }
    let output = FitOutput { dir: run };
    let mut trainer = if resume && output.last().exists() {
        let last = load_checkpoint(&output.last())?;
        let best = if output.best().exists() {
            Some(load_checkpoint(&output.best())?)
        } else {
            None
        };
        eprintln!("resuming {} at epoch {}", run.display(), last.epoch);
        Trainer::resume(last, best, cfg.train.clone())?
    } else {
        if output.curves().exists() {
            std::fs::remove_file(output.curves())?;
        }
        let mut spec = cfg.network.clone();
        spec.input_size = cfg.orientation.slice_shape(first.dims());
        if cfg.arch == Arch::Unet {
            spec = parameter_matched_unet(&spec)?;
        }
        let model = Model::init(&spec, cfg.seed)?;
        Trainer::new(model, cfg.train.clone(), cfg.orientation, cfg.direction)?
    };
    trainer.inject_fault(fault);
    write_config(run, cfg)?;
    let train_data = prepare(&train_set, trainer.orientation, trainer.direction);
    let val_data = prepare(&val_set, trainer.orientation, trainer.direction);
    let outcome = fit(&mut trainer, &train_data, &val_data, Some(output), |t, stats| {
        let v = stats.validations.last().map(|(_, v)| format!(" val_loss {:.4} val_dsi {:.4}", v.loss, v.dsi));
        eprintln!(
            "epoch {:>3}  steps {:>4}  train_loss {:.4}{}",
            t.epoch,
            stats.steps.len(),
            stats.mean_loss(),
            v.unwrap_or_default()
        );
    });
    let outcome = match outcome {
        Err(e @ Error::NonFinite { .. }) => {
            eprintln!("training aborted at step {}: {e}", trainer.step + 1);
            return Err(e.into());
        }
        other => other?,
    };
    let steps_per_epoch = train_data
        .iter()
        .map(|v| v.slices.len() / cfg.train.batch_size(trainer.orientation))
        .sum::<usize>()
        .max(1);
    let curves = parse_curves_csv(&std::fs::read_to_string(output.curves())?)?;
    std::fs::write(run.join("curves.svg"), curves_svg(&curves, steps_per_epoch))?;
    eprintln!(
        "best validation DSI {:.4}; checkpoints in {}",
        outcome.best.best_val_dsi,
        run.display()
    );
    Ok(())
}

fn curves_svg(rows: &[runet_core::train::CurveRow], window: usize) -> String {
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let loss: Vec<f64> = rows.iter().map(|r| r.train_loss).collect();
    let smooth = moving_average(&loss, window);
    let pair = |ys: &[f64]| steps.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>();
    let val = |f: fn(&runet_core::train::CurveRow) -> Option<f64>| {
        rows.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect::<Vec<_>>()
    };
    line_plot_svg(
        "training curves",
        &[
            ("train loss", "#9ab3d5", pair(&loss)),
            ("train loss, 1-epoch moving average", "#1f4e9c", pair(&smooth)),
            ("validation loss", "#d35400", val(|r| r.val_loss)),
            ("validation DSI", "#27ae60", val(|r| r.val_dsi)),
        ],
    )
}

fn prob_name(id: &str, o: Orientation) -> String {
    format!("{id}.{o}.prob")
}

pub fn predict(checkpoint: &Path, volume: Option<&Path>, data: Option<&Path>, split: Option<Split>, out: &Path) -> CliResult {
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.model()?;
    let (o, d) = (ck.orientation, ck.direction);
    match (volume, data) {
        (Some(v), None) => {
            let sample = read_volume(v)?;
            let p = predict_volume(&model, &sample.image, o, d)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_probability(out, &p)?;
            eprintln!("wrote {}", out.display());
        }
        (None, Some(dir)) => {
            std::fs::create_dir_all(out)?;
            let volumes = load_split(dir, split)?;
            for v in &volumes {
                let p = predict_volume(&model, &v.image, o, d)?;
                write_probability(&out.join(prob_name(&v.id, o)), &p)?;
            }
            eprintln!("wrote {} {o} predictions to {}", volumes.len(), out.display());
        }
        _ => return Err(CliError::Usage("predict needs exactly one of --volume or --data".into())),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: &Path, predictions: &Path, split: Split, out: &Path) -> CliResult {
    let test = load_split(data, Some(split))?;
    if test.is_empty() {
        return Err(CliError::Usage(format!("no {} volumes in {}", split.name(), data.display())));
    }
    let mut maps = BTreeMap::new();
    let mut present = Vec::new();
    for o in Orientation::ALL {
        let method = method_of(o);
        for v in &test {
            let p = predictions.join(prob_name(&v.id, o));
            if p.exists() {
                maps.insert((v.id.clone(), method), read_probability(&p)?);
                if !present.contains(&method) {
                    present.push(method);
                }
            }
        }
    }
    if present.is_empty() {
        return Err(CliError::Usage(format!("no predictions found in {}", predictions.display())));
    }
    if present.len() == 3 {
        for v in &test {
            let per: Option<Vec<_>> = Orientation::ALL
                .iter()
                .map(|&o| maps.get(&(v.id.clone(), method_of(o))).cloned())
                .collect();
            if let Some(per) = per {
                maps.insert((v.id.clone(), Method::Ensemble), ensemble(&per, Some(&v.fov), cfg.ensemble)?);
            }
        }
        present.push(Method::Ensemble);
    }
    let report = evaluate_testset(&maps, &test, &present, cfg.threshold, &cfg.post)?;
    std::fs::create_dir_all(out)?;
    write_config(out, cfg)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&report.rows))?;
    let summary = summarize(&report.rows);
    std::fs::write(out.join("summary.csv"), summary_csv(&summary))?;
    std::fs::write(out.join("boxplots.svg"), boxplot_svg(&summary))?;
    if !report.missing.is_empty() {
        let mut text = String::from("volume_id,method\n");
        for (id, m) in &report.missing {
            eprintln!("missing prediction: {id} ({m})");
            text.push_str(&format!("{id},{m}\n"));
        }
        std::fs::write(out.join("missing.csv"), text)?;
    }
    for row in summary.iter().filter(|r| r.metric == "dsi") {
        eprintln!("{:<9} {:<13} median DSI {:.4}", row.method, row.stage.name(), row.median);
    }
    Ok(())
}

fn method_of(o: Orientation) -> Method {
    match o {
        Orientation::Axial => Method::Axial,
        Orientation::Coronal => Method::Coronal,
        Orientation::Sagittal => Method::Sagittal,
    }
}

/// Returns whether every check passed.
pub fn verify(fault: Option<Fault>) -> CliResult<bool> {
    let checks = run_all(&VerifyOptions {
        fault,
        ..VerifyOptions::default()
    })?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        println!(
            "{} {:<48} measured {:.3e}  tolerance {:.0e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    println!("{} of {} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    Ok(ok)
}
