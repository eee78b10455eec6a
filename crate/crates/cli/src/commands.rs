//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtuda_core::config::RunConfig;
use mtuda_core::data::{self, Dataset, Sample, Split};
use mtuda_core::dcam::{self, DcamState, Direction};
use mtuda_core::error::{Error, Result};
use mtuda_core::metrics::{self, EvalReport};
use mtuda_core::networks::DomainTag;
use mtuda_core::trainer::{self, Ablation, TrainState};

pub fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let ds = data::make_dataset(&cfg.synth)?;
    data::save_dataset(&ds, out)?;
    cfg.echo_into(out)?;
    println!(
        "synth: wrote {} samples ({} labeled source) to {}",
        ds.samples.len(),
        ds.labeled_source().len(),
        out.display()
    );
    Ok(())
}

fn parse_domain(s: &str) -> Result<DomainTag> {
    match s.to_ascii_lowercase().as_str() {
        "a" | "source" => Ok(DomainTag::Source),
        "b" | "target" => Ok(DomainTag::Target),
        other => Err(Error::validation(format!("unknown domain `{other}`"))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::validation(format!("unknown split `{other}`"))),
    }
}

pub fn ingest(
    volumes: &Path,
    out: &Path,
    roi: usize,
    domain: &str,
    split: &str,
    withhold_labels: bool,
) -> Result<()> {
    let domain = parse_domain(domain)?;
    let split = parse_split(split)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(volumes)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mtvl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!(
            "no .mtvl volumes under {}",
            volumes.display()
        )));
    }
    let mut samples = Vec::new();
    let mut padded = 0usize;
    for path in &paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("volume")
            .to_string();
        let (vol, labels, meta) = data::volume::load_volume(path)?;
        let stack = data::preprocess_volume(&vol, &meta, labels.as_ref(), roi)?;
        padded += stack.padded as usize;
        for (idx, image) in stack.slices.iter().enumerate() {
            let label = stack
                .labels
                .as_ref()
                .filter(|_| !withhold_labels)
                .map(|l| l[idx].clone());
            samples.push(Sample {
                id: format!("{stem}_{idx:04}"),
                domain,
                split,
                labeled: label.is_some(),
                volume: stem.clone(),
                slice: idx,
                image: image.clone(),
                label,
            });
        }
    }
    let ds = Dataset {
        num_classes: data::NUM_CLASSES,
        samples,
    };
    data::save_dataset(&ds, out)?;
    if padded > 0 {
        eprintln!("warning: {padded} volume(s) smaller than the ROI were padded");
    }
    println!(
        "ingest: {} volumes -> {} slices in {}",
        paths.len(),
        ds.samples.len(),
        out.display()
    );
    Ok(())
}

pub fn train_dcam(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    log: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let ds = data::load_dataset(data_dir)?;
    let mut log_file = match log {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            Some(fs::File::create(p)?)
        }
        None => None,
    };
    let mut last_print = 0u64;
    let state = dcam::train_dcam(&cfg.dcam, &ds, |r| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", serde_json::to_string(r).expect("report json"));
        }
        if r.step >= last_print {
            eprintln!(
                "dcam step {:>5}: cyc {:.4}/{:.4} adv {:.4}/{:.4} d {:.4}/{:.4}",
                r.step, r.cyc_s, r.cyc_t, r.g_adv_s, r.g_adv_t, r.d_s, r.d_t
            );
            last_print = r.step + 50;
        }
    })?;
    state.save(out)?;
    println!("train-dcam: saved checkpoint to {}", out.display());
    Ok(())
}

pub fn translate(ckpt: &Path, direction: &str, input: &Path, out: &Path) -> Result<()> {
    let direction = match direction.to_ascii_lowercase().as_str() {
        "s2t" => Direction::S2t,
        "t2s" => Direction::T2s,
        other => Err(Error::validation(format!("unknown direction `{other}`")))?,
    };
    let state = DcamState::load(ckpt)?;
    let ds = data::load_dataset(input)?;
    let want = match direction {
        Direction::S2t => DomainTag::Source,
        Direction::T2s => DomainTag::Target,
    };
    let suffix = match direction {
        Direction::S2t => "s2t",
        Direction::T2s => "t2s",
    };
    let mut samples = Vec::new();
    for smp in ds.samples.iter().filter(|s| s.domain == want) {
        let (h, w) = smp.image.dim();
        let mut x = ndarray::Array4::<f32>::zeros((1, 1, h, w));
        x.slice_mut(ndarray::s![0, 0, .., ..]).assign(&smp.image);
        let translated = dcam::translate(
            &state,
            &mtuda_core::networks::ImageBatch::new(x, smp.domain),
            direction,
        )?;
        samples.push(Sample {
            id: format!("{}.{suffix}", smp.id),
            domain: translated.domain,
            split: smp.split,
            labeled: smp.labeled,
            volume: format!("{}.{suffix}", smp.volume),
            slice: smp.slice,
            image: translated.data.slice(ndarray::s![0, 0, .., ..]).to_owned(),
            label: smp.label.clone(),
        });
    }
    if samples.is_empty() {
        return Err(Error::validation(format!(
            "no {want:?}-appearance samples in {}",
            input.display()
        )));
    }
    let count = samples.len();
    data::save_dataset(
        &Dataset {
            num_classes: ds.num_classes,
            samples,
        },
        out,
    )?;
    println!("translate: wrote {count} samples to {}", out.display());
    Ok(())
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(Ablation::Full),
        "ns" => Ok(Ablation::Ns),
        "nt" => Ok(Ablation::Nt),
        "ns-mse" | "ns_mse" => Ok(Ablation::NsMse),
        "supervised" => Ok(Ablation::Supervised),
        other => Err(Error::validation(format!(
            "unknown ablation `{other}` (expected full|ns|nt|ns-mse|supervised)"
        ))),
    }
}

pub fn train(
    config: &Path,
    data_dir: &Path,
    dcam_ckpt: &Path,
    out: &Path,
    seed: Option<u64>,
    ablation: Option<&str>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(a) = ablation {
        cfg.train.ablation = parse_ablation(a)?;
    }
    let ds = data::load_dataset(data_dir)?;
    let dcam_state = DcamState::load(dcam_ckpt)?;
    cfg.echo_into(out)?;
    let (state, reports) = trainer::fit(&cfg.train, &ds, &dcam_state, Some(out))?;
    let mut metrics_log = fs::File::create(out.join("metrics.ndjson"))?;
    for r in &reports {
        writeln!(metrics_log, "{}", serde_json::to_string(r)?)?;
    }
    let last = reports.last().expect("at least one step");
    println!(
        "train: {} steps done (seg {:.4}, kd {:.6}, con {:.6}); run dir {}",
        state.step,
        last.seg,
        last.kd,
        last.con,
        out.display()
    );
    Ok(())
}

fn resolve_student_ckpt(ckpt: &Path) -> Result<PathBuf> {
    if ckpt.is_dir() {
        let p = ckpt.join("checkpoints").join("final.ckpt");
        if !p.exists() {
            return Err(Error::config(format!(
                "{} has no checkpoints/final.ckpt",
                ckpt.display()
            )));
        }
        Ok(p)
    } else {
        Ok(ckpt.to_path_buf())
    }
}

pub fn eval(
    ckpt: &Path,
    data_dir: &Path,
    out: Option<&Path>,
    dcam_ckpt: Option<&Path>,
    asd_cap: f64,
) -> Result<()> {
    let student_path = resolve_student_ckpt(ckpt)?;
    let state = TrainState::load(&student_path)?;
    let ds = data::load_dataset(data_dir)?;
    let dcam_state = dcam_ckpt.map(DcamState::load).transpose()?;
    let report = metrics::evaluate(
        &state.cfg.seg,
        &state.student,
        dcam_state.as_ref(),
        &ds,
        asd_cap,
    )?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            if ckpt.is_dir() {
                ckpt.join("report.json")
            } else {
                ckpt.with_file_name("report.json")
            }
        }
    };
    write_report(&report, &out_path)?;
    println!(
        "eval: mean foreground dice {:.4}, asd {:.3} ({} volumes) -> {}",
        report.mean_foreground_dice,
        report.mean_foreground_asd,
        report.num_volumes,
        out_path.display()
    );
    Ok(())
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn plot(metrics: Option<&Path>, reports: &[String], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut wrote = 0usize;
    if let Some(metrics_path) = metrics {
        let text = fs::read_to_string(metrics_path)
            .map_err(|e| Error::config(format!("{}: {e}", metrics_path.display())))?;
        let mut steps: Vec<trainer::StepReport> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            steps.push(serde_json::from_str(line)?);
        }
        if steps.is_empty() {
            return Err(Error::validation("metrics log is empty"));
        }
        crate::plot::loss_curves(&steps, &out.join("losses.png"))?;
        wrote += 1;
    }
    if !reports.is_empty() {
        let mut labeled = Vec::new();
        for spec in reports {
            let (label, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("--report `{spec}`: expected label=path")))?;
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{path}: {e}")))?;
            let report: EvalReport = serde_json::from_str(&text)?;
            labeled.push((label.to_string(), report));
        }
        crate::plot::dice_bars(&labeled, &out.join("dice.png"))?;
        wrote += 1;
    }
    if wrote == 0 {
        return Err(Error::validation(
            "plot: pass --metrics and/or --report label=path",
        ));
    }
    println!("plot: wrote {wrote} figure(s) to {}", out.display());
    Ok(())
}
