//! Command-line surface for the two-stage segmentation pipeline.
//!
//! Subcommands mirror the pipeline: `phantom` writes a synthetic dataset,
//! `pretrain` fits the stage-1 U-Net, `jointtrain` fits the MO-Net (from a
//! stage-1 checkpoint or from scratch), `infer` segments a volume with a
//! trained checkpoint, `evaluate` scores segmentations against ground
//! truth, and `gradcheck` verifies the differentiation engine.
//!
//! Every command derives all randomness from its single `--seed` (or the
//! config's seed), so identical invocations write identical artifacts.
//! Each artifact-producing command also writes a JSON manifest with the
//! config snapshot and SHA-256 checksums of its outputs. All processing is
//! single-threaded; the `MSEG_THREADS` environment variable is accepted for
//! compatibility but anything beyond 1 thread is ignored.

use clap::{Parser, Subcommand, ValueEnum};
use mseg::data::{
    extract_partial, generate_phantom, read_label_map, read_nifti, read_volume, write_label_map,
    write_volume, LabelMap, LabelVolume, PhantomSpec, Volume, VolumeFile,
};
use mseg::derive_seed;
use mseg::engine::op_family_suite;
use mseg::error::{Error, Result};
use mseg::eval::{aggregate, dice, tile_infer, DiceRow, Head};
use mseg::models::ArchConfig;
use mseg::training::{
    joint_train, load_checkpoint, monet_gradcheck, pretrain, save_checkpoint, FullSubject,
    PartialSubject, TrainConfig,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "mseg", version, about = "Two-stage transfer learning for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    /// Partial-task decoder (present in both stages).
    W,
    /// Full-task decoder (MO-Net only).
    S,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with known ground truth.
    Phantom {
        /// Number of subjects to generate.
        #[arg(long)]
        count: usize,
        /// Cubic volume edge length in voxels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of labeled structures K (ids 1..=K).
        #[arg(long, default_value_t = 6)]
        structures: usize,
        /// Partial-annotation subset size P (ids mapped to 1..=P).
        #[arg(long, default_value_t = 3)]
        partial: usize,
        /// Gaussian intensity noise sigma.
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: pre-train a U-Net on partial labels.
    Pretrain {
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration (unknown keys are rejected).
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path; the log CSV and manifest are written
        /// next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: jointly train a MO-Net on full + derived partial labels.
    Jointtrain {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to transfer from, or "none" for the
        /// from-scratch baseline.
        #[arg(long)]
        init: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input volume (.msegvol, or .nii for NIfTI-1).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        head: HeadArg,
        /// Sliding-window patch size.
        #[arg(long, default_value_t = 32)]
        patch: usize,
        /// Output label volume (.msegvol).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted segmentations against ground truth.
    Evaluate {
        /// Directory of predicted label volumes (<subject>.msegvol).
        #[arg(long)]
        pred: PathBuf,
        /// Truth directory: either <subject>.msegvol files or a phantom
        /// dataset with <subject>/labels.msegvol.
        #[arg(long)]
        truth: PathBuf,
        /// Label map to apply to the truth (scores the partial task).
        #[arg(long)]
        map: Option<PathBuf>,
        /// Output CSV path; the JSON summary lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every operator family plus the
    /// full MO-Net in double precision.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one analytic gradient to prove the harness catches it.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
}

/// Provenance record written next to every artifact-producing command's
/// outputs.
#[derive(Serialize)]
struct ExperimentManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<OutputRecord>,
    wall_ms: f64,
}

#[derive(Serialize)]
struct OutputRecord {
    path: String,
    sha256: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

impl ExperimentManifest {
    fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        ExperimentManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_ms: 0.0,
        }
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(OutputRecord {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_snapshot(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Loads a dataset directory: sorted `subject*/` subdirectories with
/// `image.msegvol` + `labels.msegvol`, plus one dataset-level `labels.map`.
/// Images are z-score normalized here, once, at load.
fn load_dataset(dir: &Path) -> Result<(Vec<(String, Volume, LabelVolume)>, LabelMap)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("image.msegvol").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let map_path = dir.join("labels.map");
    let map = if map_path.is_file() {
        read_label_map(&map_path)?
    } else {
        read_label_map(dir.join(&names[0]).join("labels.map"))?
    };
    let mut subjects = Vec::with_capacity(names.len());
    for name in names {
        let sdir = dir.join(&name);
        let image = read_volume(sdir.join("image.msegvol"))?.into_image()?;
        let image = mseg::data::zscore_normalize(&image)?;
        let labels = read_volume(sdir.join("labels.msegvol"))?.into_labels()?;
        subjects.push((name, image, labels));
    }
    Ok((subjects, map))
}

/// Dataset-level partial annotation: the same structure subset for every
/// subject, chosen like a single phantom's subset but from the dataset seed.
fn dataset_label_map(structures: usize, partial: usize, seed: u64) -> Result<LabelMap> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset-map", 0));
    let mut pool: Vec<u16> = (2..=structures as u16).collect();
    pool.shuffle(&mut rng);
    pool.push(1);
    let mut chosen: Vec<u16> = pool.into_iter().take(partial).collect();
    chosen.sort_unstable();
    LabelMap::new(
        chosen
            .iter()
            .enumerate()
            .map(|(i, &full)| (full, (i + 1) as u16))
            .collect(),
    )
}

fn cmd_phantom(
    count: usize,
    size: usize,
    structures: usize,
    partial: usize,
    noise: f32,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config = serde_json::json!({
        "count": count, "size": size, "structures": structures,
        "partial": partial, "noise": noise,
    });
    let mut manifest = ExperimentManifest::new("phantom", config, seed);
    let map = dataset_label_map(structures, partial, seed)?;
    let map_path = out.join("labels.map");
    write_label_map(&map_path, &map)?;
    manifest.record_output(&map_path)?;
    for i in 0..count {
        let spec = PhantomSpec {
            size,
            num_full_structures: structures,
            partial_subset_size: partial,
            noise_sigma: noise,
            seed: derive_seed(seed, "phantom", i as u64),
        };
        // the per-phantom map is discarded: one shared map defines the
        // partial task for the whole dataset
        let (image, labels, _) = generate_phantom(&spec)?;
        let sdir = out.join(format!("subject{i:03}"));
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for (name, file) in [
            ("image.msegvol", VolumeFile::Image(image)),
            ("labels.msegvol", VolumeFile::Labels(labels)),
        ] {
            let path = sdir.join(name);
            write_volume(&path, &file)?;
            manifest.record_output(&path)?;
        }
        let spath = sdir.join("labels.map");
        write_label_map(&spath, &map)?;
        manifest.record_output(&spath)?;
    }
    manifest.write(&out.join("manifest.json"), started)?;
    println!("wrote {count} phantom(s) to {}", out.display());
    Ok(())
}

fn cmd_pretrain(data: &Path, config: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = read_config(config)?;
    let (subjects, map) = load_dataset(data)?;
    if cfg.arch.num_partial_classes != map.num_partial() + 1 {
        return Err(Error::Config(format!(
            "arch.num_partial_classes {} does not match the dataset's {} partial structures + background",
            cfg.arch.num_partial_classes,
            map.num_partial()
        )));
    }
    let dataset: Vec<PartialSubject> = subjects
        .into_iter()
        .map(|(_, image, labels)| PartialSubject {
            labels: extract_partial(&labels, &map),
            image,
        })
        .collect();
    let (params, log) = pretrain(&dataset, &cfg)?;
    let mut manifest = ExperimentManifest::new("pretrain", config_snapshot(&cfg), cfg.seed);
    manifest.inputs = vec![data.display().to_string(), config.display().to_string()];
    save_checkpoint(out, &params, None)?;
    manifest.record_output(out)?;
    let log_path = out.with_extension("log.csv");
    log.write_csv(&log_path)?;
    manifest.record_output(&log_path)?;
    manifest.write(&out.with_extension("manifest.json"), started)?;
    let last = log.entries.last().map(|e| e.loss_total);
    println!(
        "pretrain: {} steps, final loss {}",
        log.entries.len(),
        last.map(|l| l.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_jointtrain(data: &Path, init: &str, config: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = read_config(config)?;
    let (subjects, map) = load_dataset(data)?;
    if cfg.arch.num_partial_classes != map.num_partial() + 1 {
        return Err(Error::Config(format!(
            "arch.num_partial_classes {} does not match the dataset's {} partial structures + background",
            cfg.arch.num_partial_classes,
            map.num_partial()
        )));
    }
    let stage1 = match init {
        "none" => None,
        path => {
            let (params, _) = load_checkpoint(path)?;
            Some(params)
        }
    };
    let dataset: Vec<FullSubject> = subjects
        .into_iter()
        .map(|(_, image, labels)| FullSubject { image, labels })
        .collect();
    let (params, transfer, log) = joint_train(&dataset, &map, stage1.as_ref(), &cfg)?;
    let mut manifest = ExperimentManifest::new("jointtrain", config_snapshot(&cfg), cfg.seed);
    manifest.inputs = vec![
        data.display().to_string(),
        config.display().to_string(),
        format!("init:{init}"),
    ];
    save_checkpoint(out, &params, None)?;
    manifest.record_output(out)?;
    let log_path = out.with_extension("log.csv");
    log.write_csv(&log_path)?;
    manifest.record_output(&log_path)?;
    if let Some(t) = &transfer {
        let tpath = out.with_extension("transfer.json");
        let json = serde_json::to_string_pretty(t).expect("manifest serializes");
        std::fs::write(&tpath, json).map_err(|e| Error::io(&tpath, e))?;
        manifest.record_output(&tpath)?;
    }
    manifest.write(&out.with_extension("manifest.json"), started)?;
    println!(
        "jointtrain ({}): {} steps, final loss {}",
        if stage1.is_some() { "transfer" } else { "from scratch" },
        log.entries.len(),
        log.entries
            .last()
            .map(|e| e.loss_total.to_string())
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn read_any_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(path),
        _ => read_volume(path)?.into_image(),
    }
}

fn cmd_infer(ckpt: &Path, input: &Path, head: HeadArg, patch: usize, out: &Path) -> Result<()> {
    let (params, _) = load_checkpoint(ckpt)?;
    let volume = read_any_volume(input)?;
    let volume = mseg::data::zscore_normalize(&volume)?;
    let head = match head {
        HeadArg::W => Head::W,
        HeadArg::S => Head::S,
    };
    let seg = tile_infer(&params, &volume, patch, head)?;
    write_volume(out, &VolumeFile::Labels(seg))?;
    println!("wrote segmentation to {}", out.display());
    Ok(())
}

fn truth_labels_for(truth: &Path, subject: &str) -> Result<LabelVolume> {
    let direct = truth.join(format!("{subject}.msegvol"));
    let path = if direct.is_file() {
        direct
    } else {
        truth.join(subject).join("labels.msegvol")
    };
    read_volume(path)?.into_labels()
}

fn cmd_evaluate(pred: &Path, truth: &Path, map: Option<&Path>, out: &Path) -> Result<()> {
    let map = map.map(read_label_map).transpose()?;
    let entries = std::fs::read_dir(pred).map_err(|e| Error::io(pred, e))?;
    let mut subjects: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".msegvol").map(|s| s.to_string())
        })
        .collect();
    subjects.sort();
    if subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    for subject in &subjects {
        let p = read_volume(pred.join(format!("{subject}.msegvol")))?.into_labels()?;
        let mut t = truth_labels_for(truth, subject)?;
        if let Some(m) = &map {
            t = extract_partial(&t, m);
        }
        for structure in 1..t.num_classes as u16 {
            rows.push(DiceRow {
                subject: subject.clone(),
                structure,
                dice: dice(&p, &t, structure)?,
            });
        }
    }
    let task = if map.is_some() { "partial" } else { "full" };
    let report = aggregate(task, rows)?;
    std::fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    let json_path = out.with_extension("json");
    std::fs::write(&json_path, report.summary_json()).map_err(|e| Error::io(&json_path, e))?;
    println!(
        "{task} Dice over {} subject(s): {:.4} +- {:.4}",
        report.subject_means.len(),
        report.mean,
        report.std
    );
    Ok(())
}

fn cmd_gradcheck(size: usize, seed: u64, inject_fault: bool) -> Result<()> {
    let mut report = op_family_suite(size, seed, inject_fault)?;
    let arch = ArchConfig {
        base_channels: 2,
        depth: 2,
        kernel_size: 3,
        num_partial_classes: 3,
        num_full_classes: 4,
    };
    // the depth-2 net needs extents divisible by 4; round up
    let net_size = size.max(4).div_ceil(4) * 4;
    report.entries.push(monet_gradcheck(&arch, net_size, seed, 6)?);
    for e in &report.entries {
        println!("{:<22} max rel err {:.3e}", e.name, e.max_rel_err);
    }
    let worst = report.max_rel_err();
    println!("overall max rel err {worst:.3e} (tolerance 1e-4)");
    if report.passed(1e-4) {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check failed: max relative error {worst:.3e} >= 1e-4"
        )))
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom {
            count,
            size,
            structures,
            partial,
            noise,
            seed,
            out,
        } => cmd_phantom(count, size, structures, partial, noise, seed, &out),
        Command::Pretrain { data, config, out } => cmd_pretrain(&data, &config, &out),
        Command::Jointtrain {
            data,
            init,
            config,
            out,
        } => cmd_jointtrain(&data, &init, &config, &out),
        Command::Infer {
            ckpt,
            input,
            head,
            patch,
            out,
        } => cmd_infer(&ckpt, &input, head, patch, &out),
        Command::Evaluate {
            pred,
            truth,
            map,
            out,
        } => cmd_evaluate(&pred, &truth, map.as_deref(), &out),
        Command::Gradcheck {
            size,
            seed,
            inject_fault,
        } => cmd_gradcheck(size, seed, inject_fault),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}
