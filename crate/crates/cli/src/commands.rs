use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pointcaps::data::{load_cloud, save_cloud, write_dataset, DatasetManifest, PointCloud, ShapeKind, Split, SyntheticSpec};
use pointcaps::model::{count_params_flops, load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use pointcaps::train::{
    evaluate, holdout, latent_perturb, log_to_csv, mean_shape_baseline, noise_sweep, part_assign, segment_eval,
    sweep_to_csv, train_with, NoiseMode, NoiseSweep, TrainConfig,
};
use pointcaps::verify::{run_battery_with, BatteryConfig};

use crate::provenance::{write_run, Summary};
use crate::{
    CheckpointArgs, EvalArgs, GenArgs, ModelArgs, PartsArgs, PerturbArgs, Preset, StatsArgs, SweepArgs, TrainArgs,
    VerifyArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config from a file or preset, then `--set` overrides. Presets take the
/// point and class counts given here.
fn resolve_config(args: &ModelArgs, num_points: usize, num_classes: usize) -> Result<ModelConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        (Some(path), None) => ModelConfig::load(path)?,
        (None, preset) => match preset.unwrap_or(Preset::Micro) {
            Preset::Micro => ModelConfig::micro(num_points, num_classes),
            Preset::Tiny => ModelConfig::tiny(num_points, num_classes),
            Preset::Paper => ModelConfig::paper(num_points, num_classes),
        },
    };
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(args: &CheckpointArgs) -> Result<(ModelConfig, ModelState)> {
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .ckpt
            .parent()
            .map(|d| d.join(CONFIG_FILE))
            .unwrap_or_else(|| PathBuf::from(CONFIG_FILE)),
    };
    let cfg = ModelConfig::load(&config_path).with_context(|| format!("loading config {}", config_path.display()))?;
    let state = load_checkpoint(&args.ckpt, &cfg).with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    Ok((cfg, state))
}

fn load_split(data: &Path, split: &str) -> Result<Vec<PointCloud>> {
    let manifest = DatasetManifest::load(data)?;
    let split: Split = split.parse()?;
    let clouds = manifest.load_split(split)?;
    if clouds.is_empty() {
        bail!("{} has no {split} clouds", data.display());
    }
    Ok(clouds)
}

pub fn gen(a: GenArgs) -> Result<bool> {
    let kinds = a
        .shapes
        .iter()
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<pointcaps::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        bail!("--shapes needs at least one kind");
    }
    let spec = SyntheticSpec {
        kinds,
        jitter: a.jitter,
        ..SyntheticSpec::new(a.points, a.per_class, a.test_per_class, a.seed)
    };
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &spec)?;
    write_run(&a.out, "gen", a.seed, None, &[DatasetManifest::FILE.to_string()])?;
    let train = manifest.records.iter().filter(|r| r.split == Split::Train).count();
    println!(
        "{}",
        Summary::new("gen")
            .field("files", manifest.records.len())
            .field("train", train)
            .field("test", manifest.records.len() - train)
            .field("classes", spec.kinds.len())
            .field("points", a.points)
            .field("out", a.out.display())
    );
    Ok(true)
}

pub fn train(a: TrainArgs) -> Result<bool> {
    let manifest = DatasetManifest::load(&a.data)?;
    let train_all = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(Split::Test)?;
    let Some(first) = train_all.first() else {
        bail!("{} has no training clouds", a.data.display());
    };
    let mut cfg = resolve_config(&a.model, first.len(), manifest.num_classes())?;
    if let Some(mode) = a.routing {
        cfg.routing_mode = mode;
    }
    if a.no_skip {
        cfg.skip_connection = false;
    }
    cfg.validate()?;

    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        milestones: a.milestones.clone(),
        rectify: !a.no_rectify,
        seed: a.seed,
    };
    let (train_set, val_set) = holdout(train_all, a.val_fraction);
    create_dir(&a.out)?;
    eprintln!(
        "training {} parameters on {} clouds ({} held out), routing {}, skip {}",
        ModelState::init(&cfg, a.seed)?.num_params(),
        train_set.len(),
        val_set.len(),
        cfg.routing_mode,
        cfg.skip_connection
    );
    let start = Instant::now();
    let outcome = train_with(&cfg, &tcfg, &train_set, &val_set, None, |e| {
        let l = e.log;
        let val = l
            .val
            .as_ref()
            .map(|m| format!(" | val acc {:.3} cd {:.5}", m.accuracy, m.cd_mean))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3}  loss {:.5}  margin {:.5}  cd {:.5}  acc {:.3}{val}  lr {:.1e}  {:.1}s{}",
            l.epoch,
            l.loss,
            l.margin,
            l.cd,
            l.accuracy,
            l.lr,
            start.elapsed().as_secs_f64(),
            if e.improved.is_some() { "  *" } else { "" }
        );
    })?;

    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.best, &ckpt)?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    write_file(&a.out.join(METRICS_FILE), &log_to_csv(&outcome.log))?;
    write_run(
        &a.out,
        "train",
        a.seed,
        Some(&cfg),
        &[CHECKPOINT_FILE.into(), CONFIG_FILE.into(), METRICS_FILE.into()],
    )?;

    let (split, scored) = if !test.is_empty() {
        ("test", test)
    } else if !val_set.is_empty() {
        ("val", val_set)
    } else {
        ("train", train_set)
    };
    let m = evaluate(&cfg, &outcome.best, &scored)?;
    println!(
        "{}",
        Summary::new("train")
            .field("epochs", a.epochs)
            .field("best_epoch", outcome.best_epoch)
            .field("split", split)
            .field("accuracy", m.accuracy)
            .field("cd", m.cd_mean)
            .field("cd_x1e3", m.cd_x1e3())
            .field("checkpoint", ckpt.display())
    );
    Ok(true)
}

pub fn eval(a: EvalArgs) -> Result<bool> {
    let (cfg, state) = load_model(&a.ckpt)?;
    let clouds = load_split(&a.data, &a.split)?;
    let m = evaluate(&cfg, &state, &clouds)?;
    let mut summary = Summary::new("eval")
        .field("split", &a.split)
        .field("clouds", clouds.len())
        .field("accuracy", m.accuracy)
        .field("cd", m.cd_mean)
        .field("cd_x1e3", m.cd_x1e3());
    let mut rows = vec![
        ("accuracy", m.accuracy),
        ("cd", m.cd_mean),
        ("cd_x1e3", m.cd_x1e3()),
    ];
    if a.baseline || a.seg_fraction.is_some() {
        let train = load_split(&a.data, "train")?;
        if a.baseline {
            let b = mean_shape_baseline(&train, &clouds, 20)?;
            eprintln!("medoid reference cd {b:.6}");
            summary = summary.field("baseline_cd", b);
            rows.push(("baseline_cd", b));
        }
        if let Some(f) = a.seg_fraction {
            let s = segment_eval(&cfg, &state, &train, &clouds, f, a.seed)?;
            eprintln!("segmentation from {} labelled clouds", s.labeled_clouds);
            summary = summary.field("seg_accuracy", s.accuracy).field("seg_iou", s.iou);
            rows.push(("seg_accuracy", s.accuracy));
            rows.push(("seg_iou", s.iou));
        }
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut csv = String::from("metric,value\n");
        for (k, v) in &rows {
            csv.push_str(&format!("{k},{v}\n"));
        }
        write_file(&out.join("eval.csv"), &csv)?;
        write_run(out, "eval", a.seed, Some(&cfg), &["eval.csv".into()])?;
    }
    println!("{summary}");
    Ok(true)
}

pub fn sweep(a: SweepArgs) -> Result<bool> {
    let (cfg, state) = load_model(&a.ckpt)?;
    let clouds = load_split(&a.data, &a.split)?;
    let mut sweep = match a.mode {
        NoiseMode::Perturb => NoiseSweep::sigma_grid(a.seeds.clone()),
        NoiseMode::Outliers => NoiseSweep::outlier_grid(a.seeds.clone()),
    };
    if let Some(levels) = &a.levels {
        sweep.levels = levels.clone();
    }
    sweep.outlier_sigma = a.outlier_sigma;
    let rows = noise_sweep(&cfg, &state, &clouds, &sweep)?;
    for r in &rows {
        eprintln!(
            "{} {:>6}  acc {:.4} ± {:.4}  cd {:.6} ± {:.6}",
            a.mode, r.level, r.accuracy, r.accuracy_std, r.cd_mean, r.cd_std
        );
    }
    create_dir(&a.out)?;
    let csv = a.out.join("sweep.csv");
    write_file(&csv, &sweep_to_csv(a.mode, &rows))?;
    let seed = a.seeds.first().copied().unwrap_or(0);
    write_run(&a.out, "sweep", seed, Some(&cfg), &["sweep.csv".into()])?;
    println!(
        "{}",
        Summary::new("sweep")
            .field("mode", a.mode)
            .field("rows", rows.len())
            .field("csv", csv.display())
    );
    Ok(true)
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect(),
    }
}

pub fn perturb(a: PerturbArgs) -> Result<bool> {
    let (cfg, state) = load_model(&a.ckpt)?;
    if a.steps == 0 {
        bail!("--steps must be positive");
    }
    let cloud = load_cloud(&a.input)?;
    let values = linspace(a.range[0], a.range[1], a.steps);
    let recons = latent_perturb(&cfg, &state, &cloud, a.dim, &values)?;
    create_dir(&a.out)?;
    let mut index = String::from("step,value,file\n");
    let mut outputs = vec!["perturb.csv".to_string()];
    for (i, (v, c)) in values.iter().zip(&recons).enumerate() {
        let name = format!("perturb_{i:02}.xyz");
        save_cloud(c, &a.out.join(&name))?;
        index.push_str(&format!("{i},{v},{name}\n"));
        outputs.push(name);
    }
    write_file(&a.out.join("perturb.csv"), &index)?;
    write_run(&a.out, "perturb", 0, Some(&cfg), &outputs)?;
    println!(
        "{}",
        Summary::new("perturb")
            .field("dim", a.dim)
            .field("clouds", recons.len())
            .field("class", recons.first().map(|c| c.label).unwrap_or(0))
            .field("out", a.out.display())
    );
    Ok(true)
}

/// Output name for a dataset cloud: its relative path joined with `_`.
fn flat_name(rel: &Path) -> String {
    let stem = rel.with_extension("");
    let parts: Vec<String> = stem.iter().map(|c| c.to_string_lossy().into_owned()).collect();
    format!("{}.parts.xyz", parts.join("_"))
}

pub fn parts(a: PartsArgs) -> Result<bool> {
    let (cfg, state) = load_model(&a.ckpt)?;
    let mut jobs: Vec<(String, PointCloud)> = Vec::new();
    for path in &a.inputs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        jobs.push((format!("{stem}.parts.xyz"), load_cloud(path)?));
    }
    if let Some(data) = &a.data {
        let manifest = DatasetManifest::load(data)?;
        let split: Split = a.split.parse()?;
        let records: Vec<_> = manifest.records.iter().filter(|r| r.split == split).collect();
        for r in records.into_iter().take(a.limit.unwrap_or(usize::MAX)) {
            let mut cloud = load_cloud(&data.join(&r.path))?;
            cloud.label = r.label;
            jobs.push((flat_name(&r.path), cloud));
        }
    }
    if jobs.is_empty() {
        bail!("nothing to label: pass --input or --data");
    }
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for (name, cloud) in jobs {
        let assign = part_assign(&cfg, &state, &cloud)?;
        used.extend(assign.iter().copied());
        let labelled = cloud.with_parts(assign.into_iter().map(Some).collect())?;
        save_cloud(&labelled, &a.out.join(&name))?;
        outputs.push(name);
    }
    write_run(&a.out, "parts", 0, Some(&cfg), &outputs)?;
    println!(
        "{}",
        Summary::new("parts")
            .field("clouds", outputs.len())
            .field("capsules_used", used.len())
            .field("out", a.out.display())
    );
    Ok(true)
}

pub fn verify(a: VerifyArgs) -> Result<bool> {
    let cfg = BatteryConfig {
        seed: a.seed,
        ..if a.quick { BatteryConfig::quick() } else { BatteryConfig::full() }
    };
    let report = run_battery_with(&cfg, &pointcaps::routing::route, |r| eprintln!("{r}"));
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    if let Some(out) = &a.out {
        let text: String = report.checks.iter().map(|c| format!("{c}\n")).collect();
        write_file(out, &text)?;
    }
    let mut summary = Summary::new("verify")
        .field("checks", report.checks.len())
        .field("passed", report.checks.len() - failed.len())
        .field("failed", failed.len())
        .field("seconds", format!("{:.2}", report.total_time().as_secs_f64()));
    if !failed.is_empty() {
        summary = summary.field("failures", failed.join(","));
    }
    println!("{summary}");
    Ok(failed.is_empty())
}

pub fn stats(a: StatsArgs) -> Result<bool> {
    let cfg = resolve_config(&a.model, a.points, a.classes)?;
    let c = count_params_flops(&cfg);
    let mut csv = String::from("layer,params,flops\n");
    eprintln!("{:<24} {:>12} {:>16}", "layer", "params", "multiply-adds");
    for l in &c.layers {
        eprintln!("{:<24} {:>12} {:>16}", l.name, l.params, l.flops);
        csv.push_str(&format!("{},{},{}\n", l.name, l.params, l.flops));
    }
    csv.push_str(&format!("total,{},{}\n", c.params, c.flops));
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    println!(
        "{}",
        Summary::new("stats")
            .field("points", cfg.num_points)
            .field("classes", cfg.num_classes)
            .field("params", c.params)
            .field("flops", c.flops)
    );
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_covers_both_ends() {
        assert_eq!(linspace(-5.0, 5.0, 5), vec![-5.0, -2.5, 0.0, 2.5, 5.0]);
        assert_eq!(linspace(1.0, 2.0, 1), vec![1.0]);
    }

    #[test]
    fn dataset_names_are_flattened() {
        assert_eq!(flat_name(Path::new("test/cube/0003.xyz")), "test_cube_0003.parts.xyz");
    }
}
