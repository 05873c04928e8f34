//! The four commands behind the binary: sample, sweep, diagnose, train-toy.
//!
//! Every command writes files only under the directory it was given and is
//! deterministic: the same config and arguments produce byte-identical
//! output, which the run manifests make checkable after the fact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use prguide_core::{
    finetune_subject, identity_score, make_schedule, prompt_alignment_score, render_histogram_image,
    sample, train_denoiser, ConsistencyStats, FinetuneConfig, GuidanceMode, LatentGrid, MlpConfig,
    Model, NoisePredictor, SamplerTrace, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Experiment, ExperimentConfig};
use crate::ConfigError;

/// Written into every run directory so a finished run can be audited:
/// which binary version produced it, from what settings, and the digest
/// of every file it wrote.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    mode: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    /// Relative path -> SHA-256 of each file in this directory, except the
    /// manifest itself.
    hashes: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` at `dir/rel` (creating parents) and records its digest.
fn put_file(
    dir: &Path,
    rel: &str,
    bytes: &[u8],
    hashes: &mut BTreeMap<String, String>,
) -> anyhow::Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    hashes.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Runs one mode/seed pair and writes its artifacts into `dir`:
/// `x0.lgrd`, `trace.csv`, optional `latents/step_NNNN.lgrd`. Returns the
/// final grid for metric computation along with the digests of everything
/// written.
fn run_one(
    exp: &Experiment,
    mode: GuidanceMode,
    seed: u64,
    dir: &Path,
) -> anyhow::Result<(LatentGrid, BTreeMap<String, String>)> {
    let cfg = exp.sampler_config(mode, seed);
    let personalized = exp.personalized.as_ref().map(|m| m as &dyn NoisePredictor);
    let (x0, trace) = sample(&cfg, &exp.base, personalized, &exp.condition)
        .with_context(|| format!("sampling mode={mode} seed={seed}"))?;

    let mut hashes = BTreeMap::new();
    let mut grid_bytes = Vec::new();
    x0.write_to(&mut grid_bytes)?;
    put_file(dir, "x0.lgrd", &grid_bytes, &mut hashes)?;

    let mut trace_bytes = Vec::new();
    trace.write_csv(&mut trace_bytes)?;
    put_file(dir, "trace.csv", &trace_bytes, &mut hashes)?;

    if cfg.snapshot_latents {
        for rec in &trace.records {
            if let Some(latent) = &rec.latent {
                let mut bytes = Vec::new();
                latent.write_to(&mut bytes)?;
                put_file(dir, &format!("latents/step_{:04}.lgrd", rec.t), &bytes, &mut hashes)?;
            }
        }
    }
    Ok((x0, hashes))
}

/// `sample`: run every configured mode x seed pair under `out_root`,
/// laying out `<out>/<mode>/seed<k>/` with a manifest per run.
pub fn cmd_sample(exp: &Experiment, out_root: &Path) -> anyhow::Result<()> {
    // The manifest records the settings as actually run, including where
    // the output landed.
    let mut resolved = exp.config.clone();
    resolved.run.out = Some(out_root.display().to_string());

    for &mode in &exp.modes {
        for &seed in &exp.config.run.seeds {
            let dir = out_root.join(mode.name()).join(format!("seed{seed}"));
            let (_, hashes) = run_one(exp, mode, seed, &dir)?;
            let manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION"),
                mode: mode.name(),
                seed,
                config: &resolved,
                hashes,
            };
            let text = toml::to_string_pretty(&manifest).context("encoding manifest")?;
            fs::write(dir.join("manifest.toml"), text)
                .with_context(|| format!("writing {}", dir.join("manifest.toml").display()))?;
            println!("{} seed {seed}: wrote {}", mode.name(), dir.display());
        }
    }
    Ok(())
}

/// Which guidance scale a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    OmegaText,
    OmegaCons,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::OmegaText => "omega_text",
            SweepAxis::OmegaCons => "omega_cons",
        }
    }
}

/// `sweep`: rerun the experiment at each value of one guidance scale and
/// score every run. Output layout is
/// `<out>/<axis>_<value>/<mode>/seed<k>/` plus a `metrics.csv` at the root
/// with one row per run.
pub fn cmd_sweep(
    exp: &Experiment,
    out_root: &Path,
    axis: SweepAxis,
    values: &[f64],
) -> anyhow::Result<()> {
    if values.is_empty() {
        return Err(ConfigError::new("sweep needs at least one value").into());
    }
    for v in values {
        if !v.is_finite() {
            return Err(ConfigError::new(format!("sweep value {v} is not finite")).into());
        }
    }
    let gmm = exp.analytic_base().ok_or_else(|| {
        ConfigError::new("sweep metrics need an analytic [scenario]; file-backed models have no reference density")
    })?;
    let references = exp.references()?;

    let mut metrics = String::from("mode,axis_value,seed,prompt_alignment,identity_score\n");
    for &value in values {
        let swept = match axis {
            SweepAxis::OmegaText => exp.with_guidance(value, exp.config.guidance.omega_cons)?,
            SweepAxis::OmegaCons => exp.with_guidance(exp.config.guidance.omega_text, value)?,
        };
        let value_root = out_root.join(format!("{}_{value}", axis.name()));
        for &mode in &swept.modes {
            for &seed in &swept.config.run.seeds {
                let dir = value_root.join(mode.name()).join(format!("seed{seed}"));
                let (x0, _) = run_one(&swept, mode, seed, &dir)?;
                let samples = [x0];
                let alignment = prompt_alignment_score(gmm, &swept.condition, &samples)?;
                let identity = identity_score(&references, &samples)?;
                metrics.push_str(&format!(
                    "{},{value},{seed},{alignment},{identity}\n",
                    mode.name()
                ));
            }
        }
        println!("{} = {value}: wrote {}", axis.name(), value_root.display());
    }
    fs::create_dir_all(out_root)?;
    let metrics_path = out_root.join("metrics.csv");
    fs::write(&metrics_path, metrics)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

/// Finds every trace CSV under `root`, recursively, in a stable order.
/// Aggregate and metric CSVs written by this tool are skipped by name.
fn find_trace_csvs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    const SKIP: [&str; 3] = ["stats.csv", "metrics.csv", "train_log.csv"];
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries =
            fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv")
                && !path
                    .file_name()
                    .is_some_and(|n| SKIP.iter().any(|s| n == *s))
            {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// `diagnose`: aggregate every trace under `trace_dir` into a per-step
/// statistics table (`stats.csv`) and one histogram image per step
/// (`hist_tNNNN.ppm`) in `out_dir`.
pub fn cmd_diagnose(trace_dir: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let paths = find_trace_csvs(trace_dir)?;
    if paths.is_empty() {
        return Err(ConfigError::new(format!(
            "no trace CSVs found under {}",
            trace_dir.display()
        ))
        .into());
    }
    let mut traces = Vec::with_capacity(paths.len());
    for path in &paths {
        let trace = SamplerTrace::load_csv(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        traces.push(trace);
    }
    let stats = ConsistencyStats::from_traces(&traces)
        .map_err(|e| ConfigError::new(format!("aggregating traces: {e}")))?;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    stats
        .save_csv(out_dir.join("stats.csv"))
        .context("writing stats.csv")?;
    for row in &stats.rows {
        let image = render_histogram_image(row);
        let path = out_dir.join(format!("hist_t{:04}.ppm", row.t));
        fs::write(&path, image).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "aggregated {} traces x {} steps into {}",
        traces.len(),
        stats.rows.len(),
        out_dir.display()
    );
    Ok(())
}

/// `train-toy`: draw a clean dataset from the analytic scenario, train the
/// small denoiser on it, fine-tune a copy onto the subject references, and
/// write both models plus the loss log.
pub fn cmd_train_toy(exp: &Experiment, out_dir: &Path) -> anyhow::Result<()> {
    let train = exp.config.train.as_ref().ok_or_else(|| {
        ConfigError::new("train-toy needs a [train] section in the config")
    })?;
    let scenario = exp.config.scenario.as_ref().ok_or_else(|| {
        ConfigError::new("train-toy draws its dataset from an analytic [scenario]")
    })?;
    let subject = scenario.subject.as_ref().ok_or_else(|| {
        ConfigError::new("train-toy needs a [scenario.subject] to fine-tune onto")
    })?;
    let gmm = exp
        .analytic_base()
        .expect("scenario-backed experiments carry the analytic mixture");
    if train.dataset_size == 0 {
        return Err(ConfigError::new("train.dataset_size must be at least 1").into());
    }

    // Labels cycle in sorted order so the dataset covers every class no
    // matter its size.
    let labels = gmm.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(train.dataset_seed);
    let mut dataset = Vec::with_capacity(train.dataset_size);
    for i in 0..train.dataset_size {
        let label = labels[i % labels.len()];
        let cond = prguide_core::Condition::Prompt(label);
        let grid = gmm.sample_clean(&cond, &mut rng)?;
        dataset.push((grid, cond));
    }

    let schedule = make_schedule(exp.config.run.steps, exp.schedule)?;
    let arch = MlpConfig {
        hidden: train.hidden.clone(),
        time_embed: train.time_embed,
        label_embed: train.label_embed,
        n_labels: labels.iter().max().copied().unwrap_or(0) + 1,
        n_subjects: subject.id + 1,
    };
    let (phi, base_log) = train_denoiser(
        &dataset,
        &schedule,
        &TrainConfig {
            arch,
            steps: train.steps,
            batch: train.batch,
            learning_rate: train.learning_rate,
            seed: train.seed,
        },
    )
    .context("training the base denoiser")?;

    let references = exp.references()?;
    let (theta, finetune_log) = finetune_subject(
        &phi,
        &references,
        subject.id,
        &schedule,
        &FinetuneConfig {
            label: subject.label,
            steps: train.finetune.steps,
            batch: train.finetune.batch,
            learning_rate: train.finetune.learning_rate,
            seed: train.finetune.seed,
        },
    )
    .context("fine-tuning onto the subject")?;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    Model::Mlp(phi).save(out_dir.join("phi.prgm"))?;
    Model::Mlp(theta).save(out_dir.join("theta.prgm"))?;

    let mut log = String::from("phase,step,loss\n");
    for (step, loss) in &base_log {
        log.push_str(&format!("base,{step},{loss}\n"));
    }
    for (step, loss) in &finetune_log {
        log.push_str(&format!("finetune,{step},{loss}\n"));
    }
    fs::write(out_dir.join("train_log.csv"), log).context("writing train_log.csv")?;
    println!(
        "trained {} base steps + {} finetune steps; models in {}",
        base_log.len(),
        finetune_log.len(),
        out_dir.display()
    );
    Ok(())
}
