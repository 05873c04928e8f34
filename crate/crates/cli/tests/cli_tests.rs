//! End-to-end tests of the `prguide` binary: exit codes, determinism,
//! manifests, and the on-disk layout of every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prguide_core::{
    GaussianMixtureModel, GridShape, LatentGrid, MixtureComponent, Model, SamplerTrace,
};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn prguide() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prguide"));
    // Isolate from the environment so out-dir resolution is what each test
    // says it is.
    cmd.env_remove("PRGUIDE_OUT");
    cmd
}

fn run(args: &[&str]) -> Output {
    prguide().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn fixture(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(path)
}

/// A small self-contained config: one-channel grid, two classes, subject.
fn minimal_config(extra: &str) -> String {
    format!(
        r#"
[scenario.grid]
channels = 1
width = 3
height = 3

[[scenario.components]]
label = 0
weight = 0.5
variance = 0.3
mean = {{ pattern = "constant", value = 0.8 }}

[[scenario.components]]
label = 1
weight = 0.5
variance = 0.3
mean = {{ pattern = "constant", value = -0.8 }}

[scenario.subject]
label = 0
id = 0
weight = 0.3
variance = 0.1
mean = {{ pattern = "seeded", seed = 5, scale = 0.3, offset = 0.9 }}

[condition]
kind = "subject_prompt"
label = 0
subject = 0

[run]
steps = 12
{extra}
"#
    )
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

// ---------------------------------------------------------------- exit codes

#[test]
fn usage_errors_exit_2() {
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "sample",
        "--config",
        "/definitely/not/here.toml",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("not/here.toml"));
}

#[test]
fn toml_syntax_errors_exit_2_with_line_numbers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[scenario.grid]\nchannels = 1\nwidth = oops\n");
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("line 3"), "no line number in: {err}");
}

#[test]
fn unknown_config_keys_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &minimal_config("").replace("[run]", "[run]\nfrobnicate = 3"),
    );
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("frobnicate"));
}

#[test]
fn missing_output_directory_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config(""));
    let out = run(&["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("PRGUIDE_OUT"));
}

#[test]
fn out_env_var_is_honored() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config("modes = [\"cfg\"]"));
    let out_dir = tmp.path().join("enved");
    let out = prguide()
        .args(["sample", "--config", cfg.to_str().unwrap()])
        .env("PRGUIDE_OUT", &out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(out_dir.join("cfg/seed0/x0.lgrd").exists());
}

#[test]
fn condition_label_must_exist_in_the_scenario() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &minimal_config("").replace("label = 0\nsubject = 0", "label = 9\nsubject = 0"),
    );
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("label 9"));
}

#[test]
fn pr_mode_without_a_subject_exits_2() {
    let tmp = TempDir::new().unwrap();
    let body = minimal_config("modes = [\"pr\"]");
    let start = body.find("[scenario.subject]").unwrap();
    let end = body.find("[condition]").unwrap();
    let without_subject = format!(
        "{}{}",
        &body[..start],
        body[end..].replace(
            "kind = \"subject_prompt\"\nlabel = 0\nsubject = 0",
            "kind = \"prompt\"\nlabel = 0"
        )
    );
    let cfg = write_config(tmp.path(), &without_subject);
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

// ----------------------------------------------------- determinism, manifests

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config("seeds = [3, 11]"));
    let out_dir = tmp.path().join("out");
    let mut runs: Vec<BTreeMap<PathBuf, Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        if out_dir.exists() {
            fs::remove_dir_all(&out_dir).unwrap();
        }
        let out = run(&[
            "sample",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
        runs.push(collect_files(&out_dir));
    }
    let (first, second) = (&runs[0], &runs[1]);
    assert!(!first.is_empty());
    assert_eq!(first.len(), second.len());
    for (path, bytes) in first {
        assert_eq!(Some(bytes), second.get(path), "{} differs", path.display());
    }
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn manifest_hashes_match_the_files_on_disk() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &minimal_config("modes = [\"pr\"]\nsnapshot_latents = true"),
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let run_dir = out_dir.join("pr/seed0");
    let manifest: toml::Value =
        toml::from_str(&fs::read_to_string(run_dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["mode"].as_str(), Some("pr"));
    assert_eq!(manifest["seed"].as_integer(), Some(0));
    assert_eq!(
        manifest["config"]["run"]["out"].as_str(),
        out_dir.to_str()
    );

    let hashes = manifest["hashes"].as_table().unwrap();
    // x0, trace, and one latent per step.
    assert_eq!(hashes.len(), 2 + 12);
    for (rel, want) in hashes {
        let bytes = fs::read(run_dir.join(rel)).unwrap();
        let got: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(&got, want.as_str().unwrap(), "digest mismatch for {rel}");
    }
    // Nothing on disk that the manifest does not account for.
    let files = collect_files(&run_dir);
    assert_eq!(files.len(), hashes.len() + 1);
}

#[test]
fn snapshot_latents_parse_and_are_finite() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &minimal_config("modes = [\"pr\"]\nseeds = [0, 1, 2, 3, 4]\nsnapshot_latents = true"),
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let mut latents = 0;
    for (path, _) in collect_files(&out_dir) {
        if path.extension().is_some_and(|e| e == "lgrd") {
            let grid = LatentGrid::load(out_dir.join(&path)).unwrap();
            assert!(grid.data().iter().all(|v| v.is_finite()));
            latents += 1;
        }
    }
    // 5 seeds x (12 snapshots + x0).
    assert_eq!(latents, 5 * 13);
}

// --------------------------------------------- identical models, equal modes

#[test]
fn identical_base_and_personalized_models_make_all_modes_coincide() {
    let tmp = TempDir::new().unwrap();
    let shape = GridShape::new(2, 3, 3).unwrap();
    let gmm = GaussianMixtureModel::new(vec![
        MixtureComponent {
            weight: 0.5,
            mean: LatentGrid::from_fn(shape, |c, w, h| (c + w + h) as f64 * 0.2),
            variance: 0.4,
            label: 0,
            subject: None,
        },
        MixtureComponent {
            weight: 0.5,
            mean: LatentGrid::from_fn(shape, |c, w, h| (c + w + h) as f64 * -0.2),
            variance: 0.4,
            label: 1,
            subject: None,
        },
    ])
    .unwrap();
    Model::Gmm(gmm).save(tmp.path().join("model.prgm")).unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[models]
base = "model.prgm"
personalized = "model.prgm"

[condition]
kind = "prompt"
label = 0

[run]
steps = 25
seeds = [0, 1, 2]
"#,
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    for seed in 0..3 {
        let cfg_grid = LatentGrid::load(out_dir.join(format!("cfg/seed{seed}/x0.lgrd"))).unwrap();
        let cg_grid = LatentGrid::load(out_dir.join(format!("cg/seed{seed}/x0.lgrd"))).unwrap();
        let pr_grid = LatentGrid::load(out_dir.join(format!("pr/seed{seed}/x0.lgrd"))).unwrap();
        assert_eq!(cfg_grid, cg_grid, "seed {seed}: cg drifted from cfg");
        assert_eq!(cfg_grid, pr_grid, "seed {seed}: pr drifted from cfg");

        // With a zero consistency signal the per-step diagnostics are zero.
        let trace =
            SamplerTrace::load_csv(out_dir.join(format!("pr/seed{seed}/trace.csv"))).unwrap();
        for rec in &trace.records {
            assert_eq!(rec.cp_mean, 0.0);
            assert_eq!(rec.cp_std, 0.0);
            assert_eq!(rec.g_par_norm, 0.0);
            assert_eq!(rec.g_perp_norm, 0.0);
        }
    }
}

// -------------------------------------------------------------------- sweeps

#[test]
fn sweep_layout_and_metrics_shape() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        repo_config("toy.toml").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--axis",
        "omega-text",
        "--values",
        "2,7.5",
        "--seed",
        "0,1",
        "--mode",
        "cfg,pr",
        "--steps",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    for value in ["2", "7.5"] {
        for mode in ["cfg", "pr"] {
            for seed in ["0", "1"] {
                let dir = out_dir.join(format!("omega_text_{value}/{mode}/seed{seed}"));
                assert!(dir.join("x0.lgrd").exists(), "missing {}", dir.display());
                assert!(dir.join("trace.csv").exists());
            }
        }
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("mode,axis_value,seed,prompt_alignment,identity_score")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert!(fields[3].parse::<f64>().unwrap().is_finite());
        assert!(fields[4].parse::<f64>().unwrap().is_finite());
    }
}

/// With the consistency scale at zero, both guided modes collapse to plain
/// classifier-free guidance, so their sweep rows must coincide exactly —
/// while at a nonzero scale they genuinely differ.
#[test]
fn zero_consistency_rows_coincide_across_guided_modes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config(""));
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--axis",
        "omega-cons",
        "--values",
        "0,3",
        "--seed",
        "0,1",
        "--mode",
        "cg,pr",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    for seed in 0..2 {
        let cg0 = LatentGrid::load(out_dir.join(format!("omega_cons_0/cg/seed{seed}/x0.lgrd")))
            .unwrap();
        let pr0 = LatentGrid::load(out_dir.join(format!("omega_cons_0/pr/seed{seed}/x0.lgrd")))
            .unwrap();
        assert_eq!(cg0, pr0, "seed {seed}: modes differ at zero scale");

        let cg3 = LatentGrid::load(out_dir.join(format!("omega_cons_3/cg/seed{seed}/x0.lgrd")))
            .unwrap();
        let pr3 = LatentGrid::load(out_dir.join(format!("omega_cons_3/pr/seed{seed}/x0.lgrd")))
            .unwrap();
        assert!(
            cg3.sub(&pr3).unwrap().max_abs() > 1e-6,
            "seed {seed}: modes coincide even at scale 3"
        );
    }
}

/// The first reverse step starts from the same seeded noise whatever the
/// consistency scale, and the per-location field it records is linear in
/// that scale — so its recorded statistics must scale exactly. Later steps
/// are allowed to drift apart (the guidance itself changes the trajectory),
/// and wherever the text direction is still live, a one-channel grid keeps
/// the whole consistency signal in the parallel part.
#[test]
fn single_channel_consistency_stays_parallel_while_text_is_live() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config("modes = [\"pr\"]"));
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--axis",
        "omega-cons",
        "--values",
        "0.5,3,12",
        "--seed",
        "0,1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    for seed in 0..2 {
        let traces: Vec<SamplerTrace> = ["0.5", "3", "12"]
            .iter()
            .map(|v| {
                SamplerTrace::load_csv(
                    out_dir.join(format!("omega_cons_{v}/pr/seed{seed}/trace.csv")),
                )
                .unwrap()
            })
            .collect();

        let base = &traces[0].records[0];
        for (trace, scale) in traces.iter().zip([0.5_f64, 3.0, 12.0]) {
            let first = &trace.records[0];
            let ratio = scale / 0.5;
            assert!(
                (first.cp_mean - ratio * base.cp_mean).abs() <= 1e-9 * base.cp_mean.abs(),
                "seed {seed}: first-step mean not proportional at scale {scale}"
            );
            assert!(
                (first.cp_std - ratio * base.cp_std).abs() <= 1e-9 * base.cp_std.abs(),
                "seed {seed}: first-step deviation not proportional at scale {scale}"
            );

            for rec in &trace.records {
                if rec.g_text_norm >= 1e-3 {
                    assert!(
                        rec.g_perp_norm <= 1e-5 * (rec.g_text_norm + rec.g_par_norm),
                        "seed {seed} t={}: orthogonal part {} with text norm {}",
                        rec.t,
                        rec.g_perp_norm,
                        rec.g_text_norm
                    );
                }
            }
        }
    }
}

#[test]
fn sweep_without_an_analytic_scenario_exits_2() {
    let tmp = TempDir::new().unwrap();
    let shape = GridShape::new(1, 2, 2).unwrap();
    let gmm = GaussianMixtureModel::new(vec![MixtureComponent {
        weight: 1.0,
        mean: LatentGrid::from_fn(shape, |_, _, _| 0.5),
        variance: 0.5,
        label: 0,
        subject: None,
    }])
    .unwrap();
    Model::Gmm(gmm).save(tmp.path().join("m.prgm")).unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[models]
base = "m.prgm"

[condition]
kind = "prompt"
label = 0

[run]
modes = ["cfg"]
steps = 5
"#,
    );
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--axis",
        "omega-text",
        "--values",
        "1,2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("scenario"));
}

// ------------------------------------------------------------------ diagnose

#[test]
fn diagnose_reproduces_the_committed_goldens() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "diagnose",
        fixture("diagnose").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let got_stats = fs::read(tmp.path().join("stats.csv")).unwrap();
    let want_stats = fs::read(fixture("golden/stats.csv")).unwrap();
    assert_eq!(got_stats, want_stats, "stats.csv drifted from the golden");

    let got_img = fs::read(tmp.path().join("hist_t0003.ppm")).unwrap();
    let want_img = fs::read(fixture("golden/hist_t0003.ppm")).unwrap();
    assert_eq!(got_img, want_img, "histogram image drifted from the golden");

    assert!(tmp.path().join("hist_t0002.ppm").exists());
    assert!(tmp.path().join("hist_t0001.ppm").exists());
}

#[test]
fn diagnose_conserves_histogram_mass() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config("seeds = [0, 1, 2]"));
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let diag_dir = tmp.path().join("diag");
    let out = run(&[
        "diagnose",
        out_dir.to_str().unwrap(),
        "--out",
        diag_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let stats = fs::read_to_string(diag_dir.join("stats.csv")).unwrap();
    // 3 modes x 3 seeds, 9 locations each.
    let expected_mass = 9 * 9;
    for line in stats.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let mass: u64 = fields[3..].iter().map(|f| f.parse::<u64>().unwrap()).sum();
        assert_eq!(mass, expected_mass, "row {line}");
    }
}

#[test]
fn diagnose_with_no_traces_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["diagnose", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("no trace CSVs"));
}

#[test]
fn diagnose_names_the_malformed_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("broken.csv"), "t,cp_mean\n5,not_a_number\n").unwrap();
    let out = run(&["diagnose", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("broken.csv"));
}

#[test]
fn diagnose_skips_its_own_outputs() {
    let tmp = TempDir::new().unwrap();
    fs::copy(
        fixture("diagnose/run_a/trace.csv"),
        tmp.path().join("trace.csv"),
    )
    .unwrap();
    // A stale aggregate sitting next to the traces must not be re-read.
    fs::write(tmp.path().join("stats.csv"), "t,mu\ngarbage").unwrap();
    fs::write(tmp.path().join("metrics.csv"), "mode\ngarbage").unwrap();
    let out = run(&["diagnose", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
}

// ----------------------------------------------------------------- train-toy

#[test]
fn train_toy_writes_models_and_log() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "train-toy",
        "--config",
        repo_config("train_toy.toml").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let phi = Model::load(tmp.path().join("phi.prgm")).unwrap();
    let theta = Model::load(tmp.path().join("theta.prgm")).unwrap();
    assert_eq!(phi.kind_name(), "mlp");
    assert_eq!(theta.kind_name(), "mlp");

    let log = fs::read_to_string(tmp.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("phase,step,loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 250 + 60);
    let first_loss: f64 = rows[0].split(',').nth(2).unwrap().parse().unwrap();
    let last_base: f64 = rows[249].split(',').nth(2).unwrap().parse().unwrap();
    assert!(
        last_base < first_loss,
        "training did not reduce the loss: {first_loss} -> {last_base}"
    );
}

#[test]
fn zero_finetune_steps_copy_the_base_model_exactly() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!(
            "{}\n{}",
            minimal_config(""),
            r#"
[train]
dataset_size = 16
steps = 30
learning_rate = 0.01

[train.finetune]
steps = 0
learning_rate = 0.01
"#
        ),
    );
    let out = run(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("models").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let phi = fs::read(tmp.path().join("models/phi.prgm")).unwrap();
    let theta = fs::read(tmp.path().join("models/theta.prgm")).unwrap();
    assert_eq!(phi, theta);
}

#[test]
fn train_toy_without_a_train_section_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &minimal_config(""));
    let out = run(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("models").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("[train]"));
}
