use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segsense::mask::{save_mask, Mask};
use segsense::metrics::read_metric_csv;

fn segsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segsense"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_masks(dir: &Path, masks: &[(&str, Mask)]) {
    fs::create_dir_all(dir).unwrap();
    for (id, m) in masks {
        save_mask(&dir.join(format!("{id}.png")), m).unwrap();
    }
}

fn blob(w: usize, h: usize, y0: usize, x0: usize, size: usize) -> Mask {
    Mask::from_fn(w, h, |y, x| {
        (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x)
    })
}

#[test]
fn evaluate_identical_dirs_gives_perfect_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    write_masks(&gt, &[("a", blob(16, 16, 2, 2, 8)), ("b", blob(16, 16, 5, 3, 6))]);
    let out_csv = tmp.path().join("metrics.csv");
    let out = segsense(&["evaluate", "--gt", s(&gt), "--pred", s(&gt), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_metric_csv(fs::File::open(&out_csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    let summary = rows.last().unwrap();
    assert_eq!(summary.pair_id, "batch_mean");
    assert!((summary.dice - 1.0).abs() < 1e-12);
    assert_eq!(summary.rmse, 0.0);
    assert_eq!(summary.hausdorff, Some(0.0));
}

#[test]
fn evaluate_summary_is_mean_of_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (gt, pr) = (tmp.path().join("gt"), tmp.path().join("pr"));
    // Second pair: tp = 1, fn = 2, fp = 0, so dice = (2 + d) / (4 + d).
    let two = Mask::from_fn(4, 4, |y, x| y == 0 && x < 2);
    let one = Mask::from_fn(4, 4, |y, x| y == 0 && x == 0);
    let three = Mask::from_fn(4, 4, |y, x| y == 0 && x < 3);
    write_masks(&gt, &[("p1", two.clone()), ("p2", three)]);
    write_masks(&pr, &[("p1", two), ("p2", one)]);
    let out = segsense(&["evaluate", "--gt", s(&gt), "--pred", s(&pr)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_metric_csv(out.stdout.as_slice()).unwrap();
    let (pairs, summary) = rows.split_at(2);
    let delta = 1e-5;
    assert!((pairs[1].dice - (2.0 + delta) / (4.0 + delta)).abs() < 1e-15);
    assert!((summary[0].dice - 0.75).abs() < 1e-5);
    let mean = |f: fn(&segsense::metrics::MetricRecord) -> f64| pairs.iter().map(f).sum::<f64>() / 2.0;
    assert_eq!(summary[0].dice, mean(|r| r.dice));
    assert_eq!(summary[0].rmse, mean(|r| r.rmse));
    assert_eq!(summary[0].loss_bce, mean(|r| r.loss_bce));
}

#[test]
fn evaluate_names_unmatched_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let (gt, pr) = (tmp.path().join("gt"), tmp.path().join("pr"));
    write_masks(
        &gt,
        &[("shared", blob(8, 8, 1, 1, 3)), ("orphan_7", blob(8, 8, 1, 1, 3))],
    );
    write_masks(&pr, &[("shared", blob(8, 8, 1, 1, 3))]);
    let out = segsense(&["evaluate", "--gt", s(&gt), "--pred", s(&pr)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("orphan_7"), "{}", stderr(&out));
}

#[test]
fn evaluate_reports_dimension_mismatch_per_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let (gt, pr) = (tmp.path().join("gt"), tmp.path().join("pr"));
    write_masks(&gt, &[("ok", blob(8, 8, 1, 1, 3)), ("bad", blob(8, 8, 1, 1, 3))]);
    write_masks(&pr, &[("ok", blob(8, 8, 1, 1, 3)), ("bad", blob(6, 8, 1, 1, 3))]);
    let out = segsense(&["evaluate", "--gt", s(&gt), "--pred", s(&pr)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("pair bad"), "{}", stderr(&out));
    let rows = read_metric_csv(out.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 2, "the good pair and the summary are still written");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&segsense(&["evaluate", "--bogus"])), 1);
    assert_eq!(code(&segsense(&["--units", "parsecs", "report", "--sweep", "x"])), 1);
    assert_eq!(code(&segsense(&["sweep"])), 1);
    assert_eq!(code(&segsense(&["--help"])), 0);
}

const SWEEP_TOML: &str = r#"
seed = 4
trials = 3
epochs = 12
batch_size = 4
ntrain_axis = [6, 12]
ntest_axis = [4, 8]

[data]
kind = "synthetic"
count = 60
width = 24
height = 24
ratios = [0.6, 0.3, 0.1]

[[models]]
name = "coarse"
kind = "synthetic"
flip_rate = 0.3
boundary_jitter = 2.0
epoch_decay = 0.15

[[models]]
name = "fine"
kind = "synthetic"
flip_rate = 0.1
epoch_decay = 0.3
"#;

#[test]
fn sweep_fit_recommend_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.toml");
    fs::write(&cfg, SWEEP_TOML).unwrap();
    let run = tmp.path().join("run");
    let out = segsense(&["--config", s(&cfg), "--out", s(&run), "sweep"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(run.join("sweep.json").is_file());
    assert!(run.join("results/fine/2/2/3/metrics.csv").is_file());

    let fits = tmp.path().join("fits");
    let out = segsense(&["--out", s(&fits), "fit", "--sweep", s(&run), "--kind", "surface"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fit_json = fs::read_to_string(fits.join("fits.json")).unwrap();
    assert!(fit_json.contains("\"kind\": \"surface\""));
    assert!(fits.join("residuals.csv").is_file());

    let out = segsense(&[
        "recommend",
        "--fits",
        s(&fits.join("fits.json")),
        "--ntrain",
        "2",
        "--ntest",
        "1",
        "--index",
        "dice",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    let first = table.lines().nth(1).unwrap();
    assert!(first.starts_with("1,fine,dice,"), "{table}");

    let out = segsense(&[
        "--units",
        "images",
        "recommend",
        "--fits",
        s(&fits.join("fits.json")),
        "--ntrain",
        "2",
        "--ntest",
        "1",
    ]);
    assert_eq!(code(&out), 1, "unit mismatch is a usage error: {}", stderr(&out));

    let exp = tmp.path().join("exp");
    let out = segsense(&["--out", s(&exp), "fit", "--sweep", s(&run), "--kind", "exp"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let residuals = fs::read_to_string(exp.join("residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), 1 + 2 * 2 * 2 * 3 * 7);

    let report = tmp.path().join("report");
    let out = segsense(&["--out", s(&report), "report", "--sweep", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in [
        "grid_means.csv",
        "box_stats.csv",
        "model_stddev.csv",
        "sensitivity.csv",
        "failed_cells.csv",
        "fits.json",
        "report.json",
    ] {
        assert!(report.join(name).is_file(), "{name}");
    }
    let sensitivity = fs::read_to_string(report.join("sensitivity.csv")).unwrap();
    assert_eq!(sensitivity.lines().count(), 8);

    // Same seed, same bytes.
    let again = tmp.path().join("again");
    let out = segsense(&["--config", s(&cfg), "--out", s(&again), "sweep"]);
    assert_eq!(code(&out), 0);
    let a = fs::read(run.join("results/coarse/1/2/2/metrics.csv")).unwrap();
    let b = fs::read(again.join("results/coarse/1/2/2/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let out = segsense(&["--config", s(&cfg), "--seed", "5", "--out", s(&again), "sweep"]);
    assert_eq!(code(&out), 0);
    let c = fs::read(again.join("results/coarse/1/2/2/metrics.csv")).unwrap();
    assert_ne!(a, c, "--seed overrides the configured seed");
}

#[test]
fn single_cell_surface_fit_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("one.toml");
    let body = SWEEP_TOML
        .replace("ntrain_axis = [6, 12]", "ntrain_axis = [6]")
        .replace("ntest_axis = [4, 8]", "ntest_axis = [4]");
    fs::write(&cfg, body).unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&segsense(&["--config", s(&cfg), "--out", s(&run), "sweep"])), 0);
    let out = segsense(&["fit", "--sweep", s(&run), "--kind", "surface"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("rank-deficient"), "{}", stderr(&out));
}

/// Directory data source plus one external predictor.
fn external_config(dir: &Path, command: &str, timeout: f64) -> PathBuf {
    let masks = dir.join("masks");
    let shapes: Vec<(String, Mask)> = (0..12)
        .map(|i| (format!("m{i:02}"), blob(24, 24, i % 6, (i * 5) % 12, 9)))
        .collect();
    write_masks(
        &masks,
        &shapes
            .iter()
            .map(|(id, m)| (id.as_str(), m.clone()))
            .collect::<Vec<_>>(),
    );
    // Every stub mentions the required placeholders.
    let command = format!("true {{train_manifest}} {{test_manifest}} {{out_dir}} {{seed}} {{epochs}}; {command}");
    let cfg = dir.join("external.toml");
    let body = format!(
        r#"
seed = 1
trials = 2
epochs = 3
ntrain_axis = [2, 4]
ntest_axis = [3]

[data]
kind = "directory"
path = "{}"
min_foreground = 10
ratios = [0.5, 0.4, 0.1]

[[models]]
name = "stub"
kind = "external"
command = '''{command}'''
timeout_secs = {timeout}
"#,
        masks.display()
    );
    fs::write(&cfg, body).unwrap();
    cfg
}

#[test]
fn external_predictor_copying_ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let cmd = r#"test -s {train_manifest} && test {epochs} = 3 && test -n "{seed}" && for id in $(tr -d '[]"' < {test_manifest} | tr ',' ' '); do cp {mask_dir}/$id.png {out_dir}/$id.png; done"#;
    let cfg = external_config(tmp.path(), cmd, 60.0);
    let run = tmp.path().join("run");
    let out = segsense(&["--config", s(&cfg), "--out", s(&run), "sweep"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = fs::read_to_string(run.join("results/stub/2/1/1/metrics.csv")).unwrap();
    let row: Vec<&str> = trace.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "3", "flat output is the final epoch");
    assert_eq!(row[1].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[4], "0");
}

#[test]
fn external_predictor_per_epoch_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cmd = r#"for e in 1 2 3; do mkdir -p {out_dir}/epoch_$e; for id in $(tr -d '[]"' < {test_manifest} | tr ',' ' '); do cp {mask_dir}/$id.png {out_dir}/epoch_$e/$id.png; done; done"#;
    let cfg = external_config(tmp.path(), cmd, 60.0);
    let run = tmp.path().join("run");
    assert_eq!(code(&segsense(&["--config", s(&cfg), "--out", s(&run), "sweep"])), 0);
    let trace = fs::read_to_string(run.join("results/stub/1/1/2/metrics.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

fn failed_reasons(report: &Path) -> Vec<String> {
    let text = fs::read_to_string(report.join("failed_cells.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().to_string())
        .collect()
}

#[test]
fn failing_predictors_are_recorded_per_cell() {
    for (cmd, timeout, reason, detail) in [
        ("echo broken >&2; exit 3", 60.0, "non_zero_exit", "broken"),
        ("true", 60.0, "missing_predictions", ""),
        ("sleep 5", 0.2, "timeout", ""),
    ] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = external_config(tmp.path(), cmd, timeout);
        let run = tmp.path().join("run");
        let out = segsense(&["--config", s(&cfg), "--out", s(&run), "sweep"]);
        assert_eq!(code(&out), 3, "{cmd}: {}", stderr(&out));
        assert!(stderr(&out).contains(detail), "{}", stderr(&out));

        let report = tmp.path().join("report");
        let out = segsense(&["--out", s(&report), "report", "--sweep", s(&run)]);
        assert_eq!(code(&out), 3, "all cells failed");
        assert_eq!(failed_reasons(&report), vec![reason.to_string(); 4], "{cmd}");
        let means = fs::read_to_string(report.join("grid_means.csv")).unwrap();
        assert_eq!(means.lines().count(), 1, "only the header");
    }
}

#[test]
fn volume_from_stacks_and_series() {
    let tmp = tempfile::tempdir().unwrap();
    let mut manifest = String::from("day,modality,stack_dir\n");
    for (day, oct, octa) in [(0, 20, 10), (7, 30, 36), (14, 40, 30)] {
        for (modality, count) in [("OCT", oct), ("OCT-A", octa)] {
            let dir = tmp.path().join(format!("{modality}_{day}"));
            fs::create_dir_all(&dir).unwrap();
            for z in 0..2 {
                let m = Mask::from_fn(10, 10, |y, x| y * 10 + x < count / 2);
                save_mask(&dir.join(format!("slice_{z:03}.png")), &m).unwrap();
            }
            manifest.push_str(&format!(
                "{day},{modality},{}\n",
                dir.file_name().unwrap().to_str().unwrap()
            ));
        }
    }
    let path = tmp.path().join("stacks.csv");
    fs::write(&path, manifest).unwrap();
    let out_dir = tmp.path().join("vol");
    let out = segsense(&["--out", s(&out_dir), "volume", "--stacks", s(&path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ratio = fs::read_to_string(out_dir.join("ratio.csv")).unwrap();
    assert_eq!(ratio, "day,ratio\n0,0.5\n7,1.2\n14,0.75\n");
    let series = fs::read_to_string(out_dir.join("series.csv")).unwrap();
    assert!(series.contains("14,OCT,OCT_14,40,1\n"), "{series}");

    let out = segsense(&["volume", "--series", s(&out_dir.join("series.csv"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), series);
}

#[test]
fn split_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let masks = tmp.path().join("m");
    let list: Vec<(String, Mask)> = (0..20).map(|i| (format!("id{i}"), blob(16, 16, 1, 1, 8))).collect();
    write_masks(
        &masks,
        &list.iter().map(|(a, m)| (a.as_str(), m.clone())).collect::<Vec<_>>(),
    );
    let run = |seed: &str| {
        let out = segsense(&["--seed", seed, "split", "--masks", s(&masks), "--ratios", "0.6,0.2,0.2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    assert_ne!(a, run("4"));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["train"].as_array().unwrap().len(), 12);
    assert_eq!(v["test"].as_array().unwrap().len(), 4);
}

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/sweep.example.toml");
    let file = segsense::report::SweepFile::load(&path).unwrap();
    file.sweep.validate().unwrap();
    assert_eq!(file.sweep.models.len(), 2);
    assert_eq!(file.sweep.cell_count(), 2 * 3 * 2 * 8);
}
