use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use longseg_core::volio::{self, MultiContrastVolume, VoxelGrid};

fn longseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        code(out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small three-time-point phantom with its atlas in `dir`.
fn phantom(dir: &Path) {
    let out = longseg(&[
        "phantom",
        "--out-dir",
        dir.to_str().unwrap(),
        "--set",
        "size=16",
        "--set",
        "times=0,1,2",
        "--set",
        "rate.3=-3",
        "--set",
        "atlas_subjects=3",
        "--seed",
        "4",
    ]);
    assert_ok(&out);
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn phantom_writes_volumes_and_atlas() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path());
    for f in [
        "tp0.mgv",
        "tp2.mgv",
        "labels_tp1.mgv",
        "volumes.csv",
        "atlas.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let table = volio::read_volume_table(dir.path().join("volumes.csv")).unwrap();
    assert_eq!(table[0].times(), vec![0.0, 1.0, 2.0]);
}

#[test]
fn fit_then_fit_long_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantom(d);

    let fit = d.join("fit");
    assert_ok(&longseg(&[
        "fit",
        "--out-dir",
        fit.to_str().unwrap(),
        "--set",
        &format!("atlas={}", p(d, "atlas.txt")),
        "--set",
        &format!("input={}", p(d, "tp0.mgv")),
    ]));
    for f in [
        "params.txt",
        "positions.txt",
        "labels.mgv",
        "volumes.csv",
        "trace.csv",
    ] {
        assert!(fit.join(f).exists(), "{f} missing");
    }

    let long = d.join("long");
    let inputs = format!(
        "inputs={},{},{}",
        p(d, "tp0.mgv"),
        p(d, "tp1.mgv"),
        p(d, "tp2.mgv")
    );
    assert_ok(&longseg(&[
        "fit-long",
        "--degenerate",
        "--out-dir",
        long.to_str().unwrap(),
        "--set",
        &format!("atlas={}", p(d, "atlas.txt")),
        "--set",
        &inputs,
        "--set",
        "times=0,1,2",
    ]));
    for t in 0..3 {
        assert!(long.join(format!("tp{t}/labels.mgv")).exists());
    }
    assert!(long.join("latents.params").exists());
    assert!(long.join("latents.pos").exists());
    let hyper = fs::read_to_string(long.join("hyper.txt")).unwrap();
    assert!(hyper.starts_with("HYPER 1\n"));
    assert!(hyper.contains("KAPPA0 1000000\n"), "{hyper}");
    let p0_line = hyper.lines().find(|l| l.starts_with("P0 ")).unwrap();
    assert!(
        p0_line.split_whitespace().skip(1).all(|v| v == "0"),
        "{p0_line}"
    );
    let table = volio::read_volume_table(long.join("volumes.csv")).unwrap();
    assert_eq!(table[0].times().len(), 3);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing_atlas = longseg(&[
        "fit",
        "--out-dir",
        d.to_str().unwrap(),
        "--set",
        "atlas=/nonexistent/atlas.txt",
        "--set",
        "input=/nonexistent/x.mgv",
    ]);
    assert_eq!(code(&missing_atlas), 2);
    let bogus = longseg(&[
        "phantom",
        "--out-dir",
        d.to_str().unwrap(),
        "--set",
        "colour=blue",
    ]);
    assert_eq!(code(&bogus), 2);
    assert_eq!(code(&longseg(&["no-such-command"])), 2);
    assert_eq!(code(&longseg(&["--help"])), 0);
}

#[test]
fn non_finite_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantom(d);
    let grid = VoxelGrid::cube(16);
    let n = grid.n_voxels();
    let mut data = vec![100.0f32; n];
    data[5] = f32::NAN;
    let mut mask = vec![true; n];
    mask[5] = false;
    let vol = MultiContrastVolume::with_mask(grid, 1, data, mask).unwrap();
    volio::write_volume(&vol, d.join("nan.mgv")).unwrap();
    let out = longseg(&[
        "fit",
        "--out-dir",
        d.join("o").to_str().unwrap(),
        "--set",
        &format!("atlas={}", p(d, "atlas.txt")),
        "--set",
        &format!("input={}", p(d, "nan.mgv")),
    ]);
    assert_eq!(
        code(&out),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn cohort_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&longseg(&[
        "phantom",
        "--cohort",
        "2",
        "--out-dir",
        d.to_str().unwrap(),
        "--set",
        "size=16",
        "--set",
        "times=0,1,2",
        "--set",
        "groups=control:0,patient:-3",
        "--set",
        "atlas_subjects=2",
    ]));
    let subjects: Vec<_> = fs::read_dir(d)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(subjects.len(), 4);
    let groups = fs::read_to_string(d.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 5);

    let m = d.join("m");
    assert_ok(&longseg(&[
        "metrics",
        "--out-dir",
        m.to_str().unwrap(),
        "--set",
        &format!("table={}", p(d, "volumes.csv")),
        "--set",
        &format!("groups={}", p(d, "groups.csv")),
        "--set",
        "folds=2",
    ]));
    let metrics = fs::read_to_string(m.join("metrics.csv")).unwrap();
    for name in ["aspc", "apc", "cohens_d", "auc"] {
        assert!(metrics.contains(name), "{name} missing from\n{metrics}");
    }
    let roc = fs::read_to_string(m.join("roc.csv")).unwrap();
    let points: Vec<(f64, f64)> = roc
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[f.len() - 2], f[f.len() - 1])
        })
        .collect();
    assert!(points
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
}

#[test]
fn metrics_on_empty_table_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("empty.csv"),
        "subject,time_years,structure,volume_mm3\n",
    )
    .unwrap();
    let out = longseg(&[
        "metrics",
        "--out-dir",
        d.to_str().unwrap(),
        "--set",
        &format!("table={}", p(d, "empty.csv")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn grid_search_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_ok(&longseg(&[
            "grid-search",
            "--out-dir",
            out.to_str().unwrap(),
            "--set",
            "size=12",
            "--set",
            "n_per_group=1",
            "--set",
            "times=0,2",
            "--set",
            "atlas_subjects=2",
            "--set",
            "outer_iterations=1",
            "--set",
            "inner_sweeps=1",
            "--set",
            "max_sweeps=2",
            "--set",
            "mesh_iterations=3",
            "--seed",
            "9",
        ]));
        fs::read(out.join("grid.csv")).unwrap()
    };
    let first = run("a");
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "kappa0_ratio,p0_ratio,median_aspc,cohens_d,status"
    );
    assert_eq!(lines.count(), 25);
    assert_eq!(first, run("b"));
}
