use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flexpatch::config::RunConfig;
use flexpatch::datagen::read_tile;
use flexpatch::losses::Term;
use flexpatch::train::overfit_config;

fn flexpatch(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexpatch"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("FLEXPATCH_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const MICRO_RUN: &str = "\
[model]
preset = micro
[train]
steps = 4
batch_size = 2
stats_tiles = 2
[budget]
max_tokens = 48
ground_cover_max_m = 1280
";

#[test]
fn gradcheck_passes_and_lists_every_term() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for t in Term::ALL {
        assert!(text.lines().any(|l| l.starts_with(&format!("{} ", t.name()))), "{} missing", t.name());
    }
    assert!(text.lines().any(|l| l.starts_with("total ")));
    assert!(dir.path().join("gradcheck.txt").exists());
    assert!(dir.path().join("run.ini").exists());
}

#[test]
fn corrupted_gradcheck_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["gradcheck", "--corrupt-grad"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn train_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, MICRO_RUN).unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = flexpatch(&["--config", cfg, "--seed", "5", "--threads", "1", "train-toy"], out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ca = fs::read_to_string(a.join("losses.csv")).unwrap();
    assert_eq!(ca, fs::read_to_string(b.join("losses.csv")).unwrap());
    assert_eq!(ca.lines().count(), 5);
    assert!(a.join("model.ckpt").exists());
    let resolved = RunConfig::load(&a.join("run.ini")).unwrap();
    assert_eq!(resolved.seed, 5);
    assert_eq!(resolved.train.steps, 4);
    assert_eq!(resolved.out_dir, a);
}

#[test]
fn overfit_flag_uses_the_single_batch_settings() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["train-toy", "--overfit", "--steps", "30", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = RunConfig::load(&dir.path().join("run.ini")).unwrap();
    let mut want = overfit_config(3, 30);
    want.out_dir = dir.path().to_path_buf();
    assert_eq!(resolved, want);
    let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let totals: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 30);
    assert!(totals[29] < totals[0]);
}

#[test]
fn dump_alibi_writes_the_paired_grid_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["dump-alibi", "--heads", "8"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("alibi_head1.csv")).unwrap();
    let m: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(m.len(), 80);
    for i in 0..80 {
        assert_eq!(m[i].len(), 80);
        assert_eq!(m[i][i], 0.0);
        for j in 0..80 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }
    assert_eq!(m[0][1], -0.5);
    assert!(dir.path().join("alibi_head8.csv").exists());
}

#[test]
fn budget_sim_respects_the_token_cap() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["budget-sim", "--seed", "11"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("budget.csv")).unwrap();
    let mut draws = std::collections::BTreeSet::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        draws.insert(f[0].parse::<usize>().unwrap());
        let patch: usize = f[4].parse().unwrap();
        assert!((4..=32).contains(&patch));
        assert!(f[7].parse::<usize>().unwrap() <= 1296);
    }
    assert!(draws.len() > 9_000);
}

#[test]
fn empty_registry_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("bands.txt");
    fs::write(&reg, "# no groups\n").unwrap();
    let o = flexpatch(&["budget-sim", "--registry", reg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let o = flexpatch(&["--config", cfg.to_str().unwrap(), "train-toy"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = flexpatch(&["--config", "/nonexistent/run.cfg", "gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = flexpatch(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_tiles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexpatch(&["gen-tiles", "--count", "2", "--cover", "960", "--seed", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for i in 0..2 {
        let tile = read_tile(&dir.path().join(format!("tiles/tile_{i:04}.fxt"))).unwrap();
        assert_eq!(tile.footprint_m, 960.0);
        assert_eq!(tile, flexpatch::datagen::generate_tile(tile.seed, 960.0).unwrap());
    }
}

#[test]
fn output_dir_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_flexpatch"))
        .args(["dump-alibi"])
        .env("FLEXPATCH_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(target.join("alibi_head1.csv").exists());
}
