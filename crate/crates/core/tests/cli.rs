use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tacgan::cli::{read_grid, sidecar_path, GridCell};

const BIN: &str = env!("CARGO_BIN_EXE_tacgan");

fn tacgan(args: &[&str]) -> Output {
    tacgan_env(args, &[])
}

fn tacgan_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("TACGAN_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two-class 16px dataset and a run config for the tiny model.
struct Fixture {
    dir: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let data = dir.join("data");
        ok(&tacgan(&[
            "make-dataset", "--classes", "2", "--per-class", "8", "--resolution", "16", "--seed", "3", "--out", s(&data),
        ]));
        let config = dir.join("run.cfg");
        fs::write(
            &config,
            format!(
                "# tiny test run\npreset = tiny\nresolution = 16\ndataset_root = {}\nbatch_size = 8\ncheckpoint_every = 2\n",
                data.display()
            ),
        )
        .unwrap();
        let run = dir.join("run");
        ok(&tacgan(&["train", "--config", s(&config), "--steps", "4", "--seed", "7", "--out", s(&run)]));
        Fixture {
            checkpoint: run.join("final.ckpt"),
            dir,
            config,
        }
    })
}

fn cells(png: &Path) -> Vec<GridCell> {
    read_grid(png).unwrap()
}

#[test]
fn training_twice_gives_identical_logs_and_checkpoints() {
    let f = fixture();
    let other = scratch("train_again");
    ok(&tacgan(&["train", "--config", s(&f.config), "--steps", "4", "--seed", "7", "--out", s(&other)]));
    let run = f.checkpoint.parent().unwrap();
    let log = fs::read_to_string(run.join("losses.tsv")).unwrap();
    assert_eq!(log, fs::read_to_string(other.join("losses.tsv")).unwrap());
    assert_eq!(log.lines().next().unwrap(), "step\tL_DS\tL_DC\tL_GS\tL_GC");
    assert_eq!(log.lines().count(), 5);
    for name in ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt"] {
        assert_eq!(fs::read(run.join(name)).unwrap(), fs::read(other.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let f = fixture();
    let dir = scratch("resume");
    ok(&tacgan(&["train", "--config", s(&f.config), "--steps", "2", "--seed", "7", "--out", s(&dir)]));
    ok(&tacgan(&[
        "train", "--config", s(&f.config), "--steps", "4", "--seed", "7", "--out", s(&dir), "--resume",
        s(&dir.join("step_000002.ckpt")),
    ]));
    let run = f.checkpoint.parent().unwrap();
    assert_eq!(fs::read(dir.join("final.ckpt")).unwrap(), fs::read(run.join("final.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(dir.join("losses.tsv")).unwrap(),
        fs::read_to_string(run.join("losses.tsv")).unwrap()
    );
    let bad_seed = tacgan(&[
        "train", "--config", s(&f.config), "--steps", "4", "--seed", "8", "--out", s(&dir), "--resume",
        s(&dir.join("step_000002.ckpt")),
    ]);
    assert_eq!(bad_seed.status.code(), Some(2));
}

#[test]
fn missing_dataset_root_exits_2_naming_the_path() {
    let dir = scratch("missing_root");
    let out_dir = dir.join("never");
    let gone = dir.join("no_such_dataset");
    let out = tacgan(&["train", "--set", &format!("dataset_root={}", gone.display()), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&gone)));
    assert!(!out_dir.exists(), "no partial output");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let f = fixture();
    assert_eq!(tacgan(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(tacgan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tacgan(&["--help"]).status.code(), Some(0));
    let dir = scratch("config_errors");
    let bad = dir.join("bad.cfg");
    fs::write(&bad, "seed = 1\nbogus_key = 2\n").unwrap();
    let out = tacgan(&["embed", "--config", s(&bad), "a red circle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
    let grid = dir.join("g.png");
    let out = tacgan(&["sample", "--checkpoint", s(&dir.join("none.ckpt")), "--caption", "x", "--out", s(&grid)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!grid.exists());
    let out = tacgan(&["sample", "--checkpoint", s(&f.checkpoint), "--out", s(&grid)]);
    assert_eq!(out.status.code(), Some(2), "no captions");
    let out = tacgan(&[
        "interp-z", "--checkpoint", s(&f.checkpoint), "--caption", "x", "--z-seeds", "1", "2", "--steps", "1",
        "--out", s(&grid),
    ]);
    assert_eq!(out.status.code(), Some(2), "steps < 2");
    assert!(!grid.exists());
}

#[test]
fn numerical_failure_exits_3() {
    let f = fixture();
    let dir = scratch("blowup");
    let out = tacgan(&[
        "train", "--config", s(&f.config), "--steps", "6", "--set", "learning_rate=1e300", "--out", s(&dir),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let f = fixture();
    let dir = scratch("env");
    let (a, b, c, d) = (dir.join("a"), dir.join("b"), dir.join("c"), dir.join("d"));
    let seeded = dir.join("seeded.cfg");
    fs::write(&seeded, fs::read_to_string(&f.config).unwrap() + "seed = 1\n").unwrap();
    ok(&tacgan_env(&["train", "--config", s(&seeded), "--steps", "1", "--out", s(&a)], &[("TACGAN_SEED", "7")]));
    ok(&tacgan(&["train", "--config", s(&seeded), "--steps", "1", "--out", s(&d)]));
    ok(&tacgan(&["train", "--config", s(&f.config), "--steps", "1", "--seed", "7", "--out", s(&b)]));
    ok(&tacgan_env(
        &["train", "--config", s(&f.config), "--steps", "1", "--seed", "7", "--out", s(&c)],
        &[("TACGAN_SEED", "99")],
    ));
    let log = |d: &Path| fs::read_to_string(d.join("losses.tsv")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_eq!(log(&c), log(&b));
    assert_ne!(log(&d), log(&b), "the file seed applies without overrides");
    let unknown = tacgan_env(&["embed", "x"], &[("TACGAN_NOPE", "1")]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn sample_grid_shape_and_repeatability() {
    let f = fixture();
    let dir = scratch("sample");
    let (g1, g2) = (dir.join("one.png"), dir.join("two.png"));
    let args = |p: &Path| {
        vec![
            "sample".to_string(),
            "--checkpoint".into(),
            s(&f.checkpoint).into(),
            "--caption".into(),
            "a red circle".into(),
            "--caption".into(),
            "a blue square".into(),
            "--n".into(),
            "4".into(),
            "--seed".into(),
            "11".into(),
            "--out".into(),
            s(p).into(),
        ]
    };
    ok(&tacgan(&args(&g1).iter().map(String::as_str).collect::<Vec<_>>()));
    ok(&tacgan(&args(&g2).iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    assert_eq!(fs::read(sidecar_path(&g1)).unwrap(), fs::read(sidecar_path(&g2)).unwrap());
    let cells = cells(&g1);
    assert_eq!(cells.len(), 8);
    assert_eq!(cells.iter().map(|c| c.row).max(), Some(1));
    assert_eq!(cells.iter().map(|c| c.col).max(), Some(3));
    assert!(cells.iter().filter(|c| c.row == 1).all(|c| c.meta.caption == "a blue square"));
    let png = image::open(&g1).unwrap();
    assert_eq!((png.width(), png.height()), (4 * 18 + 2, 2 * 18 + 2));
    assert_ne!(cells[0].image, cells[1].image, "columns use different noise");
}

#[test]
fn sample_with_ground_truth_column() {
    let f = fixture();
    let manifest = fs::read_to_string(f.dir.join("data/manifest.tsv")).unwrap();
    let caption = manifest.lines().nth(1).unwrap().split('\t').nth(2).unwrap().to_string();
    let grid = scratch("ground_truth").join("g.png");
    ok(&tacgan(&[
        "sample", "--checkpoint", s(&f.checkpoint), "--caption", &caption, "--caption", "no such caption here",
        "--n", "2", "--ground-truth", "--out", s(&grid),
    ]));
    let cells = cells(&grid);
    assert_eq!(cells.len(), 5);
    let truth: Vec<_> = cells.iter().filter(|c| c.meta.kind == tacgan::cli::CellKind::GroundTruth).collect();
    assert_eq!(truth.len(), 1);
    assert_eq!((truth[0].row, truth[0].col), (0, 2));
    assert!(truth[0].meta.source.ends_with(".png"));
}

fn sample_cell(f: &Fixture, caption: &str, seed: u64, dir: &Path) -> GridCell {
    let png = dir.join(format!("sample_{seed}_{}.png", caption.replace(' ', "_")));
    ok(&tacgan(&[
        "sample", "--checkpoint", s(&f.checkpoint), "--caption", caption, "--n", "1", "--seed", &seed.to_string(),
        "--out", s(&png),
    ]));
    cells(&png).remove(0)
}

#[test]
fn interp_z_endpoints_match_direct_samples() {
    let f = fixture();
    let dir = scratch("interp_z");
    let png = dir.join("z.png");
    ok(&tacgan(&[
        "interp-z", "--checkpoint", s(&f.checkpoint), "--caption", "a red circle", "--z-seeds", "5", "9", "--steps",
        "8", "--out", s(&png),
    ]));
    let row = cells(&png);
    assert_eq!(row.len(), 8);
    assert_eq!(row[0].meta.alpha, Some(0.0));
    assert_eq!(row[7].meta.alpha, Some(1.0));
    assert_eq!(row[0].image, sample_cell(f, "a red circle", 5, &dir).image);
    assert_eq!(row[7].image, sample_cell(f, "a red circle", 9, &dir).image);

    let two = dir.join("two.png");
    ok(&tacgan(&[
        "interp-z", "--checkpoint", s(&f.checkpoint), "--caption", "a red circle", "--z-seeds", "5", "9", "--steps",
        "2", "--out", s(&two),
    ]));
    let two = cells(&two);
    assert_eq!(two.len(), 2);
    assert_eq!((&two[0].image, &two[1].image), (&row[0].image, &row[7].image));

    let same = dir.join("same.png");
    ok(&tacgan(&[
        "interp-z", "--checkpoint", s(&f.checkpoint), "--caption", "a red circle", "--z-seeds", "5", "5", "--steps",
        "3", "--out", s(&same),
    ]));
    let same = cells(&same);
    assert!(same.iter().all(|c| c.image == same[0].image));
}

#[test]
fn interp_text_endpoints_and_identical_captions() {
    let f = fixture();
    let dir = scratch("interp_text");
    let png = dir.join("t.png");
    ok(&tacgan(&[
        "interp-text", "--checkpoint", s(&f.checkpoint), "--from", "a red circle", "--to", "a blue square",
        "--z-seed", "4", "--steps", "8", "--out", s(&png),
    ]));
    let row = cells(&png);
    assert_eq!(row.len(), 8);
    assert_eq!(row[0].image, sample_cell(f, "a red circle", 4, &dir).image);
    assert_eq!(row[7].image, sample_cell(f, "a blue square", 4, &dir).image);
    assert_ne!(row[0].image, row[7].image);

    let same = dir.join("same.png");
    ok(&tacgan(&[
        "interp-text", "--checkpoint", s(&f.checkpoint), "--from", "a red circle", "--to", "a red circle",
        "--z-seed", "4", "--steps", "5", "--out", s(&same),
    ]));
    let same = cells(&same);
    assert!(same.iter().all(|c| c.image == same[0].image));
}

#[test]
fn evaluate_untrained_generator_populates_every_field() {
    let f = fixture();
    let dir = scratch("evaluate");
    let untrained = dir.join("untrained");
    ok(&tacgan(&["train", "--config", s(&f.config), "--steps", "0", "--out", s(&untrained)]));
    let ck = untrained.join("final.ckpt");
    let (r1, r2) = (dir.join("r1"), dir.join("r2"));
    for r in [&r1, &r2] {
        ok(&tacgan(&[
            "evaluate", "--checkpoint", s(&ck), "--n", "2", "--probe-steps", "20", "--seed", "1", "--out", s(r),
        ]));
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(r1.join("summary.json")).unwrap()).unwrap();
    for key in ["overall_mean", "overall_std", "score_mean", "score_std", "seed", "config", "training"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    for key in ["overall_mean", "overall_std", "score_mean", "score_std"] {
        assert!(summary[key].as_f64().unwrap().is_finite(), "{key}");
        assert!(summary["training"][key].as_f64().unwrap().is_finite(), "training {key}");
    }
    assert_eq!(summary["seed"], 1);
    let generated = fs::read_to_string(r1.join("generated.tsv")).unwrap();
    assert_eq!(generated.lines().next().unwrap(), "class_id\tmean_msssim\tn_pairs");
    assert_eq!(generated.lines().count(), 3);
    assert!(generated.lines().skip(1).all(|l| l.ends_with("\t1")));
    for name in ["training.tsv", "generated.tsv", "summary.json"] {
        assert_eq!(fs::read(r1.join(name)).unwrap(), fs::read(r2.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn embed_prints_table_rows() {
    let f = fixture();
    let out = tacgan(&["embed", "--config", s(&f.config), "a red circle", "a blue square"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    let (caption, values) = rows[0].split_once('\t').unwrap();
    assert_eq!(caption, "a red circle");
    assert_eq!(values.split(',').count(), 16);
    let from_ck = tacgan(&["embed", "--checkpoint", s(&f.checkpoint), "a red circle"]);
    ok(&from_ck);
    assert_eq!(String::from_utf8(from_ck.stdout).unwrap().lines().next(), Some(rows[0]));

    let table = scratch("embed").join("table.tsv");
    ok(&tacgan(&["embed", "--config", s(&f.config), "a red circle", "--out", s(&table)]));
    let other = tacgan(&[
        "sample", "--checkpoint", s(&f.checkpoint), "--set", "encoder=table", "--set",
        &format!("embedding_table={}", table.display()), "--caption", "unlisted caption", "--out",
        s(&table.with_extension("png")),
    ]);
    assert_eq!(other.status.code(), Some(2), "caption missing from the table");
}
