use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use predictive_sampling::checkpoint::load_checkpoint;
use predictive_sampling::{ArmModel, Rng};
use psbench::commands::{arm_config, build_dataset, map_sets, CHECKPOINT_FILE};
use psbench::config::RunConfig;
use psbench::report::{read_csv, BenchRow, CurveRow};

fn psample(dir: &Path, args: &[&str]) -> Output {
    let out_flag = format!("--output_dir={}", dir.display());
    Command::new(env!("CARGO_BIN_EXE_psample"))
        .args(args)
        .arg(out_flag)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_dataset_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = psample(dir.path(), &["train", "--dataset.kind=idx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset.path"), "{}", stderr(&o));

    let o = psample(dir.path(), &["train", "--dataset.kind=idx", "--dataset.path=/nonexistent.idx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset.path"));
}

#[test]
fn invalid_fields_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (arg, field) in [
        ("--train.lr=-1", "train.lr"),
        ("--model.depth=3", "model.depth"),
        ("--bench.seeds=[]", "bench.seeds"),
    ] {
        let o = psample(dir.path(), &["train", arg]);
        assert_eq!(o.status.code(), Some(2), "{arg}");
        assert!(stderr(&o).contains(field), "{arg}: {}", stderr(&o));
    }
    let o = psample(dir.path(), &["bench"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let o = psample(dir.path(), &["train", "--train.steps=0", "--forecaster.steps=0", "--seed=5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (model, forecaster) = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    let ds = build_dataset(&cfg).unwrap();
    let init = ArmModel::new(arm_config(&cfg, &ds), &mut Rng::new(5).derive("init")).unwrap();
    assert_eq!(model.params().flatten(), init.params().flatten());
    assert!(forecaster.unwrap().flatten().iter().all(|&v| v == 0.0));
    let curve: Vec<CurveRow> = read_csv(std::fs::File::open(dir.path().join("train_curve.csv")).unwrap()).unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].step, 0);
}

#[test]
fn bench_ablate_maps_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = psample(p, &["train", "--train.steps=150", "--forecaster.steps=100"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = psample(p, &["bench", "--bench.seeds=[0,1,2]", "--bench.batches_per_seed=2", "--bench.batch_sizes=[1,2]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("NOT comparable"));
    assert!(stdout.contains("14.5"));
    let rows: Vec<BenchRow> = read_csv(std::fs::File::open(p.join("bench.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5 * 2 * 3);
    for r in rows.iter().filter(|r| r.strategy == "baseline") {
        assert_eq!(r.call_percentage, 100.0);
    }
    for r in &rows {
        assert!(r.call_percentage <= 100.0 && r.call_percentage > 0.0);
    }

    let run_ablate = || {
        let o = psample(p, &["ablate", "--bench.seeds=[0,1]", "--bench.batches_per_seed=2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(p.join("ablate.csv")).unwrap()
    };
    let first = run_ablate();
    assert_eq!(first, run_ablate());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("condition,seed,arm_calls,call_percentage\n"));

    let o = psample(p, &["maps"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = std::fs::read(p.join("maps/baseline_seed0_mistakes.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert!(pgm[11..].iter().all(|&v| v == 0));

    let o = psample(p, &["verify", "--verify.cases=30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("run records: 15 replayed"));
}

#[test]
fn maps_need_a_square_or_explicit_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = psample(p, &["train", "--train.steps=0", "--forecaster.steps=0", "--dataset.seq_len=12"]);
    assert!(o.status.success());
    let o = psample(p, &["maps", "--dataset.seq_len=12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset.shape"));
    let o = psample(p, &["maps", "--dataset.seq_len=12", "--dataset.shape=[3,4]"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn baseline_convergence_map_is_raster_index_plus_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(psample(p, &["train", "--train.steps=20", "--forecaster.steps=0"]).status.success());
    let mut cfg = RunConfig::default();
    cfg.output_dir = p.to_path_buf();
    cfg.maps.strategies = vec!["baseline".into()];
    let (model, f) = load_checkpoint(p.join(CHECKPOINT_FILE)).unwrap();
    let sets = map_sets(&cfg, &model, f.as_ref()).unwrap();
    assert_eq!(sets[0].report.convergence, (1..=16).collect::<Vec<u32>>());
    assert!(sets[0].mistakes.iter().all(|&v| v == 0));
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Parity sequences laid out as 14×14 images; maps from the first verified
/// run are stored under tests/golden. Set `PSAMPLE_UPDATE_GOLDEN=1` to
/// rewrite them.
#[test]
fn parity_14x14_maps_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let common = [
        "--dataset.seq_len=196",
        "--dataset.count=200",
        "--model.hidden=16",
        "--model.embed=8",
        "--model.layers=3",
    ];
    let mut train_args = vec!["train", "--train.steps=60", "--train.eval_every=60", "--forecaster.steps=0"];
    train_args.extend(common);
    let o = psample(p, &train_args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut maps_args = vec!["maps", "--maps.strategies=[\"baseline\",\"zeros\",\"fpi\"]"];
    maps_args.extend(common);
    let o = psample(p, &maps_args);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = golden_dir();
    let update = std::env::var_os("PSAMPLE_UPDATE_GOLDEN").is_some();
    for strategy in ["baseline", "zeros", "fpi"] {
        for kind in ["sample", "mistakes", "convergence"] {
            let name = format!("parity14_{strategy}_seed0_{kind}.pgm");
            let produced = std::fs::read(p.join("maps").join(format!("{strategy}_seed0_{kind}.pgm"))).unwrap();
            assert!(produced.starts_with(b"P5\n14 14\n255\n"));
            if update {
                std::fs::create_dir_all(&golden).unwrap();
                std::fs::write(golden.join(&name), &produced).unwrap();
            }
            let expected = std::fs::read(golden.join(&name)).unwrap_or_else(|_| panic!("missing golden {name}"));
            assert_eq!(produced, expected, "{name}");
        }
    }
}

#[test]
fn parity_training_reaches_entropy_bound() {
    let dir = tempfile::tempdir().unwrap();
    let o = psample(dir.path(), &["train", "--forecaster.steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve: Vec<CurveRow> = read_csv(std::fs::File::open(dir.path().join("train_curve.csv")).unwrap()).unwrap();
    let last = curve.last().unwrap();
    assert_eq!(last.step, 5000);
    assert!(last.val_bpd < 0.5, "{}", last.val_bpd);
    assert!(curve.iter().all(|r| r.forecast_loss.is_some()));
}
