//! Experiment drivers behind each CLI command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use predictive_sampling::arm::{check_causality, train_arm, CausalityReport, TrainConfig, TrainCurve};
use predictive_sampling::checkpoint::{load_checkpoint, save_checkpoint};
use predictive_sampling::data::{load_idx, quantize, split, synth_bars, synth_parity, Dataset, Splits};
use predictive_sampling::forecast::{train_forecaster, ForecastCurve, ForecastTrainConfig};
use predictive_sampling::numeric::AdamConfig;
use predictive_sampling::reparam::sample_gumbel_grid;
use predictive_sampling::sampler::{
    ancestral_sample, batch_sample, predictive_sample, RunRecord, SampleReport,
};
use predictive_sampling::{
    Arm, ArmConfig, ArmModel, ForecastStrategy, Forecaster, ForecasterConfig, NoiseGrid, Rng, StrategyKind,
    TokenBuffer,
};

use crate::config::{DatasetKind, RunConfig};
use crate::report::{
    aggregate, convergence_pixels, footer, mistake_pixels, sample_pixels, summarize_ablation, write_csv_file,
    write_pgm, AblationRow, AggregateRow, BenchRow, CurveRow, REFERENCE_CALLS, REFERENCE_ABLATION,
};
use crate::{UsageError, VerificationError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn dataset_name(cfg: &RunConfig) -> &'static str {
    match cfg.dataset.kind {
        DatasetKind::Parity => "parity",
        DatasetKind::Bars => "bars",
        DatasetKind::Idx => "idx",
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let spec = &cfg.dataset;
    let mut rng = Rng::new(cfg.seed).derive("data");
    let ds = match spec.kind {
        DatasetKind::Parity => synth_parity(spec.count, spec.seq_len, spec.flip, &mut rng)?,
        DatasetKind::Bars => synth_bars(spec.count, spec.side, spec.bar_prob, &mut rng)?,
        DatasetKind::Idx => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| UsageError("--dataset.path: required for idx datasets".into()))?;
            if !path.exists() {
                return Err(UsageError(format!("--dataset.path: {} does not exist", path.display())).into());
            }
            let mut images = load_idx(path).with_context(|| format!("loading {}", path.display()))?;
            if spec.count > 0 && spec.count < images.count {
                images.count = spec.count;
                images.pixels.truncate(spec.count * images.image_len());
            }
            if spec.downsample > 1 {
                images = images.downsample(spec.downsample)?;
            }
            quantize(&images, spec.bits)?
        }
    };
    match spec.shape {
        Some([r, c]) => {
            if r * c != ds.seq_len() {
                return Err(UsageError(format!("--dataset.shape: {r}x{c} does not cover {} positions", ds.seq_len())).into());
            }
            Ok(Dataset::new(dataset_name(cfg), ds.seq_len(), ds.categories(), Some((r, c)), ds.items().to_vec())?)
        }
        None => Ok(Dataset::new(dataset_name(cfg), ds.seq_len(), ds.categories(), ds.shape(), ds.items().to_vec())?),
    }
}

pub fn build_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = build_dataset(cfg)?;
    Ok(split(&ds, cfg.dataset.fractions, &mut Rng::new(cfg.seed).derive("split"))?)
}

pub fn arm_config(cfg: &RunConfig, ds: &Dataset) -> ArmConfig {
    ArmConfig {
        embed: cfg.model.embed,
        hidden: cfg.model.hidden,
        layers: cfg.model.layers,
        ..ArmConfig::new(ds.seq_len(), ds.categories())
    }
}

pub fn forecaster_config(cfg: &RunConfig) -> ForecasterConfig {
    ForecasterConfig {
        horizon: cfg.forecaster.horizon,
        condition_on_last_token: cfg.forecaster.last_token,
        condition_on_noise: cfg.forecaster.noise,
        use_hidden: cfg.forecaster.use_hidden,
    }
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        adam: AdamConfig {
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
            ..AdamConfig::default()
        },
        eval_every: cfg.train.eval_every,
        eval_items: cfg.train.eval_items,
        forecast_weight: cfg.train.forecast_weight,
    }
}

pub fn forecast_train_config(cfg: &RunConfig) -> ForecastTrainConfig {
    ForecastTrainConfig {
        steps: cfg.forecaster.steps,
        batch_size: cfg.forecaster.batch_size,
        adam: AdamConfig {
            lr: cfg.forecaster.lr,
            ..AdamConfig::default()
        },
        eval_every: cfg.train.eval_every,
        eval_items: cfg.train.eval_items,
    }
}

pub struct Trained {
    pub model: ArmModel,
    pub forecaster: Forecaster,
    pub curve: TrainCurve,
    pub forecast_curve: Option<ForecastCurve>,
    pub splits: Splits,
}

/// Trains the model (jointly with the heads when the weight is positive),
/// then fits the heads alone for `forecaster.steps` more steps.
pub fn train(cfg: &RunConfig) -> Result<Trained> {
    let splits = build_splits(cfg)?;
    let rng = Rng::new(cfg.seed);
    let mut model = ArmModel::new(arm_config(cfg, &splits.train), &mut rng.derive("init"))?;
    let mut forecaster = Forecaster::for_model(forecaster_config(cfg), &model)?;
    let joint = cfg.train.forecast_weight > 0.0;
    let curve = train_arm(
        &mut model,
        splits.train.items(),
        splits.valid.items(),
        &train_config(cfg),
        &mut rng.derive("train"),
        joint.then_some(&mut forecaster),
    )?;
    let forecast_curve = if cfg.forecaster.steps > 0 {
        Some(train_forecaster(
            &model,
            &mut forecaster,
            splits.train.items(),
            &forecast_train_config(cfg),
            &mut rng.derive("forecaster"),
        )?)
    } else {
        None
    };
    Ok(Trained {
        model,
        forecaster,
        curve,
        forecast_curve,
        splits,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let t = train(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    save_checkpoint(cfg.output_dir.join(CHECKPOINT_FILE), &t.model, Some(&t.forecaster))?;
    let rows: Vec<CurveRow> = t
        .curve
        .points
        .iter()
        .map(|p| CurveRow {
            step: p.step,
            train_bpd: p.train_bpd,
            val_bpd: p.val_bpd,
            forecast_loss: p.forecast_loss,
        })
        .collect();
    write_csv_file(&cfg.output_dir.join("train_curve.csv"), &rows)?;
    if let Some(fc) = &t.forecast_curve {
        let rows: Vec<(usize, f64)> = fc.points.clone();
        let mut w = csv::Writer::from_path(cfg.output_dir.join("forecast_curve.csv"))?;
        w.write_record(["step", "forecast_loss"])?;
        for (s, l) in rows {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    fs::write(cfg.output_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    if let Some(last) = t.curve.last() {
        println!(
            "trained {} steps in {:.1}s: train_bpd {:.4} val_bpd {:.4}",
            last.step,
            start.elapsed().as_secs_f64(),
            last.train_bpd,
            last.val_bpd
        );
    }
    if let Some(fc) = &t.forecast_curve {
        println!(
            "forecaster loss {:.4} -> {:.4}",
            fc.initial().unwrap_or(f64::NAN),
            fc.last().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub fn load_trained(cfg: &RunConfig) -> Result<(ArmModel, Option<Forecaster>)> {
    let path = cfg.output_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(UsageError(format!(
            "--output_dir: no checkpoint at {} (run `psample train` first)",
            path.display()
        ))
        .into());
    }
    Ok(load_checkpoint(&path)?)
}

/// Noise grid for item `item` of seed `seed`, shared by every strategy so
/// comparisons are seed-matched.
pub fn noise_grid(seed: u64, item: u64, d: usize, k: usize) -> Result<NoiseGrid> {
    let mut rng = Rng::new(seed).derive("noise").derive_indexed("item", item);
    Ok(sample_gumbel_grid(&mut rng, d, k)?)
}

/// Ancestral baseline or a predictive strategy.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    Baseline,
    Predictive(ForecastStrategy<'a>),
}

pub fn sampler_for<'a>(name: &str, forecaster: Option<&'a Forecaster>) -> Result<Sampler<'a>> {
    if name == "baseline" {
        return Ok(Sampler::Baseline);
    }
    let kind = StrategyKind::parse(name).ok_or_else(|| UsageError(format!("--bench.strategies: unknown {name:?}")))?;
    Ok(Sampler::Predictive(match kind {
        StrategyKind::Zeros => ForecastStrategy::zeros(),
        StrategyKind::PredictLast => ForecastStrategy::predict_last(),
        StrategyKind::Fpi => ForecastStrategy::fpi(),
        StrategyKind::Learned => ForecastStrategy::learned(
            forecaster.ok_or_else(|| UsageError("learned strategy needs a forecaster in the checkpoint".into()))?,
        ),
    }))
}

fn first_mismatch(a: &[usize], b: &[usize]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}

/// Means over `batches` lockstep batches of size `batch_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub arm_calls: f64,
    pub call_percentage: f64,
    pub wall_time: f64,
    pub breakeven: bool,
}

/// Runs one condition and checks every sample against an ancestral replay.
pub fn measure<A: Arm + ?Sized>(
    model: &A,
    sampler: &Sampler<'_>,
    label: &str,
    batch_size: usize,
    seed: u64,
    batches: usize,
) -> Result<Measurement> {
    let d = model.seq_len();
    let k = model.categories();
    let mut calls = 0.0;
    let mut wall = 0.0;
    let mut breakeven = true;
    for b in 0..batches {
        let grids = (0..batch_size)
            .map(|j| noise_grid(seed, (b * batch_size + j) as u64, d, k))
            .collect::<Result<Vec<_>>>()?;
        match sampler {
            Sampler::Baseline => {
                let start = Instant::now();
                for g in &grids {
                    ancestral_sample(model, g)?;
                }
                wall += start.elapsed().as_secs_f64();
                calls += d as f64;
            }
            Sampler::Predictive(strategy) => {
                let out = batch_sample(model, strategy, &grids)?;
                for (j, (sample, g)) in out.samples.iter().zip(&grids).enumerate() {
                    let (reference, _) = ancestral_sample(model, g)?;
                    if let Some(pos) = first_mismatch(sample.tokens(), reference.tokens()) {
                        return Err(VerificationError(format!(
                            "exactness violation: strategy {label}, seed {seed}, batch {b}, item {j}, position {pos}"
                        ))
                        .into());
                    }
                }
                wall += out.report.wall_time;
                calls += out.report.arm_calls as f64;
                breakeven &= out.report.breakeven_satisfied;
            }
        }
    }
    let n = batches as f64;
    Ok(Measurement {
        arm_calls: calls / n,
        call_percentage: 100.0 * calls / n / d as f64,
        wall_time: wall / n,
        breakeven,
    })
}

pub fn bench_rows(cfg: &RunConfig, model: &ArmModel, forecaster: Option<&Forecaster>) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for name in &cfg.bench.strategies {
        let sampler = sampler_for(name, forecaster)?;
        for &bs in &cfg.bench.batch_sizes {
            for &seed in &cfg.bench.seeds {
                let m = measure(model, &sampler, name, bs, seed, cfg.bench.batches_per_seed)?;
                rows.push(BenchRow {
                    dataset: dataset_name(cfg).to_string(),
                    strategy: name.clone(),
                    batch_size: bs,
                    seed,
                    arm_calls: m.arm_calls,
                    call_percentage: m.call_percentage,
                    wall_time: m.wall_time,
                    breakeven: m.breakeven,
                });
            }
        }
    }
    Ok(rows)
}

fn print_summary(summary: &[AggregateRow]) {
    println!(
        "{:<10} {:<14} {:>5} {:>4} {:>18} {:>12} {:>10}",
        "dataset", "strategy", "batch", "n", "calls % (mean±sd)", "wall s", "wall ratio"
    );
    for a in summary {
        let ratio = a.wall_time_ratio.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
        println!(
            "{:<10} {:<14} {:>5} {:>4} {:>9.2} ± {:<6.2} {:>12.3e} {:>10}",
            a.dataset, a.strategy, a.batch_size, a.n, a.mean_call_percentage, a.std_call_percentage, a.mean_wall_time, ratio
        );
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let (model, forecaster) = load_trained(cfg)?;
    let rows = bench_rows(cfg, &model, forecaster.as_ref())?;
    let summary = aggregate(&rows);
    write_csv_file(&cfg.output_dir.join("bench.csv"), &rows)?;
    write_csv_file(&cfg.output_dir.join("bench_summary.csv"), &summary)?;
    write_records(cfg, &model, forecaster.as_ref())?;
    print_summary(&summary);
    println!();
    print!("{}", footer(&REFERENCE_CALLS, "binary images, batch 1"));
    Ok(())
}

fn records_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("records")
}

/// One run record per `(strategy, seed)`: the first item of the first batch.
fn write_records(cfg: &RunConfig, model: &ArmModel, forecaster: Option<&Forecaster>) -> Result<()> {
    let dir = records_dir(cfg);
    ensure_dir(&dir)?;
    for name in &cfg.bench.strategies {
        let sampler = sampler_for(name, forecaster)?;
        for &seed in &cfg.bench.seeds {
            let g = noise_grid(seed, 0, model.seq_len(), model.categories())?;
            let record = match &sampler {
                Sampler::Baseline => {
                    let (x, r) = ancestral_sample(model, &g)?;
                    RunRecord::new(seed, None, &x, r.arm_calls)
                }
                Sampler::Predictive(s) => {
                    let (x, r) = predictive_sample(model, s, &g)?;
                    RunRecord::new(seed, Some(s), &x, r.arm_calls)
                }
            };
            let mut f = fs::File::create(dir.join(format!("{name}_seed{seed}.psrn")))?;
            record.write_to(&mut f)?;
        }
    }
    Ok(())
}

pub const ABLATION_CONDITIONS: [&str; 5] = ["fpi", "fpi-no-reparam", "learned", "learned-no-reparam", "learned-no-sharing"];

pub fn ablation_strategy<'a>(condition: &str, forecaster: &'a Forecaster) -> ForecastStrategy<'a> {
    match condition {
        "fpi" => ForecastStrategy::fpi(),
        "fpi-no-reparam" => ForecastStrategy::fpi().without_reparam(),
        "learned" => ForecastStrategy::learned(forecaster),
        "learned-no-reparam" => ForecastStrategy::learned(forecaster).without_reparam(),
        "learned-no-sharing" => ForecastStrategy::learned(forecaster).without_sharing(),
        other => unreachable!("unknown ablation condition {other}"),
    }
}

/// Batch size 1. Wall time is left out so the output is deterministic.
pub fn ablation_rows(cfg: &RunConfig, model: &ArmModel, forecaster: &Forecaster) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for condition in ABLATION_CONDITIONS {
        let sampler = Sampler::Predictive(ablation_strategy(condition, forecaster));
        for &seed in &cfg.bench.seeds {
            let m = measure(model, &sampler, condition, 1, seed, cfg.bench.batches_per_seed)?;
            rows.push(AblationRow {
                condition: condition.to_string(),
                seed,
                arm_calls: m.arm_calls,
                call_percentage: m.call_percentage,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let (model, forecaster) = load_trained(cfg)?;
    let forecaster =
        forecaster.ok_or_else(|| UsageError("--output_dir: checkpoint has no forecaster to ablate".into()))?;
    let rows = ablation_rows(cfg, &model, &forecaster)?;
    let summary = summarize_ablation(&rows);
    write_csv_file(&cfg.output_dir.join("ablate.csv"), &rows)?;
    write_csv_file(&cfg.output_dir.join("ablate_summary.csv"), &summary)?;
    println!("{:<20} {:>4} {:>18}", "condition", "n", "calls % (mean±sd)");
    for s in &summary {
        println!("{:<20} {:>4} {:>9.2} ± {:<6.2}", s.condition, s.n, s.mean_call_percentage, s.std_call_percentage);
    }
    println!();
    print!("{}", footer(&REFERENCE_ABLATION, "ablation"));
    Ok(())
}

/// Images for one sampling run, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    pub strategy: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub sample: Vec<u8>,
    pub mistakes: Vec<u8>,
    pub convergence: Vec<u8>,
    pub report: SampleReport,
}

pub fn map_shape(cfg: &RunConfig, d: usize) -> Result<(usize, usize)> {
    if let Some([r, c]) = cfg.dataset.shape {
        if r * c != d {
            return Err(UsageError(format!("--dataset.shape: {r}x{c} does not cover {d} positions")).into());
        }
        return Ok((r, c));
    }
    match cfg.dataset.kind {
        DatasetKind::Bars => Ok((cfg.dataset.side, cfg.dataset.side)),
        _ => {
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(UsageError(format!(
                    "--dataset.shape: sequence length {d} is not square; give an explicit [rows, cols]"
                ))
                .into());
            }
            Ok((side, side))
        }
    }
}

pub fn map_sets(cfg: &RunConfig, model: &ArmModel, forecaster: Option<&Forecaster>) -> Result<Vec<MapSet>> {
    let d = model.seq_len();
    let k = model.categories();
    let (height, width) = map_shape(cfg, d)?;
    let mut out = Vec::new();
    for name in &cfg.maps.strategies {
        let sampler = sampler_for(name, forecaster)?;
        for &seed in &cfg.maps.seeds {
            let g = noise_grid(seed, 0, d, k)?;
            let (x, report) = match &sampler {
                Sampler::Baseline => ancestral_sample(model, &g)?,
                Sampler::Predictive(s) => {
                    let (x, r) = predictive_sample(model, s, &g)?;
                    let (reference, _) = ancestral_sample(model, &g)?;
                    if let Some(pos) = first_mismatch(x.tokens(), reference.tokens()) {
                        bail!(VerificationError(format!(
                            "exactness violation: strategy {name}, seed {seed}, position {pos}"
                        )));
                    }
                    (x, r)
                }
            };
            out.push(MapSet {
                strategy: name.clone(),
                seed,
                width,
                height,
                sample: sample_pixels(x.tokens(), k),
                mistakes: mistake_pixels(&report.mistakes),
                convergence: convergence_pixels(&report.convergence),
                report,
            });
        }
    }
    Ok(out)
}

pub fn cmd_maps(cfg: &RunConfig) -> Result<()> {
    let (model, forecaster) = load_trained(cfg)?;
    let sets = map_sets(cfg, &model, forecaster.as_ref())?;
    let dir = cfg.output_dir.join("maps");
    ensure_dir(&dir)?;
    for s in &sets {
        for (kind, px) in [("sample", &s.sample), ("mistakes", &s.mistakes), ("convergence", &s.convergence)] {
            let path = dir.join(format!("{}_seed{}_{kind}.pgm", s.strategy, s.seed));
            let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_pgm(&mut f, s.width, s.height, px)?;
        }
        println!(
            "{:<14} seed {:<3} calls {:>4} ({:.1}%)",
            s.strategy, s.seed, s.report.arm_calls, s.report.call_percentage
        );
    }
    println!("wrote {} map sets to {}", sets.len(), dir.display());
    Ok(())
}

/// Outcome of the randomized exactness suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOutcome {
    pub cases: usize,
    pub comparisons: usize,
    pub max_calls_fraction: f64,
}

const SUITE_SHAPES: [(usize, usize); 9] = [(8, 2), (8, 4), (8, 16), (32, 2), (32, 4), (32, 16), (64, 2), (64, 4), (64, 16)];

/// Random models and noise over every shape in the grid, every strategy
/// and every ablation switch, each compared bitwise to ancestral sampling.
/// Also checks `calls <= d`, the mistake identity and causality.
pub fn exactness_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut outcome = SuiteOutcome::default();
    let root = Rng::new(seed).derive("exactness");
    for case in 0..cases {
        let (d, k) = SUITE_SHAPES[case % SUITE_SHAPES.len()];
        let mut rng = root.derive_indexed("case", case as u64);
        let cfg = ArmConfig {
            embed: 4,
            hidden: 8,
            layers: 1 + rng.below(4),
            output_init_scale: 0.5 + 2.0 * rng.uniform(),
            ..ArmConfig::new(d, k)
        };
        let model = ArmModel::new(cfg, &mut rng.derive("init"))?;
        if case % 25 == 0 {
            if let CausalityReport::Fail { perturbed, position, .. } = check_causality(&model, 3, &mut rng.derive("causality"))? {
                bail!(VerificationError(format!(
                    "causality violation in case {case}: perturbing {perturbed} changed row {position}"
                )));
            }
        }
        let fcfg = ForecasterConfig {
            horizon: 1 + rng.below(4),
            condition_on_last_token: rng.bernoulli(0.5),
            condition_on_noise: rng.bernoulli(0.5),
            use_hidden: rng.bernoulli(0.8),
        };
        let forecaster = Forecaster::for_model(fcfg, &model)?.randomized(1.0, &mut rng.derive("heads"));
        let eps = sample_gumbel_grid(&mut rng.derive("noise"), d, k)?;
        let (reference, _) = ancestral_sample(&model, &eps)?;
        let strategies = [
            ("zeros", ForecastStrategy::zeros()),
            ("predict-last", ForecastStrategy::predict_last()),
            ("fpi", ForecastStrategy::fpi()),
            ("fpi-no-reparam", ForecastStrategy::fpi().without_reparam()),
            ("learned", ForecastStrategy::learned(&forecaster)),
            ("learned-no-reparam", ForecastStrategy::learned(&forecaster).without_reparam()),
            ("learned-no-sharing", ForecastStrategy::learned(&forecaster).without_sharing()),
        ];
        for (name, s) in &strategies {
            let (x, report) = predictive_sample(&model, s, &eps)?;
            check_run(case, name, &x, &reference, &report, d)?;
            outcome.comparisons += 1;
            outcome.max_calls_fraction = outcome.max_calls_fraction.max(report.arm_calls as f64 / d as f64);
        }
        outcome.cases += 1;
    }
    Ok(outcome)
}

fn check_run(case: usize, name: &str, x: &TokenBuffer, reference: &TokenBuffer, r: &SampleReport, d: usize) -> Result<()> {
    if let Some(pos) = first_mismatch(x.tokens(), reference.tokens()) {
        bail!(VerificationError(format!("exactness violation: case {case}, strategy {name}, position {pos}")));
    }
    if r.arm_calls > d || r.arm_calls == 0 {
        bail!(VerificationError(format!("case {case}, strategy {name}: {} calls for d = {d}", r.arm_calls)));
    }
    if r.total_mistakes() + 1 != r.arm_calls as u64 {
        bail!(VerificationError(format!(
            "case {case}, strategy {name}: {} mistakes for {} calls",
            r.total_mistakes(),
            r.arm_calls
        )));
    }
    Ok(())
}

/// Replays stored run records against a model: regenerates each record's
/// noise, samples ancestrally and compares tokens.
pub fn replay_records(dir: &Path, model: &ArmModel) -> Result<usize> {
    let mut checked = 0;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "psrn"))
        .collect();
    paths.sort();
    for path in paths {
        let record = RunRecord::read_from(fs::File::open(&path)?)?;
        if record.seq_len != model.seq_len() || record.categories != model.categories() {
            bail!(VerificationError(format!("{}: record shape does not match the model", path.display())));
        }
        let g = noise_grid(record.seed, 0, record.seq_len, record.categories)?;
        let (reference, _) = ancestral_sample(model, &g)?;
        if let Some(pos) = first_mismatch(&record.tokens, reference.tokens()) {
            bail!(VerificationError(format!("{}: replay differs at position {pos}", path.display())));
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let outcome = exactness_suite(cfg.verify.cases, cfg.seed)?;
    println!(
        "exactness: {} cases, {} strategy runs, all bitwise equal to ancestral ({:.1}s)",
        outcome.cases,
        outcome.comparisons,
        start.elapsed().as_secs_f64()
    );
    let records = records_dir(cfg);
    if records.is_dir() && cfg.output_dir.join(CHECKPOINT_FILE).exists() {
        let (model, _) = load_trained(cfg)?;
        let n = replay_records(&records, &model)?;
        println!("run records: {n} replayed, all match");
    }
    Ok(())
}
