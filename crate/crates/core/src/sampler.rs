//! Sampling engine.
//!
//! Every sampler here is a deterministic function of `(model, noise grid)`.
//! The ancestral sampler defines the reference output; the predictive and
//! fixed-point samplers reproduce it bit for bit while usually spending far
//! fewer model calls.
//!
//! The predictive loop keeps a frontier `i` below which the buffer holds
//! validated tokens. Each iteration fills positions `>= i` with forecasts,
//! runs one model pass, and walks the frontier forward while each forecast
//! agrees with the model's reparametrized output. The first disagreement is
//! overwritten with the model's (valid) output and the frontier steps past it.

use std::io::{Read, Write};
use std::time::Instant;

use crate::arm::{Arm, Forward, TokenBuffer};
use crate::codec::{write_u32, write_u64, Reader};
use crate::error::{Error, Result};
use crate::forecast::{forecast_tokens, Forecaster};
use crate::numeric::Rng;
use crate::reparam::{argmax, perturbed_argmax, NoiseGrid};

/// How forecasts for the unvalidated suffix are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    /// Every forecast is category 0.
    Zeros,
    /// Every forecast repeats the last validated token (0 before any).
    PredictLast,
    /// Forecasts are the model's own outputs from the previous pass.
    Fpi,
    /// Learned heads for the first `T` offsets, previous model outputs after.
    Learned,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Zeros,
        StrategyKind::PredictLast,
        StrategyKind::Fpi,
        StrategyKind::Learned,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Zeros => "zeros",
            StrategyKind::PredictLast => "predict-last",
            StrategyKind::Fpi => "fpi",
            StrategyKind::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn code(&self) -> u32 {
        match self {
            StrategyKind::Zeros => 1,
            StrategyKind::PredictLast => 2,
            StrategyKind::Fpi => 3,
            StrategyKind::Learned => 4,
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A forecasting strategy plus its ablation switches.
#[derive(Debug, Clone, Copy)]
pub struct ForecastStrategy<'a> {
    pub kind: StrategyKind,
    pub forecaster: Option<&'a Forecaster>,
    /// Forecast with `argmax(mu + eps)`; when off, with `argmax(mu)`.
    pub use_reparam_noise: bool,
    /// Feed the model's hidden row to the heads; when off it is zeroed.
    pub share_representation: bool,
}

impl<'a> ForecastStrategy<'a> {
    fn with_kind(kind: StrategyKind) -> Self {
        Self {
            kind,
            forecaster: None,
            use_reparam_noise: true,
            share_representation: true,
        }
    }

    pub fn zeros() -> Self {
        Self::with_kind(StrategyKind::Zeros)
    }

    pub fn predict_last() -> Self {
        Self::with_kind(StrategyKind::PredictLast)
    }

    pub fn fpi() -> Self {
        Self::with_kind(StrategyKind::Fpi)
    }

    pub fn learned(forecaster: &'a Forecaster) -> Self {
        Self {
            forecaster: Some(forecaster),
            ..Self::with_kind(StrategyKind::Learned)
        }
    }

    pub fn without_reparam(mut self) -> Self {
        self.use_reparam_noise = false;
        self
    }

    pub fn without_sharing(mut self) -> Self {
        self.share_representation = false;
        self
    }

    pub fn validate<A: Arm + ?Sized>(&self, model: &A) -> Result<()> {
        match (self.kind, self.forecaster) {
            (StrategyKind::Learned, None) => Err(Error::InvalidArgument(
                "learned strategy needs a forecaster".into(),
            )),
            (StrategyKind::Learned, Some(f)) => f.check_compatible(model),
            _ => Ok(()),
        }
    }

    fn flags(&self) -> u32 {
        u32::from(self.use_reparam_noise) | (u32::from(self.share_representation) << 1)
    }
}

/// Accounting for one sampling run (or one lockstep batch).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Parallel model passes spent.
    pub arm_calls: usize,
    /// Passes ancestral sampling needs, i.e. `d`.
    pub baseline_calls: usize,
    pub call_percentage: f64,
    /// Iterations of the sampling loop.
    pub iterations: usize,
    /// Per position: forecast disagreements that forced another pass.
    pub mistakes: Vec<u32>,
    /// Per position: first iteration from which the model output there
    /// never changed again (1-based).
    pub convergence: Vec<u32>,
    /// Seconds spent in the sampling loop, forecasting included.
    pub wall_time: f64,
    /// Median seconds per model pass.
    pub arm_cost: f64,
    /// Median seconds per forecasting step.
    pub forecaster_cost: f64,
    /// Whether `m * cost(F) <= (d - m) * cost(ARM)` held for this run.
    pub breakeven_satisfied: bool,
}

impl SampleReport {
    fn finish(
        arm_calls: usize,
        d: usize,
        mistakes: Vec<u32>,
        convergence: Vec<u32>,
        wall_time: f64,
        arm_times: &mut [f64],
        forecast_times: &mut [f64],
    ) -> Self {
        let arm_cost = median(arm_times);
        let forecaster_cost = median(forecast_times);
        let m = arm_calls as f64;
        Self {
            arm_calls,
            baseline_calls: d,
            call_percentage: 100.0 * m / d as f64,
            iterations: arm_calls,
            mistakes,
            convergence,
            wall_time,
            arm_cost,
            forecaster_cost,
            breakeven_satisfied: m * forecaster_cost <= (d as f64 - m) * arm_cost,
        }
    }

    pub fn total_mistakes(&self) -> u64 {
        self.mistakes.iter().map(|&m| u64::from(m)).sum()
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn secs_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Reference sampler: `d` passes, position `i` sampled on pass `i + 1`.
pub fn ancestral_sample<A: Arm + ?Sized>(model: &A, eps: &NoiseGrid) -> Result<(TokenBuffer, SampleReport)> {
    let d = model.seq_len();
    let k = model.categories();
    eps.check_shape(d, k)?;
    let start = Instant::now();
    let mut buffer = TokenBuffer::zeros(d, k);
    let mut arm_times = Vec::with_capacity(d);
    for i in 0..d {
        let t = Instant::now();
        let fwd = model.forward(&buffer)?;
        arm_times.push(secs_since(t));
        let x = perturbed_argmax(fwd.logits.row(i), eps.row(i));
        buffer.set(i, x)?;
        buffer.advance_frontier(i + 1)?;
    }
    let wall = secs_since(start);
    let report = SampleReport::finish(
        d,
        d,
        vec![0; d],
        (1..=d as u32).collect(),
        wall,
        &mut arm_times,
        &mut [],
    );
    Ok((buffer, report))
}

/// State of one predictive-sampling run, advanced one pass at a time so
/// single runs and lockstep batches share the same logic.
struct PredictiveRun<'s, 'f> {
    strategy: &'s ForecastStrategy<'f>,
    eps: &'s NoiseGrid,
    buffer: TokenBuffer,
    previous: Option<Forward>,
    outputs: Vec<usize>,
    mistakes: Vec<u32>,
    convergence: Vec<u32>,
    iterations: usize,
    forecast_times: Vec<f64>,
}

impl<'s, 'f> PredictiveRun<'s, 'f> {
    fn new(strategy: &'s ForecastStrategy<'f>, eps: &'s NoiseGrid, d: usize, k: usize) -> Self {
        Self {
            strategy,
            eps,
            buffer: TokenBuffer::zeros(d, k),
            previous: None,
            outputs: vec![0; d],
            mistakes: vec![0; d],
            convergence: vec![0; d],
            iterations: 0,
            forecast_times: Vec::new(),
        }
    }

    fn done(&self) -> bool {
        self.buffer.is_complete()
    }

    /// The model's output at `j` from the previous pass, as a forecast.
    fn previous_output(&self, prev: &Forward, j: usize) -> usize {
        if self.strategy.use_reparam_noise {
            perturbed_argmax(prev.logits.row(j), self.eps.row(j))
        } else {
            argmax(prev.logits.row(j))
        }
    }

    /// Writes forecasts into every position at or above the frontier.
    fn fill_forecasts(&mut self) -> Result<()> {
        let t = Instant::now();
        let d = self.buffer.len();
        let i = self.buffer.frontier();
        let forecasts: Vec<usize> = match (self.strategy.kind, self.previous.as_ref()) {
            (StrategyKind::Zeros, _) | (StrategyKind::Fpi | StrategyKind::Learned, None) => vec![0; d - i],
            (StrategyKind::PredictLast, _) => {
                let last = if i == 0 { 0 } else { self.buffer.get(i - 1) };
                vec![last; d - i]
            }
            (StrategyKind::Fpi, Some(prev)) => (i..d).map(|j| self.previous_output(prev, j)).collect(),
            (StrategyKind::Learned, Some(prev)) => {
                let f = self.strategy.forecaster.expect("validated");
                // The previous pass saw valid tokens below i - 1, so its
                // hidden row i - 1 is valid.
                let count = f.horizon().min(d - i);
                let eps_rows: Vec<&[f64]> = (i..i + count).map(|j| self.eps.row(j)).collect();
                let rows = f.forecast_logits_inner(
                    prev.hidden.row(i - 1),
                    self.buffer.get(i - 1),
                    Some(&eps_rows),
                    count,
                    self.strategy.share_representation,
                )?;
                let mut out = forecast_tokens(&rows, &eps_rows, self.strategy.use_reparam_noise)?;
                out.extend((i + count..d).map(|j| self.previous_output(prev, j)));
                out
            }
        };
        for (j, tok) in (i..d).zip(forecasts) {
            self.buffer.set(j, tok)?;
        }
        self.forecast_times.push(secs_since(t));
        Ok(())
    }

    /// Consumes one model pass over the current buffer.
    fn absorb(&mut self, fwd: Forward) {
        let d = self.buffer.len();
        let frontier = self.buffer.frontier();
        self.iterations += 1;
        let n = self.iterations as u32;
        for j in 0..d {
            let out = if j < frontier {
                self.buffer.get(j)
            } else {
                perturbed_argmax(fwd.logits.row(j), self.eps.row(j))
            };
            if n == 1 || out != self.outputs[j] {
                self.convergence[j] = n;
            }
            self.outputs[j] = out;
        }
        let mut i = frontier;
        while i < d && self.buffer.get(i) == self.outputs[i] {
            i += 1;
        }
        if i < d {
            self.buffer.set(i, self.outputs[i]).expect("at frontier, in range");
            i += 1;
            if i < d {
                self.mistakes[i - 1] += 1;
            }
        }
        self.buffer.advance_frontier(i).expect("frontier only advances");
        self.previous = Some(fwd);
    }
}

/// Predictive sampling with the given strategy.
///
/// Returns exactly the tokens of [`ancestral_sample`] under the same noise,
/// using at most `d` passes.
pub fn predictive_sample<A: Arm + ?Sized>(
    model: &A,
    strategy: &ForecastStrategy<'_>,
    eps: &NoiseGrid,
) -> Result<(TokenBuffer, SampleReport)> {
    let d = model.seq_len();
    let k = model.categories();
    eps.check_shape(d, k)?;
    strategy.validate(model)?;
    let start = Instant::now();
    let mut run = PredictiveRun::new(strategy, eps, d, k);
    let mut arm_times = Vec::new();
    while !run.done() {
        run.fill_forecasts()?;
        let t = Instant::now();
        let fwd = model.forward(&run.buffer)?;
        arm_times.push(secs_since(t));
        run.absorb(fwd);
    }
    let wall = secs_since(start);
    let report = SampleReport::finish(
        run.iterations,
        d,
        run.mistakes,
        run.convergence,
        wall,
        &mut arm_times,
        &mut run.forecast_times,
    );
    Ok((run.buffer, report))
}

/// Fixed-point iteration `x <- g(x, eps)` from the zero vector, run through
/// the frontier-tracking loop so no confirmation pass is spent.
pub fn fixed_point_sample<A: Arm + ?Sized>(model: &A, eps: &NoiseGrid) -> Result<(TokenBuffer, SampleReport)> {
    predictive_sample(model, &ForecastStrategy::fpi(), eps)
}

/// Result of [`batch_sample`].
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub samples: Vec<TokenBuffer>,
    /// Batch-level accounting: `arm_calls` counts lockstep passes, mistakes
    /// are summed and convergence iterations maximized over the batch.
    pub report: SampleReport,
    pub per_sample: Vec<SampleReport>,
}

/// Lockstep predictive sampling of a batch: one batched pass per
/// iteration over the unfinished samples. The slowest sample sets the cost.
pub fn batch_sample<A: Arm + ?Sized>(
    model: &A,
    strategy: &ForecastStrategy<'_>,
    eps_batch: &[NoiseGrid],
) -> Result<BatchOutput> {
    if eps_batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = model.seq_len();
    let k = model.categories();
    for e in eps_batch {
        e.check_shape(d, k)?;
    }
    strategy.validate(model)?;
    let start = Instant::now();
    let mut runs: Vec<PredictiveRun> = eps_batch.iter().map(|e| PredictiveRun::new(strategy, e, d, k)).collect();
    let mut arm_times = Vec::new();
    let mut lockstep = 0;
    loop {
        let active: Vec<usize> = (0..runs.len()).filter(|&r| !runs[r].done()).collect();
        if active.is_empty() {
            break;
        }
        for &r in &active {
            runs[r].fill_forecasts()?;
        }
        let t = Instant::now();
        let buffers: Vec<&TokenBuffer> = active.iter().map(|&r| &runs[r].buffer).collect();
        let outputs = model.forward_batch(&buffers)?;
        arm_times.push(secs_since(t));
        for (&r, fwd) in active.iter().zip(outputs) {
            runs[r].absorb(fwd);
        }
        lockstep += 1;
    }
    let wall = secs_since(start);

    let mut mistakes = vec![0u32; d];
    let mut convergence = vec![0u32; d];
    let mut forecast_times = Vec::new();
    let mut per_sample = Vec::with_capacity(runs.len());
    let mut samples = Vec::with_capacity(runs.len());
    for mut run in runs {
        for j in 0..d {
            mistakes[j] += run.mistakes[j];
            convergence[j] = convergence[j].max(run.convergence[j]);
        }
        forecast_times.extend_from_slice(&run.forecast_times);
        per_sample.push(SampleReport::finish(
            run.iterations,
            d,
            run.mistakes,
            run.convergence,
            0.0,
            &mut arm_times.clone(),
            &mut run.forecast_times,
        ));
        samples.push(run.buffer);
    }
    let report = SampleReport::finish(
        lockstep,
        d,
        mistakes,
        convergence,
        wall,
        &mut arm_times,
        &mut forecast_times,
    );
    Ok(BatchOutput {
        samples,
        report,
        per_sample,
    })
}

/// Mean number of leading successes in i.i.d. Bernoulli(`p`) streams.
///
/// The expectation is `p / (1 - p)`.
pub fn simulate_run_length(p: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("success probability {p} outside [0, 1)")));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let mut total: u64 = 0;
    for _ in 0..trials {
        while rng.bernoulli(p) {
            total += 1;
        }
    }
    Ok(total as f64 / trials as f64)
}

// ---------------------------------------------------------------------------
// Run record
// ---------------------------------------------------------------------------

const RECORD_MAGIC: &[u8; 4] = b"PSRN";
const RECORD_VERSION: u32 = 1;

/// Which sampler produced a run record. `None` is the ancestral baseline.
pub type RecordedStrategy = Option<StrategyKind>;

/// Enough to regenerate the noise and re-check a sample offline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub seed: u64,
    pub strategy: RecordedStrategy,
    pub flags: u32,
    pub seq_len: usize,
    pub categories: usize,
    pub arm_calls: usize,
    pub tokens: Vec<usize>,
}

impl RunRecord {
    pub fn new(seed: u64, strategy: Option<&ForecastStrategy<'_>>, sample: &TokenBuffer, arm_calls: usize) -> Self {
        Self {
            seed,
            strategy: strategy.map(|s| s.kind),
            flags: strategy.map_or(0, |s| s.flags()),
            seq_len: sample.len(),
            categories: sample.categories(),
            arm_calls,
            tokens: sample.tokens().to_vec(),
        }
    }

    /// Layout: `PSRN`, version u32, seed u64, strategy code u32 (0 for the
    /// baseline), flags u32, d u32, K u32, arm_calls u32, then `d` tokens as
    /// u32, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(RECORD_MAGIC)?;
        write_u32(w, RECORD_VERSION)?;
        write_u64(w, self.seed)?;
        write_u32(w, self.strategy.map_or(0, |k| k.code()))?;
        write_u32(w, self.flags)?;
        write_u32(w, self.seq_len as u32)?;
        write_u32(w, self.categories as u32)?;
        write_u32(w, self.arm_calls as u32)?;
        for &t in &self.tokens {
            write_u32(w, t as u32)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic("run record", RECORD_MAGIC)?;
        r.version("run record", RECORD_VERSION)?;
        let seed = r.u64()?;
        let code = r.u32()?;
        let strategy = match code {
            0 => None,
            c => Some(StrategyKind::ALL.into_iter().find(|k| k.code() == c).ok_or_else(|| Error::BadHeader {
                kind: "run record",
                reason: format!("unknown strategy code {c}"),
            })?),
        };
        let flags = r.u32()?;
        let seq_len = r.u32()? as usize;
        let categories = r.u32()? as usize;
        let arm_calls = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            tokens.push(r.u32()? as usize);
        }
        Ok(Self {
            seed,
            strategy,
            flags,
            seq_len,
            categories,
            arm_calls,
            tokens,
        })
    }
}
