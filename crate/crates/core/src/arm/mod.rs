//! The autoregressive-model abstraction.
//!
//! An [`Arm`] maps a full token buffer to per-position log-probabilities and
//! hidden rows in one parallel pass. Row `i` of both outputs may depend only
//! on tokens strictly before `i`; every sampling algorithm in this crate
//! relies on that and nothing else about the network.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Matrix, Rng};

pub mod fixtures;
mod model;
mod train;

pub use model::{ArmConfig, ArmGrads, ArmModel, ArmParams, ConvLayer, ForwardCache};
pub use train::{arm_nll, train_arm, TrainConfig, TrainCurve, TrainPoint};

/// Token sequence with a validity frontier.
///
/// Tokens below `frontier` are validated samples; tokens at or above it are
/// forecasts or placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBuffer {
    categories: usize,
    tokens: Vec<usize>,
    frontier: usize,
}

impl TokenBuffer {
    /// All-zero buffer with nothing validated.
    pub fn zeros(len: usize, categories: usize) -> Self {
        Self {
            categories,
            tokens: vec![0; len],
            frontier: 0,
        }
    }

    /// Fully valid buffer from complete data.
    pub fn from_tokens(tokens: Vec<usize>, categories: usize) -> Result<Self> {
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= categories) {
            return Err(Error::TokenOutOfRange {
                position,
                token,
                categories,
            });
        }
        let frontier = tokens.len();
        Ok(Self {
            categories,
            tokens,
            frontier,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn categories(&self) -> usize {
        self.categories
    }

    #[inline]
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    #[inline]
    pub fn frontier(&self) -> usize {
        self.frontier
    }

    pub fn is_complete(&self) -> bool {
        self.frontier == self.tokens.len()
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    /// Writes a token at or above the frontier.
    pub fn set(&mut self, position: usize, token: usize) -> Result<()> {
        if token >= self.categories {
            return Err(Error::TokenOutOfRange {
                position,
                token,
                categories: self.categories,
            });
        }
        if position < self.frontier {
            return Err(Error::InvalidArgument(format!(
                "position {position} is below the frontier {}",
                self.frontier
            )));
        }
        self.tokens[position] = token;
        Ok(())
    }

    /// Moves the frontier forward; it never moves back.
    pub fn advance_frontier(&mut self, to: usize) -> Result<()> {
        if to < self.frontier || to > self.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "frontier {to} outside [{}, {}]",
                self.frontier,
                self.tokens.len()
            )));
        }
        self.frontier = to;
        Ok(())
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.tokens
    }
}

/// Per-position normalized log-probabilities, `d × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid(Matrix);

impl LogitsGrid {
    /// Wraps a matrix whose rows are already normalized log-probabilities.
    pub fn from_normalized(m: Matrix) -> Self {
        Self(m)
    }

    /// Normalizes each row of raw scores.
    pub fn from_scores(mut m: Matrix) -> Result<Self> {
        for r in 0..m.rows() {
            crate::numeric::log_softmax_in_place(m.row_mut(r))?;
        }
        Ok(Self(m))
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn categories(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Largest deviation of `Σ exp(row)` from one.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.row(i).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-position hidden representation, `d × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGrid(Matrix);

impl HiddenGrid {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Output of one parallel model pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: LogitsGrid,
    pub hidden: HiddenGrid,
}

/// Count of parallel forward passes.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// A strictly autoregressive model over length-`d` sequences of `K` categories.
pub trait Arm: Sync {
    fn seq_len(&self) -> usize;
    fn categories(&self) -> usize;
    fn hidden_width(&self) -> usize;

    /// Evaluates the network without touching the call counter.
    ///
    /// Sampling code goes through [`Arm::forward`] so calls are accounted.
    fn evaluate(&self, tokens: &[usize]) -> Result<Forward>;

    fn counter(&self) -> &CallCounter;

    fn calls(&self) -> u64 {
        self.counter().get()
    }

    /// One counted parallel pass.
    fn forward(&self, buffer: &TokenBuffer) -> Result<Forward> {
        self.check_buffer(buffer)?;
        self.counter().increment();
        self.evaluate(buffer.tokens())
    }

    /// One counted pass over a batch of buffers.
    fn forward_batch(&self, buffers: &[&TokenBuffer]) -> Result<Vec<Forward>> {
        for b in buffers {
            self.check_buffer(b)?;
        }
        self.counter().increment();
        buffers.iter().map(|b| self.evaluate(b.tokens())).collect()
    }

    fn check_buffer(&self, buffer: &TokenBuffer) -> Result<()> {
        if buffer.len() != self.seq_len() {
            return Err(shape_err("arm_forward length", self.seq_len(), buffer.len()));
        }
        if buffer.categories() != self.categories() {
            return Err(shape_err(
                "arm_forward categories",
                self.categories(),
                buffer.categories(),
            ));
        }
        Ok(())
    }
}

/// Counted forward pass; the unit of the ARM-call metric.
pub fn arm_forward<A: Arm + ?Sized>(model: &A, buffer: &TokenBuffer) -> Result<Forward> {
    model.forward(buffer)
}

/// Outcome of [`check_causality`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CausalityReport {
    Pass,
    Fail {
        trial: usize,
        perturbed: usize,
        position: usize,
    },
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        matches!(self, CausalityReport::Pass)
    }
}

/// Randomized check that rows `0..=j` ignore a perturbation of token `j`.
pub fn check_causality<A: Arm + ?Sized>(model: &A, trials: usize, rng: &mut Rng) -> Result<CausalityReport> {
    let d = model.seq_len();
    let k = model.categories();
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if d <= 1 || k <= 1 {
        return Ok(CausalityReport::Pass);
    }
    for trial in 0..trials {
        let tokens: Vec<usize> = (0..d).map(|_| rng.below(k)).collect();
        let j = rng.below(d);
        let mut perturbed = tokens.clone();
        perturbed[j] = (tokens[j] + 1 + rng.below(k - 1)) % k;
        let a = model.evaluate(&tokens)?;
        let b = model.evaluate(&perturbed)?;
        for i in 0..=j {
            let same_logits = bitwise_eq(a.logits.row(i), b.logits.row(i));
            let same_hidden = bitwise_eq(a.hidden.row(i), b.hidden.row(i));
            if !(same_logits && same_hidden) {
                return Ok(CausalityReport::Fail {
                    trial,
                    perturbed: j,
                    position: i,
                });
            }
        }
    }
    Ok(CausalityReport::Pass)
}

pub(crate) fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
