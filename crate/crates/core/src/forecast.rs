//! Learned forecasting heads.
//!
//! Head `t` (for `t = 1..=T`) maps the hidden row `h_j` of the last valid
//! position, optionally with the one-hot token `x_j` and the noise row of the
//! target position, to a distribution over the token at `j + t`. Heads are
//! trained to match the model's own (detached) output rows by KL divergence.

use std::io::{Read, Write};

use crate::arm::{Arm, ArmModel, HiddenGrid, LogitsGrid, TokenBuffer};
use crate::codec::{write_f64s, write_u32, Reader};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{adam_step, axpy, dot, log_softmax_in_place, AdamConfig, Matrix, OptimizerState, Rng};
use crate::reparam::{argmax, perturbed_argmax, sample_posterior_noise, NoiseGrid};

const FORECASTER_MAGIC: &[u8; 4] = b"PSFC";

const FLAG_LAST_TOKEN: u32 = 1;
const FLAG_NOISE: u32 = 1 << 1;
const FLAG_NO_HIDDEN: u32 = 1 << 2;

/// Default weight of the forecasting objective against the NLL.
pub const DEFAULT_FORECAST_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecasterConfig {
    /// Number of future offsets T.
    pub horizon: usize,
    pub condition_on_last_token: bool,
    pub condition_on_noise: bool,
    /// When false the hidden block of the input is held at zero.
    pub use_hidden: bool,
}

impl ForecasterConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            condition_on_last_token: false,
            condition_on_noise: false,
            use_hidden: true,
        }
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if self.condition_on_last_token {
            f |= FLAG_LAST_TOKEN;
        }
        if self.condition_on_noise {
            f |= FLAG_NOISE;
        }
        if !self.use_hidden {
            f |= FLAG_NO_HIDDEN;
        }
        f
    }

    fn from_flags(horizon: usize, flags: u32) -> Result<Self> {
        if flags & !(FLAG_LAST_TOKEN | FLAG_NOISE | FLAG_NO_HIDDEN) != 0 {
            return Err(Error::BadHeader {
                kind: "forecaster checkpoint",
                reason: format!("unknown flags {flags:#x}"),
            });
        }
        Ok(Self {
            horizon,
            condition_on_last_token: flags & FLAG_LAST_TOKEN != 0,
            condition_on_noise: flags & FLAG_NOISE != 0,
            use_hidden: flags & FLAG_NO_HIDDEN == 0,
        })
    }
}

/// One affine head: `log_softmax(W input + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `K × input_width`.
    pub weight: Matrix,
    /// `1 × K`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    config: ForecasterConfig,
    seq_len: usize,
    categories: usize,
    hidden: usize,
    heads: Vec<Head>,
}

impl Forecaster {
    /// Zero-initialized heads, which forecast the uniform distribution.
    pub fn new(config: ForecasterConfig, seq_len: usize, categories: usize, hidden: usize) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::InvalidArgument("forecast horizon must be at least 1".into()));
        }
        if categories == 0 || hidden == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument("forecaster dimensions must be positive".into()));
        }
        let width = input_width(&config, categories, hidden);
        let heads = (0..config.horizon)
            .map(|_| Head {
                weight: Matrix::zeros(categories, width),
                bias: Matrix::zeros(1, categories),
            })
            .collect();
        Ok(Self {
            config,
            seq_len,
            categories,
            hidden,
            heads,
        })
    }

    /// Heads sized for `model`.
    pub fn for_model<A: Arm + ?Sized>(config: ForecasterConfig, model: &A) -> Result<Self> {
        Self::new(config, model.seq_len(), model.categories(), model.hidden_width())
    }

    /// Heads with uniform random weights in `[-scale, scale)`.
    pub fn randomized(mut self, scale: f64, rng: &mut Rng) -> Self {
        for head in &mut self.heads {
            head.weight = Matrix::uniform(head.weight.rows(), head.weight.cols(), scale, rng);
            head.bias = Matrix::uniform(1, head.bias.cols(), scale, rng);
        }
        self
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub fn input_width(&self) -> usize {
        input_width(&self.config, self.categories, self.hidden)
    }

    /// Fails unless the forecaster was built for a model of this shape.
    pub fn check_compatible<A: Arm + ?Sized>(&self, model: &A) -> Result<()> {
        let want = (model.seq_len(), model.categories(), model.hidden_width());
        let have = (self.seq_len, self.categories, self.hidden);
        if want != have {
            return Err(shape_err("forecaster (d, K, H)", format!("{want:?}"), format!("{have:?}")));
        }
        Ok(())
    }

    /// Shared input block for all heads: `[h | onehot(last) | eps(target)]`.
    /// The noise slot is left zero and filled per head.
    fn base_input(&self, h_row: &[f64], last_token: usize, use_hidden: bool) -> Vec<f64> {
        let mut input = vec![0.0; self.input_width()];
        if use_hidden && self.config.use_hidden {
            input[..self.hidden].copy_from_slice(h_row);
        }
        if self.config.condition_on_last_token {
            input[self.hidden + last_token] = 1.0;
        }
        input
    }

    fn noise_offset(&self) -> usize {
        self.hidden + if self.config.condition_on_last_token { self.categories } else { 0 }
    }

    /// Normalized log-probability rows for offsets `1..=count`.
    ///
    /// `eps_rows[t - 1]` is the noise row of the target position and is
    /// required when the heads condition on noise.
    pub fn forecast_logits(
        &self,
        h_row: &[f64],
        last_token: usize,
        eps_rows: Option<&[&[f64]]>,
        count: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.forecast_logits_inner(h_row, last_token, eps_rows, count, true)
    }

    pub(crate) fn forecast_logits_inner(
        &self,
        h_row: &[f64],
        last_token: usize,
        eps_rows: Option<&[&[f64]]>,
        count: usize,
        use_hidden: bool,
    ) -> Result<Vec<Vec<f64>>> {
        if h_row.len() != self.hidden {
            return Err(shape_err("forecast_logits h_row", self.hidden, h_row.len()));
        }
        if last_token >= self.categories {
            return Err(Error::TokenOutOfRange {
                position: 0,
                token: last_token,
                categories: self.categories,
            });
        }
        if count > self.config.horizon {
            return Err(shape_err("forecast_logits count", self.config.horizon, count));
        }
        if self.config.condition_on_noise {
            let rows = eps_rows.ok_or_else(|| Error::InvalidArgument("noise-conditioned heads need eps rows".into()))?;
            if rows.len() < count || rows.iter().any(|r| r.len() != self.categories) {
                return Err(shape_err("forecast_logits eps rows", count, rows.len()));
            }
        }
        let mut input = self.base_input(h_row, last_token, use_hidden);
        let noise_at = self.noise_offset();
        let mut out = Vec::with_capacity(count);
        for (t, head) in self.heads.iter().take(count).enumerate() {
            if self.config.condition_on_noise {
                let rows = eps_rows.expect("checked above");
                input[noise_at..noise_at + self.categories].copy_from_slice(rows[t]);
            }
            let mut row: Vec<f64> = (0..self.categories)
                .map(|c| head.bias.get(0, c) + dot(head.weight.row(c), &input))
                .collect();
            log_softmax_in_place(&mut row)?;
            out.push(row);
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.heads.iter().map(|h| h.weight.len() + h.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|h| h.weight.as_slice().iter().chain(h.bias.as_slice()).copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err("Forecaster::unflatten", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for h in &mut self.heads {
            for m in [&mut h.weight, &mut h.bias] {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Writes the `PSFC` block: `magic, T u32, flags u32`, then per head the
    /// weight (`K × input_width`) and bias (`K`) as little-endian f64.
    /// Dimensions `d, K, H` come from the model block it follows.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FORECASTER_MAGIC)?;
        write_u32(w, self.config.horizon as u32)?;
        write_u32(w, self.config.flags())?;
        for h in &self.heads {
            write_f64s(w, h.weight.as_slice())?;
            write_f64s(w, h.bias.as_slice())?;
        }
        Ok(())
    }

    pub(crate) fn read_body<R: Read>(
        r: &mut Reader<R>,
        seq_len: usize,
        categories: usize,
        hidden: usize,
    ) -> Result<Self> {
        let horizon = r.u32()? as usize;
        let flags = r.u32()?;
        let config = ForecasterConfig::from_flags(horizon, flags)?;
        let mut f = Forecaster::new(config, seq_len, categories, hidden)?;
        for h in &mut f.heads {
            let w = r.f64s(h.weight.len())?;
            h.weight.as_mut_slice().copy_from_slice(&w);
            let b = r.f64s(h.bias.len())?;
            h.bias.as_mut_slice().copy_from_slice(&b);
        }
        if f.heads.iter().any(|h| !h.weight.is_finite() || !h.bias.is_finite()) {
            return Err(Error::NonFinite("forecaster checkpoint"));
        }
        Ok(f)
    }

    pub(crate) const MAGIC: &'static [u8; 4] = FORECASTER_MAGIC;
}

fn input_width(config: &ForecasterConfig, categories: usize, hidden: usize) -> usize {
    hidden
        + if config.condition_on_last_token { categories } else { 0 }
        + if config.condition_on_noise { categories } else { 0 }
}

/// Forecast tokens from forecast rows and the noise rows of the same
/// positions. With `use_reparam` off the noise is ignored and each forecast
/// is the mode of its row.
pub fn forecast_tokens(logit_rows: &[Vec<f64>], eps_rows: &[&[f64]], use_reparam: bool) -> Result<Vec<usize>> {
    if use_reparam && eps_rows.len() < logit_rows.len() {
        return Err(shape_err("forecast_tokens eps rows", logit_rows.len(), eps_rows.len()));
    }
    logit_rows
        .iter()
        .enumerate()
        .map(|(t, row)| {
            if use_reparam {
                if row.len() != eps_rows[t].len() {
                    return Err(shape_err("forecast_tokens row", row.len(), eps_rows[t].len()));
                }
                Ok(perturbed_argmax(row, eps_rows[t]))
            } else {
                Ok(argmax(row))
            }
        })
        .collect()
}

/// `KL(p || q)` for rows of normalized log-probabilities.
pub fn kl_categorical(p_logp: &[f64], q_logp: &[f64]) -> f64 {
    let kl: f64 = p_logp
        .iter()
        .zip(q_logp)
        .filter(|(p, _)| **p > f64::NEG_INFINITY)
        .map(|(p, q)| p.exp() * (p - q))
        .sum();
    kl.max(0.0)
}

/// Scalar forecasting objective for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastLoss {
    /// Sum of KL terms over all `(j, t)` with `j + t < d`.
    pub value: f64,
    /// Weight applied against the likelihood objective in joint training.
    pub weight: f64,
}

/// Loss together with its gradients.
#[derive(Debug, Clone)]
pub struct ForecastLossOutput {
    pub loss: ForecastLoss,
    /// Gradient of `loss.value` with respect to each head.
    pub head_grads: Vec<Head>,
    /// Gradient of `loss.value` with respect to the hidden rows, `d × H`.
    /// Zero when the heads do not use the hidden input.
    pub hidden_grad: Matrix,
}

/// KL forecasting loss on a teacher-forced pass of `model` over `x`.
///
/// Model rows act as constants: gradients reach the heads and, through the
/// head inputs, the hidden rows, never the model's output projection.
pub fn forecaster_loss(
    model: &ArmModel,
    forecaster: &Forecaster,
    x: &TokenBuffer,
    eps: Option<&NoiseGrid>,
) -> Result<ForecastLossOutput> {
    forecaster.check_compatible(model)?;
    let fwd = model.evaluate(x.tokens())?;
    kl_terms(forecaster, &fwd.logits, &fwd.hidden, x.tokens(), eps, DEFAULT_FORECAST_WEIGHT)
}

pub(crate) fn kl_terms(
    forecaster: &Forecaster,
    logits: &LogitsGrid,
    hidden: &HiddenGrid,
    tokens: &[usize],
    eps: Option<&NoiseGrid>,
    weight: f64,
) -> Result<ForecastLossOutput> {
    let d = tokens.len();
    let k = forecaster.categories;
    let hw = forecaster.hidden;
    let cfg = forecaster.config;
    if cfg.condition_on_noise && eps.is_none() {
        return Err(Error::InvalidArgument("noise-conditioned heads need a noise grid".into()));
    }
    if let Some(e) = eps {
        e.check_shape(d, k)?;
    }
    let mut head_grads: Vec<Head> = forecaster
        .heads
        .iter()
        .map(|h| Head {
            weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
            bias: Matrix::zeros(1, k),
        })
        .collect();
    let mut hidden_grad = Matrix::zeros(d, hw);
    let mut total = 0.0;
    let noise_at = forecaster.noise_offset();
    let mut q = vec![0.0; k];
    let mut g = vec![0.0; k];
    for j in 0..d {
        let mut input = forecaster.base_input(hidden.row(j), tokens[j], true);
        for (t0, head) in forecaster.heads.iter().enumerate() {
            let target = j + t0 + 1;
            if target >= d {
                break;
            }
            if cfg.condition_on_noise {
                let e = eps.expect("checked above");
                input[noise_at..noise_at + k].copy_from_slice(e.row(target));
            }
            for c in 0..k {
                q[c] = head.bias.get(0, c) + dot(head.weight.row(c), &input);
            }
            log_softmax_in_place(&mut q)?;
            let p = logits.row(target);
            total += kl_categorical(p, &q);
            // d KL / d scores = softmax(q) - p
            for c in 0..k {
                g[c] = q[c].exp() - p[c].exp();
            }
            let hg = &mut head_grads[t0];
            axpy(1.0, &g, hg.bias.row_mut(0));
            for (c, &gc) in g.iter().enumerate() {
                axpy(gc, &input, hg.weight.row_mut(c));
                if cfg.use_hidden {
                    axpy(gc, &head.weight.row(c)[..hw], hidden_grad.row_mut(j));
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, value: total });
    }
    Ok(ForecastLossOutput {
        loss: ForecastLoss { value: total, weight },
        head_grads,
        hidden_grad,
    })
}

/// Adam moments for every head.
#[derive(Debug, Clone)]
pub(crate) struct ForecasterOptimizer {
    states: Vec<(OptimizerState, OptimizerState)>,
}

impl ForecasterOptimizer {
    pub(crate) fn new(forecaster: &Forecaster, config: AdamConfig) -> Self {
        Self {
            states: forecaster
                .heads
                .iter()
                .map(|h| {
                    (
                        OptimizerState::for_params(config, &h.weight),
                        OptimizerState::for_params(config, &h.bias),
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn step(&mut self, forecaster: &mut Forecaster, grads: &[Head]) -> Result<()> {
        for ((head, g), (sw, sb)) in forecaster.heads.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(&mut head.weight, &g.weight, sw)?;
            adam_step(&mut head.bias, &g.bias, sb)?;
        }
        Ok(())
    }
}

pub(crate) fn accumulate_heads(acc: &mut [Head], grads: &[Head], alpha: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        axpy(alpha, g.weight.as_slice(), a.weight.as_mut_slice());
        axpy(alpha, g.bias.as_slice(), a.bias.as_mut_slice());
    }
}

/// Settings for post-hoc forecaster training against a frozen model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    /// Items used for each curve evaluation (capped by the dataset size).
    pub eval_items: usize,
}

impl Default for ForecastTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            eval_every: 100,
            eval_items: 256,
        }
    }
}

/// `(step, mean forecaster loss)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastCurve {
    pub points: Vec<(usize, f64)>,
}

impl ForecastCurve {
    pub fn initial(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Trains the heads with the model frozen.
///
/// Noise-conditioned heads see posterior noise `eps ~ p(eps | x)` drawn
/// fresh for every minibatch item.
pub fn train_forecaster(
    model: &ArmModel,
    forecaster: &mut Forecaster,
    data: &[TokenBuffer],
    config: &ForecastTrainConfig,
    rng: &mut Rng,
) -> Result<ForecastCurve> {
    forecaster.check_compatible(model)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(Error::InvalidArgument("batch_size and eval_every must be positive".into()));
    }
    // The model is frozen, so each item's forward pass is computed once.
    let mut cache: Vec<Option<(LogitsGrid, HiddenGrid)>> = vec![None; data.len()];
    let mut fetch = |idx: usize| -> Result<(LogitsGrid, HiddenGrid)> {
        if cache[idx].is_none() {
            let f = model.evaluate(data[idx].tokens())?;
            cache[idx] = Some((f.logits, f.hidden));
        }
        Ok(cache[idx].clone().expect("filled above"))
    };

    let mut noise_rng = rng.derive("forecaster-noise");
    let mut batch_rng = rng.derive("forecaster-batches");
    let eval_n = config.eval_items.min(data.len()).max(1);
    let mut eval_noise_rng = rng.derive("forecaster-eval-noise");
    let mut eval_noise: Vec<Option<NoiseGrid>> = Vec::with_capacity(eval_n);
    for idx in 0..eval_n {
        if forecaster.config.condition_on_noise {
            let (logits, _) = fetch(idx)?;
            eval_noise.push(Some(sample_posterior_noise(&data[idx], &logits, &mut eval_noise_rng)?));
        } else {
            eval_noise.push(None);
        }
    }
    let evaluate = |f: &Forecaster, fetch: &mut dyn FnMut(usize) -> Result<(LogitsGrid, HiddenGrid)>| -> Result<f64> {
        let mut sum = 0.0;
        for idx in 0..eval_n {
            let (logits, hidden) = fetch(idx)?;
            let out = kl_terms(f, &logits, &hidden, data[idx].tokens(), eval_noise[idx].as_ref(), 1.0)?;
            sum += out.loss.value;
        }
        Ok(sum / eval_n as f64)
    };

    let mut curve = ForecastCurve::default();
    curve.points.push((0, evaluate(forecaster, &mut fetch)?));
    let mut opt = ForecasterOptimizer::new(forecaster, config.adam);
    for step in 1..=config.steps {
        let mut acc: Vec<Head> = forecaster
            .heads
            .iter()
            .map(|h| Head {
                weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                bias: Matrix::zeros(1, h.bias.cols()),
            })
            .collect();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let idx = batch_rng.below(data.len());
            let (logits, hidden) = fetch(idx)?;
            let eps = if forecaster.config.condition_on_noise {
                Some(sample_posterior_noise(&data[idx], &logits, &mut noise_rng)?)
            } else {
                None
            };
            let out = kl_terms(forecaster, &logits, &hidden, data[idx].tokens(), eps.as_ref(), 1.0)?;
            batch_loss += out.loss.value;
            accumulate_heads(&mut acc, &out.head_grads, 1.0 / config.batch_size as f64);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: batch_loss });
        }
        opt.step(forecaster, &acc)?;
        if step % config.eval_every == 0 || step == config.steps {
            curve.points.push((step, evaluate(forecaster, &mut fetch)?));
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::ArmConfig;
    use crate::numeric::{finite_diff_check, log_softmax};

    #[test]
    fn zero_heads_forecast_uniform() {
        let f = Forecaster::new(ForecasterConfig::new(3), 8, 4, 5).unwrap();
        let rows = f.forecast_logits(&[1.0, -2.0, 0.5, 3.0, 0.0], 2, None, 3).unwrap();
        assert_eq!(rows.len(), 3);
        for row in rows {
            for v in row {
                assert!((v + 4f64.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_hidden_row_gives_bias_softmax() {
        let mut f = Forecaster::new(ForecasterConfig::new(2), 8, 3, 4).unwrap().randomized(1.0, &mut Rng::new(0));
        f.heads_mut()[1].bias = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let rows = f.forecast_logits(&[0.0; 4], 0, None, 2).unwrap();
        let expected = log_softmax(&[0.5, -1.0, 2.0]).unwrap();
        for (a, b) in rows[1].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_head() {
        let mut f = Forecaster::new(ForecasterConfig::new(1), 4, 2, 2).unwrap();
        f.heads_mut()[0].weight = Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        f.heads_mut()[0].bias = Matrix::from_vec(1, 2, vec![0.1, -0.2]).unwrap();
        let rows = f.forecast_logits(&[0.3, -0.4], 1, None, 1).unwrap();
        // scores: 0.1 + 0.3 - 0.8 = -0.4 ; -0.2 - 0.3 - 0.2 = -0.7
        let lse = ((-0.4f64).exp() + (-0.7f64).exp()).ln();
        assert!((rows[0][0] - (-0.4 - lse)).abs() < 1e-15);
        assert!((rows[0][1] - (-0.7 - lse)).abs() < 1e-15);
    }

    #[test]
    fn forecast_logits_shape_errors() {
        let cfg = ForecasterConfig {
            condition_on_noise: true,
            ..ForecasterConfig::new(2)
        };
        let f = Forecaster::new(cfg, 6, 3, 4).unwrap();
        assert!(f.forecast_logits(&[0.0; 3], 0, None, 1).is_err());
        assert!(f.forecast_logits(&[0.0; 4], 0, None, 1).is_err());
        assert!(f.forecast_logits(&[0.0; 4], 3, Some(&[&[0.0; 3]]), 1).is_err());
        assert!(f.forecast_logits(&[0.0; 4], 0, Some(&[&[0.0; 3]]), 3).is_err());
        assert!(f.forecast_logits(&[0.0; 4], 0, Some(&[&[0.0; 3]]), 1).is_ok());
        assert!(Forecaster::new(ForecasterConfig::new(0), 6, 3, 4).is_err());
    }

    #[test]
    fn forecast_tokens_cases() {
        let mu = vec![log_softmax(&[0.2, 1.0, -0.5]).unwrap()];
        let eps: [&[f64]; 1] = [&[0.0, 0.0, 0.0]];
        assert_eq!(forecast_tokens(&mu, &eps, true).unwrap(), vec![1]);
        let uniform = vec![vec![-(3f64).ln(); 3]];
        let eps: [&[f64]; 1] = [&[0.3, -0.1, 0.9]];
        assert_eq!(forecast_tokens(&uniform, &eps, true).unwrap(), vec![2]);
        assert_eq!(forecast_tokens(&uniform, &eps, false).unwrap(), vec![0]);

        // Forecast row favours 0, model row favours 1, no noise: disagreement.
        let forecast = vec![vec![0.9f64.ln(), 0.1f64.ln()]];
        let model_row = [0.1f64.ln(), 0.9f64.ln()];
        let zero: [&[f64]; 1] = [&[0.0, 0.0]];
        assert_eq!(forecast_tokens(&forecast, &zero, true).unwrap(), vec![0]);
        assert_eq!(crate::reparam::gumbel_argmax(&model_row, zero[0]).unwrap(), 1);
    }

    #[test]
    fn kl_values() {
        let p = log_softmax(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(kl_categorical(&p, &p), 0.0);
        let sharp = [(1.0f64 - 1e-12).ln(), 1e-12f64.ln()];
        let uniform = [-(2f64).ln(); 2];
        assert!((kl_categorical(&sharp, &uniform) - std::f64::consts::LN_2).abs() < 1e-9);
        let half = [0.5f64.ln(); 2];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        assert!((kl_categorical(&half, &q) - 0.510_825_623_765_991).abs() < 1e-12);
    }

    fn small_model(seed: u64, scale: f64) -> ArmModel {
        let cfg = ArmConfig {
            embed: 3,
            hidden: 5,
            layers: 2,
            output_init_scale: scale,
            ..ArmConfig::new(8, 3)
        };
        ArmModel::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn copied_heads_reproduce_input_independent_model() {
        let mut model = small_model(1, 0.0);
        model.params_mut().out_b = Matrix::from_vec(1, 3, vec![0.4, -1.2, 0.9]).unwrap();
        let mut f = Forecaster::for_model(ForecasterConfig::new(3), &model).unwrap();
        for h in f.heads_mut() {
            h.bias = model.params().out_b.clone();
        }
        let x = TokenBuffer::from_tokens(vec![0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        let out = forecaster_loss(&model, &f, &x, None).unwrap();
        assert!(out.loss.value.abs() < 1e-15);
        assert_eq!(out.loss.weight, 0.01);
    }

    #[test]
    fn uniform_model_and_zero_heads_give_zero_loss() {
        let model = small_model(2, 0.0);
        let f = Forecaster::for_model(ForecasterConfig::new(2), &model).unwrap();
        let x = TokenBuffer::from_tokens(vec![2, 1, 0, 0, 1, 2, 2, 1], 3).unwrap();
        assert!(forecaster_loss(&model, &f, &x, None).unwrap().loss.value.abs() < 1e-15);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let model = small_model(3, 1.0);
        let cfg = ForecasterConfig {
            condition_on_last_token: true,
            condition_on_noise: true,
            ..ForecasterConfig::new(3)
        };
        let f = Forecaster::for_model(cfg, &model).unwrap().randomized(0.7, &mut Rng::new(4));
        let x = TokenBuffer::from_tokens(vec![2, 0, 1, 1, 0, 2, 1, 0], 3).unwrap();
        let eps = crate::reparam::sample_gumbel_grid(&mut Rng::new(5), 8, 3).unwrap();
        let out = forecaster_loss(&model, &f, &x, Some(&eps)).unwrap();
        let mut analytic = f.clone();
        for (h, g) in analytic.heads_mut().iter_mut().zip(&out.head_grads) {
            *h = g.clone();
        }
        let flat = Matrix::from_vec(1, f.num_params(), f.flatten()).unwrap();
        let grad = Matrix::from_vec(1, f.num_params(), analytic.flatten()).unwrap();
        let err = finite_diff_check(
            |p| {
                let mut probe = f.clone();
                probe.unflatten(p.as_slice()).unwrap();
                forecaster_loss(&model, &probe, &x, Some(&eps)).unwrap().loss.value
            },
            &flat,
            &grad,
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn forecaster_checkpoint_block_roundtrip() {
        let cfg = ForecasterConfig {
            condition_on_last_token: true,
            use_hidden: false,
            ..ForecasterConfig::new(2)
        };
        let f = Forecaster::new(cfg, 6, 3, 4).unwrap().randomized(1.0, &mut Rng::new(1));
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        let mut r = Reader::new(&bytes[4..]);
        let back = Forecaster::read_body(&mut r, 6, 3, 4).unwrap();
        assert_eq!(back, f);
    }
}
