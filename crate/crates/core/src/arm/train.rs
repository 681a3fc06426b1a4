use super::{arm_forward, Arm, ArmModel, ArmParams, TokenBuffer};
use crate::error::{Error, Result};
use crate::forecast::{accumulate_heads, kl_terms, Forecaster, ForecasterOptimizer, Head};
use crate::numeric::{adam_step, AdamConfig, Matrix, OptimizerState, Rng};
use crate::reparam::sample_posterior_noise;

/// Bits per dimension of a fully valid sequence under teacher forcing.
pub fn arm_nll<A: Arm + ?Sized>(model: &A, x: &TokenBuffer) -> Result<f64> {
    if !x.is_complete() {
        return Err(Error::InvalidArgument("arm_nll needs a fully valid buffer".into()));
    }
    let fwd = arm_forward(model, x)?;
    let nats: f64 = x
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &t)| -fwd.logits.row(i)[t])
        .sum();
    Ok(nats / x.len() as f64 / std::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    /// Items per split used for each curve evaluation.
    pub eval_items: usize,
    /// Weight of the forecasting KL against the NLL when a forecaster is
    /// trained jointly. Zero leaves the hidden path untouched by the heads.
    pub forecast_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig::default(),
            eval_every: 250,
            eval_items: 256,
            forecast_weight: crate::forecast::DEFAULT_FORECAST_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPoint {
    pub step: usize,
    pub train_bpd: f64,
    pub val_bpd: f64,
    /// Mean per-sequence forecasting loss, when a forecaster is attached.
    pub forecast_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainCurve {
    pub points: Vec<TrainPoint>,
}

impl TrainCurve {
    pub fn last(&self) -> Option<&TrainPoint> {
        self.points.last()
    }
}

fn mean_bpd(model: &ArmModel, items: &[TokenBuffer]) -> Result<f64> {
    let mut sum = 0.0;
    for x in items {
        let fwd = model.evaluate(x.tokens())?;
        sum += x
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, &t)| -fwd.logits.row(i)[t])
            .sum::<f64>()
            / x.len() as f64;
    }
    Ok(sum / items.len().max(1) as f64 / std::f64::consts::LN_2)
}

fn mean_forecast_loss(model: &ArmModel, forecaster: &Forecaster, items: &[TokenBuffer], rng: &Rng) -> Result<f64> {
    let mut sum = 0.0;
    let mut noise_rng = rng.derive("eval-noise");
    for x in items {
        let fwd = model.evaluate(x.tokens())?;
        let eps = if forecaster.config().condition_on_noise {
            Some(sample_posterior_noise(x, &fwd.logits, &mut noise_rng)?)
        } else {
            None
        };
        sum += kl_terms(forecaster, &fwd.logits, &fwd.hidden, x.tokens(), eps.as_ref(), 1.0)?
            .loss
            .value;
    }
    Ok(sum / items.len().max(1) as f64)
}

/// Minibatch Adam on mean NLL, optionally training `forecaster` jointly.
///
/// The per-sequence objective is `nll / d + weight * kl_sum / d` with the
/// NLL in nats. The KL gradient reaches the model only through the hidden
/// rows. Deterministic given `rng`.
pub fn train_arm(
    model: &mut ArmModel,
    train: &[TokenBuffer],
    valid: &[TokenBuffer],
    config: &TrainConfig,
    rng: &mut Rng,
    mut forecaster: Option<&mut Forecaster>,
) -> Result<TrainCurve> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(Error::InvalidArgument("batch_size and eval_every must be positive".into()));
    }
    for x in train.iter().chain(valid) {
        model.check_buffer(x)?;
        if !x.is_complete() {
            return Err(Error::InvalidArgument("training items must be fully valid".into()));
        }
    }
    if let Some(f) = forecaster.as_deref() {
        f.check_compatible(model)?;
    }

    let eval_train = &train[..config.eval_items.min(train.len())];
    let eval_valid = if valid.is_empty() {
        eval_train
    } else {
        &valid[..config.eval_items.min(valid.len())]
    };
    let eval_rng = rng.derive("eval");
    let evaluate = |model: &ArmModel, f: Option<&Forecaster>, step: usize| -> Result<TrainPoint> {
        Ok(TrainPoint {
            step,
            train_bpd: mean_bpd(model, eval_train)?,
            val_bpd: mean_bpd(model, eval_valid)?,
            forecast_loss: f.map(|f| mean_forecast_loss(model, f, eval_valid, &eval_rng)).transpose()?,
        })
    };

    let mut curve = TrainCurve::default();
    curve.points.push(evaluate(model, forecaster.as_deref(), 0)?);

    let mut states: Vec<OptimizerState> = model
        .params()
        .matrices()
        .into_iter()
        .map(|m| OptimizerState::for_params(config.adam, m))
        .collect();
    let mut head_opt = forecaster.as_deref().map(|f| ForecasterOptimizer::new(f, config.adam));
    let mut batch_rng = rng.derive("batches");
    let mut noise_rng = rng.derive("posterior-noise");
    let inv_b = 1.0 / config.batch_size as f64;

    for step in 1..=config.steps {
        let mut acc: ArmParams = model.params().zeros_like();
        let mut head_acc: Option<Vec<Head>> = forecaster.as_deref().map(|f| {
            f.heads()
                .iter()
                .map(|h| Head {
                    weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                    bias: Matrix::zeros(1, h.bias.cols()),
                })
                .collect()
        });
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let x = &train[batch_rng.below(train.len())];
            let tokens = x.tokens();
            let d = tokens.len() as f64;
            let (fwd, cache) = model.forward_cached(tokens)?;
            let mut d_scores = cache.probs().clone();
            let mut nll = 0.0;
            for (i, &t) in tokens.iter().enumerate() {
                nll -= fwd.logits.row(i)[t];
                d_scores.set(i, t, d_scores.get(i, t) - 1.0);
            }
            d_scores.scale(1.0 / d);
            let mut loss = nll / d;

            let mut d_hidden = None;
            if let (Some(f), Some(hacc)) = (forecaster.as_deref(), head_acc.as_mut()) {
                let eps = if f.config().condition_on_noise {
                    Some(sample_posterior_noise(x, &fwd.logits, &mut noise_rng)?)
                } else {
                    None
                };
                let out = kl_terms(f, &fwd.logits, &fwd.hidden, tokens, eps.as_ref(), config.forecast_weight)?;
                let scale = config.forecast_weight / d;
                loss += scale * out.loss.value;
                accumulate_heads(hacc, &out.head_grads, scale * inv_b);
                if config.forecast_weight != 0.0 {
                    let mut dh = out.hidden_grad;
                    dh.scale(scale);
                    d_hidden = Some(dh);
                }
            }
            batch_loss += loss;
            let g = model.backward(&cache, &d_scores, d_hidden.as_ref())?;
            acc.add_scaled(&g, inv_b);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: batch_loss * inv_b,
            });
        }
        for ((p, g), st) in model
            .params_mut()
            .matrices_mut()
            .into_iter()
            .zip(acc.matrices())
            .zip(states.iter_mut())
        {
            adam_step(p, g, st)?;
        }
        if let (Some(f), Some(opt), Some(hacc)) = (forecaster.as_deref_mut(), head_opt.as_mut(), head_acc.as_ref()) {
            opt.step(f, hacc)?;
        }
        if step % config.eval_every == 0 || step == config.steps {
            curve.points.push(evaluate(model, forecaster.as_deref(), step)?);
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::ArmConfig;
    use crate::forecast::ForecasterConfig;

    #[test]
    fn uniform_model_bpd_is_log2_k() {
        for (k, expected) in [(2usize, 1.0f64), (256, 8.0)] {
            let m = ArmModel::new(ArmConfig::new(5, k), &mut Rng::new(0)).unwrap();
            let x = TokenBuffer::from_tokens(vec![1, 0, 1, 1, 0], k).unwrap();
            let bpd = arm_nll(&m, &x).unwrap();
            assert!((bpd - expected).abs() < 1e-12, "{bpd}");
        }
    }

    #[test]
    fn nll_needs_complete_buffer() {
        let m = ArmModel::new(ArmConfig::new(3, 2), &mut Rng::new(0)).unwrap();
        assert!(arm_nll(&m, &TokenBuffer::zeros(3, 2)).is_err());
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let cfg = ArmConfig {
            hidden: 8,
            embed: 4,
            layers: 2,
            ..ArmConfig::new(6, 2)
        };
        let mut m = ArmModel::new(cfg, &mut Rng::new(1)).unwrap();
        let before = m.params().clone();
        let data = vec![TokenBuffer::from_tokens(vec![0, 1, 0, 1, 0, 1], 2).unwrap()];
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let curve = train_arm(&mut m, &data, &[], &tc, &mut Rng::new(2), None).unwrap();
        assert_eq!(m.params(), &before);
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.points[0].step, 0);
        assert!((curve.points[0].val_bpd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn memorizes_a_constant_sequence() {
        let cfg = ArmConfig {
            hidden: 16,
            embed: 8,
            layers: 2,
            ..ArmConfig::new(8, 2)
        };
        let mut m = ArmModel::new(cfg, &mut Rng::new(3)).unwrap();
        let data = vec![TokenBuffer::from_tokens(vec![1, 0, 0, 1, 1, 1, 0, 1], 2).unwrap()];
        let tc = TrainConfig {
            steps: 2000,
            batch_size: 1,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            eval_every: 500,
            ..TrainConfig::default()
        };
        let curve = train_arm(&mut m, &data, &data, &tc, &mut Rng::new(4), None).unwrap();
        let steps: Vec<usize> = curve.points.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 500, 1000, 1500, 2000]);
        assert!(curve.last().unwrap().val_bpd < 0.05, "{:?}", curve.last());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ArmConfig {
            hidden: 8,
            embed: 4,
            layers: 2,
            ..ArmConfig::new(6, 3)
        };
        let data: Vec<TokenBuffer> = (0..5)
            .map(|s| TokenBuffer::from_tokens((0..6).map(|i| (i + s) % 3).collect(), 3).unwrap())
            .collect();
        let tc = TrainConfig {
            steps: 20,
            batch_size: 4,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ArmModel::new(cfg, &mut Rng::new(7)).unwrap();
            let mut f = Forecaster::for_model(ForecasterConfig::new(2), &m).unwrap();
            let c = train_arm(&mut m, &data, &[], &tc, &mut Rng::new(8), Some(&mut f)).unwrap();
            (m.params().clone(), f, c)
        };
        let (pa, fa, ca) = run();
        let (pb, fb, cb) = run();
        assert_eq!(pa, pb);
        assert_eq!(fa, fb);
        assert_eq!(ca, cb);
        assert!(ca.points.iter().all(|p| p.forecast_loss.is_some()));
    }

    #[test]
    fn shape_errors_surface() {
        let mut m = ArmModel::new(ArmConfig::new(4, 2), &mut Rng::new(0)).unwrap();
        let bad = vec![TokenBuffer::from_tokens(vec![0, 1, 0], 2).unwrap()];
        assert!(train_arm(&mut m, &bad, &[], &TrainConfig::default(), &mut Rng::new(0), None).is_err());
        assert!(train_arm(&mut m, &[], &[], &TrainConfig::default(), &mut Rng::new(0), None).is_err());
    }
}
