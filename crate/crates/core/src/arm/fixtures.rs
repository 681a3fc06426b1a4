//! Hand-built models with known sampling behaviour, used by tests and the
//! `verify` command.

use super::{Arm, ArmModel, CallCounter, Forward, HiddenGrid, LogitsGrid};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{log_softmax, Matrix};

/// Score gap that makes a binary choice immune to clamped Gumbel noise,
/// whose range is roughly [-3.6, 36.7].
const DETERMINISTIC_MARGIN: f64 = 200.0;

fn binary_row(favoured: usize) -> Vec<f64> {
    let mut scores = [0.0; 2];
    scores[favoured] = DETERMINISTIC_MARGIN;
    log_softmax(&scores).expect("finite scores")
}

/// Binary model that emits 1 at position 0 and `1 - x_{i-1}` afterwards,
/// regardless of the noise.
#[derive(Debug, Clone, Default)]
pub struct Alternating {
    seq_len: usize,
    counter: CallCounter,
}

impl Alternating {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            counter: CallCounter::default(),
        }
    }
}

impl Arm for Alternating {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn categories(&self) -> usize {
        2
    }

    fn hidden_width(&self) -> usize {
        1
    }

    fn evaluate(&self, tokens: &[usize]) -> Result<Forward> {
        if tokens.len() != self.seq_len {
            return Err(shape_err("Alternating input", self.seq_len, tokens.len()));
        }
        let mut logits = Matrix::zeros(self.seq_len, 2);
        let mut hidden = Matrix::zeros(self.seq_len, 1);
        for i in 0..self.seq_len {
            let favoured = if i == 0 { 1 } else { 1 - tokens[i - 1].min(1) };
            logits.row_mut(i).copy_from_slice(&binary_row(favoured));
            if i > 0 {
                hidden.set(i, 0, tokens[i - 1] as f64);
            }
        }
        Ok(Forward {
            logits: LogitsGrid::from_normalized(logits),
            hidden: HiddenGrid::new(hidden),
        })
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }
}

/// Model whose per-position distributions ignore the input entirely.
#[derive(Debug, Clone)]
pub struct InputIndependent {
    logits: LogitsGrid,
    hidden_width: usize,
    counter: CallCounter,
}

impl InputIndependent {
    pub fn new(logits: LogitsGrid, hidden_width: usize) -> Result<Self> {
        if logits.max_normalization_error() > 1e-9 {
            return Err(Error::InvalidArgument("rows must be normalized".into()));
        }
        Ok(Self {
            logits,
            hidden_width,
            counter: CallCounter::default(),
        })
    }

    /// Uniform distribution at every position.
    pub fn uniform(seq_len: usize, categories: usize) -> Self {
        let v = -(categories as f64).ln();
        let mut m = Matrix::zeros(seq_len, categories);
        m.fill(v);
        Self {
            logits: LogitsGrid::from_normalized(m),
            hidden_width: 1,
            counter: CallCounter::default(),
        }
    }
}

impl Arm for InputIndependent {
    fn seq_len(&self) -> usize {
        self.logits.len()
    }

    fn categories(&self) -> usize {
        self.logits.categories()
    }

    fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    fn evaluate(&self, tokens: &[usize]) -> Result<Forward> {
        if tokens.len() != self.seq_len() {
            return Err(shape_err("InputIndependent input", self.seq_len(), tokens.len()));
        }
        Ok(Forward {
            logits: self.logits.clone(),
            hidden: HiddenGrid::new(Matrix::zeros(self.seq_len(), self.hidden_width)),
        })
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }
}

/// The reference network with its one-step input shift removed, so row `i`
/// sees token `i`. A deliberate causality violation.
#[derive(Debug, Clone)]
pub struct Unshifted(pub ArmModel);

impl Arm for Unshifted {
    fn seq_len(&self) -> usize {
        self.0.seq_len()
    }

    fn categories(&self) -> usize {
        self.0.categories()
    }

    fn hidden_width(&self) -> usize {
        self.0.hidden_width()
    }

    fn evaluate(&self, tokens: &[usize]) -> Result<Forward> {
        self.0.run(tokens, false).map(|(f, _)| f)
    }

    fn counter(&self) -> &CallCounter {
        self.0.counter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{check_causality, ArmConfig, CausalityReport};
    use crate::numeric::Rng;

    #[test]
    fn alternating_rows() {
        let m = Alternating::new(4);
        let f = m.evaluate(&[1, 1, 0, 0]).unwrap();
        let mode = |i: usize| crate::reparam::argmax(f.logits.row(i));
        assert_eq!((mode(0), mode(1), mode(2), mode(3)), (1, 0, 0, 1));
    }

    #[test]
    fn unshifted_variant_fails_causality() {
        let cfg = ArmConfig {
            embed: 4,
            hidden: 8,
            layers: 2,
            output_init_scale: 1.0,
            ..ArmConfig::new(10, 3)
        };
        let m = Unshifted(ArmModel::new(cfg, &mut Rng::new(1)).unwrap());
        match check_causality(&m, 100, &mut Rng::new(2)).unwrap() {
            CausalityReport::Fail { perturbed, position, .. } => assert!(position <= perturbed),
            CausalityReport::Pass => panic!("violation not detected"),
        }
    }

    #[test]
    fn trivial_lengths_pass() {
        let one = ArmModel::new(ArmConfig::new(1, 4), &mut Rng::new(0)).unwrap();
        assert!(check_causality(&one, 10, &mut Rng::new(0)).unwrap().passed());
        assert!(check_causality(&one, 0, &mut Rng::new(0)).is_err());
    }
}
