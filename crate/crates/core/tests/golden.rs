use predictive_sampling::arm::{train_arm, TrainConfig};
use predictive_sampling::data::synth_parity;
use predictive_sampling::reparam::sample_gumbel_grid;
use predictive_sampling::sampler::{ancestral_sample, predictive_sample};
use predictive_sampling::{ArmConfig, ArmModel, ForecastStrategy, Rng};

/// Values recorded from the first verified run of this exact routine.
const GOLDEN_TOKENS: &str = "0101010101010010";
const GOLDEN_FPI_CALLS: usize = 13;

#[test]
fn trained_parity_sample_is_frozen() {
    let data = synth_parity(400, 16, 0.05, &mut Rng::new(0).derive("data")).unwrap();
    let mut model = ArmModel::new(ArmConfig::new(16, 2), &mut Rng::new(0).derive("init")).unwrap();
    let config = TrainConfig {
        steps: 300,
        batch_size: 16,
        eval_every: 300,
        eval_items: 64,
        ..TrainConfig::default()
    };
    let curve = train_arm(&mut model, data.items(), data.items(), &config, &mut Rng::new(0).derive("train"), None).unwrap();
    assert!(curve.last().unwrap().val_bpd < 0.5);
    let eps = sample_gumbel_grid(&mut Rng::new(0), 16, 2).unwrap();
    let (x, _) = ancestral_sample(&model, &eps).unwrap();
    let tokens: String = x.tokens().iter().map(|t| char::from(b'0' + *t as u8)).collect();
    let (y, fpi) = predictive_sample(&model, &ForecastStrategy::fpi(), &eps).unwrap();
    assert_eq!(y, x);
    assert_eq!(tokens, GOLDEN_TOKENS);
    assert_eq!(fpi.arm_calls, GOLDEN_FPI_CALLS);
}
