use predictive_sampling::data::{quantize_pixel, read_idx_images, write_idx_images, Images};
use predictive_sampling::forecast::kl_categorical;
use predictive_sampling::numeric::{log_softmax, Matrix};
use predictive_sampling::reparam::{gumbel_argmax, sample_posterior_noise, NoiseGrid};
use predictive_sampling::sampler::{ancestral_sample, predictive_sample};
use predictive_sampling::{ArmConfig, ArmModel, ForecastStrategy, LogitsGrid, Rng, TokenBuffer};
use proptest::prelude::*;

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, k)
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_self(a in logits(6), b in logits(6)) {
        let p = log_softmax(&a).unwrap();
        let q = log_softmax(&b).unwrap();
        prop_assert!(kl_categorical(&p, &q) >= 0.0);
        prop_assert!(kl_categorical(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn quantization_is_monotone(a in 0u8..=255, b in 0u8..=255, bits in 1u32..=8) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize_pixel(lo, bits) <= quantize_pixel(hi, bits));
        prop_assert!(quantize_pixel(hi, bits) < 1 << bits);
    }

    #[test]
    fn idx_roundtrip(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels = (0..count * rows * cols).map(|_| rng.below(256) as u8).collect();
        let img = Images::new(count, rows, cols, 1, pixels).unwrap();
        let mut bytes = Vec::new();
        write_idx_images(&mut bytes, &img).unwrap();
        prop_assert_eq!(read_idx_images(bytes.as_slice()).unwrap(), img);
    }

    #[test]
    fn posterior_noise_reconstructs(scores in prop::collection::vec(-50.0f64..50.0, 2..9), pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let k = scores.len();
        let mu = LogitsGrid::from_scores(Matrix::from_vec(1, k, scores).unwrap()).unwrap();
        let x = TokenBuffer::from_tokens(vec![pick.index(k)], k).unwrap();
        let eps = sample_posterior_noise(&x, &mu, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(gumbel_argmax(mu.row(0), eps.row(0)).unwrap(), x.get(0));
    }

    #[test]
    fn noise_grid_roundtrip(d in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let grid = predictive_sampling::reparam::sample_gumbel_grid(&mut Rng::new(seed), d, k).unwrap();
        let mut bytes = Vec::new();
        grid.write_to(&mut bytes).unwrap();
        let back = NoiseGrid::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.matrix().as_slice(), grid.matrix().as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictive_equals_ancestral(d in 1usize..20, k in 2usize..6, layers in 1usize..4, seed in any::<u64>()) {
        let cfg = ArmConfig { embed: 3, hidden: 6, layers, output_init_scale: 2.0, ..ArmConfig::new(d, k) };
        let model = ArmModel::new(cfg, &mut Rng::new(seed)).unwrap();
        let eps = predictive_sampling::reparam::sample_gumbel_grid(&mut Rng::new(seed ^ 1), d, k).unwrap();
        let (reference, _) = ancestral_sample(&model, &eps).unwrap();
        for s in [ForecastStrategy::zeros(), ForecastStrategy::predict_last(), ForecastStrategy::fpi()] {
            let (x, r) = predictive_sample(&model, &s, &eps).unwrap();
            prop_assert_eq!(&x, &reference);
            prop_assert!(r.arm_calls <= d);
        }
    }
}
