use nvib_core::numerics::GradCheckConfig;
use nvib_core::{NoiseSource, Tensor};
use nvib_model::checkpoint;
use nvib_model::gradcheck::check_model_gradients;
use nvib_model::sequence::EOS;
use nvib_model::{
    Autoencoder, Latent, LengthHistogram, ModelConfig, ModelError, Pooling, TokenSequence, TrainConfig, Trainer,
    Variant,
};
use proptest::prelude::*;

const VOCAB: usize = 20;

fn seq(tokens: &[usize]) -> TokenSequence {
    TokenSequence::new(tokens.to_vec()).unwrap()
}

fn config(variant: Variant, dim: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(VOCAB, 24, variant);
    c.model_dim = dim;
    c.ff_dim = 2 * dim;
    c
}

fn model(variant: Variant) -> Autoencoder {
    Autoencoder::new(config(variant, 16), 5).unwrap()
}

fn corpus(count: usize, seed: u64) -> Vec<TokenSequence> {
    let mut noise = NoiseSource::new(seed);
    (0..count)
        .map(|_| {
            let len = 3 + noise.below(6);
            TokenSequence::new((0..len).map(|_| 3 + noise.below(VOCAB - 3)).collect()).unwrap()
        })
        .collect()
}

const VARIANTS: [Variant; 7] = [
    Variant::T,
    Variant::Vt,
    Variant::Vtp(Pooling::Mean),
    Variant::Vtp(Pooling::Max),
    Variant::Vtp(Pooling::Cls),
    Variant::Vts(0.5),
    Variant::Nvae,
];

#[test]
fn single_token_encodes_to_one_row_per_position() {
    let m = model(Variant::Nvae);
    let h = m.encode(&seq(&[4])).unwrap();
    // The token plus the end marker.
    assert_eq!(h.shape(), [2, 16]);
}

#[test]
fn encoder_sees_positions() {
    let m = model(Variant::T);
    let a = m.encode(&seq(&[4, 5, 6])).unwrap();
    let b = m.encode(&seq(&[6, 5, 4])).unwrap();
    let reordered = b.select_rows(&[2, 1, 0, 3]);
    assert!(a.max_abs_diff(&reordered) > 1e-3);
}

#[test]
fn zero_weights_give_constant_encoding() {
    let mut m = model(Variant::T);
    for t in m.params_mut().values_mut() {
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let a = m.encode(&seq(&[4, 5, 6])).unwrap();
    let b = m.encode(&seq(&[9, 9, 3])).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&x| x == 0.0));
}

#[test]
fn overlength_input_is_rejected() {
    let m = model(Variant::T);
    let long = seq(&[4; 30]);
    assert!(matches!(m.encode(&long), Err(ModelError::Input(_))));
}

#[test]
fn transformer_has_exactly_zero_kl() {
    let m = model(Variant::T);
    let (r, _) = m.batch_gradients(&corpus(4, 1), &mut NoiseSource::new(2)).unwrap();
    assert_eq!(r.l_d, 0.0);
    assert_eq!(r.l_g, 0.0);
    assert!(r.l_r > 0.0);
}

#[test]
fn losses_are_well_formed_for_every_variant() {
    for v in VARIANTS {
        let m = model(v);
        let (r, grads) = m.batch_gradients(&corpus(3, 2), &mut NoiseSource::new(3)).unwrap();
        assert!(r.l_r >= 0.0 && r.total.is_finite(), "{v}");
        assert_eq!(grads.len(), m.params().len());
        assert!(r.l_d >= 0.0 && r.l_g >= 0.0, "{v}");
    }
}

#[test]
fn stride_half_keeps_half_the_states() {
    let m = model(Variant::Vts(0.5));
    for len in 1..20 {
        let s = seq(&vec![4; len]);
        let n = len + 1;
        let Latent::Vectors(z) = m.latent(&s, None).unwrap() else { panic!("vector latent expected") };
        assert_eq!(z.rows(), n.div_ceil(2));
        assert_eq!(m.latent_size(n), n.div_ceil(2));
    }
}

#[test]
fn pooled_variants_have_one_latent_vector() {
    for p in [Pooling::Mean, Pooling::Max, Pooling::Cls] {
        let m = model(Variant::Vtp(p));
        assert_eq!(m.latent(&seq(&[4, 5, 6, 7]), None).unwrap().len(), 1);
    }
}

#[test]
fn nvae_latent_has_a_prior_row() {
    let m = model(Variant::Nvae);
    assert_eq!(m.latent(&seq(&[4, 5, 6]), None).unwrap().len(), 5);
    assert_eq!(m.latent(&seq(&[4, 5, 6]), Some(&mut NoiseSource::new(1))).unwrap().len(), 5);
}

fn bias_towards(m: &mut Autoencoder, token: usize) {
    let id = m.params().find("output.b").unwrap();
    m.params_mut().get_mut(id).set(0, token, 1e6);
}

#[test]
fn end_marker_first_stops_after_one_token() {
    let mut m = model(Variant::Nvae);
    bias_towards(&mut m, EOS);
    let out = m.reconstruct(&seq(&[4, 5, 6])).unwrap();
    assert_eq!(out, vec![EOS]);
}

#[test]
fn decoding_is_capped_at_twice_the_length() {
    let mut m = model(Variant::Nvae);
    bias_towards(&mut m, 7);
    let s = seq(&[4, 5, 6]);
    // Target length counts the end marker.
    assert_eq!(s.len(), 4);
    assert_eq!(m.reconstruct(&s).unwrap(), vec![7; 8]);
}

#[test]
fn greedy_decoding_is_deterministic() {
    let m = model(Variant::Vt);
    let s = seq(&[4, 5, 6, 8]);
    assert_eq!(m.reconstruct(&s).unwrap(), m.reconstruct(&s).unwrap());
}

#[test]
fn generation_replays_with_the_same_seed() {
    let m = model(Variant::Nvae);
    let hist = LengthHistogram::from_lengths([3, 4, 4, 6]);
    let a = m.generate_from_prior(&hist, &mut NoiseSource::new(9)).unwrap();
    let b = m.generate_from_prior(&hist, &mut NoiseSource::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_bin_histogram_gives_seven_prior_draws() {
    let m = model(Variant::Nvae);
    let hist = LengthHistogram::from_lengths([7; 5]);
    let mut noise = NoiseSource::new(4);
    let (_, n) = m.generate_from_prior(&hist, &mut noise).unwrap();
    assert_eq!(n, 7);
    let Latent::Discrete { log_weights, vectors } = m.prior_latent(n, &mut noise).unwrap() else {
        panic!("discrete prior latent expected")
    };
    assert_eq!(vectors.rows(), 7);
    let total: f64 = log_weights.data().iter().map(|w| w.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn generated_lengths_follow_the_histogram() {
    let m = Autoencoder::new(config(Variant::Nvae, 8), 2).unwrap();
    let hist = LengthHistogram::from_lengths([2, 3, 3, 5, 5, 5, 8, 8]);
    let mut noise = NoiseSource::new(10);
    let draws = 1000;
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..draws {
        let (_, n) = m.generate_from_prior(&hist, &mut noise).unwrap();
        *counts.entry(n).or_insert(0usize) += 1;
    }
    let tv: f64 = hist
        .counts()
        .keys()
        .chain(counts.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|n| (counts.get(n).copied().unwrap_or(0) as f64 / draws as f64 - hist.probability(*n)).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn transformer_cannot_generate() {
    let m = model(Variant::T);
    let hist = LengthHistogram::from_lengths([3]);
    assert!(matches!(m.generate_from_prior(&hist, &mut NoiseSource::new(1)), Err(ModelError::Unsupported(_))));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let batch = vec![seq(&[3, 4, 5, 6]), seq(&[7, 8, 3])];
    for v in VARIANTS {
        let mut c = ModelConfig::toy(12, 10, v);
        c.model_dim = 8;
        c.ff_dim = 16;
        c.nvib.lambda_g_prime = 0.5;
        c.nvib.delta_p = 0.2;
        let mut m = Autoencoder::new(c, 3).unwrap();
        let r = check_model_gradients(&mut m, &batch, 11, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-3, "{v}: {} at {:?}", r.max_rel_error, r.worst);
        assert_eq!(r.checked, m.params().size());
    }
}

#[test]
fn teacher_forced_loss_falls_for_fifty_steps() {
    let seqs = corpus(32, 5);
    let mut c = config(Variant::Nvae, 32);
    c.dropout = 0.0;
    c.nvib.lambda_d_prime = 0.0;
    c.nvib.lambda_g_prime = 0.0;
    let mut t = Trainer::new(Autoencoder::new(c, 6).unwrap(), TrainConfig { batch_size: 32, ..TrainConfig::default() }, 7);
    let mut prev = t.model.evaluate(&seqs).unwrap().loss.l_r;
    for step in 0..50 {
        t.step_on(&seqs).unwrap();
        let now = t.model.evaluate(&seqs).unwrap().loss.l_r;
        assert!(now <= prev, "loss rose at step {step}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn unregularised_training_shrinks_the_posterior_scale() {
    let seqs = corpus(32, 8);
    let mut c = config(Variant::Nvae, 16);
    c.nvib.lambda_d_prime = 0.0;
    c.nvib.lambda_g_prime = 0.0;
    let mean_log_sigma = |m: &Autoencoder| {
        let mut s = 0.0;
        for x in &seqs {
            let Latent::Mixture(post) = m.latent(x, None).unwrap() else { unreachable!() };
            let ls = post.log_sigmas();
            s += ls.data()[..ls.data().len() - ls.cols()].iter().sum::<f64>() / (ls.data().len() - ls.cols()) as f64;
        }
        s / seqs.len() as f64
    };
    let mut t = Trainer::new(Autoencoder::new(c, 1).unwrap(), TrainConfig::default(), 2);
    let before = mean_log_sigma(&t.model);
    for _ in 0..400 {
        t.step(&seqs).unwrap();
    }
    let after = mean_log_sigma(&t.model);
    assert!(after < before - 0.1, "mean log sigma {before} -> {after}");
}

#[test]
fn checkpoint_round_trip_preserves_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let seqs = corpus(8, 3);
    for v in VARIANTS {
        let mut t = Trainer::new(model(v), TrainConfig::default(), 1);
        for _ in 0..3 {
            t.step(&seqs).unwrap();
        }
        let meta = [("note".to_string(), "a\nb".to_string())].into_iter().collect();
        checkpoint::save(&path, &t.model, &meta).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back.metadata, meta);
        let a = t.model.evaluate(&seqs).unwrap().loss.total;
        let b = back.model.evaluate(&seqs).unwrap().loss.total;
        assert!((a - b).abs() < 1e-9, "{v}");
        assert_eq!(back.model.variant(), v);
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let bytes = checkpoint::to_bytes(&model(Variant::Nvae), &Default::default());
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(checkpoint::from_bytes(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decoder_ignores_latent_order(seed in 0u64..1000, len in 1usize..10, sample in any::<bool>()) {
        let m = Autoencoder::new(config(Variant::Nvae, 8), seed).unwrap();
        let mut noise = NoiseSource::new(seed + 1);
        let s = TokenSequence::new((0..len).map(|_| 3 + noise.below(VOCAB - 3)).collect()).unwrap();
        let latent = if sample { m.latent(&s, Some(&mut noise)).unwrap() } else { m.latent(&s, None).unwrap() };
        let mut perm: Vec<usize> = (0..latent.len()).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % latent.len());
        let input = s.decoder_input();
        let a = m.decoder_logits(&input, &latent).unwrap();
        let b = m.decoder_logits(&input, &latent.permuted(&perm).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn stride_mask_ignores_content(a in proptest::collection::vec(3usize..VOCAB, 1..20), seed in 0u64..50) {
        let m = Autoencoder::new(config(Variant::Vts(0.5), 8), seed).unwrap();
        let b: Vec<usize> = a.iter().map(|t| 3 + (t + 5) % (VOCAB - 3)).collect();
        let la = m.latent(&seq(&a), None).unwrap().len();
        let lb = m.latent(&seq(&b), None).unwrap().len();
        prop_assert_eq!(la, lb);
        prop_assert_eq!(la, (a.len() + 1).div_ceil(2));
    }
}
