use icrl_core::diffcore::{Tensor, Var};
use icrl_core::nn::{Graph, ParamStore};
use icrl_core::trajencoder::{
    attention_entropy, EncoderConfig, EncoderError, GoalEmbedKind, SigmaReparamLinear,
    TimestepBatch, TimestepRecord, TrajEncoder, PAD_TOKEN,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        obs_dim: 3,
        action_count: 2,
        vocab_size: 6,
        max_goals: 2,
        goal_len: 2,
        token_dim: 4,
        goal_embed: GoalEmbedKind::FeedForward(vec![8, 4]),
        timestep_mlp_dims: vec![12, 8],
        model_dim: 8,
        ff_dim: 16,
        heads: 2,
        layers: 2,
        max_context: 8,
    }
}

fn random_record(rng: &mut impl Rng, cfg: &EncoderConfig, t: usize) -> TimestepRecord {
    TimestepRecord {
        observation: (0..cfg.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        prev_action: (t > 0).then(|| rng.gen_range(0..cfg.action_count)),
        prev_reward: rng.gen_range(-1.0..1.0),
        reset_flag: rng.gen_bool(0.2),
        time_feature: (t as f64 / cfg.max_context as f64).min(1.0),
        instruction_tokens: vec![1, 2, 3, PAD_TOKEN],
    }
}

fn random_sequence(rng: &mut impl Rng, cfg: &EncoderConfig, len: usize) -> Vec<TimestepRecord> {
    (0..len).map(|t| random_record(rng, cfg, t)).collect()
}

fn build(cfg: EncoderConfig, seed: u64) -> (ParamStore<f64>, TrajEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = TrajEncoder::new(&mut store, cfg, &mut rng).unwrap();
    (store, enc)
}

fn latents(store: &ParamStore<f64>, enc: &TrajEncoder, batch: &TimestepBatch) -> Tensor<f64> {
    let mut g = Graph::new(store, false);
    let out = enc.forward(&mut g, batch).unwrap();
    g.value(out.latents).clone()
}

fn largest_singular_value(rows: usize, cols: usize, data: &[f64]) -> f64 {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let gram = m.transpose() * &m;
    gram.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .sqrt()
}

fn layer_with_weight(
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    seed: u64,
) -> (ParamStore<f64>, SigmaReparamLinear) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = SigmaReparamLinear::new(&mut store, "l", rows, cols, &mut rng);
    *store.get_mut(layer.weight) = Tensor::new(vec![rows, cols], data).unwrap();
    // restart from fresh random unit vectors so the warm-up does not count
    let unit = |n: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let (u, v) = (unit(cols, &mut rng), unit(rows, &mut rng));
    layer = SigmaReparamLinear::from_parts(layer.weight, layer.bias, layer.gain, rows, cols, u, v);
    (store, layer)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[test]
fn identity_has_unit_spectral_estimate() {
    let (store, mut layer) = layer_with_weight(2, 2, vec![1.0, 0.0, 0.0, 1.0], 1);
    let sigma = layer.spectral_estimate(&store);
    assert!((sigma - 1.0).abs() < 1e-12);
    let w = layer.effective_weight(&store);
    for (a, b) in w.data().iter().zip([1.0, 0.0, 0.0, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn diagonal_estimate_converges_to_two() {
    let (store, mut layer) = layer_with_weight(2, 2, vec![2.0, 0.0, 0.0, 1.0], 2);
    let mut sigma = 0.0;
    for _ in 0..50 {
        sigma = layer.spectral_estimate(&store);
    }
    assert!((sigma - 2.0).abs() / 2.0 < 0.01, "sigma {sigma}");
}

#[test]
fn random_matrix_estimate_matches_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (store, mut layer) = layer_with_weight(6, 4, data.clone(), 10 + trial);
        let mut sigma = 0.0;
        for _ in 0..100 {
            sigma = layer.spectral_estimate(&store);
        }
        let truth = largest_singular_value(6, 4, &data);
        assert!(
            (sigma - truth).abs() / truth < 0.01,
            "trial {trial}: {sigma} vs {truth}"
        );
    }
}

#[test]
fn zero_matrix_leaves_iteration_state() {
    let (store, mut layer) = layer_with_weight(3, 2, vec![0.0; 6], 4);
    let (u, v) = (layer.u().to_vec(), layer.v().to_vec());
    assert_eq!(layer.spectral_estimate(&store), 0.0);
    assert_eq!(layer.u(), &u[..]);
    assert_eq!(layer.v(), &v[..]);
    assert_eq!(layer.effective_weight(&store), *store.get(layer.weight));
}

#[test]
fn effective_weight_spectral_norm_equals_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (mut store, mut layer) = layer_with_weight(5, 4, data, 6);
    *store.get_mut(layer.gain) = Tensor::scalar(-0.7);
    for _ in 0..200 {
        layer.spectral_estimate(&store);
    }
    assert!((norm(layer.u()) - 1.0).abs() < 1e-12 && (norm(layer.v()) - 1.0).abs() < 1e-12);
    let w = layer.effective_weight(&store);
    let s = largest_singular_value(5, 4, w.data());
    assert!((s - 0.7).abs() < 1e-2, "{s}");
}

#[test]
fn refresh_keeps_iteration_vectors_unit() {
    let (store, mut enc) = build(small_config(), 7);
    for _ in 0..3 {
        enc.refresh_spectral(&store);
        for l in enc.sigma_layers() {
            assert!((norm(l.u()) - 1.0).abs() < 1e-12);
            assert!((norm(l.v()) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mazerunner_timestep_encoder_dims() {
    let cfg = EncoderConfig {
        obs_dim: 6,
        action_count: 4,
        vocab_size: 64,
        max_goals: 3,
        goal_len: 2,
        token_dim: 8,
        goal_embed: GoalEmbedKind::FeedForward(vec![64, 32]),
        timestep_mlp_dims: vec![128, 128, 128],
        model_dim: 128,
        ff_dim: 512,
        heads: 8,
        layers: 1,
        max_context: 4,
    };
    assert_eq!(cfg.timestep_input_dim(), 45);
    let (store, enc) = build(cfg.clone(), 8);
    assert_eq!(enc.timestep.layers[0].fan_in, 45);
    assert!(enc.projection.is_none());
    let rec = TimestepRecord::zero(6, cfg.tokens_per_step());
    assert_eq!(enc.encode_timestep(&store, &rec).unwrap().shape(), &[128]);
}

#[test]
fn zero_record_with_zero_mlp_embeds_to_zero() {
    let cfg = small_config();
    let (mut store, enc) = build(cfg.clone(), 9);
    let mut ids = enc.timestep.params();
    ids.extend(enc.projection.iter().flat_map(|p| p.params()));
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let rec = TimestepRecord::zero(cfg.obs_dim, cfg.tokens_per_step());
    let e = enc.encode_timestep(&store, &rec).unwrap();
    assert!(e.data().iter().all(|&x| x == 0.0));
}

fn embed_instruction(store: &ParamStore<f64>, enc: &TrajEncoder, tokens: &[u32]) -> Vec<f64> {
    let mut g = Graph::new(store, false);
    let v = enc.instruction.forward(&mut g, tokens).unwrap();
    g.value(v).data().to_vec()
}

#[test]
fn padding_tokens_are_inert() {
    for kind in [
        GoalEmbedKind::FeedForward(vec![8, 4]),
        GoalEmbedKind::Recurrent { hidden: 6, out: 4 },
    ] {
        let cfg = EncoderConfig {
            goal_embed: kind,
            ..small_config()
        };
        let (mut store, enc) = build(cfg, 10);
        let tokens = [1, 2, PAD_TOKEN, PAD_TOKEN];
        let before = embed_instruction(&store, &enc, &tokens);
        // rewrite the rows of tokens that do not appear; nothing may change
        let table = enc.instruction.params()[0];
        let t = store.get_mut(table);
        let width = t.shape()[1];
        for row in 2..t.shape()[0] {
            for c in 0..width {
                t.data_mut()[row * width + c] += 3.0;
            }
        }
        assert_eq!(before, embed_instruction(&store, &enc, &tokens));
    }
}

#[test]
fn all_padding_instruction_yields_bias_only_output() {
    let cfg = small_config();
    let (mut store, enc) = build(cfg, 11);
    let tokens = [PAD_TOKEN; 4];
    // biases start at zero, so the null vector is zero
    assert!(embed_instruction(&store, &enc, &tokens)
        .iter()
        .all(|&x| x == 0.0));
    let table = enc.instruction.params()[0];
    let shape = store.get(table).shape().to_vec();
    *store.get_mut(table) = Tensor::full(&shape, 5.0);
    assert!(embed_instruction(&store, &enc, &tokens)
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn swapping_goals_changes_embedding() {
    for kind in [
        GoalEmbedKind::FeedForward(vec![8, 4]),
        GoalEmbedKind::Recurrent { hidden: 6, out: 4 },
    ] {
        let cfg = EncoderConfig {
            goal_embed: kind,
            ..small_config()
        };
        let (store, enc) = build(cfg, 12);
        let a = embed_instruction(&store, &enc, &[1, 2, 3, 4]);
        let b = embed_instruction(&store, &enc, &[3, 4, 1, 2]);
        assert_ne!(a, b);
    }
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let cfg = small_config();
    let (store, enc) = build(cfg.clone(), 13);
    let mut rec = TimestepRecord::zero(cfg.obs_dim, cfg.tokens_per_step());
    rec.instruction_tokens[0] = 6;
    assert_eq!(
        enc.encode_timestep(&store, &rec).unwrap_err(),
        EncoderError::TokenOutOfVocab { token: 6, vocab: 6 }
    );
}

#[test]
fn config_validation() {
    assert!(small_config().validate().is_ok());
    assert!(EncoderConfig {
        heads: 3,
        ..small_config()
    }
    .validate()
    .is_err());
    assert!(EncoderConfig {
        max_context: 0,
        ..small_config()
    }
    .validate()
    .is_err());
}

#[test]
fn overlong_sequence_is_rejected() {
    let cfg = small_config();
    let (store, enc) = build(cfg.clone(), 14);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_sequence(&mut rng, &cfg, 9);
    let batch = TimestepBatch::from_sequences(&cfg, &[&seq]).unwrap();
    let mut g = Graph::new(&store, false);
    assert!(matches!(
        enc.forward(&mut g, &batch),
        Err(EncoderError::SequenceTooLong { len: 9, max: 8 })
    ));
}

#[test]
fn causal_perturbation_leaves_earlier_latents_bitwise() {
    let cfg = small_config();
    let (store, enc) = build(cfg.clone(), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_sequence(&mut rng, &cfg, 8);
    let base = latents(
        &store,
        &enc,
        &TimestepBatch::from_sequences(&cfg, &[&seq]).unwrap(),
    );
    let d = cfg.model_dim;
    for t in 0..7 {
        let mut other = seq.clone();
        for r in other.iter_mut().skip(t + 1) {
            *r = random_record(&mut rng, &cfg, 3);
            r.observation.iter_mut().for_each(|x| *x *= 50.0);
        }
        let pert = latents(
            &store,
            &enc,
            &TimestepBatch::from_sequences(&cfg, &[&other]).unwrap(),
        );
        assert_eq!(
            &base.data()[..(t + 1) * d],
            &pert.data()[..(t + 1) * d],
            "position {t}"
        );
        assert_ne!(&base.data()[(t + 1) * d..], &pert.data()[(t + 1) * d..]);
    }
}

#[test]
fn padded_rows_leave_real_latents_unchanged() {
    let cfg = small_config();
    let (store, enc) = build(cfg.clone(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let short = random_sequence(&mut rng, &cfg, 3);
    let long = random_sequence(&mut rng, &cfg, 6);
    let alone = latents(
        &store,
        &enc,
        &TimestepBatch::from_sequences(&cfg, &[&short]).unwrap(),
    );
    let batch = TimestepBatch::from_sequences(&cfg, &[&short, &long]).unwrap();
    assert_eq!(batch.mask[..6], [true, true, true, false, false, false]);
    let padded = latents(&store, &enc, &batch);
    assert_eq!(alone.data(), &padded.data()[..3 * cfg.model_dim]);
}

#[test]
fn single_token_attention_is_one() {
    let cfg = small_config();
    let (store, enc) = build(cfg.clone(), 17);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, &cfg, 1);
    let mut g = Graph::new(&store, false);
    let out = enc
        .forward(
            &mut g,
            &TimestepBatch::from_sequences(&cfg, &[&seq]).unwrap(),
        )
        .unwrap();
    for map in &out.attention {
        assert_eq!(map.shape(), &[1, 2, 1, 1]);
        assert!(map.data().iter().all(|&p| p == 1.0));
    }
}

/// Scalar `Σ w ⊙ latents` for a fixed weighting `w`, on input embeddings `x` of shape (1, T, d).
fn weighted_latents(
    store: &ParamStore<f64>,
    enc: &TrajEncoder,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
) -> (f64, Vec<f64>) {
    let mut g = Graph::new(store, true);
    let xv = g.tape.leaf(x.clone(), true);
    let out = enc.transformer.forward(&mut g, xv).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.tape.mul(out.latents, wv).unwrap();
    let s: Var = g.tape.sum(prod, None).unwrap();
    let value = g.value(s).item();
    let grads = g.tape.backward(s).unwrap();
    (value, grads.get(xv).unwrap().data().to_vec())
}

#[test]
fn transformer_jacobian_matches_finite_differences() {
    let cfg = EncoderConfig {
        model_dim: 8,
        heads: 2,
        layers: 2,
        ff_dim: 16,
        ..small_config()
    };
    let (store, enc) = build(cfg, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5 * 8;
    let x = Tensor::new(
        vec![1, 5, 8],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for out in 0..n {
        let mut w = vec![0.0; n];
        w[out] = 1.0;
        let w = Tensor::new(vec![1, 5, 8], w).unwrap();
        let (_, analytic) = weighted_latents(&store, &enc, &x, &w);
        for i in 0..n {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let fd = (weighted_latents(&store, &enc, &plus, &w).0
                - weighted_latents(&store, &enc, &minus, &w).0)
                / (2.0 * step);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
            if i / 8 > out / 8 {
                assert_eq!(analytic[i], 0.0, "future input {i} feeds output {out}");
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn sigma_reparam_parameter_gradients_match_finite_differences() {
    let cfg = small_config();
    let (store, enc) = build(cfg, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(
        vec![1, 4, 8],
        (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let w = Tensor::new(
        vec![1, 4, 8],
        (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let block = &enc.transformer.blocks[0];
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s, false);
        let xv = g.constant(x.clone());
        let out = enc.transformer.forward(&mut g, xv).unwrap();
        let l = g.value(out.latents);
        l.data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut g = Graph::new(&store, true);
    let xv = g.constant(x.clone());
    let out = enc.transformer.forward(&mut g, xv).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.tape.mul(out.latents, wv).unwrap();
    let s = g.tape.sum(prod, None).unwrap();
    let mut grads = g.tape.backward(s).unwrap();
    let per_param = g.param_grads(&mut grads);
    let mut worst: f64 = 0.0;
    for id in [
        block.qkv.weight,
        block.qkv.gain,
        block.ff2.weight,
        block.ff2.gain,
    ] {
        let analytic = per_param[id.index()].clone().unwrap();
        for i in 0..analytic.numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += 1e-5;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= 1e-5;
            let fd = (eval(&plus) - eval(&minus)) / 2e-5;
            worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn entropy_of_uniform_and_one_hot_rows() {
    let uniform = Tensor::new(vec![1, 1, 4, 4], vec![0.25; 16]).unwrap();
    let e = attention_entropy(&uniform, None).unwrap();
    assert!((e[0] - 4f64.ln()).abs() < 1e-12);
    assert!((e[0] - 1.3863).abs() < 1e-4);
    let mut one_hot = vec![0.0; 16];
    for r in 0..4 {
        one_hot[r * 4 + r] = 1.0;
    }
    let e = attention_entropy(&Tensor::new(vec![1, 1, 4, 4], one_hot).unwrap(), None).unwrap();
    assert_eq!(e, vec![0.0]);
}

#[test]
fn entropy_rejects_unnormalized_rows() {
    let mut data = vec![0.25; 16];
    data[5] = 0.26;
    let err = attention_entropy(&Tensor::new(vec![1, 1, 4, 4], data).unwrap(), None).unwrap_err();
    assert!(matches!(err, EncoderError::InvalidAttention { row: 1, .. }));
}

#[test]
fn init_attention_entropy_is_near_uniform() {
    let cfg = EncoderConfig {
        max_context: 16,
        ..small_config()
    };
    let (store, enc) = build(cfg.clone(), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<_> = (0..4)
        .map(|_| random_sequence(&mut rng, &cfg, 16))
        .collect();
    let refs: Vec<&[TimestepRecord]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = TimestepBatch::from_sequences(&cfg, &refs).unwrap();
    let mut g = Graph::new(&store, false);
    let out = enc.forward(&mut g, &batch).unwrap();
    let oracle = (0..16).map(|t| ((t + 1) as f64).ln()).sum::<f64>() / 16.0;
    for map in &out.attention {
        for e in attention_entropy(map, Some(&batch.mask)).unwrap() {
            assert!(
                (e - oracle).abs() / oracle < 0.10,
                "entropy {e} vs oracle {oracle}"
            );
        }
    }
}

#[test]
fn activations_stay_finite_over_many_forward_passes() {
    let cfg = small_config();
    let (store, mut enc) = build(cfg.clone(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=cfg.max_context);
        let seq = random_sequence(&mut rng, &cfg, len);
        enc.refresh_spectral(&store);
        let l = latents(
            &store,
            &enc,
            &TimestepBatch::from_sequences(&cfg, &[&seq]).unwrap(),
        );
        assert!(l.is_finite());
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let (s1, e1) = build(cfg.clone(), 22);
    let (s2, e2) = build(cfg.clone(), 22);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = random_sequence(&mut rng, &cfg, 5);
    let b = TimestepBatch::from_sequences(&cfg, &[&seq]).unwrap();
    assert_eq!(latents(&s1, &e1, &b), latents(&s2, &e2, &b));
}
