use super::*;
use crate::data::FeatureSequence;
use crate::metrics::ccc;

fn small_cfg(input_dim: usize) -> TcGruConfig {
    TcGruConfig {
        input_dim,
        tc_channels: 6,
        tc_kernel: 3,
        gru_hidden: 5,
        embed_dim: 7,
        output_dim: 3,
    }
}

fn random_seq(dim: usize, frames: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..dim * frames)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    FeatureSequence::from_f64(dim, &x).unwrap()
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let cfg = TcGruConfig::default();
    assert_eq!(
        (
            cfg.input_dim,
            cfg.tc_channels,
            cfg.gru_hidden,
            cfg.embed_dim
        ),
        (43, 64, 128, 128)
    );
    // projection 43·64+64, TC 5·64·64+64, GRU1 64·384+128·384+384,
    // GRU2 2·128·384+384, embedding 128·128+128, head 128·3+3
    let expected = 2816 + 20544 + 74112 + 98688 + 16512 + 387;
    assert_eq!(expected, 213_059);
    assert_eq!(cfg.parameter_count(), expected);
    let m = build_tcgru(&cfg, 0).unwrap();
    assert_eq!(m.parameter_count(), expected);
}

#[test]
fn default_model_accepts_mfbf0_frames() {
    let m = build_tcgru(&TcGruConfig::default(), 1).unwrap();
    let est = predict(&m, &random_seq(43, 6, 2)).unwrap();
    assert_eq!(est.embedding.len(), 128);
    assert!(est.triple.is_finite());
    assert!(predict(&m, &random_seq(40, 6, 2)).is_err());
    assert!(predict(&m, &FeatureSequence::new(43, vec![]).unwrap()).is_err());
}

#[test]
fn equal_seed_builds_identical_models() {
    let a = build_tcgru(&small_cfg(4), 9).unwrap();
    let b = build_tcgru(&small_cfg(4), 9).unwrap();
    let c = build_tcgru(&small_cfg(4), 10).unwrap();
    let bits = |m: &TcGruModel| -> Vec<u64> {
        m.parameters()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn invalid_configs_rejected() {
    assert!(build_tcgru(
        &TcGruConfig {
            tc_kernel: 4,
            ..small_cfg(4)
        },
        0
    )
    .is_err());
    assert!(build_tcgru(
        &TcGruConfig {
            gru_hidden: 0,
            ..small_cfg(4)
        },
        0
    )
    .is_err());
    assert!(build_tcgru(
        &TcGruConfig {
            output_dim: 2,
            ..small_cfg(4)
        },
        0
    )
    .is_err());
}

#[test]
fn zero_head_outputs_bias() {
    let mut m = build_tcgru(&small_cfg(4), 3).unwrap();
    for p in m.parameters_mut() {
        if p.name == "head.w" {
            p.value.fill(0.0);
        }
    }
    m.set_output_bias([4.0, 3.5, 2.0]);
    for seed in 0..5 {
        let est = predict(&m, &random_seq(4, 3 + seed as usize, seed)).unwrap();
        assert_eq!(est.triple, EmotionTriple::new(4.0, 3.5, 2.0));
    }
}

#[test]
fn doubling_inputs_changes_output() {
    for seed in 0..5 {
        let m = build_tcgru(&small_cfg(4), seed).unwrap();
        let x = random_seq(4, 6, seed + 100);
        let x2 =
            FeatureSequence::from_f64(4, &x.to_f64().iter().map(|v| 2.0 * v).collect::<Vec<_>>())
                .unwrap();
        let a = predict(&m, &x).unwrap().triple.to_array();
        let b = predict(&m, &x2).unwrap().triple.to_array();
        let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 0.0);
    }
}

#[test]
fn constant_sequence_pooling_is_length_invariant() {
    // The pooled readout of a constant sequence is the constant whatever the
    // length; the recurrent layers before it are not length-invariant.
    let c = Tensor::from_vec(&[1, 4, 2], [0.3, -0.2].repeat(4)).unwrap();
    let d = Tensor::from_vec(&[1, 8, 2], [0.3, -0.2].repeat(8)).unwrap();
    let a = crate::diffcore::mean_pool_time(&c, &[4]).unwrap();
    let b = crate::diffcore::mean_pool_time(&d, &[8]).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let m = build_tcgru(&small_cfg(4), seed).unwrap();
        let r = model_grad_check(&m, &[4], 4, 5, 200, seed).unwrap();
        assert!(r.max_rel_err < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn embedding_gradient_path() {
    // loss = Σ c·embedding, checked against central differences
    let m = build_tcgru(&small_cfg(3), 5).unwrap();
    let x = vec![random_seq(3, 4, 6)];
    let c: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.3).collect();
    let (_, tr) = m.forward(&x).unwrap();
    let mut grads: Vec<Tensor> = m
        .parameters()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    m.backward(&tr, [0.0; 3], Some(&c), &mut grads);
    let mut params: Vec<Parameter> = m.parameters().into_iter().cloned().collect();
    let mut probe = m.clone();
    let r = grad_check(
        &mut params,
        &grads,
        |ps| {
            probe.set_parameters(ps);
            let e = probe.forward(&x).unwrap().0.embedding;
            e.iter().zip(&c).map(|(a, b)| a * b).sum()
        },
        1e-4,
        200,
        1,
    );
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn batch_forward_is_permutation_equivariant() {
    let m = build_tcgru(&small_cfg(4), 8).unwrap();
    let xs: Vec<Vec<FeatureSequence>> = (0..5)
        .map(|i| vec![random_seq(4, 3 + i, i as u64)])
        .collect();
    let refs: Vec<&[FeatureSequence]> = xs.iter().map(Vec::as_slice).collect();
    let (a, _) = forward_batch(&m, &refs).unwrap();
    let rev: Vec<&[FeatureSequence]> = refs.iter().rev().copied().collect();
    let (b, _) = forward_batch(&m, &rev).unwrap();
    for (x, y) in a.iter().zip(b.iter().rev()) {
        assert_eq!(x, y);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = build_tcgru(&small_cfg(4), 11).unwrap();
    let seqs: Vec<FeatureSequence> = (0..3).map(|i| random_seq(4, 5, i)).collect();
    m.fit_normalization(&seqs.iter().map(std::slice::from_ref).collect::<Vec<_>>())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &m).unwrap();
    let AnyModel::TcGru(back) = load_model(&path).unwrap() else {
        panic!("wrong kind")
    };
    assert_eq!(back, m);
    let x = random_seq(4, 7, 99);
    assert_eq!(predict(&back, &x).unwrap(), predict(&m, &x).unwrap());
}

fn fusion_fixture(seed: u64) -> (FusionModel, Vec<FeatureSequence>) {
    let lex = build_tcgru(&small_cfg(3), seed + 1).unwrap();
    let cfg = FusionConfig {
        acoustic_stream_dims: vec![4, 2],
        acoustic_proj_dim: 6,
        tc_kernel: 3,
        gru_hidden: 5,
        fusion_hidden: 8,
    };
    let f = FusionModel::new(cfg, vec![lex], seed).unwrap();
    let inputs = vec![
        random_seq(4, 5, seed),
        random_seq(2, 5, seed + 1),
        random_seq(3, 3, seed + 2),
    ];
    (f, inputs)
}

#[test]
fn fused_width_for_one_lexical_branch() {
    let lex = build_tcgru(
        &TcGruConfig {
            input_dim: 8,
            tc_channels: 8,
            gru_hidden: 8,
            ..TcGruConfig::default()
        },
        0,
    )
    .unwrap();
    let cfg = FusionConfig {
        acoustic_stream_dims: vec![16, 16],
        gru_hidden: 8,
        ..FusionConfig::default()
    };
    let f = FusionModel::new(cfg, vec![lex], 0).unwrap();
    assert_eq!(f.fused_width(), 128 + 128);
}

#[test]
fn zeroed_acoustic_path_ignores_acoustic_inputs() {
    let (mut f, inputs) = fusion_fixture(1);
    f.zero_acoustic_path();
    let a = f.predict(&inputs).unwrap();
    let mut other = inputs.clone();
    other[0] = random_seq(4, 9, 50);
    other[1] = random_seq(2, 9, 51);
    assert_eq!(f.predict(&other).unwrap(), a);
    other[2] = random_seq(3, 3, 52);
    assert_ne!(f.predict(&other).unwrap(), a);
}

#[test]
fn zeroed_lexical_paths_ignore_lexical_inputs() {
    let (mut f, inputs) = fusion_fixture(2);
    f.zero_lexical_paths();
    let a = f.predict(&inputs).unwrap();
    let mut other = inputs.clone();
    other[2] = random_seq(3, 6, 60);
    assert_eq!(f.predict(&other).unwrap(), a);
}

#[test]
fn frozen_branches_receive_no_gradient() {
    let (f, inputs) = fusion_fixture(3);
    let before = f.branches()[0].model.clone();
    let batch: Vec<&[FeatureSequence]> = vec![&inputs, &inputs[..]];
    let mut other = inputs.clone();
    other[0] = random_seq(4, 5, 70);
    let batch = [batch[0], other.as_slice()];
    let labels = [
        EmotionTriple::new(2.0, 3.0, 4.0),
        EmotionTriple::new(5.0, 1.0, 6.0),
    ];
    let (_, grads) = ccc_batch_loss(&f, &batch, &labels, LossWeights::default()).unwrap();
    assert_eq!(grads.len(), f.parameters().len());
    assert!(grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
    let after = &f.branches()[0].model;
    assert_eq!(after, &before);
    assert!(after
        .parameters()
        .iter()
        .all(|p| p.grad.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn unfrozen_branch_is_a_contract_violation() {
    let (mut f, _) = fusion_fixture(4);
    assert!(f.check_trainable().is_ok());
    f.set_branch_frozen(0, false).unwrap();
    assert!(matches!(f.check_trainable(), Err(Error::Contract(_))));
}

#[test]
fn fusion_gradients_match_finite_differences() {
    for seed in 0..2 {
        let (f, _) = fusion_fixture(seed);
        let r = model_grad_check(&f, &[4, 2, 3], 3, 4, 200, seed).unwrap();
        assert!(r.max_rel_err < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn fusion_input_checks() {
    let (f, inputs) = fusion_fixture(5);
    assert!(f.predict(&inputs[..2]).is_err());
    let mut bad = inputs.clone();
    bad[1] = random_seq(2, 4, 1);
    assert!(f.predict(&bad).is_err());
}

#[test]
fn fusion_checkpoint_round_trip() {
    let (mut f, inputs) = fusion_fixture(6);
    f.fit_normalization(&[&inputs[..]]).unwrap();
    let ck = f.to_checkpoint();
    let back = AnyModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let AnyModel::Fusion(g) = back else {
        panic!("wrong kind")
    };
    assert_eq!(g.predict(&inputs).unwrap(), f.predict(&inputs).unwrap());
    assert_eq!(g.to_checkpoint().to_bytes(), ck.to_bytes());
}

/// Returns the first frame of the input as the triple.
struct Echo;

impl Predictor for Echo {
    fn predict(&self, inputs: &[FeatureSequence]) -> Result<EmotionEstimate> {
        let f = inputs[0].frame(0);
        Ok(EmotionEstimate {
            triple: EmotionTriple::new(f64::from(f[0]), f64::from(f[1]), f64::from(f[2])),
            embedding: vec![],
        })
    }
}

fn echo_examples(preds: &[[f64; 3]], labels: &[[f64; 3]]) -> Vec<Example> {
    preds
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, l))| Example {
            id: format!("e{i}"),
            labels: EmotionTriple::from_array(*l),
            inputs: vec![FeatureSequence::from_f64(3, p).unwrap()],
            corrupted: None,
            noise_aware: false,
        })
        .collect()
}

#[test]
fn evaluate_examples() {
    let labels = [
        [1.0, 2.0, 3.0],
        [4.0, 6.0, 5.0],
        [7.0, 1.0, 2.0],
        [2.5, 3.5, 6.5],
    ];
    let ex = echo_examples(&labels, &labels);
    assert_eq!(evaluate(&Echo, &ex).unwrap(), [1.0, 1.0, 1.0]);
    let ex = echo_examples(&[[4.0; 3]; 4], &labels);
    assert_eq!(evaluate(&Echo, &ex).unwrap(), [0.0, 0.0, 0.0]);
    assert!(evaluate(&Echo, &ex[..1]).is_err());
}

#[test]
fn evaluate_matches_manual_ccc_and_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draw = || {
        [
            rng.gen_range(1.0..7.0),
            rng.gen_range(1.0..7.0),
            rng.gen_range(1.0..7.0),
        ]
    };
    let preds: Vec<[f64; 3]> = (0..20).map(|_| draw()).collect();
    let labels: Vec<[f64; 3]> = (0..20).map(|_| draw()).collect();
    // predictions pass through f32 feature storage
    let stored: Vec<[f64; 3]> = preds
        .iter()
        .map(|p| p.map(|v| f64::from(v as f32)))
        .collect();
    let ex = echo_examples(&preds, &labels);
    let got = evaluate(&Echo, &ex).unwrap();
    for k in 0..3 {
        let x: Vec<f64> = stored.iter().map(|p| p[k]).collect();
        let y: Vec<f64> = labels.iter().map(|l| l[k]).collect();
        assert!((got[k] - ccc(&x, &y).unwrap().ccc).abs() < 1e-12);
    }
    let mut rev = ex.clone();
    rev.reverse();
    let again = evaluate(&Echo, &rev).unwrap();
    for k in 0..3 {
        assert!((again[k] - got[k]).abs() < 1e-12);
    }
}

#[test]
fn normalization_fit_and_apply() {
    let s = FeatureSequence::from_f64(2, &[1.0, 5.0, 3.0, 5.0]).unwrap();
    let n = Normalization::fit(std::iter::once(&s)).unwrap();
    assert_eq!(n.mean, vec![2.0, 5.0]);
    assert_eq!(n.std, vec![1.0, 1.0]);
    let mut x = vec![3.0, 6.0];
    n.apply(&mut x);
    assert_eq!(x, vec![1.0, 1.0]);
}
