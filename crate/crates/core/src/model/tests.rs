use super::*;
use crate::packing::AttentionMask;
use crate::tokenizer::IGNORE_LABEL;

fn tiny(head: HeadType) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        head_type: head,
        float_width: FloatWidth::F64,
        init_seed: 7,
        tie_embeddings: false,
        segment_local_positions: true,
    }
}

/// Redraws the tiny model's weights at unit activation scale: embeddings
/// N(0, 1), linear weights N(0, 1/fan_in), biases N(0, 0.1^2), gains near 1.
/// At the default 0.02 init a 1e-3 step is several percent of the
/// LayerNorm input scale and truncation error swamps the comparison.
fn scaled_model(cfg: ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg).unwrap();
    let mut rng = crate::rng::SplitMix64::new(99);
    for (name, t) in m.params.tensors_mut() {
        let (base, std) = if name.ends_with("gain") {
            (1.0, 0.1)
        } else if name.ends_with("_emb") {
            (0.0, 1.0)
        } else if t.rank() == 2 {
            (0.0, 1.0 / (t.shape[0] as f64).sqrt())
        } else {
            (0.0, 0.1)
        };
        for x in t.data.iter_mut() {
            *x = base + std * rng.next_normal();
        }
    }
    m
}

/// Central differences with step 1e-3 on every parameter; the error is
/// `|a - n| / max(|a|, |n|, 1e-3)`.
fn max_fd_error(model: &Model<f64>, loss: impl Fn(&Model<f64>) -> f64, grads: &Params<f64>) -> f64 {
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_tensors = grads.tensors();
    for (ti, name) in names.iter().enumerate() {
        let n = grad_tensors[ti].1.numel();
        for i in 0..n {
            let orig = probe.params.tensors()[ti].1.data[i];
            probe.params.tensors_mut()[ti].1.data[i] = orig + h;
            let up = loss(&probe);
            probe.params.tensors_mut()[ti].1.data[i] = orig - h;
            let down = loss(&probe);
            probe.params.tensors_mut()[ti].1.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad_tensors[ti].1.data[i];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(
                err < 1e-4,
                "{name}[{i}]: numeric {numeric:e} analytic {analytic:e}"
            );
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn lm_gradients_match_finite_differences() {
    let model = scaled_model(tiny(HeadType::Lm));
    let tokens = vec![1, 5, 9, 3, 14, 2, 7, 11];
    let labels = vec![IGNORE_LABEL, 9, 3, IGNORE_LABEL, 2, 7, 11, 0];
    let input = SequenceInput::causal(tokens);
    let (_, grads) = model.backward_lm(&input, &labels, IGNORE_LABEL).unwrap();
    let f = |m: &Model<f64>| {
        loss_lm(&m.forward_lm(&input).unwrap(), &labels, IGNORE_LABEL)
            .unwrap()
            .loss
    };
    max_fd_error(&model, f, &grads);
}

#[test]
fn tied_lm_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..tiny(HeadType::Lm)
    };
    let model = scaled_model(cfg);
    let labels = vec![4, 2, IGNORE_LABEL, 8];
    let input = SequenceInput::causal(vec![3, 4, 2, 6]);
    let (_, grads) = model.backward_lm(&input, &labels, IGNORE_LABEL).unwrap();
    let f = |m: &Model<f64>| {
        loss_lm(&m.forward_lm(&input).unwrap(), &labels, IGNORE_LABEL)
            .unwrap()
            .loss
    };
    max_fd_error(&model, f, &grads);
}

#[test]
fn cls_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        vocab_size: 300,
        ..tiny(HeadType::Classification)
    };
    let model = scaled_model(cfg);
    let tokens = vec![BOS_ID, 12, 40, 7, EOS_ID];
    let (_, grads) = model.backward_cls(&tokens, 2).unwrap();
    let f = |m: &Model<f64>| loss_cls(&m.forward_cls(&tokens).unwrap(), 2).unwrap();
    max_fd_error(&model, f, &grads);
}

#[test]
fn pooled_cls_gradients_at_vocab_16() {
    let model = scaled_model(tiny(HeadType::Classification));
    let input = SequenceInput::causal(vec![3, 9, 1, 15, 4]);
    let mut grads = model.params.zeros_like();
    model
        .accumulate_cls(&input, &[(4, 0), (2, 1)], 0.5, &mut grads)
        .unwrap();
    let f = |m: &Model<f64>| {
        let l = m.forward_cls_pooled(&input, &[4, 2]).unwrap();
        0.5 * (loss_cls(&l[0], 0).unwrap() + loss_cls(&l[1], 1).unwrap())
    };
    max_fd_error(&model, f, &grads);
}

#[test]
fn packed_mask_gradients_match_finite_differences() {
    let model = scaled_model(tiny(HeadType::Lm));
    let segs = [0usize, 0, 0, 1, 1, 1, 1];
    let mask = crate::packing::build_attention_mask(&segs);
    let input = SequenceInput::new(vec![1, 2, 3, 4, 5, 6, 7], vec![0, 1, 2, 0, 1, 2, 3], mask);
    let labels = vec![
        IGNORE_LABEL,
        IGNORE_LABEL,
        5,
        IGNORE_LABEL,
        IGNORE_LABEL,
        IGNORE_LABEL,
        9,
    ];
    let (_, grads) = model.backward_lm(&input, &labels, IGNORE_LABEL).unwrap();
    let f = |m: &Model<f64>| {
        loss_lm(&m.forward_lm(&input).unwrap(), &labels, IGNORE_LABEL)
            .unwrap()
            .loss
    };
    max_fd_error(&model, f, &grads);
}

#[test]
fn all_ignored_labels_give_zero_loss_and_gradient() {
    let model = Model::<f64>::init(tiny(HeadType::Lm)).unwrap();
    let input = SequenceInput::causal(vec![1, 2, 3]);
    let (loss, grads) = model
        .backward_lm(&input, &[IGNORE_LABEL; 3], IGNORE_LABEL)
        .unwrap();
    assert_eq!(loss.counted, 0);
    assert_eq!(loss.loss, 0.0);
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn fully_masked_row_outputs_finite_values() {
    let model = Model::<f64>::init(tiny(HeadType::Lm)).unwrap();
    let mask = AttentionMask::from_fn(3, |i, j| i == j && i != 1);
    let logits = model
        .forward_lm(&SequenceInput::new(vec![1, 2, 3], vec![0, 1, 2], mask))
        .unwrap();
    assert!(logits.data.iter().all(|x| x.is_finite()));
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Model::<f32>::init(ModelConfig::default()).unwrap();
    let b = Model::<f32>::init(ModelConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = Model::<f32>::init(ModelConfig {
        init_seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn init_statistics() {
    let m = Model::<f64>::init(ModelConfig {
        float_width: FloatWidth::F64,
        ..ModelConfig::default()
    })
    .unwrap();
    let emb = &m.params.tok_emb.data;
    let mean = emb.iter().sum::<f64>() / emb.len() as f64;
    let std = (emb.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / emb.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3);
    assert!((std - INIT_STD).abs() < 1e-3, "{std}");
    let wo = &m.params.layers[0].wo.data;
    let wo_std = (wo.iter().map(|x| x * x).sum::<f64>() / wo.len() as f64).sqrt();
    assert!((wo_std - INIT_STD / 8f64.sqrt()).abs() < 1e-3, "{wo_std}");
    assert!(m.params.layers[0].ln1_gain.data.iter().all(|&g| g == 1.0));
    assert!(m.params.layers[0].bq.data.iter().all(|&b| b == 0.0));
}

#[test]
fn wrong_head_and_bad_inputs_are_rejected() {
    let lm = Model::<f64>::init(tiny(HeadType::Lm)).unwrap();
    assert!(matches!(
        lm.forward_cls(&[BOS_ID, EOS_ID]),
        Err(ModelError::HeadMismatch { .. })
    ));
    assert!(matches!(
        lm.forward_lm(&SequenceInput::causal(vec![99])),
        Err(ModelError::TokenOutOfRange { token: 99, .. })
    ));
    assert!(matches!(
        lm.forward_lm(&SequenceInput::causal(vec![1; 13])),
        Err(ModelError::SequenceTooLong { len: 13, max: 12 })
    ));
    let input = SequenceInput::causal(vec![1, 2]);
    assert!(matches!(
        lm.backward_lm(&input, &[1, 16], IGNORE_LABEL),
        Err(ModelError::LabelOutOfRange { label: 16, .. })
    ));

    let cls = Model::<f64>::init(ModelConfig {
        vocab_size: 300,
        ..tiny(HeadType::Classification)
    })
    .unwrap();
    assert!(matches!(
        cls.forward_cls(&[BOS_ID, 5]),
        Err(ModelError::MissingFrame)
    ));
    assert!(matches!(
        cls.backward_cls(&[BOS_ID, EOS_ID], 3),
        Err(ModelError::ClassOutOfRange(3))
    ));
    assert!(matches!(
        Model::<f32>::init(tiny(HeadType::Lm)),
        Err(ModelError::WidthMismatch { .. })
    ));
}

#[test]
fn constrained_argmax_breaks_ties_low() {
    let logits = [0.0f64, 1.0, 1.0, 0.5];
    assert_eq!(constrained_argmax(&logits, &[3, 2, 1]), 1);
    assert_eq!(constrained_argmax(&logits, &[3, 0]), 3);
    assert_eq!(argmax(&[2.0f64, 2.0, 1.0]), 0);
}

#[test]
fn generate_answer_is_an_answer_id() {
    let cfg = ModelConfig {
        vocab_size: 300,
        ..tiny(HeadType::Lm)
    };
    let m = Model::<f64>::init(cfg).unwrap();
    let id = m.generate_answer(&[10, 20, 30]).unwrap();
    assert!(ANSWER_IDS.contains(&id));
    let logits = m.answer_logits(&[10, 20, 30]).unwrap();
    assert_eq!(id, ANSWER_IDS[argmax(&logits)]);
}

#[test]
fn loss_functions() {
    let l = loss_cls(&[0.0f64, 0.0, 0.0], 1).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
    let t = Tensor {
        shape: vec![2, 2],
        data: vec![0.0f64, 0.0, 5.0, 5.0],
    };
    let r = loss_lm(&t, &[0, 1], IGNORE_LABEL).unwrap();
    assert_eq!(r.counted, 2);
    assert!((r.loss - 2f64.ln()).abs() < 1e-12);
    assert!(loss_cls(&[0.0f64; 3], 3).is_err());
}

#[test]
fn checkpoint_round_trip_both_widths() {
    let mut ck = Checkpoint::<f64>::init(tiny(HeadType::Lm)).unwrap();
    ck.step = 17;
    ck.val_accuracy = Some(0.625);
    ck.optimizer = Some(OptimizerState {
        step: 17,
        m: ck.model.params.clone(),
        v: ck.model.params.zeros_like(),
    });
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), ck);
    assert!(matches!(
        AnyCheckpoint::from_bytes(&bytes).unwrap(),
        AnyCheckpoint::F64(_)
    ));
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes),
        Err(ModelError::WidthMismatch { .. })
    ));

    let cfg32 = ModelConfig {
        float_width: FloatWidth::F32,
        head_type: HeadType::Classification,
        vocab_size: 300,
        ..tiny(HeadType::Lm)
    };
    let ck32 = Checkpoint::<f32>::init(cfg32).unwrap();
    let back = AnyCheckpoint::from_bytes(&ck32.to_bytes()).unwrap();
    assert_eq!(back, AnyCheckpoint::F32(ck32));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = Checkpoint::<f64>::init(tiny(HeadType::Lm)).unwrap();
    let bytes = ck.to_bytes();
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
}
