use nalab::attention::{ProjectionConfig, ProjectionKind};
use nalab::data::{Batch, BOS, EOS, NUM_SPECIAL, PAD};
use nalab::gradcheck::{check_params, max_error, DEFAULT_STEP};
use nalab::model::{sinusoidal_table, Architecture, ModelConfig, Transformer};
use nalab::{ParamStore, Rng, Tape, Tensor, TensorError};

fn tiny(arch: Architecture, vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_layers: layers,
        num_heads: 2,
        d_ff: 16,
        dropout_p: 0.0,
        max_seq_len: 16,
        ..ModelConfig::new(vocab, arch)
    }
}

fn build(cfg: ModelConfig, seed: u64) -> (ParamStore<f64>, Transformer) {
    let mut store = ParamStore::new();
    let model = Transformer::new(&mut store, cfg, seed).unwrap();
    (store, model)
}

/// Scale every weight up so the network is far from its near-zero init.
fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v += rng.normal() * scale;
        }
    }
}

fn batch(rows: &[&[usize]]) -> Batch {
    Batch::pad(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 0).unwrap()
}

fn run_encoder(model: &Transformer, store: &ParamStore<f64>, b: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = model.encoder_forward(&mut tape, store, b, false, &mut Rng::new(0)).unwrap();
    tape.value(out).to_vec()
}

fn seq2seq_logits(model: &Transformer, store: &ParamStore<f64>, src: &Batch, tgt: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = model.seq2seq_forward_loss(&mut tape, store, src, tgt, false, &mut Rng::new(0)).unwrap();
    tape.value(out.logits).to_vec()
}

#[test]
fn zero_layer_encoder_is_embedding_plus_position() {
    let (store, model) = build(tiny(Architecture::Encoder, 10, 0), 1);
    let out = run_encoder(&model, &store, &batch(&[&[7]]));
    let table = store.get(store.find("embed.tokens").unwrap());
    let pe = sinusoidal_table(1, 8);
    for j in 0..8 {
        assert_eq!(out[j], table.at2(7, j) + pe[j]);
    }
    assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn sinusoidal_table_values() {
    let pe = sinusoidal_table(3, 4);
    // position 2, pair 1: angle = 2 / 10000^(2/4) = 0.02
    assert!((pe[2 * 4 + 2] - 0.02f64.sin()).abs() < 1e-15);
    assert!((pe[2 * 4 + 3] - 0.02f64.cos()).abs() < 1e-15);
    assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
}

#[test]
fn encoder_without_positions_is_permutation_equivariant() {
    let mut cfg = tiny(Architecture::Encoder, 12, 2);
    cfg.positional_encoding = false;
    for kind in ProjectionKind::ALL {
        cfg.projection = ProjectionConfig::uniform(kind);
        let (mut store, model) = build(cfg, 2);
        perturb(&mut store, 3, 0.3);
        let a = run_encoder(&model, &store, &batch(&[&[5, 6, 7, 8, 9]]));
        let b = run_encoder(&model, &store, &batch(&[&[5, 8, 7, 6, 9]]));
        for (pa, pb) in [(0, 0), (1, 3), (2, 2), (3, 1), (4, 4)] {
            for j in 0..8 {
                let (x, y) = (a[pa * 8 + j], b[pb * 8 + j]);
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{kind}");
            }
        }
    }
}

#[test]
fn gradcheck_one_layer_encoder() {
    for kind in ProjectionKind::ALL {
        let mut cfg = tiny(Architecture::Encoder, 10, 1);
        cfg.projection = ProjectionConfig::uniform(kind);
        let (mut store, model) = build(cfg, 4);
        perturb(&mut store, 5, 0.2);
        let ids = batch(&[&[5, 6, 7, 8], &[9, 5, 6, PAD]]);
        let w = Tensor::from_f64(vec![8, 8], &(0..64).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect::<Vec<_>>()).unwrap();
        let reports = check_params(&mut store, DEFAULT_STEP, |tape, s| {
            let h = model.encoder_forward(tape, s, &ids, false, &mut Rng::new(0))?;
            let wv = tape.input(&w)?;
            let p = tape.mul(h, wv)?;
            tape.sum(p)
        })
        .unwrap();
        let err = max_error(&reports);
        assert!(err < 1e-5, "{kind}: {err:e}");
    }
}

#[test]
fn gradcheck_one_layer_encoder_decoder_loss() {
    for kind in ProjectionKind::ALL {
        let mut cfg = tiny(Architecture::EncoderDecoder, 10, 1);
        cfg.projection = ProjectionConfig::uniform(kind);
        let (mut store, model) = build(cfg, 6);
        perturb(&mut store, 7, 0.2);
        let src = batch(&[&[5, 6, 7, 8, EOS], &[9, 5, EOS]]);
        let tgt = batch(&[&[BOS, 8, 7, 6, 5, EOS], &[BOS, 5, 9, EOS]]);
        let reports = check_params(&mut store, DEFAULT_STEP, |tape, s| {
            Ok(model.seq2seq_forward_loss(tape, s, &src, &tgt, false, &mut Rng::new(0))?.loss)
        })
        .unwrap();
        let err = max_error(&reports);
        let bad: Vec<_> = reports.iter().filter(|r| !r.passes(1e-5)).collect();
        assert!(err < 1e-5, "{kind}: {err:e} {bad:?}");
    }
}

#[test]
fn untrained_mlm_loss_is_near_log_vocab() {
    let v = 70;
    let mut store = ParamStore::<f32>::new();
    let model = Transformer::new(&mut store, ModelConfig::new(v, Architecture::Encoder), 8).unwrap();
    let mut rng = Rng::new(9);
    let rows: Vec<Vec<usize>> = (0..40).map(|_| (0..32).map(|_| NUM_SPECIAL + rng.below((v - NUM_SPECIAL) as u64) as usize).collect()).collect();
    let input = Batch::pad(&rows, 0).unwrap();
    let labels: Vec<usize> = input.ids.clone();
    let mut tape = Tape::new();
    let out = model.mlm_forward_loss(&mut tape, &store, &input, &labels, false, &mut rng).unwrap();
    assert!(out.count >= 1000);
    let loss = tape.scalar_value(out.loss) as f64;
    let ln_v = (v as f64).ln();
    assert!((loss - ln_v).abs() < 0.05 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn initial_seq2seq_loss_within_half_nat_of_log_vocab() {
    for v in [16, 20, 64] {
        let mut store = ParamStore::<f32>::new();
        let model = Transformer::new(&mut store, ModelConfig::new(v, Architecture::EncoderDecoder), v as u64).unwrap();
        let src = batch(&[&[5, 6, 7, EOS], &[8, 9, 10, 11, EOS]]);
        let tgt = batch(&[&[BOS, 7, 6, 5, EOS], &[BOS, 11, 10, 9, 8, EOS]]);
        let mut tape = Tape::new();
        let out = model.seq2seq_forward_loss(&mut tape, &store, &src, &tgt, false, &mut Rng::new(0)).unwrap();
        let loss = tape.scalar_value(out.loss) as f64;
        assert!((loss - (v as f64).ln()).abs() < 0.5, "V={v}: {loss}");
    }
}

/// Zero output weights and a fixed bias make every position's logits equal
/// to the bias.
fn constant_logits(store: &mut ParamStore<f64>, bias: &[f64]) {
    let w = store.find("out.w").unwrap();
    store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = store.find("out.b").unwrap();
    store.get_mut(b).data_mut().copy_from_slice(bias);
}

#[test]
fn mlm_loss_on_fixed_logits_matches_hand_value() {
    let (mut store, model) = build(tiny(Architecture::Encoder, 6, 1), 10);
    let bias = [0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
    constant_logits(&mut store, &bias);
    let input = batch(&[&[5, 3, 3]]);
    let labels = [PAD, 5, 2];
    let mut tape = Tape::new();
    let out = model.mlm_forward_loss(&mut tape, &store, &input, &labels, false, &mut Rng::new(0)).unwrap();
    let lse = bias.iter().map(|b: &f64| b.exp()).sum::<f64>().ln();
    let expected = ((lse - bias[5]) + (lse - bias[2])) / 2.0;
    assert!((tape.scalar_value(out.loss) - expected).abs() < 1e-12);
    assert_eq!(out.count, 2);
    assert_eq!(out.correct, 1, "argmax is id 2");
}

#[test]
fn mlm_without_masked_positions_is_an_error() {
    let (store, model) = build(tiny(Architecture::Encoder, 6, 1), 10);
    let mut tape = Tape::new();
    let r = model.mlm_forward_loss(&mut tape, &store, &batch(&[&[5, 5]]), &[PAD, PAD], false, &mut Rng::new(0));
    assert!(matches!(r, Err(TensorError::Invalid { .. })));
}

#[test]
fn bos_only_target_is_a_single_position_loss() {
    let (mut store, model) = build(tiny(Architecture::EncoderDecoder, 8, 1), 11);
    perturb(&mut store, 12, 0.3);
    let src = batch(&[&[5, 6, EOS]]);
    let tgt = batch(&[&[BOS, EOS]]);
    let mut tape = Tape::new();
    let out = model.seq2seq_forward_loss(&mut tape, &store, &src, &tgt, false, &mut Rng::new(0)).unwrap();
    let logits = tape.value(out.logits);
    assert_eq!(logits.len(), 8);
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    assert!((tape.scalar_value(out.loss) - (lse - logits[EOS])).abs() < 1e-12);
    assert_eq!(out.count, 1);
}

#[test]
fn target_contract_and_length_are_checked() {
    let (store, model) = build(tiny(Architecture::EncoderDecoder, 8, 1), 11);
    let src = batch(&[&[5, EOS]]);
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    assert!(model.seq2seq_forward_loss(&mut tape, &store, &src, &batch(&[&[5, 6, EOS]]), false, &mut rng).is_err());
    assert!(model.seq2seq_forward_loss(&mut tape, &store, &src, &batch(&[&[BOS, 6, 7]]), false, &mut rng).is_err());
    let long: Vec<usize> = vec![5; 17];
    assert!(matches!(
        model.encoder_forward(&mut tape, &store, &batch(&[&long]), false, &mut rng),
        Err(TensorError::Invalid { .. })
    ));
    assert!(model.encoder_forward(&mut tape, &store, &batch(&[&[8]]), false, &mut rng).is_err());
}

#[test]
fn decoder_logits_ignore_future_targets_bit_exactly() {
    for kind in ProjectionKind::ALL {
        let mut cfg = tiny(Architecture::EncoderDecoder, 12, 2);
        cfg.projection = ProjectionConfig::uniform(kind);
        let (mut store, model) = build(cfg, 13);
        perturb(&mut store, 14, 0.3);
        let src = batch(&[&[5, 6, 7, 8, EOS]]);
        let base = [BOS, 8, 7, 6, 5, EOS];
        let reference = seq2seq_logits(&model, &store, &src, &batch(&[&base]));
        let mut rng = Rng::new(15);
        for t in 1..5 {
            let mut alt = base;
            for slot in alt.iter_mut().take(5).skip(t + 1) {
                *slot = NUM_SPECIAL + rng.below(7) as usize;
            }
            let out = seq2seq_logits(&model, &store, &src, &batch(&[&alt]));
            assert_eq!(&out[..(t + 1) * 12], &reference[..(t + 1) * 12], "{kind} t={t}");
        }
    }
}

#[test]
fn teacher_forcing_matches_prefix_by_prefix_recomputation() {
    let (mut store, model) = build(tiny(Architecture::EncoderDecoder, 12, 2), 16);
    perturb(&mut store, 17, 0.3);
    let src = batch(&[&[5, 6, 7, EOS]]);
    let tgt = [BOS, 7, 6, 5, EOS];
    let full = seq2seq_logits(&model, &store, &src, &batch(&[&tgt]));
    for t in 0..4 {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let memory = model.encode(&mut tape, &store, &src, false, &mut rng).unwrap();
        let prefix = batch(&[&tgt[..=t]]);
        let logits = model.decode_logits(&mut tape, &store, memory, &src, &prefix, false, &mut rng).unwrap();
        let last = &tape.value(logits)[t * 12..(t + 1) * 12];
        for (a, b) in last.iter().zip(&full[t * 12..(t + 1) * 12]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn greedy_decode_stops_immediately_when_eos_dominates() {
    let (mut store, model) = build(tiny(Architecture::EncoderDecoder, 9, 1), 18);
    let mut bias = vec![0.0; 9];
    bias[EOS] = 10.0;
    constant_logits(&mut store, &bias);
    let out = model.greedy_decode(&store, &batch(&[&[5, 6, EOS], &[7, EOS]]), 10).unwrap();
    assert_eq!(out, vec![Vec::<usize>::new(), vec![]]);
}

#[test]
fn greedy_decode_respects_max_len_and_batch_padding() {
    let (mut store, model) = build(tiny(Architecture::EncoderDecoder, 12, 2), 19);
    perturb(&mut store, 20, 0.5);
    // Never predict EOS so decoding runs to the limit.
    let b = store.find("out.b").unwrap();
    store.get_mut(b).data_mut()[EOS] = -100.0;
    let alone = model.greedy_decode(&store, &batch(&[&[5, 6, 7, EOS]]), 6).unwrap();
    assert_eq!(alone[0].len(), 6);
    let padded = model
        .greedy_decode(&store, &batch(&[&[9, 8, 7, 6, 5, 11, 10, EOS], &[5, 6, 7, EOS]]), 6)
        .unwrap();
    assert_eq!(padded[1], alone[0]);
}

#[test]
fn padding_does_not_change_real_positions() {
    for arch in [Architecture::Encoder, Architecture::EncoderDecoder] {
        let (mut store, model) = build(tiny(arch, 12, 2), 21);
        perturb(&mut store, 22, 0.3);
        let a = run_encoder(&model, &store, &batch(&[&[5, 6, 7]]));
        let b = run_encoder(&model, &store, &batch(&[&[5, 6, 7, PAD, PAD]]));
        assert_eq!(&a[..], &b[..24]);
    }
}

#[test]
fn parameter_count_matches_enumeration() {
    let mut rng = Rng::new(23);
    for _ in 0..12 {
        let heads = rng.range_inclusive(1, 3);
        let pick = |r: &mut Rng| ProjectionKind::ALL[r.below(3) as usize];
        let cfg = ModelConfig {
            vocab_size: rng.range_inclusive(6, 30),
            d_model: heads * rng.range_inclusive(1, 4),
            num_layers: rng.range_inclusive(0, 2),
            num_heads: heads,
            d_ff: rng.range_inclusive(1, 20),
            architecture: if rng.bernoulli(0.5) { Architecture::Encoder } else { Architecture::EncoderDecoder },
            tie_embeddings: rng.bernoulli(0.5),
            projection: ProjectionConfig {
                q: pick(&mut rng),
                k: pick(&mut rng),
                v: pick(&mut rng),
                expansion: rng.range_inclusive(1, 3),
                bias: rng.bernoulli(0.5),
            },
            ..ModelConfig::new(6, Architecture::Encoder)
        };
        let mut store = ParamStore::<f32>::new();
        Transformer::new(&mut store, cfg, 0).unwrap();
        assert_eq!(store.num_scalars(), cfg.parameter_count(), "{cfg:?}");
    }
}

#[test]
fn default_desk_model_sizes() {
    let mut cfg = ModelConfig::new(20, Architecture::EncoderDecoder);
    assert_eq!(cfg.parameter_count(), 236_308);
    cfg.projection = ProjectionConfig::keys_values(ProjectionKind::NeuralMlp);
    assert_eq!(cfg.parameter_count(), 388_372);
}

#[test]
fn projection_swap_changes_only_projection_tensors() {
    let base = tiny(Architecture::EncoderDecoder, 10, 2);
    let (std_store, _) = build(base, 24);
    for kind in [ProjectionKind::DualLinear, ProjectionKind::NeuralMlp] {
        let cfg = ModelConfig {
            projection: ProjectionConfig::keys_values(kind),
            ..base
        };
        let (other, _) = build(cfg, 24);
        let is_kv = |n: &str| n.contains("_attn.k") || n.contains("_attn.v");
        let shared = |s: &ParamStore<f64>| -> Vec<(String, Vec<usize>, Vec<f64>)> {
            s.iter()
                .filter(|(n, _)| !is_kv(n))
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect()
        };
        assert_eq!(shared(&std_store), shared(&other));
        assert!(other.iter().any(|(n, _)| n.ends_with("self_attn.k.w1.w")));
        assert!(other.iter().all(|(n, _)| !n.contains("_attn.q.w1")));
    }
}
