use earlybird::data::{tokenize, tokenize_bytes, TokenizedSequence, CLS, EOS, PAD};
use earlybird::diffcore::Tensor;
use earlybird::encoder::{
    embed, encode, mask_sequence, mlm_pretrain, param_layout, Checkpoint, EncoderConfig, MlmHyper, Mode,
};
use earlybird::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize) -> EncoderConfig {
    EncoderConfig { layers, hidden: 8, max_len: 16, heads: 2, ffn: 16, vocab: 260, dropout: 0.1 }
}

/// Checkpoint with every parameter redrawn at a scale where the blocks do
/// visible work.
fn scrambled(cfg: &EncoderConfig, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in ck.params.iter_mut() {
        let base = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in p.tensor.values_mut() {
            *v = base + rng.random_range(-0.5..0.5);
        }
    }
    ck
}

fn param<'a>(ck: &'a Checkpoint, name: &str) -> &'a [f64] {
    ck.params.by_name(name).unwrap_or_else(|| panic!("no {name}")).tensor.values()
}

fn layer_norm_rows(x: &mut [Vec<f64>], gamma: &[f64], beta: &[f64]) {
    for row in x.iter_mut() {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + 1e-12).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma[j] * (*v - mean) / sd + beta[j];
        }
    }
}

fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64], out: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..out).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line eval-mode forward pass of a one-block encoder.
fn oracle_one_block(ck: &Checkpoint, seq: &TokenizedSequence) -> Vec<Vec<f64>> {
    let cfg = &ck.config;
    let (h, s, f) = (cfg.hidden, cfg.max_len, cfg.ffn);
    let tok = param(ck, "embeddings.token");
    let pos = param(ck, "embeddings.position");
    let mut x: Vec<Vec<f64>> =
        (0..s).map(|p| (0..h).map(|j| tok[seq.ids[p] * h + j] + pos[p * h + j]).collect()).collect();
    layer_norm_rows(&mut x, param(ck, "embeddings.norm.gamma"), param(ck, "embeddings.norm.beta"));
    let lin = |x: &[Vec<f64>], name: &str, out: usize| {
        affine(x, param(ck, &format!("layer.0.{name}.weight")), param(ck, &format!("layer.0.{name}.bias")), out)
    };
    let (q, k, v) = (lin(&x, "attn.query", h), lin(&x, "attn.key", h), lin(&x, "attn.value", h));
    let dh = h / cfg.heads;
    let mut ctx = vec![vec![0.0; h]; s];
    for hd in 0..cfg.heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    if seq.attention_mask[j] {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let a = lin(&ctx, "attn.output", h);
    let mut x: Vec<Vec<f64>> = x.iter().zip(&a).map(|(r, d)| r.iter().zip(d).map(|(p, q)| p + q).collect()).collect();
    layer_norm_rows(&mut x, param(ck, "layer.0.attn_norm.gamma"), param(ck, "layer.0.attn_norm.beta"));
    let inner: Vec<Vec<f64>> = lin(&x, "ffn.in", f).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let o = lin(&inner, "ffn.out", h);
    let mut y: Vec<Vec<f64>> = x.iter().zip(&o).map(|(r, d)| r.iter().zip(d).map(|(p, q)| p + q).collect()).collect();
    layer_norm_rows(&mut y, param(ck, "layer.0.ffn_norm.gamma"), param(ck, "layer.0.ffn_norm.beta"));
    y
}

#[test]
fn single_block_matches_direct_forward() {
    let cfg = tiny(1);
    let ck = scrambled(&cfg, 3);
    for text in ["x = (a + b)", "", "def f(y):\n  return y * 2 if y else 0"] {
        let seq = tokenize(text, cfg.max_len);
        let got = &encode(&ck, &[seq.clone()], Mode::Eval, 0).unwrap()[0];
        let want = oracle_one_block(&ck, &seq);
        for (p, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.token(1, p)[j] - w).abs() < 1e-9, "{text:?} position {p}: {} vs {w}", got.token(1, p)[j]);
            }
        }
    }
}

#[test]
fn states_have_layer_sequence_hidden_shape() {
    let cfg = tiny(3);
    let ck = Checkpoint::init(&cfg, 0).unwrap();
    let batch = vec![tokenize("abc", 16), tokenize("a much longer line of code", 16)];
    let out = encode(&ck, &batch, Mode::Eval, 0).unwrap();
    assert_eq!(out.len(), 2);
    for (st, seq) in out.iter().zip(&batch) {
        assert_eq!(st.states.shape(), &[3, 16, 8]);
        assert_eq!(st.attention_mask, seq.attention_mask);
        assert_eq!(st.code_token_mask, seq.code_token_mask);
        assert!(st.states.is_finite());
    }
}

#[test]
fn batching_does_not_change_states() {
    let cfg = tiny(2);
    let ck = scrambled(&cfg, 1);
    let a = tokenize("short", 16);
    let b = tokenize("something rather longer", 16);
    let together = encode(&ck, &[a.clone(), b.clone()], Mode::Eval, 0).unwrap();
    let alone = encode(&ck, &[b], Mode::Eval, 0).unwrap();
    for (x, y) in together[1].states.values().iter().zip(alone[0].states.values()) {
        assert!((x - y).abs() < 1e-12);
    }
    let alone = encode(&ck, &[a], Mode::Eval, 0).unwrap();
    assert_eq!(together[0].states.values().len(), alone[0].states.values().len());
}

#[test]
fn eval_is_deterministic_and_train_mode_uses_dropout() {
    let cfg = tiny(2);
    let ck = scrambled(&cfg, 2);
    let seq = vec![tokenize("if x: y()", 16)];
    let e1 = encode(&ck, &seq, Mode::Eval, 0).unwrap();
    let e2 = encode(&ck, &seq, Mode::Eval, 99).unwrap();
    assert_eq!(e1, e2);
    let t1 = encode(&ck, &seq, Mode::Train, 5).unwrap();
    let t2 = encode(&ck, &seq, Mode::Train, 5).unwrap();
    let t3 = encode(&ck, &seq, Mode::Train, 6).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1, e1);
    assert_ne!(t1, t3);
}

#[test]
fn pruned_model_reproduces_leading_layers() {
    let cfg = tiny(4);
    let ck = scrambled(&cfg, 4);
    let seq = vec![tokenize("while i < n: i += 1", 16)];
    let full = encode(&ck, &seq, Mode::Eval, 0).unwrap();
    let mut last = 0;
    for l in 1..=4 {
        let pruned = ck.prune(l).unwrap();
        assert_eq!(pruned.num_layers(), l);
        let count = pruned.param_count();
        assert!(count > last);
        last = count;
        let part = encode(&pruned, &seq, Mode::Eval, 0).unwrap();
        for layer in 1..=l {
            for p in 0..16 {
                assert_eq!(part[0].token(layer, p), full[0].token(layer, p), "layer {layer} position {p}");
            }
        }
    }
    assert_eq!(ck.prune(4).unwrap(), ck);
    assert!(ck.prune(0).is_err());
    assert!(ck.prune(5).is_err());
}

#[test]
fn pruned_param_count_follows_layout() {
    let cfg = tiny(4);
    let ck = Checkpoint::init(&cfg, 0).unwrap();
    let per_block = {
        let (h, f) = (cfg.hidden, cfg.ffn);
        4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h
    };
    let embed_params = cfg.vocab * cfg.hidden + cfg.max_len * cfg.hidden + 2 * cfg.hidden;
    for l in 1..=4 {
        let got = ck.prune(l).unwrap().param_count();
        assert_eq!(got, embed_params + l * per_block);
        let layout: usize = param_layout(&EncoderConfig { layers: l, ..cfg.clone() })
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(got, layout);
    }
}

#[test]
fn embedding_is_normalised_token_plus_position() {
    let cfg = tiny(1);
    let ck = scrambled(&cfg, 5);
    let ids: Vec<usize> = vec![CLS, 10, 10, 200, EOS, PAD, PAD, PAD, PAD, PAD, PAD, PAD, PAD, PAD, PAD, PAD];
    let got = embed(&ck, &ids).unwrap();
    assert_eq!(got.shape(), &[16, 8]);
    let tok = param(&ck, "embeddings.token");
    let pos = param(&ck, "embeddings.position");
    let mut want: Vec<Vec<f64>> =
        (0..16).map(|p| (0..8).map(|j| tok[ids[p] * 8 + j] + pos[p * 8 + j]).collect()).collect();
    layer_norm_rows(&mut want, param(&ck, "embeddings.norm.gamma"), param(&ck, "embeddings.norm.beta"));
    for p in 0..16 {
        for j in 0..8 {
            assert!((got.at(&[p, j]) - want[p][j]).abs() < 1e-9);
        }
    }
    // same token at two positions differs only through the position table
    assert_ne!(got.at(&[1, 0]), got.at(&[2, 0]));
}

#[test]
fn pad_content_does_not_reach_real_positions() {
    let cfg = tiny(2);
    let ck = scrambled(&cfg, 6);
    let seq = tokenize("abc", 16);
    let mut other = seq.clone();
    // a different token id in a masked-out slot must not leak into attention
    for p in 6..16 {
        other.ids[p] = 50;
    }
    let a = encode(&ck, &[seq.clone()], Mode::Eval, 0).unwrap();
    let b = encode(&ck, &[other], Mode::Eval, 0).unwrap();
    for layer in 1..=2 {
        for p in 0..5 {
            for (x, y) in a[0].token(layer, p).iter().zip(b[0].token(layer, p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trips_through_bytes_and_files() {
    let cfg = tiny(2);
    let ck = scrambled(&cfg, 7);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Load(_)), "cut at {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Load(_))));
}

#[test]
fn invalid_shapes_are_rejected() {
    let bad = EncoderConfig { heads: 3, ..tiny(1) };
    assert!(Checkpoint::init(&bad, 0).is_err());
    let ck = Checkpoint::init(&tiny(1), 0).unwrap();
    let wrong_len = vec![tokenize("x", 8)];
    assert!(encode(&ck, &wrong_len, Mode::Eval, 0).is_err());
}

#[test]
fn mask_sequence_only_touches_code_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = tokenize("print(x + y)", 32);
    for _ in 0..50 {
        let (m, picked) = mask_sequence(&seq, 0.15, &mut rng);
        assert_eq!(picked.len(), 2); // round(0.15 * 12)
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        for (i, (&a, &b)) in seq.ids.iter().zip(&m.ids).enumerate() {
            if picked.contains(&i) {
                assert!(seq.code_token_mask[i]);
                assert_eq!(b, earlybird::data::MASK);
            } else {
                assert_eq!(a, b);
            }
        }
    }
    let empty = tokenize("", 8);
    assert!(mask_sequence(&empty, 0.15, &mut rng).1.is_empty());
}

#[test]
fn mlm_loss_falls_and_masks_fifteen_percent() {
    let cfg = EncoderConfig { layers: 2, hidden: 16, max_len: 32, heads: 2, ffn: 32, vocab: 260, dropout: 0.0 };
    let corpus: Vec<String> =
        (0..64).map(|i| format!("x{} = y{} + {};", i % 7, (i * 3) % 5, "abc".repeat(1 + i % 3))).collect();
    let hyper = MlmHyper { epochs: 6, batch_size: 16, learning_rate: 3e-3, mask_rate: 0.15, seed: 1 };
    let (ck, report) = mlm_pretrain(&corpus, &cfg, &hyper).unwrap();
    assert_eq!(report.epoch_losses.len(), 6);
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");
    let rate = report.masked_fraction();
    assert!((0.13..=0.17).contains(&rate), "masked fraction {rate}");
    assert_eq!(ck.config, cfg);
    assert!(ck.params.by_name("mlm.weight").is_none());

    let (again, _) = mlm_pretrain(&corpus, &cfg, &hyper).unwrap();
    assert_eq!(again, ck);
    assert!(mlm_pretrain(&[], &cfg, &hyper).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn states_depend_only_on_attended_prefix(bytes in proptest::collection::vec(32u8..127, 0..10), fill in 4usize..260) {
        let cfg = tiny(2);
        let ck = Checkpoint::init(&cfg, 11).unwrap();
        let seq = tokenize_bytes(&bytes, 16);
        let n = seq.attention_mask.iter().filter(|&&m| m).count();
        let mut other = seq.clone();
        for id in other.ids[n..].iter_mut() {
            *id = fill;
        }
        let a = encode(&ck, &[seq], Mode::Eval, 0).unwrap();
        let b = encode(&ck, &[other], Mode::Eval, 0).unwrap();
        for layer in 1..=2 {
            for p in 0..n {
                for (x, y) in a[0].token(layer, p).iter().zip(b[0].token(layer, p)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000, layers in 1usize..4) {
        let ck = Checkpoint::init(&tiny(layers), seed).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn layer_states_index_rows() {
    let states = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
    let st = earlybird::encoder::LayerStates::new(states, vec![true; 3], vec![false, true, false]).unwrap();
    assert_eq!(st.token(1, 0), &[0.0, 1.0]);
    assert_eq!(st.token(2, 2), &[10.0, 11.0]);
    assert!(earlybird::encoder::LayerStates::new(Tensor::zeros(&[2, 3, 2]), vec![true; 2], vec![true; 3]).is_err());
}
