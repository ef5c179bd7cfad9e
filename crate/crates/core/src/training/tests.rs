use std::collections::BTreeMap;

use super::*;
use crate::model::tests::{tiny_config, tiny_target};

fn random_corpus(seed: u64, lens: &[usize], vocab: u32) -> Corpus {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let sequences = lens
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((x >> 33) % u64::from(vocab)) as u32
                })
                .collect()
        })
        .collect();
    Corpus { sequences, source: "test".into(), tokenizer: "none".into() }
}

/// Repetitive corpus a tiny model can learn quickly.
fn patterned_corpus(n_seqs: usize, len: usize) -> Corpus {
    let sequences = (0..n_seqs)
        .map(|s| (0..len).map(|i| ((i * 3 + s) % 7 + (i % 2) * 8) as u32).collect())
        .collect();
    Corpus { sequences, source: "pattern".into(), tokenizer: "none".into() }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs: 2, batch_size: 4, seq_len: 40, ..TrainConfig::default() }
}

#[test]
fn windows_overlap_and_cover() {
    let seq: Vec<u32> = (0..100).collect();
    let ws = split_windows(&seq, 40);
    assert_eq!(ws.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 24, 48, 72]);
    assert_eq!(ws.last().unwrap().tokens.last(), Some(&99));
    for pair in ws.windows(2) {
        let end = pair[0].offset + pair[0].tokens.len();
        assert_eq!(end - pair[1].offset, SPLIT_OVERLAP);
    }
    assert_eq!(split_windows(&seq[..10], 40).len(), 1);
}

#[test]
fn split_targets_are_used_exactly_once() {
    for n in [3usize, 40, 41, 57, 100, 250] {
        let corpus = random_corpus(1, &[n], 30);
        // Next-token targets are indices 1..n.
        let mut seen = BTreeMap::new();
        for (w, fresh) in windows_of(&corpus, 40, 0) {
            for j in fresh..w.tokens.len() {
                *seen.entry(w.offset + j).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.keys().copied().collect::<Vec<_>>(), (1..n).collect::<Vec<_>>(), "n={n}");
        assert!(seen.values().all(|&c| c == 1));
        // Feature targets are indices 1..n-1.
        let mut seen = BTreeMap::new();
        for (w, fresh) in windows_of(&corpus, 40, 1) {
            for i in 0..w.tokens.len().saturating_sub(2) {
                if i + 1 >= fresh {
                    *seen.entry(w.offset + i + 1).or_insert(0) += 1;
                }
            }
        }
        assert_eq!(seen.keys().copied().collect::<Vec<_>>(), (1..n - 1).collect::<Vec<_>>(), "n={n}");
        assert!(seen.values().all(|&c| c == 1));
    }
}

#[test]
fn sequence_of_n_tokens_yields_n_minus_two_positions() {
    let t = tiny_target(1);
    let corpus = random_corpus(2, &[3, 10, 37], 32);
    let data = collect_training_pairs(&t, &corpus, DataMode::FixedDataset, 64).unwrap();
    assert_eq!(data.iter().map(FeatureSequence::num_positions).collect::<Vec<_>>(), vec![1, 8, 35]);
    for s in &data {
        let pairs = s.pairs(&t).unwrap();
        assert_eq!(pairs.len(), s.tokens.len() - 2);
        for (k, p) in pairs.iter().enumerate() {
            let i = k + 1;
            assert_eq!(p.features.rows(), i);
            assert_eq!(p.shifted_tokens, s.tokens[1..=i].to_vec());
            assert_eq!(p.target_feature, s.features.row(i).to_vec());
        }
    }
    let short = random_corpus(3, &[2, 1], 32);
    assert!(collect_training_pairs(&t, &short, DataMode::FixedDataset, 64).is_err());
}

#[test]
fn target_distributions_match_the_target_forward() {
    let t = tiny_target(4);
    let corpus = random_corpus(5, &[20], 32);
    let data = collect_training_pairs(&t, &corpus, DataMode::FixedDataset, 64).unwrap();
    let out = t.forward_causal(&corpus.sequences[0], &mut t.new_cache()).unwrap();
    for (k, p) in data[0].pairs(&t).unwrap().iter().enumerate() {
        let want = logits_to_dist(out.logits.row(k + 1), 1.0);
        for (a, b) in p.target_dist.iter().zip(&want) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }
}

#[test]
fn target_generated_mode_continues_greedily() {
    let t = tiny_target(6);
    let corpus = random_corpus(7, &[30], 32);
    let data = collect_training_pairs(&t, &corpus, DataMode::TargetGenerated, 64).unwrap();
    let toks = &data[0].tokens;
    assert_eq!(toks.len(), 30);
    assert_eq!(toks[..GENERATED_PROMPT_LEN], corpus.sequences[0][..GENERATED_PROMPT_LEN]);
    let out = t.forward_causal(toks, &mut t.new_cache()).unwrap();
    for (i, &tok) in toks.iter().enumerate().take(30).skip(GENERATED_PROMPT_LEN) {
        assert_eq!(tok as usize, kernels::argmax(out.logits.row(i - 1)));
    }
}

#[test]
fn noise_is_bounded_and_centred() {
    let base = Tensor::zeros(&[200, 50]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = augment_features(&base, 0.1, &mut rng).unwrap();
    let d = noisy.data();
    assert!(d.iter().all(|x| x.abs() <= 0.1));
    let mean = d.iter().map(|&x| f64::from(x)).sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / d.len() as f64;
    // U(-a, a): mean 0, variance a^2 / 3; standard error of the mean ~ 5.8e-4.
    assert!(mean.abs() < 3e-3, "mean {mean}");
    assert!((var - 0.01 / 3.0).abs() < 2e-4, "var {var}");
    assert_ne!(augment_features(&base, 0.1, &mut rng).unwrap(), noisy);
    assert_eq!(augment_features(&base, 0.0, &mut rng).unwrap(), base);
    assert!(augment_features(&base, -1.0, &mut rng).is_err());
}

#[test]
fn loss_at_exact_prediction_is_weighted_entropy() {
    let t = tiny_target(8);
    let f = Tensor::from_rows(&[t.embedding.row(3).to_vec(), t.embedding.row(5).to_vec()]).unwrap();
    let p = tensor::softmax(&t.lm_head(&f).unwrap(), 1.0).unwrap();
    let entropy: f64 = (0..2)
        .map(|r| -p.row(r).iter().map(|&x| f64::from(x) * f64::from(x).ln()).sum::<f64>())
        .sum::<f64>()
        / 2.0;
    let loss = combined_loss(&f, &f, &p, &t.lm_head, 0.1).unwrap();
    assert!((f64::from(loss) - 0.1 * entropy).abs() < 1e-5, "{loss} vs {}", 0.1 * entropy);
    let moved = Tensor::full(&[2, 32], 0.5);
    assert!(combined_loss(&moved, &f, &p, &t.lm_head, 0.1).unwrap() > loss);
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let t = tiny_target(10);
    let corpus = random_corpus(11, &[12], 32);
    let data = collect_training_pairs(&t, &corpus, DataMode::FixedDataset, 64).unwrap();
    for mode in DraftInputMode::ALL {
        let head = DraftHead::init(&t, mode, 12);
        let err = check_combined_loss_gradients(&t, &head, &data[0], 6, 0.1, 6).unwrap();
        assert!(err < 1e-4, "{mode:?}: relative error {err}");
    }
}

#[test]
fn embedding_and_lm_head_receive_no_gradient() {
    let t = tiny_target(13);
    let mut tape = Tape::<f32>::new();
    let pred = tape.leaf(&Tensor::full(&[3, 32], 0.1), true);
    let tgt = tape.constant(&Tensor::zeros(&[3, 32]));
    let lm = tape.constant(&t.lm_head);
    let emb = tape.constant(&t.embedding);
    let p = tensor::softmax(&Tensor::zeros(&[3, 32]), 1.0).unwrap();
    let (total, _, _) = combined_loss_tape(&mut tape, pred, tgt, &p, lm, 0.1).unwrap();
    tape.backward(total).unwrap();
    assert!(tape.grad(pred).is_some());
    assert!(tape.grad(lm).is_none());
    assert!(tape.grad(emb).is_none());
}

#[test]
fn head_training_is_deterministic_and_leaves_target_untouched() {
    let t = tiny_target(14);
    let before = t.fingerprint();
    let corpus = random_corpus(15, &[50, 30, 45], 32);
    let cfg = TrainConfig { max_steps: Some(3), ..quick_cfg() };
    let (a, ca) = train_draft_head(&t, &corpus, DraftInputMode::FeatureShiftedToken, &cfg).unwrap();
    let (b, cb) = train_draft_head(&t, &corpus, DraftInputMode::FeatureShiftedToken, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(ca.rows.len(), 3);
    assert_eq!(t.fingerprint(), before);
    let (c, _) = train_draft_head(&t, &corpus, DraftInputMode::FeatureShiftedToken, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn head_training_reduces_loss() {
    let corpus = patterned_corpus(12, 60);
    let model = tiny_config(16);
    let (t, _) = train_target_toy(&corpus, &model, &TrainConfig { epochs: 6, ..quick_cfg() }).unwrap();
    let data = collect_training_pairs(&t, &corpus, DataMode::FixedDataset, 40).unwrap();
    let untrained = evaluate_head(&t, &DraftHead::init(&t, DraftInputMode::FeatureShiftedToken, 0), &data, 0.1).unwrap();
    let cfg = TrainConfig { epochs: 8, ..quick_cfg() };
    let (head, curve) = train_draft_head_on(&t, &data, DraftInputMode::FeatureShiftedToken, &cfg).unwrap();
    let trained = evaluate_head(&t, &head, &data, 0.1).unwrap();
    assert!(trained < 0.7 * untrained, "{untrained} -> {trained}");
    let (first, last) = curve.first_last(4);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn target_training_reduces_cross_entropy() {
    let corpus = patterned_corpus(12, 60);
    let model = tiny_config(17);
    let init = evaluate_target(&init_target(&model).unwrap(), &corpus).unwrap();
    let (t, curve) = train_target_toy(&corpus, &model, &TrainConfig { epochs: 6, ..quick_cfg() }).unwrap();
    let trained = evaluate_target(&t, &corpus).unwrap();
    assert!((init - (32f64).ln()).abs() < 0.1, "init loss {init}");
    assert!(trained < 0.5 * init, "{init} -> {trained}");
    assert!(curve.rows.iter().all(|r| r.l_reg == 0.0 && r.l_cls == r.l_total));
    assert!(mean_entropy(&t, &corpus).unwrap() < mean_entropy(&init_target(&model).unwrap(), &corpus).unwrap());
}

#[test]
fn target_training_rejects_bad_input() {
    let model = tiny_config(18);
    let cfg = quick_cfg();
    assert!(train_target_toy(&random_corpus(1, &[20], 40), &model, &cfg).is_err());
    assert!(train_target_toy(&random_corpus(1, &[1], 32), &model, &cfg).is_err());
    let diverging = TrainConfig { lr: 1e36, epochs: 4, ..cfg };
    let r = train_target_toy(&patterned_corpus(8, 60), &model, &diverging);
    assert!(matches!(r, Err(Error::Divergence(_))), "{r:?}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { w_cls: -0.1, ..TrainConfig::default() },
        TrainConfig { noise: f32::NAN, ..TrainConfig::default() },
        TrainConfig { betas: (1.0, 0.9), ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { seq_len: 10, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"lr": 0.001, "data_mode": "target_generated"}"#).unwrap();
    assert_eq!(parsed.data_mode, DataMode::TargetGenerated);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.001}"#).is_err());
}

#[test]
fn curve_csv_layout() {
    let curve = TrainCurve {
        rows: vec![
            CurveRow { epoch: 0, step: 0, l_reg: 1.0, l_cls: 2.0, l_total: 1.2 },
            CurveRow { epoch: 1, step: 1, l_reg: 0.5, l_cls: 1.0, l_total: 0.6 },
        ],
    };
    let csv = curve.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,l_reg,l_cls,l_total");
    assert_eq!(lines[1], "0,0,1,2,1.2");
    assert_eq!(curve.epoch_means(), vec![1.2, 0.6]);
}
