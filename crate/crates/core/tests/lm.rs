use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvc_autodiff::Tensor;
use ssvc_core::lm::*;
use ssvc_core::rvq::CodeGrid;
use ssvc_core::synth::FeatureSequence;
use ssvc_core::Error;

const K: usize = 8;

fn vocab() -> Vocab {
    Vocab {
        nq: 4,
        codebook_size: K,
        alphabet: 6,
    }
}

fn tiny(variant: LmVariant, seed: u64) -> TokenLm {
    let cfg = LmConfig {
        layers: 2,
        model_dim: 16,
        ff_dim: 32,
        heads: 2,
        max_len: 96,
        variant,
    };
    TokenLm::new(cfg, vocab(), 3, seed).unwrap()
}

fn random_grid(rng: &mut impl Rng, frames: usize, nq: usize, k: usize) -> CodeGrid {
    let idx = (0..frames * nq).map(|_| rng.gen_range(0..k as u32)).collect();
    CodeGrid::new(frames, nq, idx).unwrap()
}

fn features(rng: &mut impl Rng, t: usize) -> FeatureSequence {
    FeatureSequence::new(Tensor::from_fn(&[t, 3], |_| rng.gen_range(-1.0..1.0))).unwrap()
}

proptest! {
    #[test]
    fn flatten_round_trip(frames in 0usize..12, nq in 1usize..5, k in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, frames, nq, k);
        let flat = flatten_codes(&grid, k);
        prop_assert_eq!(flat.len(), frames * nq);
        prop_assert_eq!(unflatten_tokens(&flat, nq, k).unwrap(), grid);
    }
}

#[test]
fn thousand_random_grids_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let frames = rng.gen_range(0..20);
        let grid = random_grid(&mut rng, frames, 4, 512);
        assert_eq!(unflatten_tokens(&flatten_codes(&grid, 512), 4, 512).unwrap(), grid);
    }
}

#[test]
fn misaligned_tail_and_partial_frames() {
    let v = Vocab {
        nq: 4,
        codebook_size: 512,
        alphabet: 16,
    };
    let ok = [7u32, 515, 1024, 2047];
    assert_eq!(unflatten_tokens(&ok, 4, 512).unwrap().row(0), &[7, 3, 0, 511]);
    let err = unflatten_tokens(&[515, 515, 1024, 2047], 4, 512).unwrap_err();
    assert!(matches!(err, Error::CodebookMisalignment { position: 0, token: 515, expected: 0 }));
    assert!(err.to_string().contains("codebook misalignment"));
    assert_eq!(unflatten_tokens(&[7, 515, 1024], 4, 512).unwrap().frames, 0);
    assert_eq!(v.stage_of(515), Some(1));
    assert_eq!(v.stage_of(v.eos()), None);
}

#[test]
fn speech_prefix_length() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&mut rng, 5, 4, K);
    let p = SpeechPrompt
        .build(
            &PromptInput {
                text: &[1, 2, 3],
                reference_text: Some(&[4, 5]),
                reference_codes: Some(&grid),
                reference_features: None,
            },
            &v,
        )
        .unwrap();
    assert_eq!(p.tokens.len(), 1 + 2 + 3 + 1 + 4 * 5);
    assert_eq!(&p.tokens[..3], &[v.bos(), v.text(4), v.text(5)]);
    assert_eq!(&p.tokens[6], &v.sep());
    assert!(TextPrompt
        .build(&PromptInput { text: &[6], ..Default::default() }, &v)
        .is_err());
    let reg = PromptRegistry::default();
    assert_eq!(reg.names(), vec!["speech", "text", "text-ref"]);
}

#[test]
fn logits_shape_and_length_limit() {
    let lm = tiny(LmVariant::NoReference, 1);
    let tokens: Vec<u32> = (0..10).map(|i| (i % 30) as u32).collect();
    let out = lm.forward(&LmInput { tokens: &tokens, slot: None, reference: None }).unwrap();
    assert_eq!(out.shape(), &[10, vocab().size()]);
    let long = vec![0u32; 97];
    assert!(lm.forward(&LmInput { tokens: &long, slot: None, reference: None }).is_err());
    let bad = vec![vocab().size() as u32];
    assert!(lm.forward(&LmInput { tokens: &bad, slot: None, reference: None }).is_err());
}

#[test]
fn causality_is_exact() {
    let lm = tiny(LmVariant::NoReference, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = vocab().size() as u32;
    for _ in 0..5 {
        let a: Vec<u32> = (0..24).map(|_| rng.gen_range(0..v)).collect();
        let j = rng.gen_range(0..23);
        let mut b = a.clone();
        for t in b.iter_mut().skip(j + 1) {
            *t = rng.gen_range(0..v);
        }
        let la = lm.forward(&LmInput { tokens: &a, slot: None, reference: None }).unwrap();
        let lb = lm.forward(&LmInput { tokens: &b, slot: None, reference: None }).unwrap();
        for r in 0..=j {
            assert_eq!(la.row(r), lb.row(r), "row {r} changed after editing positions > {j}");
        }
    }
}

#[test]
fn incremental_session_matches_full_forward() {
    let lm = tiny(LmVariant::NoReference, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens: Vec<u32> = (0..30).map(|_| rng.gen_range(0..vocab().size() as u32)).collect();
    let full = lm.forward(&LmInput { tokens: &tokens, slot: None, reference: None }).unwrap();
    let mut s = Session::new(&lm);
    for (j, &t) in tokens.iter().enumerate() {
        let step = s.push_token(t).unwrap();
        for (a, b) in step.iter().zip(full.row(j)) {
            assert!((a - b).abs() < 1e-4, "position {j}: {a} vs {b}");
        }
    }
}

#[test]
fn reference_slot_session_matches_full_forward() {
    let lm = tiny(LmVariant::Reference, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = features(&mut rng, 9);
    let prompt = TextReferencePrompt
        .build(&PromptInput { text: &[1, 2, 0], reference_features: Some(&f), ..Default::default() }, &vocab())
        .unwrap();
    let full = lm
        .forward(&LmInput { tokens: &prompt.tokens, slot: prompt.reference_slot, reference: Some(&f) })
        .unwrap();
    let (_, last) = lm.prefill(&prompt).unwrap();
    for (a, b) in last.iter().zip(full.row(prompt.tokens.len() - 1)) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn reference_encoder_contract() {
    let lm = tiny(LmVariant::Reference, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = features(&mut rng, 12);
    let e = lm.reference_embedding(&f).unwrap();
    assert_eq!(e.len(), 16);
    assert_eq!(e, lm.reference_embedding(&f).unwrap());
    let r = lm.reference_embedding(&f.reversed()).unwrap();
    assert!(e.iter().zip(&r).any(|(a, b)| (a - b).abs() > 1e-4));
    assert!(tiny(LmVariant::NoReference, 5).reference_embedding(&f).is_err());
}

#[test]
fn variants_differ_only_by_reference_encoder() {
    let nr = tiny(LmVariant::NoReference, 9);
    let r = tiny(LmVariant::Reference, 9);
    let names = |lm: &TokenLm| lm.store.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>();
    let (a, b) = (names(&nr), names(&r));
    let extra: Vec<_> = b.iter().filter(|n| !a.contains(n)).collect();
    assert!(a.iter().all(|n| b.contains(n)));
    assert!(!extra.is_empty());
    assert!(extra.iter().all(|n| n.starts_with("ref.")), "{extra:?}");
}

fn greedy() -> SamplingConfig {
    SamplingConfig {
        temperature: 1.0,
        top_k: 1,
        max_new: 40,
    }
}

#[test]
fn greedy_limits_agree_and_stay_aligned() {
    let lm = tiny(LmVariant::NoReference, 10);
    let prompt = TextPrompt
        .build(&PromptInput { text: &[0, 3, 2], ..Default::default() }, &vocab())
        .unwrap();
    let g1 = lm.sample(&prompt, &greedy(), 1).unwrap();
    let cold = SamplingConfig { temperature: 0.0, top_k: 0, max_new: 40 };
    let g2 = lm.sample(&prompt, &cold, 99).unwrap();
    let g3 = lm.sample(&prompt, &SamplingConfig { temperature: 1e-9, ..cold }, 7).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(g1, g3);
    for seed in 0..20 {
        let s = lm
            .sample(&prompt, &SamplingConfig { temperature: 1.5, top_k: 0, max_new: 40 }, seed)
            .unwrap();
        assert!(unflatten_tokens(&s.tokens, 4, K).is_ok());
        assert_eq!(s, lm.sample(&prompt, &SamplingConfig { temperature: 1.5, top_k: 0, max_new: 40 }, seed).unwrap());
    }
}

#[test]
fn speech_continuation_starts_at_the_right_codebook() {
    let lm = tiny(LmVariant::NoReference, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = random_grid(&mut rng, 3, 4, K);
    let prompt = SpeechPrompt
        .build(
            &PromptInput {
                text: &[1],
                reference_text: Some(&[2]),
                reference_codes: Some(&grid),
                reference_features: None,
            },
            &vocab(),
        )
        .unwrap();
    for seed in 0..10 {
        let s = lm.sample(&prompt, &SamplingConfig { temperature: 2.0, top_k: 0, max_new: 30 }, seed).unwrap();
        if let Some(&t) = s.tokens.first() {
            assert_eq!(vocab().stage_of(t), Some(0));
        }
        assert!(unflatten_tokens(&s.tokens, 4, K).is_ok());
    }
}

#[test]
fn schedule_shape() {
    let cfg = ScheduleConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert!((lr_schedule(cfg.warmup_steps, &cfg) - 5e-4).abs() < 1e-12);
    assert!((lr_schedule(cfg.total_steps, &cfg) - 5e-5).abs() < 1e-9);
    let before = lr_schedule(cfg.warmup_steps - 1, &cfg);
    let after = lr_schedule(cfg.warmup_steps + 1, &cfg);
    assert!((before - 5e-4).abs() < 1e-7 && (after - 5e-4).abs() < 1e-7);
    let mut prev = f64::INFINITY;
    for s in (cfg.warmup_steps..=cfg.total_steps).step_by(1000) {
        let lr = lr_schedule(s, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
    assert!(ScheduleConfig { warmup_steps: 10, total_steps: 10, ..cfg }.validate().is_err());
}

fn code_corpus(n: usize, seed: u64) -> Vec<CodeUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..4);
            let content: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            CodeUtterance {
                index: i,
                speaker_id: (i % 3) as u32,
                codes: random_grid(&mut rng, 2 * len, 4, K),
                content,
            }
        })
        .collect()
}

fn train_cfg(steps: u64) -> LmTrainConfig {
    LmTrainConfig {
        steps,
        batch_tokens: 64,
        schedule: ScheduleConfig {
            warmup_steps: 1,
            peak_lr: 3e-3,
            total_steps: steps.max(2),
            floor_fraction: 0.1,
        },
        speech_fraction: 0.5,
        reference_max_symbols: 3,
        weight_decay: 0.0,
        log_every: 1,
    }
}

#[test]
fn training_is_deterministic_and_rejects_empty_corpus() {
    let items = code_corpus(6, 1);
    let cfg = LmConfig { layers: 1, model_dim: 16, ff_dim: 32, heads: 2, max_len: 96, variant: LmVariant::NoReference };
    let run = || train_lm(&items, None, &cfg, vocab(), 3, &train_cfg(2), 4, |_| {}).unwrap();
    let (a, b) = (run(), run());
    for ((na, ta), (_, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    assert!(train_lm(&[], None, &cfg, vocab(), 3, &train_cfg(2), 4, |_| {}).is_err());
}

#[test]
fn loss_only_covers_code_positions() {
    let lm = tiny(LmVariant::NoReference, 13);
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random_grid(&mut rng, 2, 4, K);
    let prompt = TextPrompt.build(&PromptInput { text: &[1, 2], ..Default::default() }, &v).unwrap();
    let seq = training_sequence(prompt.clone(), &grid, &v);
    assert_eq!(seq.first_target, prompt.tokens.len() - 1);
    assert_eq!(*seq.tokens.last().unwrap(), v.eos());

    // Oracle: mean negative log-softmax over the code and EOS targets only.
    let input = &seq.tokens[..seq.tokens.len() - 1];
    let logits = lm.forward(&LmInput { tokens: input, slot: None, reference: None }).unwrap();
    let mut total = 0.0f64;
    let mut n = 0;
    for j in seq.first_target..input.len() {
        let row = logits.row(j);
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[seq.tokens[j + 1] as usize] as f64;
        n += 1;
    }
    assert_eq!(n, 4 * 2 + 1);
    let mut g = ssvc_autodiff::Graph::new();
    let loss = sequence_loss(&lm, &mut g, std::slice::from_ref(&seq)).unwrap();
    assert!((g.value(loss).item() as f64 - total / n as f64).abs() < 1e-5);
}

#[test]
fn checkpoint_round_trip() {
    let lm = tiny(LmVariant::Reference, 14);
    let back = TokenLm::from_table(lm.config.clone(), vocab(), 3, &lm.to_table()).unwrap();
    let tokens = [vocab().bos(), 3, 9];
    let a = lm.forward(&LmInput { tokens: &tokens, slot: None, reference: None }).unwrap();
    let b = back.forward(&LmInput { tokens: &tokens, slot: None, reference: None }).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn code_corpus_table_round_trip() {
    let items = code_corpus(5, 3);
    let table = code_corpus_to_table(&items);
    let bytes = table.to_bytes();
    let back = code_corpus_from_table(&ssvc_core::checkpoint::TensorTable::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, items);
}
