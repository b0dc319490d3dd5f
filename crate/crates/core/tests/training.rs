use emogen_core::model::Variant;
use emogen_core::seeded_rng;
use emogen_core::tokenizer::{condition_tokens, is_note, CONDITIONAL_VOCAB_SIZE, PAD, START};
use emogen_core::training::*;
use emogen_core::{ConditionPair, TokenId};
use proptest::prelude::*;

fn song_strategy() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(0u32..1005, 1..400)
}

proptest! {
    #[test]
    fn target_is_input_shifted_by_one(song in song_strategy(), len in 1usize..128, seed in any::<u64>(), variant_ix in 0usize..4) {
        let variant = Variant::ALL[variant_ix];
        let cond = variant.is_conditional().then_some(ConditionPair { valence: 0.5, arousal: -0.1 });
        let bars: Vec<usize> = (0..song.len()).step_by(17).collect();
        let mut rng = seeded_rng(seed);
        let chunk = sample_chunk(&song, &bars, len, variant, cond, ChunkMode::Random, &mut rng).unwrap();
        prop_assert_eq!(chunk.input.len(), len);
        prop_assert_eq!(chunk.target.len(), len);
        prop_assert_eq!(&chunk.input[1..], &chunk.target[..len - 1]);
        if chunk.bar_aligned {
            let head: Vec<TokenId> = match variant {
                Variant::DiscreteToken => {
                    let [v, a] = condition_tokens(cond.unwrap()).unwrap();
                    vec![v, a, START]
                }
                _ => vec![START],
            };
            let k = head.len().min(len);
            prop_assert_eq!(&chunk.input[..k], &head[..k]);
        } else {
            prop_assert!(chunk.input.iter().all(|&t| t < START || t == PAD));
        }
        // Padding appears only as a suffix and is never a loss target.
        let targets = chunk.loss_targets();
        for (t, &raw) in targets.iter().zip(&chunk.target) {
            prop_assert_eq!(*t == IGNORE, raw == PAD || raw >= 1007);
        }
        if let Some(first_pad) = chunk.input.iter().position(|&t| t == PAD) {
            prop_assert!(chunk.input[first_pad..].iter().all(|&t| t == PAD));
        }
    }

    #[test]
    fn transposition_stays_in_vocab(song in song_strategy(), shift in -3i32..=3) {
        let out = transpose_tokens(&song, shift);
        prop_assert!(out.iter().all(|&t| (t as usize) < CONDITIONAL_VOCAB_SIZE));
        prop_assert_eq!(out.iter().filter(|&&t| !is_note(t)).count(), song.iter().filter(|&&t| !is_note(t)).count());
        // Drum tokens (first pitch block of each kind) never move.
        let drums = |v: &[TokenId]| v.iter().filter(|&&t| t < 88 || (440..528).contains(&t)).copied().collect::<Vec<_>>();
        prop_assert_eq!(drums(&out), drums(&song));
        if shift == 0 {
            prop_assert_eq!(out, song);
        }
    }

    #[test]
    fn plateau_rate_only_drops_once_at_window_ends(losses in prop::collection::vec(0.1f64..10.0, 1..600), window in 1usize..50) {
        let mut s = PlateauSchedule::new(1e-3, 1e-4, window);
        let mut prev = s.lr();
        for (i, &l) in losses.iter().enumerate() {
            let lr = s.record(l);
            prop_assert!(lr == 1e-3 || lr == 1e-4);
            prop_assert!(lr <= prev);
            if lr < prev {
                prop_assert_eq!((i + 1) % window, 0);
                prop_assert_eq!(s.dropped_at(), Some(i as u64 + 1));
                prop_assert!(i + 1 >= 3 * window);
            }
            prev = lr;
        }
        prop_assert_eq!(s.window_means().len(), losses.len() / window);
    }
}

#[test]
fn plateau_examples() {
    let mut flat = PlateauSchedule::new(1e-3, 1e-4, 10);
    for _ in 0..29 {
        assert_eq!(flat.record(2.0), 1e-3);
    }
    assert_eq!(flat.record(2.0), 1e-4);
    assert_eq!(flat.dropped_at(), Some(30));

    let mut falling = PlateauSchedule::new(1e-3, 1e-4, 10);
    for i in 0..1000 {
        falling.record(10.0 * 0.99f64.powi(i));
    }
    assert_eq!(falling.dropped_at(), None);
}

#[test]
fn bar_starts_index_first_token_at_or_after_bar() {
    assert_eq!(bar_token_starts(&[0, 0, 500, 2000, 2100, 4100], &[0, 2000, 4000, 6000]), [0, 3, 5]);
}

#[test]
fn sampled_chunks_are_deterministic() {
    let song: Vec<TokenId> = (0..300).map(|i| (i * 7) % 1005).collect();
    let draw = |seed| {
        let mut rng = seeded_rng(seed);
        (0..20)
            .map(|_| sample_chunk(&song, &[0, 40, 90], 64, Variant::Vanilla, None, ChunkMode::Random, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}
