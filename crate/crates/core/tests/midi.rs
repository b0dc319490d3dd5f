use emogen_core::midi::{
    bar_boundaries, canonicalize, content_hash, map_to_five, midi_features, notes_to_events, parse_midi, write_midi, MidiError, Note,
    TempoChange, TimeSignature, DEFAULT_VELOCITY,
};
use emogen_core::{Instrument, NoteEvent};
use proptest::prelude::*;

fn note_strategy() -> impl Strategy<Value = Note> {
    (0usize..5, 21u8..=108, 0u32..20_000, 1u32..3_000).prop_map(|(i, pitch, start, len)| Note {
        instrument: Instrument::ALL[i],
        pitch,
        start_ms: start,
        end_ms: start + len,
    })
}

/// Non-overlapping notes per key, so pairing is unambiguous.
fn events_strategy() -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec(note_strategy(), 0..60).prop_map(|notes| {
        let mut kept: Vec<Note> = Vec::new();
        for n in notes {
            let clash =
                kept.iter().any(|k| k.instrument == n.instrument && k.pitch == n.pitch && n.start_ms <= k.end_ms && k.start_ms <= n.end_ms);
            if !clash {
                kept.push(n);
            }
        }
        notes_to_events(&kept)
    })
}

proptest! {
    #[test]
    fn write_then_parse_is_identity(events in events_strategy()) {
        prop_assert_eq!(parse_midi(&write_midi(&events, DEFAULT_VELOCITY)).unwrap(), events);
    }

    #[test]
    fn canonical_sort_is_idempotent(mut events in prop::collection::vec(
        (0u32..5000, 0usize..5, 21u8..=108, any::<bool>()).prop_map(|(t, i, p, on)| {
            if on { NoteEvent::on(t, Instrument::ALL[i], p) } else { NoteEvent::off(t, Instrument::ALL[i], p) }
        }), 0..100)) {
        canonicalize(&mut events);
        let once = events.clone();
        canonicalize(&mut events);
        prop_assert_eq!(&once, &events);
        for w in events.windows(2) {
            let key = |e: &NoteEvent| (e.time_ms, e.is_on(), e.instrument, e.pitch);
            prop_assert!(key(&w[0]) <= key(&w[1]));
        }
    }

    #[test]
    fn hash_ignores_event_order(events in events_strategy(), seed in any::<u64>()) {
        let mut shuffled = events.clone();
        let n = shuffled.len();
        if n > 1 {
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 1) % n as u64) as usize;
                shuffled.swap(i, j);
            }
        }
        canonicalize(&mut shuffled);
        prop_assert_eq!(content_hash(&shuffled), content_hash(&events));
    }

    #[test]
    fn bars_strictly_increase_from_zero(
        events in events_strategy(),
        tempos in prop::collection::vec((0.0f64..30_000.0, 30.0f64..300.0), 0..4),
        sigs in prop::collection::vec((0.0f64..30_000.0, 1u8..12, prop::sample::select(vec![2u8, 4, 8, 16])), 0..4),
    ) {
        let tempo_map: Vec<TempoChange> = tempos.iter().map(|&(time_ms, bpm)| TempoChange { time_ms, bpm }).collect();
        let sig_map: Vec<TimeSignature> =
            sigs.iter().map(|&(time_ms, numerator, denominator)| TimeSignature { time_ms, numerator, denominator }).collect();
        let bars = bar_boundaries(&events, &tempo_map, &sig_map);
        prop_assert_eq!(bars[0], 0);
        prop_assert!(bars.windows(2).all(|w| w[0] < w[1]));
        let end = events.iter().map(|e| e.time_ms).max().unwrap_or(0);
        prop_assert!(*bars.last().unwrap() <= end + 1);
    }
}

#[test]
fn gm_program_map() {
    assert_eq!(map_to_five(0, false), Instrument::Piano);
    assert_eq!(map_to_five(33, false), Instrument::Bass);
    assert_eq!(map_to_five(52, true), Instrument::Drums);
    // Independent table of program ranges.
    for program in 0..128u8 {
        let expected = match program {
            0..=7 => Instrument::Piano,
            24..=31 => Instrument::Guitar,
            32..=39 => Instrument::Bass,
            _ => Instrument::Strings,
        };
        assert_eq!(map_to_five(program, false), expected, "program {program}");
        assert_eq!(map_to_five(program, true), Instrument::Drums);
    }
}

#[test]
fn bar_examples() {
    let piano = Instrument::Piano;
    let till = |ms| vec![NoteEvent::on(0, piano, 60), NoteEvent::off(ms, piano, 60)];
    assert_eq!(bar_boundaries(&till(8000), &[], &[]), [0, 2000, 4000, 6000, 8000]);
    let three_four = [TimeSignature { time_ms: 0.0, numerator: 3, denominator: 4 }];
    assert_eq!(bar_boundaries(&till(4500), &[], &three_four), [0, 1500, 3000, 4500]);
    assert_eq!(bar_boundaries(&[], &[], &[]), [0]);
}

#[test]
fn feature_examples() {
    let mut events = Vec::new();
    for k in 0..10u32 {
        let inst = if k % 2 == 0 { Instrument::Piano } else { Instrument::Bass };
        events.push(NoteEvent::on(k * 150, inst, 60));
        events.push(NoteEvent::off(k * 150 + 100, inst, 60));
    }
    events.push(NoteEvent::off(2000, Instrument::Piano, 61));
    canonicalize(&mut events);
    let f = midi_features(&events, &[]).unwrap();
    assert_eq!(f.note_density, 5.0);
    assert_eq!(f.n_instruments, 2);
    assert_eq!(f.tempo_bpm, 120.0);

    let long = [NoteEvent::on(0, Instrument::Piano, 60), NoteEvent::off(20_000, Instrument::Piano, 60)];
    let tempo = [TempoChange { time_ms: 0.0, bpm: 120.0 }, TempoChange { time_ms: 10_000.0, bpm: 60.0 }];
    assert!((midi_features(&long, &tempo).unwrap().tempo_bpm - 90.0).abs() < 1e-9);

    let instant = [NoteEvent::on(0, Instrument::Piano, 60)];
    assert!(midi_features(&instant, &[]).is_err());
}

#[test]
fn parse_examples() {
    // One track, C4 on piano for 480 ticks at 480 tpqn and 500000 us per quarter.
    let bytes: Vec<u8> = [
        b"MThd".as_slice(),
        &[0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xe0],
        b"MTrk",
        &[0, 0, 0, 20],
        &[0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20],
        &[0x00, 0x90, 60, 80],
        &[0x83, 0x60, 0x90, 60, 0],
        &[0x00, 0xff, 0x2f, 0x00],
    ]
    .concat();
    assert_eq!(parse_midi(&bytes).unwrap(), [NoteEvent::on(0, Instrument::Piano, 60), NoteEvent::off(500, Instrument::Piano, 60)]);
    let mut low = bytes.clone();
    low[31] = 20;
    low[36] = 20;
    assert_eq!(parse_midi(&low).unwrap(), []);
    assert!(matches!(parse_midi(b"MThd\0\0\0\x06\0\x01\0\0\0\x60"), Err(MidiError::Empty)));
    assert!(matches!(parse_midi(b"RIFF...."), Err(MidiError::Header { offset: 0, .. })));
}

#[test]
fn empty_list_writes_five_tracks() {
    let bytes = write_midi(&[], DEFAULT_VELOCITY);
    assert_eq!(u16::from_be_bytes([bytes[10], bytes[11]]), 5);
    assert_eq!(parse_midi(&bytes).unwrap(), []);
    assert_eq!(content_hash(&[]), content_hash(&parse_midi(&bytes).unwrap()));
}

#[test]
fn hash_separates_transposed_content() {
    let a = [NoteEvent::on(0, Instrument::Piano, 60), NoteEvent::off(500, Instrument::Piano, 60)];
    let b = [NoteEvent::on(0, Instrument::Piano, 61), NoteEvent::off(500, Instrument::Piano, 61)];
    assert_ne!(content_hash(&a), content_hash(&b));
}
