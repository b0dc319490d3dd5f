//! Note events, Standard MIDI File IO and the low-level features computed
//! from them.

mod features;
mod smf;

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use features::{
    bar_boundaries, content_hash, midi_features, ContentHash, FeatureError, MidiFeatures, ParseHashError, TempoChange, TimeSignature,
    HASH_BIN_MS,
};
pub use smf::{parse_midi, parse_midi_file, write_midi, MidiError, MidiFile, DEFAULT_VELOCITY};

/// Lowest pitch kept by the pipeline (A0).
pub const MIN_PITCH: u8 = 21;
/// Highest pitch kept by the pipeline (C8).
pub const MAX_PITCH: u8 = 108;
/// Number of pitches in `[MIN_PITCH, MAX_PITCH]`.
pub const N_PITCHES: usize = (MAX_PITCH - MIN_PITCH + 1) as usize;
/// Zero-indexed General MIDI percussion channel.
pub const PERCUSSION_CHANNEL: u8 = 9;

/// The five merged instrument categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instrument {
    Drums = 0,
    Piano = 1,
    Guitar = 2,
    Bass = 3,
    Strings = 4,
}

impl Instrument {
    pub const ALL: [Instrument; 5] = [Instrument::Drums, Instrument::Piano, Instrument::Guitar, Instrument::Bass, Instrument::Strings];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Drums => "drums",
            Instrument::Piano => "piano",
            Instrument::Guitar => "guitar",
            Instrument::Bass => "bass",
            Instrument::Strings => "strings",
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a General MIDI program (and whether it plays on the percussion
/// channel) to one of the five categories. Unlisted programs fall to strings.
pub fn map_to_five(program: u8, is_percussion_channel: bool) -> Instrument {
    if is_percussion_channel {
        return Instrument::Drums;
    }
    match program {
        0..=7 => Instrument::Piano,
        24..=31 => Instrument::Guitar,
        32..=39 => Instrument::Bass,
        _ => Instrument::Strings,
    }
}

/// Off sorts before on so that a note ending and another starting at the
/// same instant serialize in a playable order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteKind {
    Off,
    On,
}

/// A single note boundary. Field order matches the canonical sort key
/// `(time_ms, kind, instrument, pitch)`, so the derived `Ord` is that key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub time_ms: u32,
    pub kind: NoteKind,
    pub instrument: Instrument,
    pub pitch: u8,
}

impl NoteEvent {
    pub fn on(time_ms: u32, instrument: Instrument, pitch: u8) -> Self {
        Self { time_ms, kind: NoteKind::On, instrument, pitch }
    }

    pub fn off(time_ms: u32, instrument: Instrument, pitch: u8) -> Self {
        Self { time_ms, kind: NoteKind::Off, instrument, pitch }
    }

    pub fn is_on(&self) -> bool {
        self.kind == NoteKind::On
    }
}

/// Whether `events` is in canonical order.
pub fn is_canonical(events: &[NoteEvent]) -> bool {
    events.windows(2).all(|w| w[0] <= w[1])
}

/// Sorts into canonical order.
pub fn canonicalize(events: &mut [NoteEvent]) {
    events.sort_unstable();
}

/// A sounding interval, the unit the roll and the writers work with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Note {
    pub instrument: Instrument,
    pub pitch: u8,
    pub start_ms: u32,
    pub end_ms: u32,
}

/// Pairs on/off events into notes. Unmatched offs are dropped, a repeated
/// on closes the sounding note first, dangling ons are closed at the last
/// event time. Zero-length notes are discarded.
pub fn pair_notes(events: &[NoteEvent]) -> Vec<Note> {
    let mut open: [[Option<u32>; N_PITCHES]; 5] = [[None; N_PITCHES]; 5];
    let mut notes = Vec::new();
    let end = events.last().map_or(0, |e| e.time_ms);
    for e in events {
        if !(MIN_PITCH..=MAX_PITCH).contains(&e.pitch) {
            continue;
        }
        let slot = &mut open[e.instrument.index()][(e.pitch - MIN_PITCH) as usize];
        if let Some(start) = slot.take() {
            if e.time_ms > start {
                notes.push(Note { instrument: e.instrument, pitch: e.pitch, start_ms: start, end_ms: e.time_ms });
            }
        }
        if e.is_on() {
            *slot = Some(e.time_ms);
        }
    }
    for (i, row) in open.iter().enumerate() {
        for (p, slot) in row.iter().enumerate() {
            if let Some(start) = *slot {
                if end > start {
                    notes.push(Note { instrument: Instrument::ALL[i], pitch: p as u8 + MIN_PITCH, start_ms: start, end_ms: end });
                }
            }
        }
    }
    notes.sort_unstable_by_key(|n| (n.start_ms, n.instrument, n.pitch, n.end_ms));
    notes
}

/// Flattens notes back into a canonical event list.
pub fn notes_to_events(notes: &[Note]) -> Vec<NoteEvent> {
    let mut events: Vec<NoteEvent> = notes
        .iter()
        .flat_map(|n| [NoteEvent::on(n.start_ms, n.instrument, n.pitch), NoteEvent::off(n.end_ms, n.instrument, n.pitch)])
        .collect();
    canonicalize(&mut events);
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn program_table() {
        assert_eq!(map_to_five(0, false), Instrument::Piano);
        assert_eq!(map_to_five(7, false), Instrument::Piano);
        assert_eq!(map_to_five(8, false), Instrument::Strings);
        assert_eq!(map_to_five(24, false), Instrument::Guitar);
        assert_eq!(map_to_five(33, false), Instrument::Bass);
        assert_eq!(map_to_five(40, false), Instrument::Strings);
        assert_eq!(map_to_five(127, false), Instrument::Strings);
        assert_eq!(map_to_five(52, true), Instrument::Drums);
        assert_eq!(map_to_five(0, true), Instrument::Drums);
    }

    #[test]
    fn canonical_order_is_offs_first() {
        let mut v = alloc::vec![
            NoteEvent::on(5, Instrument::Piano, 60),
            NoteEvent::off(5, Instrument::Piano, 60),
            NoteEvent::on(5, Instrument::Drums, 70),
            NoteEvent::on(0, Instrument::Bass, 40),
        ];
        canonicalize(&mut v);
        assert_eq!(
            v,
            alloc::vec![
                NoteEvent::on(0, Instrument::Bass, 40),
                NoteEvent::off(5, Instrument::Piano, 60),
                NoteEvent::on(5, Instrument::Drums, 70),
                NoteEvent::on(5, Instrument::Piano, 60),
            ]
        );
        assert!(is_canonical(&v));
    }

    #[test]
    fn pairing_rules() {
        let p = Instrument::Piano;
        let events = [
            NoteEvent::off(0, p, 50),
            NoteEvent::on(0, p, 60),
            NoteEvent::on(100, p, 60),
            NoteEvent::on(150, p, 62),
            NoteEvent::off(200, p, 60),
            NoteEvent::on(300, p, 64),
            NoteEvent::off(300, p, 64),
        ];
        let notes = pair_notes(&events);
        assert_eq!(
            notes,
            alloc::vec![
                Note { instrument: p, pitch: 60, start_ms: 0, end_ms: 100 },
                Note { instrument: p, pitch: 60, start_ms: 100, end_ms: 200 },
                Note { instrument: p, pitch: 62, start_ms: 150, end_ms: 300 },
            ]
        );
    }
}
