//! Event vocabulary and the conversion between note events and token ids.
//!
//! Layout of the base vocabulary (1007 ids):
//!
//! | ids        | meaning                                             |
//! |------------|-----------------------------------------------------|
//! | 0..=439    | note-on, instrument-major, pitch 21..=108            |
//! | 440..=879  | note-off, same order                                |
//! | 880..=1004 | time shift of `(k + 1) * 8` ms for `k = id - 880`    |
//! | 1005       | `<START>`                                           |
//! | 1006       | `<PAD>`                                             |
//!
//! The discrete-condition vocabulary appends valence bins -2..=2
//! (1007..=1011) and arousal bins -2..=2 (1012..=1016).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{notes_to_events, Instrument, Note, NoteEvent, NoteKind, MAX_PITCH, MIN_PITCH, N_PITCHES};

pub type TokenId = u32;

pub const N_INSTRUMENTS: usize = 5;
pub const NOTE_ON_OFFSET: TokenId = 0;
pub const NOTE_OFF_OFFSET: TokenId = (N_INSTRUMENTS * N_PITCHES) as TokenId;
pub const TIME_SHIFT_OFFSET: TokenId = 2 * NOTE_OFF_OFFSET;
pub const N_TIME_SHIFTS: TokenId = 125;
pub const TIME_SHIFT_STEP_MS: u32 = 8;
pub const MAX_SHIFT_MS: u32 = N_TIME_SHIFTS * TIME_SHIFT_STEP_MS;
pub const START: TokenId = TIME_SHIFT_OFFSET + N_TIME_SHIFTS;
pub const PAD: TokenId = START + 1;
pub const BASE_VOCAB_SIZE: usize = PAD as usize + 1;
pub const VALENCE_OFFSET: TokenId = BASE_VOCAB_SIZE as TokenId;
pub const AROUSAL_OFFSET: TokenId = VALENCE_OFFSET + 5;
pub const CONDITIONAL_VOCAB_SIZE: usize = BASE_VOCAB_SIZE + 10;

/// Symbolic meaning of a token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    NoteOn { instrument: Instrument, pitch: u8 },
    NoteOff { instrument: Instrument, pitch: u8 },
    TimeShift { ms: u32 },
    Start,
    Pad,
    Valence(i8),
    Arousal(i8),
}

/// Which layout is in use: the base vocabulary or the one extended with
/// condition tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub with_conditions: bool,
}

impl Vocab {
    pub const BASE: Vocab = Vocab { with_conditions: false };
    pub const CONDITIONAL: Vocab = Vocab { with_conditions: true };

    pub fn size(&self) -> usize {
        if self.with_conditions {
            CONDITIONAL_VOCAB_SIZE
        } else {
            BASE_VOCAB_SIZE
        }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size()
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        if !self.contains(id) {
            return None;
        }
        let note = |rel: TokenId| {
            let instrument = Instrument::ALL[rel as usize / N_PITCHES];
            (instrument, (rel as usize % N_PITCHES) as u8 + MIN_PITCH)
        };
        Some(match id {
            _ if id < NOTE_OFF_OFFSET => {
                let (instrument, pitch) = note(id);
                Token::NoteOn { instrument, pitch }
            }
            _ if id < TIME_SHIFT_OFFSET => {
                let (instrument, pitch) = note(id - NOTE_OFF_OFFSET);
                Token::NoteOff { instrument, pitch }
            }
            _ if id < START => Token::TimeShift { ms: (id - TIME_SHIFT_OFFSET + 1) * TIME_SHIFT_STEP_MS },
            START => Token::Start,
            PAD => Token::Pad,
            _ if id < AROUSAL_OFFSET => Token::Valence((id - VALENCE_OFFSET) as i8 - 2),
            _ => Token::Arousal((id - AROUSAL_OFFSET) as i8 - 2),
        })
    }

    /// Inverse of [`Vocab::token`]. Returns `None` for values the layout
    /// cannot express.
    pub fn id(&self, token: Token) -> Option<TokenId> {
        let note = |instrument: Instrument, pitch: u8| {
            (MIN_PITCH..=MAX_PITCH).contains(&pitch).then(|| (instrument.index() * N_PITCHES + (pitch - MIN_PITCH) as usize) as TokenId)
        };
        let id = match token {
            Token::NoteOn { instrument, pitch } => note(instrument, pitch)? + NOTE_ON_OFFSET,
            Token::NoteOff { instrument, pitch } => note(instrument, pitch)? + NOTE_OFF_OFFSET,
            Token::TimeShift { ms } => {
                if ms == 0 || ms % TIME_SHIFT_STEP_MS != 0 || ms > MAX_SHIFT_MS {
                    return None;
                }
                TIME_SHIFT_OFFSET + ms / TIME_SHIFT_STEP_MS - 1
            }
            Token::Start => START,
            Token::Pad => PAD,
            Token::Valence(b) if (-2..=2).contains(&b) => VALENCE_OFFSET + (b + 2) as TokenId,
            Token::Arousal(b) if (-2..=2).contains(&b) => AROUSAL_OFFSET + (b + 2) as TokenId,
            _ => return None,
        };
        self.contains(id).then_some(id)
    }

    pub fn name(&self, id: TokenId) -> Option<String> {
        Some(match self.token(id)? {
            Token::NoteOn { instrument, pitch } => format!("NOTE_ON_{instrument}_{pitch}"),
            Token::NoteOff { instrument, pitch } => format!("NOTE_OFF_{instrument}_{pitch}"),
            Token::TimeShift { ms } => format!("TIME_SHIFT_{ms}"),
            Token::Start => String::from("<START>"),
            Token::Pad => String::from("<PAD>"),
            Token::Valence(b) => format!("VALENCE_{b}"),
            Token::Arousal(b) => format!("AROUSAL_{b}"),
        })
    }

    /// The layout as `id<TAB>name` lines, in id order.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for id in 0..self.size() as TokenId {
            let _ = writeln!(out, "{id}\t{}", self.name(id).unwrap_or_default());
        }
        out
    }
}

pub fn note_on(instrument: Instrument, pitch: u8) -> TokenId {
    Vocab::BASE.id(Token::NoteOn { instrument, pitch }).expect("pitch in range")
}

pub fn note_off(instrument: Instrument, pitch: u8) -> TokenId {
    Vocab::BASE.id(Token::NoteOff { instrument, pitch }).expect("pitch in range")
}

/// Token for a shift of `ms`, which must be a positive multiple of 8 up to 1000.
pub fn time_shift(ms: u32) -> TokenId {
    Vocab::BASE.id(Token::TimeShift { ms }).expect("shift on the 8 ms grid")
}

pub fn is_note(id: TokenId) -> bool {
    id < TIME_SHIFT_OFFSET
}

pub fn is_time_shift(id: TokenId) -> bool {
    (TIME_SHIFT_OFFSET..START).contains(&id)
}

/// Notes and time shifts; everything the regressor and the renderer consume.
pub fn is_music(id: TokenId) -> bool {
    id < START
}

pub fn is_condition(id: TokenId) -> bool {
    (VALENCE_OFFSET..CONDITIONAL_VOCAB_SIZE as TokenId).contains(&id)
}

pub fn shift_ms(id: TokenId) -> Option<u32> {
    is_time_shift(id).then(|| (id - TIME_SHIFT_OFFSET + 1) * TIME_SHIFT_STEP_MS)
}

/// Drops `<START>`, `<PAD>` and condition tokens.
pub fn strip_non_music(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| is_music(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TokenizeError {
    #[error("events are not in canonical order at index {index}")]
    Unsorted { index: usize },
    #[error("condition value {value} outside [-1, 1]")]
    ConditionOutOfRange { value: f64 },
}

/// A (valence, arousal) pair normalized to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionPair {
    pub valence: f64,
    pub arousal: f64,
}

impl ConditionPair {
    pub fn new(valence: f64, arousal: f64) -> Result<Self, TokenizeError> {
        for value in [valence, arousal] {
            if !(-1.0..=1.0).contains(&value) {
                return Err(TokenizeError::ConditionOutOfRange { value });
            }
        }
        Ok(Self { valence, arousal })
    }
}

/// Rounds `gap + carry` to the nearest 8 ms multiple (ties up) and spells
/// it as 1000 ms shifts plus one remainder shift. The rounding residue is
/// returned as the new carry, so it always lies in `[-4, 4)`.
pub fn quantize_gap(gap_ms: f64, carry_ms: f64) -> (Vec<TokenId>, f64) {
    let step = f64::from(TIME_SHIFT_STEP_MS);
    let total = gap_ms + carry_ms;
    let steps = Float::floor(total / step + 0.5).max(0.0);
    let carry = total - steps * step;
    let mut remaining = steps as u64 * u64::from(TIME_SHIFT_STEP_MS);
    let mut tokens = Vec::new();
    while remaining >= u64::from(MAX_SHIFT_MS) {
        tokens.push(time_shift(MAX_SHIFT_MS));
        remaining -= u64::from(MAX_SHIFT_MS);
    }
    if remaining > 0 {
        tokens.push(time_shift(remaining as u32));
    }
    (tokens, carry)
}

fn event_token(e: &NoteEvent) -> Option<TokenId> {
    let token = match e.kind {
        NoteKind::On => Token::NoteOn { instrument: e.instrument, pitch: e.pitch },
        NoteKind::Off => Token::NoteOff { instrument: e.instrument, pitch: e.pitch },
    };
    Vocab::BASE.id(token)
}

/// Encodes canonically sorted events, also returning the grid time at
/// which each token starts.
pub fn encode_with_times(events: &[NoteEvent]) -> Result<(Vec<TokenId>, Vec<u32>), TokenizeError> {
    if let Some(i) = events.windows(2).position(|w| w[0] > w[1]) {
        return Err(TokenizeError::Unsorted { index: i + 1 });
    }
    let mut tokens = Vec::with_capacity(events.len() * 2);
    let mut times = Vec::with_capacity(events.len() * 2);
    let mut prev = 0u32;
    let mut carry = 0.0;
    let mut now = 0u32;
    for e in events {
        let Some(id) = event_token(e) else { continue };
        let (shifts, c) = quantize_gap(f64::from(e.time_ms - prev), carry);
        carry = c;
        prev = e.time_ms;
        for s in shifts {
            tokens.push(s);
            times.push(now);
            now += shift_ms(s).unwrap_or(0);
        }
        tokens.push(id);
        times.push(now);
    }
    Ok((tokens, times))
}

/// Encodes canonically sorted events as note and time-shift tokens.
pub fn encode(events: &[NoteEvent]) -> Result<Vec<TokenId>, TokenizeError> {
    encode_with_times(events).map(|(t, _)| t)
}

/// Decodes any token sequence. Shifts accumulate into time; `<START>`,
/// `<PAD>` and condition tokens are skipped; unmatched note-offs are
/// dropped; a note-on for a sounding note restarts it; notes still sounding
/// at the end are closed there, or one grid step later if they start at the
/// very end.
pub fn decode(tokens: &[TokenId]) -> Vec<NoteEvent> {
    let vocab = Vocab::CONDITIONAL;
    let mut open: [[Option<u32>; N_PITCHES]; N_INSTRUMENTS] = [[None; N_PITCHES]; N_INSTRUMENTS];
    let mut notes = Vec::new();
    let mut now = 0u32;
    for &id in tokens {
        match vocab.token(id) {
            Some(Token::TimeShift { ms }) => now = now.saturating_add(ms),
            Some(Token::NoteOn { instrument, pitch }) => {
                let slot = &mut open[instrument.index()][(pitch - MIN_PITCH) as usize];
                match *slot {
                    Some(start) if start == now => {}
                    Some(start) => {
                        notes.push(Note { instrument, pitch, start_ms: start, end_ms: now });
                        *slot = Some(now);
                    }
                    None => *slot = Some(now),
                }
            }
            Some(Token::NoteOff { instrument, pitch }) => {
                let slot = &mut open[instrument.index()][(pitch - MIN_PITCH) as usize];
                if let Some(start) = slot.take() {
                    if now > start {
                        notes.push(Note { instrument, pitch, start_ms: start, end_ms: now });
                    }
                }
            }
            _ => {}
        }
    }
    for (i, row) in open.iter().enumerate() {
        for (p, slot) in row.iter().enumerate() {
            if let Some(start) = *slot {
                let end_ms = now.max(start + TIME_SHIFT_STEP_MS);
                notes.push(Note { instrument: Instrument::ALL[i], pitch: p as u8 + MIN_PITCH, start_ms: start, end_ms });
            }
        }
    }
    notes_to_events(&notes)
}

/// Bin index in -2..=2 over `[-1,-0.6) [-0.6,-0.2) [-0.2,0.2) [0.2,0.6) [0.6,1]`.
pub fn bin_condition(value: f64) -> Result<i8, TokenizeError> {
    if !(-1.0..=1.0).contains(&value) {
        return Err(TokenizeError::ConditionOutOfRange { value });
    }
    Ok(if value < -0.6 {
        -2
    } else if value < -0.2 {
        -1
    } else if value < 0.2 {
        0
    } else if value < 0.6 {
        1
    } else {
        2
    })
}

/// `[valence token, arousal token]` under the conditional vocabulary.
pub fn condition_tokens(c: ConditionPair) -> Result<[TokenId; 2], TokenizeError> {
    let v = bin_condition(c.valence)?;
    let a = bin_condition(c.arousal)?;
    Ok([VALENCE_OFFSET + (v + 2) as TokenId, AROUSAL_OFFSET + (a + 2) as TokenId])
}
