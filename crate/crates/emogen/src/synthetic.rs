//! Generated test material: hand-assembled MIDI files, random songs, and a
//! synthetic emotion corpus whose labels are exact functions of token
//! statistics.

use emogen_core::evaluate::EmotionRegressor;
use emogen_core::midi::{bar_boundaries, Note, NoteEvent};
use emogen_core::model::ModelError;
use emogen_core::tokenizer::{encode_with_times, is_time_shift, shift_ms, NOTE_OFF_OFFSET};
use emogen_core::{ConditionPair, Instrument, TokenId};
use rand::Rng as _;

use crate::corpus::normalize_arousal;
use crate::fit::Song;

fn vlq(mut v: u32, out: &mut Vec<u8>) {
    let mut stack = vec![(v & 0x7f) as u8];
    v >>= 7;
    while v > 0 {
        stack.push((v & 0x7f) as u8 | 0x80);
        v >>= 7;
    }
    out.extend(stack.iter().rev());
}

/// Assembles Standard MIDI Files event by event, for fixtures that the
/// library's own writer would never produce.
#[derive(Clone, Debug)]
pub struct SmfBuilder {
    pub format: u16,
    pub tpqn: u16,
    pub running_status: bool,
    tracks: Vec<Vec<(u32, Vec<u8>)>>,
}

impl SmfBuilder {
    pub fn new(format: u16, tpqn: u16) -> Self {
        Self { format, tpqn, running_status: false, tracks: Vec::new() }
    }

    pub fn add_track(&mut self) -> usize {
        self.tracks.push(Vec::new());
        self.tracks.len() - 1
    }

    pub fn event(&mut self, track: usize, tick: u32, bytes: Vec<u8>) -> &mut Self {
        self.tracks[track].push((tick, bytes));
        self
    }

    pub fn tempo(&mut self, track: usize, tick: u32, us_per_quarter: u32) -> &mut Self {
        let b = us_per_quarter.to_be_bytes();
        self.event(track, tick, vec![0xff, 0x51, 3, b[1], b[2], b[3]])
    }

    pub fn time_signature(&mut self, track: usize, tick: u32, numerator: u8, denominator_pow2: u8) -> &mut Self {
        self.event(track, tick, vec![0xff, 0x58, 4, numerator, denominator_pow2, 24, 8])
    }

    pub fn name(&mut self, track: usize, tick: u32, name: &str) -> &mut Self {
        let mut b = vec![0xff, 0x03];
        vlq(name.len() as u32, &mut b);
        b.extend(name.as_bytes());
        self.event(track, tick, b)
    }

    pub fn program(&mut self, track: usize, tick: u32, channel: u8, program: u8) -> &mut Self {
        self.event(track, tick, vec![0xc0 | channel, program])
    }

    pub fn note_on(&mut self, track: usize, tick: u32, channel: u8, pitch: u8, velocity: u8) -> &mut Self {
        self.event(track, tick, vec![0x90 | channel, pitch, velocity])
    }

    /// A note-off, written as a note-on with velocity zero when `as_zero_on`.
    pub fn note_off(&mut self, track: usize, tick: u32, channel: u8, pitch: u8, as_zero_on: bool) -> &mut Self {
        let status = if as_zero_on { 0x90 } else { 0x80 };
        self.event(track, tick, vec![status | channel, pitch, if as_zero_on { 0 } else { 64 }])
    }

    pub fn build(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(b"MThd");
        out.extend(6u32.to_be_bytes());
        out.extend(self.format.to_be_bytes());
        out.extend((self.tracks.len() as u16).to_be_bytes());
        out.extend(self.tpqn.to_be_bytes());
        for track in &self.tracks {
            let mut events = track.clone();
            // Offs before ons at equal ticks, so parsed pairs stay matched.
            events.sort_by_key(|(t, b)| (*t, !(b[0] & 0xf0 == 0x80 || (b[0] & 0xf0 == 0x90 && b.get(2) == Some(&0)))));
            let mut body = Vec::new();
            let (mut last_tick, mut last_status) = (0, None);
            for (tick, bytes) in events {
                vlq(tick - last_tick, &mut body);
                last_tick = tick;
                let status = bytes[0];
                if status < 0xf0 && self.running_status && last_status == Some(status) {
                    body.extend(&bytes[1..]);
                } else {
                    body.extend(&bytes);
                }
                last_status = (status < 0xf0).then_some(status);
            }
            body.extend([0, 0xff, 0x2f, 0]);
            out.extend(b"MTrk");
            out.extend((body.len() as u32).to_be_bytes());
            out.extend(body);
        }
        out
    }
}

/// General MIDI program representative of each category.
pub fn program_for(instrument: Instrument) -> u8 {
    match instrument {
        Instrument::Drums | Instrument::Piano => 0,
        Instrument::Guitar => 25,
        Instrument::Bass => 33,
        Instrument::Strings => 48,
    }
}

/// Random notes with at least `min_len` duration and gap between repeats
/// of the same key. Times are integers in whatever unit the caller uses.
pub fn random_notes(rng: &mut emogen_core::Rng, n_notes: usize, span: u32, min_len: u32) -> Vec<Note> {
    let mut notes: Vec<Note> = Vec::with_capacity(n_notes);
    let mut busy_until = std::collections::HashMap::new();
    let mut attempts = 0;
    while notes.len() < n_notes && attempts < n_notes * 20 {
        attempts += 1;
        let instrument = Instrument::ALL[rng.random_range(0..5)];
        let pitch = rng.random_range(21..=108u8);
        let start = rng.random_range(0..span);
        let end = start + rng.random_range(min_len..=min_len.max(1200));
        let key = (instrument, pitch);
        let ok = busy_until
            .get(&key)
            .is_none_or(|intervals: &Vec<(u32, u32)>| intervals.iter().all(|&(s, e)| end + min_len <= s || start >= e + min_len));
        if ok {
            busy_until.entry(key).or_insert_with(Vec::new).push((start, end));
            notes.push(Note { instrument, pitch, start_ms: start, end_ms: end });
        }
    }
    notes.sort_unstable_by_key(|n| (n.start_ms, n.instrument, n.pitch, n.end_ms));
    notes
}

/// A random file: random resolution and tempo changes, one track per
/// instrument with a program change and a name, drums on channel 9, a mix
/// of note-off encodings, sometimes running status.
pub fn random_smf(rng: &mut emogen_core::Rng, n_notes: usize) -> Vec<u8> {
    let tpqn = [96u16, 120, 384, 480, 960][rng.random_range(0..5)];
    let mut b = SmfBuilder::new(1, tpqn);
    b.running_status = rng.random_bool(0.5);
    let conductor = b.add_track();
    b.name(conductor, 0, "conductor");
    let mut tick = 0;
    for _ in 0..rng.random_range(0..4) {
        b.tempo(conductor, tick, rng.random_range(300_000..1_200_000));
        b.time_signature(conductor, tick, rng.random_range(2..8), rng.random_range(1..4));
        tick += rng.random_range(1..8) * u32::from(tpqn);
    }
    let span_ticks = 40 * u32::from(tpqn);
    // A sixteenth of a quarter is at least 18.75 ms at the fastest tempo
    // drawn above, which keeps notes clear of the 8 ms grid.
    let notes = random_notes(rng, n_notes, span_ticks, u32::from(tpqn) / 16);
    let mut tracks = [None; 5];
    for n in notes {
        let i = n.instrument.index();
        let channel = if n.instrument == Instrument::Drums { 9 } else { i as u8 };
        let t = *tracks[i].get_or_insert_with(|| {
            let t = b.add_track();
            b.name(t, 0, n.instrument.name());
            b.program(t, 0, channel, program_for(n.instrument));
            t
        });
        b.note_on(t, n.start_ms, channel, n.pitch, rng.random_range(1..128));
        b.note_off(t, n.end_ms, channel, n.pitch, rng.random_bool(0.5));
    }
    b.build()
}

/// Hand-assembled files covering the format corners the parser handles.
pub fn fixture_files() -> Vec<(&'static str, Vec<u8>)> {
    let mut out = Vec::new();

    let mut b = SmfBuilder::new(0, 480);
    let t = b.add_track();
    b.tempo(t, 0, 500_000).program(t, 0, 0, 0).note_on(t, 0, 0, 60, 90).note_off(t, 480, 0, 60, false);
    out.push(("single_note_format0", b.build()));

    let mut b = SmfBuilder::new(0, 96);
    b.running_status = true;
    let t = b.add_track();
    for (k, p) in [60u8, 62, 64, 65, 67, 69, 71, 72].into_iter().enumerate() {
        let k = k as u32;
        b.note_on(t, k * 48, 0, p, 80).note_off(t, k * 48 + 40, 0, p, true);
    }
    out.push(("running_status_zero_velocity_offs", b.build()));

    let mut b = SmfBuilder::new(1, 480);
    let c = b.add_track();
    b.name(c, 0, "tempo map").tempo(c, 0, 500_000).time_signature(c, 0, 3, 2).tempo(c, 1920, 1_000_000);
    let drums = b.add_track();
    let bass = b.add_track();
    b.program(bass, 0, 1, 33);
    for k in 0..16u32 {
        b.note_on(drums, k * 240, 9, 36 + (k % 3) as u8, 100).note_off(drums, k * 240 + 120, 9, 36 + (k % 3) as u8, false);
        b.note_on(bass, k * 240, 1, 40 + (k % 5) as u8, 70).note_off(bass, k * 240 + 200, 1, 40 + (k % 5) as u8, false);
    }
    out.push(("tempo_change_drums_bass", b.build()));

    let mut b = SmfBuilder::new(1, 120);
    let t = b.add_track();
    b.program(t, 0, 2, 26).program(t, 0, 3, 41);
    b.note_on(t, 0, 2, 20, 80).note_off(t, 60, 2, 20, false);
    b.note_on(t, 0, 2, 109, 80).note_off(t, 60, 2, 109, false);
    b.note_on(t, 10, 3, 55, 80).note_on(t, 20, 3, 59, 80).note_off(t, 70, 3, 55, false).note_off(t, 90, 3, 59, false);
    out.push(("out_of_range_pitches_dropped", b.build()));

    out
}

/// Pitch classes of the bright mixture (a major triad).
pub const BRIGHT_CLASSES: [u8; 3] = [0, 4, 7];
/// Pitch classes of the dark mixture.
pub const DARK_CLASSES: [u8; 3] = [1, 6, 10];
/// Inter-onset interval at arousal −1 and +1.
pub const SLOW_GAP_MS: u32 = 480;
pub const FAST_GAP_MS: u32 = 64;

/// Inter-onset interval on the 8 ms grid for an arousal parameter in
/// [−1, 1]. Note density, not the gap, is linear in the parameter, so a
/// uniform parameter gives roughly uniform density labels.
pub fn gap_for(arousal: f64) -> u32 {
    let t = (arousal.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let (slow, fast) = (1000.0 / SLOW_GAP_MS as f64, 1000.0 / FAST_GAP_MS as f64);
    let ms = 1000.0 / (slow + t * (fast - slow));
    8 * (ms / 8.0).round() as u32
}

/// A monophonic piano line: fixed inter-onset gap from `arousal`, pitch
/// classes from the bright set with probability `(valence + 1) / 2`.
pub fn synthetic_events(valence: f64, arousal: f64, n_notes: usize, rng: &mut emogen_core::Rng) -> Vec<NoteEvent> {
    let gap = gap_for(arousal);
    let p_bright = (valence.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let mut events = Vec::with_capacity(2 * n_notes);
    for k in 0..n_notes as u32 {
        let classes = if rng.random_bool(p_bright) { BRIGHT_CLASSES } else { DARK_CLASSES };
        let pitch = 60 + classes[rng.random_range(0..3)];
        events.push(NoteEvent::on(k * gap, Instrument::Piano, pitch));
        events.push(NoteEvent::off((k + 1) * gap, Instrument::Piano, pitch));
    }
    emogen_core::midi::canonicalize(&mut events);
    events
}

/// Note-on rate and bright-class share of a token sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenStats {
    pub n_notes: usize,
    pub duration_ms: u64,
    /// Note-ons per second; infinite for notes without elapsed time.
    pub note_density: f64,
    /// Share of pitched note-ons in the bright set; 0.5 without notes.
    pub bright_fraction: f64,
}

pub fn token_stats(tokens: &[TokenId]) -> TokenStats {
    let (mut n, mut bright, mut ms) = (0usize, 0usize, 0u64);
    for &t in tokens {
        if t < NOTE_OFF_OFFSET {
            n += 1;
            let pitch = (t % 88) as u8 + 21;
            bright += usize::from(BRIGHT_CLASSES.contains(&(pitch % 12)));
        } else if is_time_shift(t) {
            ms += u64::from(shift_ms(t).expect("time shift"));
        }
    }
    let note_density = match (n, ms) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => n as f64 * 1000.0 / ms as f64,
    };
    let bright_fraction = if n == 0 { 0.5 } else { bright as f64 / n as f64 };
    TokenStats { n_notes: n, duration_ms: ms, note_density, bright_fraction }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub songs: Vec<Song>,
    /// Note-density scale used for the arousal labels.
    pub arousal_min: f64,
    pub arousal_max: f64,
}

/// Songs whose labels are exact functions of their statistics: valence is
/// the mixture parameter, arousal is the note density min-max scaled over
/// the corpus.
pub fn synthetic_corpus(n_songs: usize, n_notes: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = emogen_core::seeded_rng(seed);
    let mut raw = Vec::with_capacity(n_songs);
    for i in 0..n_songs {
        let valence = rng.random_range(-1.0..=1.0);
        let arousal = rng.random_range(-1.0..=1.0);
        let events = synthetic_events(valence, arousal, n_notes, &mut rng);
        let (tokens, times) = encode_with_times(&events).expect("canonical events");
        let bars = bar_boundaries(&events, &[], &[]);
        let density = token_stats(&tokens).note_density;
        let bar_starts = emogen_core::training::bar_token_starts(&times, &bars);
        raw.push((format!("synthetic_{i:05}"), tokens, bar_starts, valence, density));
    }
    let arousal_min = raw.iter().map(|r| r.4).fold(f64::INFINITY, f64::min);
    let arousal_max = raw.iter().map(|r| r.4).fold(f64::NEG_INFINITY, f64::max);
    let songs = raw
        .into_iter()
        .map(|(name, tokens, bar_starts, valence, density)| Song {
            name,
            tokens,
            bar_starts,
            condition: Some(ConditionPair { valence, arousal: normalize_arousal(density, arousal_min, arousal_max).unwrap_or(0.0) }),
        })
        .collect();
    SyntheticCorpus { songs, arousal_min, arousal_max }
}

/// Reads the labels back off token statistics with the corpus scale.
#[derive(Clone, Copy, Debug)]
pub struct StatRegressor {
    pub arousal_min: f64,
    pub arousal_max: f64,
    pub window: usize,
}

impl StatRegressor {
    pub fn for_corpus(c: &SyntheticCorpus, window: usize) -> Self {
        Self { arousal_min: c.arousal_min, arousal_max: c.arousal_max, window }
    }
}

impl EmotionRegressor for StatRegressor {
    fn window(&self) -> usize {
        self.window
    }

    fn predict_window(&self, tokens: &[TokenId]) -> Result<(f64, f64), ModelError> {
        let s = token_stats(tokens);
        let arousal = if s.n_notes == 0 {
            -1.0
        } else if s.note_density.is_infinite() {
            1.0
        } else {
            normalize_arousal(s.note_density, self.arousal_min, self.arousal_max).map_err(|e| ModelError::InvalidConfig(e.to_string()))?
        };
        Ok((2.0 * s.bright_fraction - 1.0, arousal))
    }
}

/// The tokens of one synthetic line.
pub fn synthetic_tokens(valence: f64, arousal: f64, n_notes: usize, rng: &mut emogen_core::Rng) -> Vec<TokenId> {
    emogen_core::tokenizer::encode(&synthetic_events(valence, arousal, n_notes, rng)).expect("canonical events")
}
