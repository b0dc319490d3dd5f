//! Standard MIDI File (format 0/1) reading and writing.

use alloc::vec::Vec;

use thiserror::Error;

use super::features::{TempoChange, TimeSignature};
use super::{canonicalize, map_to_five, Instrument, Note, NoteEvent, NoteKind, MAX_PITCH, MIN_PITCH, N_PITCHES, PERCUSSION_CHANNEL};

/// Velocity used when rendering tokens, which carry none.
pub const DEFAULT_VELOCITY: u8 = 80;

const DEFAULT_TEMPO_US: u32 = 500_000;
/// With 500 ticks per quarter at 500000 µs per quarter, one tick is one millisecond.
const WRITE_TPQN: u16 = 500;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MidiError {
    #[error("malformed header chunk at byte {offset}: {reason}")]
    Header { offset: usize, reason: &'static str },
    #[error("malformed track chunk at byte {offset}: {reason}")]
    Track { offset: usize, reason: &'static str },
    #[error("unexpected end of data at byte {offset}")]
    UnexpectedEof { offset: usize },
    #[error("file declares zero tracks")]
    Empty,
}

/// Everything the pipeline reads from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiFile {
    pub format: u16,
    pub n_tracks: usize,
    pub events: Vec<NoteEvent>,
    /// Set-tempo events in millisecond time, in order.
    pub tempo_map: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    /// End of the longest track.
    pub end_ms: u32,
}

/// Parses note events only.
pub fn parse_midi(bytes: &[u8]) -> Result<Vec<NoteEvent>, MidiError> {
    parse_midi_file(bytes).map(|f| f.events)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn eof(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.bytes.get(self.pos).ok_or(MidiError::UnexpectedEof { offset: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(MidiError::UnexpectedEof { offset: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Track { offset: start, reason: "variable-length quantity longer than 4 bytes" })
    }
}

#[derive(Clone, Copy, Debug)]
enum Raw {
    Tempo(u32),
    TimeSig(u8, u8),
    Program { channel: u8, program: u8 },
    NoteOff { channel: u8, pitch: u8 },
    NoteOn { channel: u8, pitch: u8 },
}

impl Raw {
    /// Control events apply before note-offs, and note-offs before note-ons,
    /// at the same tick.
    fn priority(&self) -> u8 {
        match self {
            Raw::NoteOff { .. } => 1,
            Raw::NoteOn { .. } => 2,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Timed {
    tick: u64,
    track: usize,
    raw: Raw,
}

/// Tick to microsecond conversion. For metrical timing the product
/// `time_us * tpqn` is accumulated exactly as `sum(delta_ticks * tempo)`.
enum Clock {
    Metrical { tpqn: u128, changes: Vec<(u64, u128, u32)> },
    Timecode { us_num: u128, us_den: u128 },
}

impl Clock {
    fn metrical(tpqn: u16, tempo_events: &[(u64, u32)]) -> Self {
        // (tick, accumulated tick*tempo at tick, tempo from tick on)
        let mut changes = alloc::vec![(0u64, 0u128, DEFAULT_TEMPO_US)];
        for &(tick, tempo) in tempo_events {
            let &(last_tick, acc, last_tempo) = changes.last().unwrap();
            let acc = acc + u128::from(tick - last_tick) * u128::from(last_tempo);
            if tick == last_tick {
                changes.pop();
            }
            changes.push((tick, acc, tempo));
        }
        Clock::Metrical { tpqn: u128::from(tpqn), changes }
    }

    /// Microseconds times a denominator, plus that denominator.
    fn us_fraction(&self, tick: u64) -> (u128, u128) {
        match self {
            Clock::Metrical { tpqn, changes } => {
                let i = changes.partition_point(|c| c.0 <= tick) - 1;
                let (t0, acc, tempo) = changes[i];
                (acc + u128::from(tick - t0) * u128::from(tempo), *tpqn)
            }
            Clock::Timecode { us_num, us_den } => (u128::from(tick) * us_num, *us_den),
        }
    }

    fn ms(&self, tick: u64) -> u32 {
        let (num, den) = self.us_fraction(tick);
        let den = den * 1000;
        let ms = (num + den / 2) / den;
        u32::try_from(ms).unwrap_or(u32::MAX)
    }

    fn ms_f64(&self, tick: u64) -> f64 {
        let (num, den) = self.us_fraction(tick);
        num as f64 / (den as f64 * 1000.0)
    }
}

/// Parses a Standard MIDI File into canonically sorted note events with
/// tempo-map-correct millisecond times.
pub fn parse_midi_file(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    let mut r = Reader::new(bytes);
    let header_err = |offset, reason| MidiError::Header { offset, reason };
    if r.take(4).map_err(|_| header_err(0, "truncated header"))? != b"MThd" {
        return Err(header_err(0, "missing MThd tag"));
    }
    let len = r.u32().map_err(|_| header_err(4, "truncated header length"))? as usize;
    if len < 6 {
        return Err(header_err(4, "header length below 6"));
    }
    let format = r.u16().map_err(|_| header_err(8, "truncated format"))?;
    let n_tracks = r.u16().map_err(|_| header_err(10, "truncated track count"))? as usize;
    let division = r.u16().map_err(|_| header_err(12, "truncated division"))?;
    if format > 2 {
        return Err(header_err(8, "unknown format"));
    }
    r.take(len - 6).map_err(|_| header_err(14, "truncated header body"))?;
    if n_tracks == 0 {
        return Err(MidiError::Empty);
    }
    if division == 0 {
        return Err(header_err(12, "zero division"));
    }

    let mut timed = Vec::new();
    let mut end_tick = 0u64;
    let mut parsed = 0;
    while parsed < n_tracks {
        if r.eof() {
            return Err(MidiError::Track { offset: r.pos, reason: "fewer track chunks than declared" });
        }
        let chunk_start = r.pos;
        let id = r.take(4).map_err(|_| MidiError::Track { offset: chunk_start, reason: "truncated chunk tag" })?;
        let len = r.u32().map_err(|_| MidiError::Track { offset: chunk_start + 4, reason: "truncated chunk length" })?;
        let body_start = r.pos;
        let body = r.take(len as usize).map_err(|_| MidiError::Track { offset: chunk_start, reason: "chunk extends past end of file" })?;
        if id != b"MTrk" {
            // unknown chunk types are skipped
            continue;
        }
        let end = parse_track(body, body_start, parsed, &mut timed)?;
        end_tick = end_tick.max(end);
        parsed += 1;
    }

    timed.sort_by_key(|t| (t.tick, t.raw.priority(), t.track));

    let clock = if division & 0x8000 != 0 {
        let fps = -((division >> 8) as u8 as i8) as i32;
        let tpf = u128::from(division & 0xff);
        if fps <= 0 || tpf == 0 {
            return Err(header_err(12, "invalid timecode division"));
        }
        // 29 denotes 29.97 drop-frame
        let (fps_num, fps_den) = if fps == 29 { (2997u128, 100u128) } else { (fps as u128, 1u128) };
        Clock::Timecode { us_num: 1_000_000 * fps_den, us_den: fps_num * tpf }
    } else {
        let tempos: Vec<(u64, u32)> = timed
            .iter()
            .filter_map(|t| match t.raw {
                Raw::Tempo(us) => Some((t.tick, us)),
                _ => None,
            })
            .collect();
        Clock::metrical(division, &tempos)
    };

    let mut programs = alloc::collections::BTreeMap::new();
    let mut open: [[Option<u32>; N_PITCHES]; 5] = [[None; N_PITCHES]; 5];
    let mut notes = Vec::new();
    let mut tempo_map = Vec::new();
    let mut time_signatures = Vec::new();
    for t in &timed {
        match t.raw {
            Raw::Tempo(us) => tempo_map.push(TempoChange { time_ms: clock.ms_f64(t.tick), bpm: 60_000_000.0 / f64::from(us.max(1)) }),
            Raw::TimeSig(numerator, denominator) => {
                time_signatures.push(TimeSignature { time_ms: clock.ms_f64(t.tick), numerator, denominator })
            }
            Raw::Program { channel, program } => {
                programs.insert((t.track, channel), program);
            }
            Raw::NoteOff { channel, pitch } | Raw::NoteOn { channel, pitch } => {
                if !(MIN_PITCH..=MAX_PITCH).contains(&pitch) {
                    continue;
                }
                let program = programs.get(&(t.track, channel)).copied().unwrap_or(0);
                let instrument = map_to_five(program, channel == PERCUSSION_CHANNEL);
                let time_ms = clock.ms(t.tick);
                let slot = &mut open[instrument.index()][(pitch - MIN_PITCH) as usize];
                if let Some(start) = slot.take() {
                    if time_ms > start {
                        notes.push(Note { instrument, pitch, start_ms: start, end_ms: time_ms });
                    }
                }
                if matches!(t.raw, Raw::NoteOn { .. }) {
                    *slot = Some(time_ms);
                }
            }
        }
    }
    let end_ms = clock.ms(end_tick);
    for (i, row) in open.iter().enumerate() {
        for (p, slot) in row.iter().enumerate() {
            if let Some(start) = *slot {
                if end_ms > start {
                    let pitch = p as u8 + MIN_PITCH;
                    notes.push(Note { instrument: Instrument::ALL[i], pitch, start_ms: start, end_ms });
                }
            }
        }
    }

    let mut events: Vec<NoteEvent> = notes
        .iter()
        .flat_map(|n| [NoteEvent::on(n.start_ms, n.instrument, n.pitch), NoteEvent::off(n.end_ms, n.instrument, n.pitch)])
        .collect();
    canonicalize(&mut events);

    Ok(MidiFile { format, n_tracks, events, tempo_map, time_signatures, end_ms })
}

/// Parses one MTrk body, appending timed events. Returns the end tick.
fn parse_track(body: &[u8], base: usize, track: usize, out: &mut Vec<Timed>) -> Result<u64, MidiError> {
    let mut r = Reader::new(body);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let err = |pos: usize, reason| MidiError::Track { offset: base + pos, reason };
    let eof = |e: MidiError| match e {
        MidiError::UnexpectedEof { offset } => MidiError::Track { offset: base + offset, reason: "event runs past chunk end" },
        other => other,
    };
    while !r.eof() {
        tick += u64::from(r.vlq().map_err(eof)?);
        let at = r.pos;
        let first = r.u8().map_err(eof)?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            running.ok_or_else(|| err(at, "data byte without running status"))?
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8().map_err(eof)?;
                let len = r.vlq().map_err(eof)? as usize;
                let data = r.take(len).map_err(eof)?;
                match kind {
                    0x2f => return Ok(tick),
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        out.push(Timed { tick, track, raw: Raw::Tempo(us) });
                    }
                    0x58 if len >= 2 => {
                        let denominator = 1u8.checked_shl(u32::from(data[1])).unwrap_or(0);
                        if data[0] > 0 && denominator > 0 {
                            out.push(Timed { tick, track, raw: Raw::TimeSig(data[0], denominator) });
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq().map_err(eof)? as usize;
                r.take(len).map_err(eof)?;
            }
            0xf1..=0xfe => return Err(err(at, "system common message inside track")),
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_len = match status & 0xf0 {
                    0xc0 | 0xd0 => 1,
                    _ => 2,
                };
                let data = r.take(data_len).map_err(eof)?;
                if data.iter().any(|b| b & 0x80 != 0) {
                    return Err(err(at, "status byte inside channel message data"));
                }
                let raw = match status & 0xf0 {
                    0x80 => Some(Raw::NoteOff { channel, pitch: data[0] }),
                    0x90 if data[1] == 0 => Some(Raw::NoteOff { channel, pitch: data[0] }),
                    0x90 => Some(Raw::NoteOn { channel, pitch: data[0] }),
                    0xc0 => Some(Raw::Program { channel, program: data[0] }),
                    _ => None,
                };
                if let Some(raw) = raw {
                    out.push(Timed { tick, track, raw });
                }
            }
        }
    }
    // tolerated: track without an end-of-track meta event
    Ok(tick)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7f) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn channel_and_program(instrument: Instrument) -> (u8, u8) {
    match instrument {
        Instrument::Drums => (PERCUSSION_CHANNEL, 0),
        Instrument::Piano => (0, 0),
        Instrument::Guitar => (1, 24),
        Instrument::Bass => (2, 32),
        Instrument::Strings => (3, 48),
    }
}

/// Renders events as a format-1 file with one track per instrument. Times
/// are written at one tick per millisecond, so parsing the result
/// reproduces a canonically sorted, well-formed input exactly.
pub fn write_midi(events: &[NoteEvent], velocity: u8) -> Vec<u8> {
    let velocity = velocity.clamp(1, 127);
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&5u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TPQN.to_be_bytes());

    for instrument in Instrument::ALL {
        let mut track = Vec::new();
        if instrument == Instrument::Drums {
            track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
            track.extend_from_slice(&DEFAULT_TEMPO_US.to_be_bytes()[1..]);
        }
        let name = instrument.name().as_bytes();
        track.extend_from_slice(&[0x00, 0xff, 0x03]);
        push_vlq(&mut track, name.len() as u32);
        track.extend_from_slice(name);
        let (channel, program) = channel_and_program(instrument);
        if instrument != Instrument::Drums {
            track.extend_from_slice(&[0x00, 0xc0 | channel, program]);
        }
        let mut last = 0u32;
        for e in events.iter().filter(|e| e.instrument == instrument) {
            push_vlq(&mut track, e.time_ms - last);
            last = e.time_ms;
            match e.kind {
                NoteKind::On => track.extend_from_slice(&[0x90 | channel, e.pitch & 0x7f, velocity]),
                NoteKind::Off => track.extend_from_slice(&[0x80 | channel, e.pitch & 0x7f, 0]),
            }
        }
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(&track);
    }
    out
}
