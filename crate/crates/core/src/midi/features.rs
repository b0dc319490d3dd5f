//! Content hashing, bar grids and the low-level features stored per song.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{pair_notes, NoteEvent, MIN_PITCH, N_PITCHES};

const DEFAULT_BPM: f64 = 120.0;
/// Piano-roll time resolution for content hashing.
pub const HASH_BIN_MS: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoChange {
    pub time_ms: f64,
    pub bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub time_ms: f64,
    pub numerator: u8,
    pub denominator: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidiFeatures {
    pub note_density: f64,
    #[serde(rename = "tempo")]
    pub tempo_bpm: f64,
    pub n_instruments: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("{n_notes} note-ons in a song of zero duration")]
    DegenerateDuration { n_notes: usize },
}

/// Piecewise-constant tempo, as (start ms, start quarter, bpm) segments.
struct TempoCurve {
    segments: Vec<(f64, f64, f64)>,
}

impl TempoCurve {
    fn new(tempo_map: &[TempoChange]) -> Self {
        let mut segments = vec![(0.0, 0.0, DEFAULT_BPM)];
        let mut changes: Vec<TempoChange> = tempo_map.iter().copied().filter(|c| c.bpm > 0.0 && c.bpm.is_finite()).collect();
        changes.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms));
        for c in changes {
            let t = c.time_ms.max(0.0);
            let &(t0, q0, bpm) = segments.last().unwrap();
            let q = q0 + (t - t0) * bpm / 60_000.0;
            if t <= t0 {
                segments.pop();
            }
            segments.push((t, q, c.bpm));
        }
        Self { segments }
    }

    fn quarters_at(&self, ms: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= ms).max(1) - 1;
        let (t0, q0, bpm) = self.segments[i];
        q0 + (ms - t0) * bpm / 60_000.0
    }

    fn ms_at(&self, quarters: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.1 <= quarters).max(1) - 1;
        let (t0, q0, bpm) = self.segments[i];
        t0 + (quarters - q0) * 60_000.0 / bpm
    }
}

/// Downbeat times from zero up to the last event, inclusive. Without tempo
/// or time-signature events, 4/4 at 120 BPM is assumed.
pub fn bar_boundaries(events: &[NoteEvent], tempo_map: &[TempoChange], timesig_map: &[TimeSignature]) -> Vec<u32> {
    let end_ms = events.iter().map(|e| e.time_ms).max().unwrap_or(0) as f64;
    let curve = TempoCurve::new(tempo_map);
    let end_q = curve.quarters_at(end_ms);
    let eps = 1e-9;

    // (start quarter, bar length in quarters)
    let mut sigs: Vec<(f64, f64)> = vec![(0.0, 4.0)];
    let mut sorted: Vec<&TimeSignature> = timesig_map.iter().filter(|s| s.numerator > 0 && s.denominator > 0).collect();
    sorted.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms));
    for s in sorted {
        let q = curve.quarters_at(s.time_ms.max(0.0));
        let len = f64::from(s.numerator) * 4.0 / f64::from(s.denominator);
        if q <= sigs.last().unwrap().0 + eps {
            sigs.pop();
        }
        sigs.push((q, len));
    }

    let mut out: Vec<u32> = Vec::new();
    for (i, &(start, len)) in sigs.iter().enumerate() {
        let stop = sigs.get(i + 1).map_or(f64::INFINITY, |s| s.0);
        let mut k = 0u64;
        loop {
            let q = start + k as f64 * len;
            if q >= stop - eps || q > end_q + eps {
                break;
            }
            let ms = num_traits::Float::round(curve.ms_at(q)) as u32;
            if out.last().is_none_or(|&last| ms > last) {
                out.push(ms);
            }
            k += 1;
        }
    }
    if out.is_empty() {
        out.push(0);
    }
    out
}

/// Note density, duration-weighted tempo and the number of populated
/// instrument categories.
pub fn midi_features(events: &[NoteEvent], tempo_map: &[TempoChange]) -> Result<MidiFeatures, FeatureError> {
    let n_on = events.iter().filter(|e| e.is_on()).count();
    let duration_ms = events.iter().map(|e| e.time_ms).max().unwrap_or(0) as f64;
    if duration_ms == 0.0 && n_on > 0 {
        return Err(FeatureError::DegenerateDuration { n_notes: n_on });
    }
    let note_density = if n_on == 0 { 0.0 } else { n_on as f64 / (duration_ms / 1000.0) };

    let curve = TempoCurve::new(tempo_map);
    let tempo_bpm = if duration_ms == 0.0 {
        curve.segments[0].2
    } else {
        let mut weighted = 0.0;
        for (i, &(t0, _, bpm)) in curve.segments.iter().enumerate() {
            let t1 = curve.segments.get(i + 1).map_or(duration_ms, |s| s.0).min(duration_ms);
            if t1 > t0 {
                weighted += (t1 - t0) * bpm;
            }
        }
        weighted / duration_ms
    };

    let mut used = [false; 5];
    for e in events.iter().filter(|e| e.is_on()) {
        used[e.instrument.index()] = true;
    }
    let n_instruments = used.iter().filter(|&&u| u).count();
    Ok(MidiFeatures { note_density, tempo_bpm, n_instruments })
}

/// 128-bit digest of the binarized piano roll.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; 16]);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("content hash must be 32 hex digits")]
pub struct ParseHashError;

impl FromStr for ContentHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.as_bytes();
        if s.len() != 32 {
            return Err(ParseHashError);
        }
        let nibble = |c: u8| match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            b'A'..=b'F' => Ok(c - b'A' + 10),
            _ => Err(ParseHashError),
        };
        let mut out = [0u8; 16];
        for (i, o) in out.iter_mut().enumerate() {
            *o = nibble(s[2 * i])? << 4 | nibble(s[2 * i + 1])?;
        }
        Ok(ContentHash(out))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hashes the binarized instrument x pitch x time roll (50 ms bins).
/// Velocities, track layout and all metadata are ignored.
pub fn content_hash(events: &[NoteEvent]) -> ContentHash {
    let notes = pair_notes(events);
    let n_bins = notes.iter().map(|n| n.end_ms.div_ceil(HASH_BIN_MS)).max().unwrap_or(0) as usize;
    let words = n_bins.div_ceil(64);
    let mut roll = vec![0u64; 5 * N_PITCHES * words];
    for n in &notes {
        let row = n.instrument.index() * N_PITCHES + (n.pitch - MIN_PITCH) as usize;
        let first = (n.start_ms / HASH_BIN_MS) as usize;
        let last = ((n.end_ms / HASH_BIN_MS) as usize).max(first + 1).min(n_bins);
        for bin in first..last {
            roll[row * words + bin / 64] |= 1 << (bin % 64);
        }
    }
    let mut hasher = Sha256::new();
    hasher.update((n_bins as u64).to_le_bytes());
    for w in &roll {
        hasher.update(w.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    ContentHash(out)
}
