//! Dataset construction: deduplication, feature extraction, label joining,
//! filtering, normalization and the train/test split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use emogen_core::midi::{self, ContentHash, MidiFeatures};
use emogen_core::stats::{iqr_filter, StatsError};
use emogen_core::ConditionPair;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, FeatureClient, Query};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("arousal scale is degenerate: min = max = {0}")]
    DegenerateScale(f64),
    #[error("record {0} has no raw valence")]
    Unlabeled(String),
    #[error("record {0} has no populated instrument")]
    NoInstruments(String),
    #[error("no record survives filtering")]
    EmptyManifest,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Audio descriptors as returned by the feature service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatures {
    pub danceability: f64,
    pub energy: f64,
    pub key: i32,
    pub loudness: f64,
    pub mode: i32,
    pub speechiness: f64,
    pub acousticness: f64,
    pub instrumentalness: f64,
    pub liveness: f64,
    pub valence: f64,
    pub tempo: f64,
    #[serde(rename = "type", default = "audio_features_type")]
    pub kind: String,
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub uri: String,
    #[serde(default)]
    pub track_href: String,
    #[serde(default)]
    pub analysis_url: String,
    pub duration_ms: u64,
    pub time_signature: u32,
}

fn audio_features_type() -> String {
    "audio_features".into()
}

/// Metadata of the matched recording, as supplied by the archive match table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchInfo {
    pub track_id: String,
    pub match_score: f64,
    pub song_id: String,
    pub title: String,
    pub artist: String,
    #[serde(default)]
    pub release: String,
    #[serde(default)]
    pub spotify_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFeatures {
    pub track_id: String,
    pub match_score: f64,
    pub song_id: String,
    pub title: String,
    pub artist: String,
    pub release: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spotify_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spotify_title: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spotify_artist: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spotify_album: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spotify_audio_features: Option<AudioFeatures>,
}

/// One dataset entry. The dataset file is a JSON object from content hash
/// to this record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub midi_features: MidiFeatures,
    pub matched_features: MatchedFeatures,
}

impl SongRecord {
    pub fn raw_valence(&self) -> Option<f64> {
        self.matched_features.spotify_audio_features.as_ref().map(|f| f.valence)
    }
}

pub type Dataset = BTreeMap<ContentHash, SongRecord>;

/// A file that survived deduplication.
#[derive(Clone, Debug, PartialEq)]
pub struct ScannedFile {
    pub path: PathBuf,
    pub hash: ContentHash,
    pub features: MidiFeatures,
}

#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    pub kept: Vec<ScannedFile>,
    pub duplicates: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_midi(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// Walks `root` in lexicographic path order and keeps the first file of each
/// distinct piano roll. Unparseable and empty files are skipped with a
/// logged reason.
pub fn scan_and_dedup(root: &Path) -> Result<ScanReport, CorpusError> {
    let io = |source| CorpusError::Io { path: root.to_path_buf(), source };
    fs::read_dir(root).map_err(io)?;
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| io(e.into()))?;
        if entry.file_type().is_file() && is_midi(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();
    let mut report = ScanReport::default();
    let mut seen = HashSet::new();
    for path in paths {
        let skip = |report: &mut ScanReport, path: PathBuf, reason: String| {
            log::info!("skipping {}: {reason}", path.display());
            report.skipped.push((path, reason));
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                skip(&mut report, path, e.to_string());
                continue;
            }
        };
        let file = match midi::parse_midi_file(&bytes) {
            Ok(f) => f,
            Err(e) => {
                skip(&mut report, path, e.to_string());
                continue;
            }
        };
        if file.events.is_empty() {
            skip(&mut report, path, "no notes in range".into());
            continue;
        }
        let features = match midi::midi_features(&file.events, &file.tempo_map) {
            Ok(f) => f,
            Err(e) => {
                skip(&mut report, path, e.to_string());
                continue;
            }
        };
        let hash = midi::content_hash(&file.events);
        if seen.insert(hash) {
            report.kept.push(ScannedFile { path, hash, features });
        } else {
            report.duplicates += 1;
        }
    }
    Ok(report)
}

/// The match table keyed by file stem.
pub fn read_match_table(path: &Path) -> Result<BTreeMap<String, MatchInfo>, CorpusError> {
    read_json(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json { path: path.into(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CorpusError::Json { path: path.into(), source })?;
    text.push('\n');
    crate::checkpoint::write_atomic(path, text.as_bytes()).map_err(|source| CorpusError::Io { path: path.into(), source })
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Joins scanned files with match metadata and audio features. Files
/// without a match entry are left out; files whose features are not found
/// keep a record without audio features.
pub fn join_labels(
    scanned: &[ScannedFile],
    matches: &BTreeMap<String, MatchInfo>,
    client: &mut FeatureClient,
) -> Result<(Dataset, BTreeMap<ContentHash, String>), CorpusError> {
    let mut dataset = Dataset::new();
    let mut names = BTreeMap::new();
    for file in scanned {
        let stem = file_stem(&file.path);
        let Some(m) = matches.get(&stem) else {
            log::debug!("{stem}: no match metadata");
            continue;
        };
        let found = client.fetch_audio_features(&Query::from_match(m))?;
        let mut matched = MatchedFeatures {
            track_id: m.track_id.clone(),
            match_score: m.match_score,
            song_id: m.song_id.clone(),
            title: m.title.clone(),
            artist: m.artist.clone(),
            release: m.release.clone(),
            spotify_id: m.spotify_id.clone(),
            spotify_title: None,
            spotify_artist: None,
            spotify_album: None,
            spotify_audio_features: None,
        };
        if let Some(hit) = found {
            matched.spotify_id = Some(hit.features.id.clone()).filter(|s| !s.is_empty()).or(matched.spotify_id);
            matched.spotify_title = Some(hit.title.unwrap_or_else(|| m.title.clone()));
            matched.spotify_artist = Some(hit.artist.unwrap_or_else(|| m.artist.clone()));
            matched.spotify_album = Some(hit.album.unwrap_or_else(|| m.release.clone()));
            matched.spotify_audio_features = Some(hit.features);
        }
        dataset.insert(file.hash, SongRecord { midi_features: file.features, matched_features: matched });
        names.insert(file.hash, file.path.to_string_lossy().into_owned());
    }
    Ok((dataset, names))
}

/// Note density averaged over the populated instrument categories.
pub fn arousal_raw(features: &MidiFeatures) -> Option<f64> {
    (features.n_instruments > 0).then(|| features.note_density / features.n_instruments as f64)
}

pub fn normalize_valence(raw: f64) -> f64 {
    2.0 * raw - 1.0
}

pub fn normalize_arousal(raw: f64, min: f64, max: f64) -> Result<f64, CorpusError> {
    if max == min {
        return Err(CorpusError::DegenerateScale(min));
    }
    Ok((2.0 * (raw - min) / (max - min) - 1.0).clamp(-1.0, 1.0))
}

/// A labeled song ready for filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSong {
    pub file: String,
    pub hash: ContentHash,
    pub midi_features: MidiFeatures,
    pub raw_valence: f64,
}

/// Condition pairs for `songs` under the given arousal scale.
pub fn derive_conditions(songs: &[LabeledSong], arousal_min: f64, arousal_max: f64) -> Result<Vec<ConditionPair>, CorpusError> {
    songs
        .iter()
        .map(|s| {
            let raw = arousal_raw(&s.midi_features).ok_or_else(|| CorpusError::NoInstruments(s.file.clone()))?;
            Ok(ConditionPair {
                valence: normalize_valence(s.raw_valence).clamp(-1.0, 1.0),
                arousal: normalize_arousal(raw, arousal_min, arousal_max)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub hash: ContentHash,
    pub split: Split,
    pub condition: ConditionPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub arousal_min: f64,
    pub arousal_max: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub const MIN_INSTRUMENTS: usize = 3;
pub const TEST_FRACTION: f64 = 0.05;

/// Number of test songs for `n` survivors: the last 5%, rounded down, and at
/// least one when there are two or more songs.
pub fn test_count(n: usize) -> usize {
    let k = (n as f64 * TEST_FRACTION).floor() as usize;
    if n >= 2 {
        k.max(1)
    } else {
        0
    }
}

/// Filters, splits and normalizes labeled songs.
///
/// Songs with fewer than three instrument categories or a raw valence of
/// exactly zero are dropped, then outliers beyond the 1.5 IQR fences of
/// valence or arousal. Survivors are ordered by file name and the last 5%
/// become the test split. The arousal scale is the min and max over the
/// training songs.
pub fn build_manifest(songs: &[LabeledSong]) -> Result<DatasetManifest, CorpusError> {
    let pre: Vec<&LabeledSong> =
        songs.iter().filter(|s| s.midi_features.n_instruments >= MIN_INSTRUMENTS && s.raw_valence != 0.0).collect();
    if pre.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    let mut survivors: Vec<LabeledSong> = if pre.len() >= 4 {
        let valence: Vec<f64> = pre.iter().map(|s| s.raw_valence).collect();
        let arousal: Vec<f64> = pre.iter().map(|s| arousal_raw(&s.midi_features).expect("n_instruments >= 3")).collect();
        let kv = iqr_filter(&valence)?;
        let ka = iqr_filter(&arousal)?;
        pre.iter().enumerate().filter(|&(i, _)| kv.keep[i] && ka.keep[i]).map(|(_, s)| (*s).clone()).collect()
    } else {
        pre.into_iter().cloned().collect()
    };
    if survivors.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    survivors.sort_by(|a, b| file_name(&a.file).cmp(file_name(&b.file)).then_with(|| a.file.cmp(&b.file)));
    let n_test = test_count(survivors.len());
    let n_train = survivors.len() - n_test;
    let train_arousal: Vec<f64> = survivors[..n_train].iter().map(|s| arousal_raw(&s.midi_features).expect("filtered")).collect();
    let arousal_min = train_arousal.iter().copied().fold(f64::INFINITY, f64::min);
    let arousal_max = train_arousal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let conditions = derive_conditions(&survivors, arousal_min, arousal_max)?;
    let entries = survivors
        .into_iter()
        .zip(conditions)
        .enumerate()
        .map(|(i, (s, condition))| ManifestEntry {
            file: s.file,
            hash: s.hash,
            split: if i < n_train { Split::Train } else { Split::Test },
            condition,
        })
        .collect();
    Ok(DatasetManifest { arousal_min, arousal_max, entries })
}

fn file_name(path: &str) -> &str {
    path.rsplit(['/', '\\']).next().unwrap_or(path)
}

/// Labeled songs of a dataset, skipping records without audio features.
pub fn labeled_songs(dataset: &Dataset, names: &BTreeMap<ContentHash, String>) -> Vec<LabeledSong> {
    dataset
        .iter()
        .filter_map(|(hash, r)| {
            Some(LabeledSong {
                file: names.get(hash).cloned().unwrap_or_else(|| hash.to_string()),
                hash: *hash,
                midi_features: r.midi_features,
                raw_valence: r.raw_valence()?,
            })
        })
        .collect()
}
