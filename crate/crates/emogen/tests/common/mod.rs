//! A miniature on-disk corpus for end-to-end runs.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use emogen::corpus::AudioFeatures;
use emogen_core::midi::{notes_to_events, write_midi, Note, DEFAULT_VELOCITY};
use emogen_core::Instrument;
use serde_json::json;

pub const LISTING_ID: &str = "5VPOrzHyuULaiCKnwQNNCN";

pub fn features(valence: f64, id: &str) -> AudioFeatures {
    AudioFeatures {
        danceability: 0.681,
        energy: 0.509,
        key: 4,
        loudness: -8.504,
        mode: 1,
        speechiness: 0.0461,
        acousticness: 0.497,
        instrumentalness: 2.72e-06,
        liveness: 0.188,
        valence,
        tempo: 82.614,
        kind: "audio_features".into(),
        id: id.into(),
        uri: format!("spotify:track:{id}"),
        track_href: format!("https://api.spotify.com/v1/tracks/{id}"),
        analysis_url: format!("https://api.spotify.com/v1/audio-analysis/{id}"),
        duration_ms: 210387,
        time_signature: 4,
    }
}

/// A song of `n` notes per instrument, `gap_ms` apart.
pub fn song_bytes(instruments: &[Instrument], n: u32, gap_ms: u32, base_pitch: u8) -> Vec<u8> {
    let mut notes = Vec::new();
    for (k, &instrument) in instruments.iter().enumerate() {
        for i in 0..n {
            let start_ms = i * gap_ms + k as u32 * 16;
            let pitch = base_pitch + ((i * 5 + k as u32 * 7) % 24) as u8;
            notes.push(Note { instrument, pitch, start_ms, end_ms: start_ms + gap_ms.max(24) - 8 });
        }
    }
    write_midi(&notes_to_events(&notes), DEFAULT_VELOCITY)
}

pub struct MiniCorpus {
    pub root: PathBuf,
    pub midi: PathBuf,
    pub matches: PathBuf,
    pub fixtures: PathBuf,
    /// Files expected to reach the manifest.
    pub expected: Vec<String>,
}

/// Twelve labeled three-instrument songs plus the cases the pipeline must
/// drop: a duplicate, a two-instrument song, a zero-valence song, a song
/// with no match entry, a song the feature source does not know, and a
/// file that is not MIDI.
pub fn mini_corpus(root: &Path) -> MiniCorpus {
    let midi = root.join("midi");
    fs::create_dir_all(midi.join("nested")).unwrap();
    let three = [Instrument::Piano, Instrument::Bass, Instrument::Strings];
    let mut matches = serde_json::Map::new();
    let mut fixtures = serde_json::Map::new();
    let mut expected = Vec::new();
    let mut add_match = |stem: &str, artist: &str, title: &str, spotify: Option<&str>| {
        matches.insert(
            stem.into(),
            json!({"track_id": format!("TR{stem}"), "match_score": 0.9, "song_id": format!("SO{stem}"),
                   "title": title, "artist": artist, "release": "Album", "spotify_id": spotify}),
        );
    };
    for i in 0..12u32 {
        let stem = format!("song_{i:02}");
        let dir = if i % 4 == 3 { midi.join("nested") } else { midi.clone() };
        let path = dir.join(format!("{stem}.mid"));
        fs::write(&path, song_bytes(&three, 30 + i, 120 + 20 * i, 40 + i as u8)).unwrap();
        let valence = 0.2 + 0.05 * f64::from(i);
        if i == 0 {
            add_match(&stem, "Listing Artist", "Listing Title", Some(LISTING_ID));
            fixtures.insert(format!("id:{LISTING_ID}"), serde_json::to_value(features(0.963, LISTING_ID)).unwrap());
        } else {
            let artist = format!("Artist {i}");
            let title = format!("Title {i}");
            add_match(&stem, &artist, &title, None);
            fixtures.insert(
                format!("search:{}|{}", artist.to_lowercase(), title.to_lowercase()),
                serde_json::to_value(features(valence, &format!("id{i}"))).unwrap(),
            );
        }
        expected.push(path.to_string_lossy().into_owned());
    }
    // Same content as song_01 under another name.
    fs::copy(midi.join("song_01.mid"), midi.join("zz_copy.mid")).unwrap();
    add_match("zz_copy", "Artist 1", "Title 1", None);

    fs::write(midi.join("two_tracks.mid"), song_bytes(&three[..2], 30, 150, 50)).unwrap();
    add_match("two_tracks", "Two", "Tracks", None);
    fixtures.insert("search:two|tracks".into(), serde_json::to_value(features(0.6, "two")).unwrap());

    fs::write(midi.join("zero_valence.mid"), song_bytes(&three, 33, 170, 45)).unwrap();
    add_match("zero_valence", "Zero", "Valence", None);
    fixtures.insert("search:zero|valence".into(), serde_json::to_value(features(0.0, "zero")).unwrap());

    fs::write(midi.join("unmatched.mid"), song_bytes(&three, 31, 140, 47)).unwrap();
    fs::write(midi.join("unknown.mid"), song_bytes(&three, 32, 160, 49)).unwrap();
    add_match("unknown", "Nobody", "Nothing", None);
    fs::write(midi.join("broken.mid"), b"not a midi file").unwrap();

    let matches_path = root.join("matches.json");
    fs::write(&matches_path, serde_json::to_string_pretty(&matches).unwrap()).unwrap();
    let fixtures_path = root.join("fixtures.json");
    fs::write(&fixtures_path, serde_json::to_string_pretty(&fixtures).unwrap()).unwrap();
    expected.sort_by_key(|p| Path::new(p).file_name().unwrap().to_owned());
    MiniCorpus { root: root.into(), midi, matches: matches_path, fixtures: fixtures_path, expected }
}

/// A config small enough for every command to finish in seconds.
pub fn tiny_config(c: &MiniCorpus) -> PathBuf {
    let text = format!(
        "seed = 3\nn_layers = 1\nd_model = 16\nn_heads = 2\nd_ff = 32\nmax_len = 32\nregressor_layers = 1\n\
         dropout = 0.0\nsteps = 4\nbatch_size = 2\nchunk_len = 32\ncheckpoint_every = 2\nplateau_window = 2\n\
         max_tokens = 40\nwindow = 32\nsamples_per_pair = 1\nlr_high = 0.001\nlr_low = 0.0001\n\
         midi_root = {:?}\nmatch_table = {:?}\nmanifest = {:?}\n",
        c.midi,
        c.matches,
        c.root.join("data").join("manifest.json"),
    );
    let path = c.root.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path
}

pub fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["emogen"];
    argv.extend_from_slice(args);
    emogen::cli::run(argv)
}
