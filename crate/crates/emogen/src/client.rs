//! Audio-feature lookup with an on-disk cache.
//!
//! A lookup tries the track id first and falls back to an artist and title
//! search. Sources are either a local fixture table or the live web API.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AudioFeatures, MatchInfo};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transient failure: {0}")]
    Retryable(String),
    #[error("feature lookup failed: {0}")]
    Fatal(String),
    #[error("missing credentials: set {0}")]
    Credentials(&'static str),
    #[error("feature cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

/// One feature hit plus the service-side names of the track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fetched {
    #[serde(flatten)]
    pub features: AudioFeatures,
    #[serde(rename = "spotify_title", default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(rename = "spotify_artist", default, skip_serializing_if = "Option::is_none")]
    pub artist: Option<String>,
    #[serde(rename = "spotify_album", default, skip_serializing_if = "Option::is_none")]
    pub album: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Query {
    pub spotify_id: Option<String>,
    pub artist: Option<String>,
    pub title: Option<String>,
}

impl Query {
    pub fn by_id(id: &str) -> Self {
        Self { spotify_id: Some(id.into()), ..Self::default() }
    }

    pub fn search(artist: &str, title: &str) -> Self {
        Self { spotify_id: None, artist: Some(artist.into()), title: Some(title.into()) }
    }

    pub fn from_match(m: &MatchInfo) -> Self {
        let nonempty = |s: &str| Some(s.to_string()).filter(|s| !s.is_empty());
        Self { spotify_id: m.spotify_id.as_deref().and_then(nonempty), artist: nonempty(&m.artist), title: nonempty(&m.title) }
    }
}

/// Cache and fixture key of an id lookup.
pub fn id_key(id: &str) -> String {
    format!("id:{id}")
}

/// Cache and fixture key of a search, case-insensitive.
pub fn search_key(artist: &str, title: &str) -> String {
    format!("search:{}|{}", artist.trim().to_lowercase(), title.trim().to_lowercase())
}

pub trait FeatureSource {
    fn by_id(&mut self, id: &str) -> Result<Option<Fetched>, ClientError>;
    fn search(&mut self, artist: &str, title: &str) -> Result<Option<Fetched>, ClientError>;
}

/// Offline source backed by a key to features table.
#[derive(Clone, Debug, Default)]
pub struct FixtureSource {
    pub table: BTreeMap<String, Fetched>,
}

impl FixtureSource {
    pub fn load(path: &Path) -> Result<Self, crate::corpus::CorpusError> {
        Ok(Self { table: crate::corpus::read_json(path)? })
    }
}

impl FeatureSource for FixtureSource {
    fn by_id(&mut self, id: &str) -> Result<Option<Fetched>, ClientError> {
        Ok(self.table.get(&id_key(id)).cloned())
    }

    fn search(&mut self, artist: &str, title: &str) -> Result<Option<Fetched>, ClientError> {
        Ok(self.table.get(&search_key(artist, title)).cloned())
    }
}

pub const CLIENT_ID_VAR: &str = "SPOTIFY_CLIENT_ID";
pub const CLIENT_SECRET_VAR: &str = "SPOTIFY_CLIENT_SECRET";
/// Minimum spacing between live requests.
pub const MIN_REQUEST_GAP: Duration = Duration::from_millis(100);

/// The web API with client-credential authentication.
pub struct LiveSource {
    agent: ureq::Agent,
    client_id: String,
    client_secret: String,
    token: Option<String>,
    last_request: Option<Instant>,
    api_base: String,
    auth_url: String,
}

impl LiveSource {
    pub fn from_env() -> Result<Self, ClientError> {
        let client_id = std::env::var(CLIENT_ID_VAR).map_err(|_| ClientError::Credentials(CLIENT_ID_VAR))?;
        let client_secret = std::env::var(CLIENT_SECRET_VAR).map_err(|_| ClientError::Credentials(CLIENT_SECRET_VAR))?;
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(30))).http_status_as_error(false).build().into();
        Ok(Self {
            agent,
            client_id,
            client_secret,
            token: None,
            last_request: None,
            api_base: "https://api.spotify.com/v1".into(),
            auth_url: "https://accounts.spotify.com/api/token".into(),
        })
    }

    fn pace(&mut self) {
        if let Some(t) = self.last_request {
            let wait = MIN_REQUEST_GAP.saturating_sub(t.elapsed());
            if !wait.is_zero() {
                thread::sleep(wait);
            }
        }
        self.last_request = Some(Instant::now());
    }

    fn token(&mut self) -> Result<String, ClientError> {
        if let Some(t) = &self.token {
            return Ok(t.clone());
        }
        self.pace();
        let mut resp = self
            .agent
            .post(&self.auth_url)
            .send_form([
                ("grant_type", "client_credentials"),
                ("client_id", self.client_id.as_str()),
                ("client_secret", self.client_secret.as_str()),
            ])
            .map_err(|e| ClientError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp.body_mut().read_json().map_err(|e| ClientError::Retryable(e.to_string()))?;
        if status != 200 {
            return Err(classify(status, &body));
        }
        let token = body["access_token"].as_str().ok_or_else(|| ClientError::Fatal("token response without access_token".into()))?;
        self.token = Some(token.to_string());
        Ok(token.to_string())
    }

    fn get(&mut self, url: &str, query: &[(&str, &str)]) -> Result<Option<serde_json::Value>, ClientError> {
        let token = self.token()?;
        self.pace();
        let mut req = self.agent.get(url).header("Authorization", &format!("Bearer {token}"));
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        let mut resp = req.call().map_err(|e| ClientError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 404 {
            return Ok(None);
        }
        let body: serde_json::Value = resp.body_mut().read_json().map_err(|e| ClientError::Retryable(e.to_string()))?;
        if status == 401 {
            self.token = None;
        }
        if status != 200 {
            return Err(classify(status, &body));
        }
        Ok(Some(body))
    }
}

fn classify(status: u16, body: &serde_json::Value) -> ClientError {
    let msg = format!("HTTP {status}: {body}");
    if status == 401 || status == 429 || status >= 500 {
        ClientError::Retryable(msg)
    } else {
        ClientError::Fatal(msg)
    }
}

impl FeatureSource for LiveSource {
    fn by_id(&mut self, id: &str) -> Result<Option<Fetched>, ClientError> {
        let url = format!("{}/audio-features/{id}", self.api_base);
        match self.get(&url, &[])? {
            Some(v) if !v.is_null() => {
                let features = serde_json::from_value(v).map_err(|e| ClientError::Fatal(e.to_string()))?;
                Ok(Some(Fetched { features, title: None, artist: None, album: None }))
            }
            _ => Ok(None),
        }
    }

    fn search(&mut self, artist: &str, title: &str) -> Result<Option<Fetched>, ClientError> {
        let url = format!("{}/search", self.api_base);
        let q = format!("artist:{artist} track:{title}");
        let Some(body) = self.get(&url, &[("q", &q), ("type", "track"), ("limit", "1")])? else {
            return Ok(None);
        };
        let Some(item) = body["tracks"]["items"].get(0) else {
            return Ok(None);
        };
        let Some(id) = item["id"].as_str() else {
            return Ok(None);
        };
        let found = self.by_id(id)?;
        Ok(found.map(|f| Fetched {
            title: item["name"].as_str().map(String::from),
            artist: item["artists"][0]["name"].as_str().map(String::from),
            album: item["album"]["name"].as_str().map(String::from),
            ..f
        }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 4, base_delay: Duration::from_millis(500) }
    }
}

/// Entries written between cache flushes.
const FLUSH_EVERY: usize = 64;

/// A source wrapped with retries and a persistent query cache. Not-found
/// answers are cached too.
pub struct FeatureClient {
    source: Box<dyn FeatureSource>,
    cache: BTreeMap<String, Option<Fetched>>,
    cache_path: Option<PathBuf>,
    dirty: usize,
    pub retry: RetryPolicy,
    /// Requests that reached the source.
    pub source_calls: usize,
}

impl FeatureClient {
    pub fn new(source: Box<dyn FeatureSource>, cache_path: Option<PathBuf>) -> Result<Self, ClientError> {
        let cache = match &cache_path {
            Some(p) if p.exists() => {
                let text = std::fs::read_to_string(p).map_err(|e| ClientError::Cache { path: p.clone(), reason: e.to_string() })?;
                serde_json::from_str(&text).map_err(|e| ClientError::Cache { path: p.clone(), reason: e.to_string() })?
            }
            _ => BTreeMap::new(),
        };
        Ok(Self { source, cache, cache_path, dirty: 0, retry: RetryPolicy::default(), source_calls: 0 })
    }

    fn cached<F>(&mut self, key: String, mut call: F) -> Result<Option<Fetched>, ClientError>
    where
        F: FnMut(&mut dyn FeatureSource) -> Result<Option<Fetched>, ClientError>,
    {
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let mut attempt = 0;
        let value = loop {
            self.source_calls += 1;
            match call(self.source.as_mut()) {
                Ok(v) => break v,
                Err(ClientError::Retryable(msg)) if attempt + 1 < self.retry.attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    log::warn!("{key}: {msg}; retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        self.cache.insert(key, value.clone());
        self.dirty += 1;
        if self.dirty >= FLUSH_EVERY {
            self.flush()?;
        }
        Ok(value)
    }

    /// Looks up features by id, then by artist and title.
    pub fn fetch_audio_features(&mut self, query: &Query) -> Result<Option<Fetched>, ClientError> {
        if let Some(id) = &query.spotify_id {
            if let Some(hit) = self.cached(id_key(id), |s| s.by_id(id))? {
                return Ok(Some(hit));
            }
        }
        if let (Some(artist), Some(title)) = (&query.artist, &query.title) {
            return self.cached(search_key(artist, title), |s| s.search(artist, title));
        }
        Ok(None)
    }

    /// Writes pending cache entries with an atomic rename.
    pub fn flush(&mut self) -> Result<(), ClientError> {
        if let (Some(p), true) = (&self.cache_path, self.dirty > 0) {
            let err = |reason: String| ClientError::Cache { path: p.clone(), reason };
            let text = serde_json::to_vec_pretty(&self.cache).map_err(|e| err(e.to_string()))?;
            crate::checkpoint::write_atomic(p, &text).map_err(|e| err(e.to_string()))?;
        }
        self.dirty = 0;
        Ok(())
    }
}

impl Drop for FeatureClient {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("{e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn listing_features() -> AudioFeatures {
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
            valence: 0.963,
            tempo: 82.614,
            kind: "audio_features".into(),
            id: "5VPOrzHyuULaiCKnwQNNCN".into(),
            uri: "spotify:track:5VPOrzHyuULaiCKnwQNNCN".into(),
            track_href: String::new(),
            analysis_url: String::new(),
            duration_ms: 210387,
            time_signature: 4,
        }
    }

    fn fixture() -> FixtureSource {
        let hit = Fetched { features: listing_features(), title: None, artist: None, album: None };
        let mut table = BTreeMap::new();
        table.insert(id_key("5VPOrzHyuULaiCKnwQNNCN"), hit.clone());
        table.insert(search_key("Mungo Jerry", "In The Summertime"), hit);
        FixtureSource { table }
    }

    #[test]
    fn id_then_search_then_not_found() {
        let mut c = FeatureClient::new(Box::new(fixture()), None).unwrap();
        let hit = c.fetch_audio_features(&Query::by_id("5VPOrzHyuULaiCKnwQNNCN")).unwrap().unwrap();
        assert_eq!(hit.features.valence, 0.963);
        let q = Query { spotify_id: Some("unknown".into()), artist: Some("mungo jerry ".into()), title: Some("In the Summertime".into()) };
        assert!(c.fetch_audio_features(&q).unwrap().is_some());
        assert!(c.fetch_audio_features(&Query::search("Nobody", "Nothing")).unwrap().is_none());
    }

    #[test]
    fn repeated_queries_hit_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let q = Query::by_id("5VPOrzHyuULaiCKnwQNNCN");
        {
            let mut c = FeatureClient::new(Box::new(fixture()), Some(path.clone())).unwrap();
            c.fetch_audio_features(&q).unwrap();
            c.fetch_audio_features(&q).unwrap();
            assert_eq!(c.source_calls, 1);
        }
        let mut c = FeatureClient::new(Box::new(FixtureSource::default()), Some(path)).unwrap();
        assert_eq!(c.fetch_audio_features(&q).unwrap().unwrap().features.valence, 0.963);
        assert_eq!(c.source_calls, 0);
    }

    struct Flaky {
        failures: u32,
    }

    impl FeatureSource for Flaky {
        fn by_id(&mut self, _: &str) -> Result<Option<Fetched>, ClientError> {
            if self.failures > 0 {
                self.failures -= 1;
                return Err(ClientError::Retryable("HTTP 503".into()));
            }
            Ok(None)
        }

        fn search(&mut self, _: &str, _: &str) -> Result<Option<Fetched>, ClientError> {
            Ok(None)
        }
    }

    #[test]
    fn transient_errors_are_retried() {
        let mut c = FeatureClient::new(Box::new(Flaky { failures: 2 }), None).unwrap();
        c.retry = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        assert!(c.fetch_audio_features(&Query::by_id("x")).unwrap().is_none());
        assert_eq!(c.source_calls, 3);
        let mut c = FeatureClient::new(Box::new(Flaky { failures: 5 }), None).unwrap();
        c.retry = RetryPolicy { attempts: 2, base_delay: Duration::from_millis(1) };
        assert!(matches!(c.fetch_audio_features(&Query::by_id("x")), Err(ClientError::Retryable(_))));
    }
}
