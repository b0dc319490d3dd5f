//! Evaluation report files.

use std::path::Path;

use emogen_core::evaluate::EmotionReport;

use crate::corpus::CorpusError;

/// Flat `model,valence,arousal,error` rows plus one `mean` row per model.
pub fn emotion_csv(report: &EmotionReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "valence", "arousal", "error"])?;
    for (name, r) in report {
        for p in &r.per_pair {
            w.write_record([name.as_str(), &p.valence.to_string(), &p.arousal.to_string(), &p.error.to_string()])?;
        }
        w.write_record([name.as_str(), "mean", "mean", &r.mean_error.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write_emotion_report(dir: &Path, stem: &str, report: &EmotionReport) -> Result<(), CorpusError> {
    crate::corpus::write_json(&dir.join(format!("{stem}.json")), report)?;
    let path = dir.join(format!("{stem}.csv"));
    let text = emotion_csv(report).map_err(|e| CorpusError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
    crate::checkpoint::write_atomic(&path, text.as_bytes()).map_err(|source| CorpusError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use emogen_core::evaluate::{ModelReport, PairError};

    #[test]
    fn csv_layout() {
        let mut report = EmotionReport::new();
        report.insert(
            "continuous-concatenated".into(),
            ModelReport { per_pair: vec![PairError { valence: -0.8, arousal: 0.4, error: 0.25 }], mean_error: 0.25 },
        );
        let text = emotion_csv(&report).unwrap();
        assert_eq!(text, "model,valence,arousal,error\ncontinuous-concatenated,-0.8,0.4,0.25\ncontinuous-concatenated,mean,mean,0.25\n");
    }
}
