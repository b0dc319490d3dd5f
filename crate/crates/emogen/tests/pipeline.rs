mod common;

use std::fs;

use common::*;
use emogen::corpus::{read_json, Dataset, DatasetManifest, Split};
use emogen::files::read_tokens;
use emogen_core::tokenizer::Vocab;

#[test]
fn offline_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let c = mini_corpus(dir.path());
    let cfg = tiny_config(&c);
    let cfg_s = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    // build-dataset
    assert_eq!(run(&["build-dataset", "--config", cfg_s, "--out", data_s, "--offline", "--fixtures", c.fixtures.to_str().unwrap()]), 0);
    let dataset: Dataset = read_json(&data.join("dataset.json")).unwrap();
    // 12 songs + two_tracks + zero_valence + unknown; the copy is deduplicated,
    // unmatched has no entry and broken does not parse.
    assert_eq!(dataset.len(), 15);
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    let listing = raw.as_object().unwrap().values().find(|r| r["matched_features"]["spotify_id"] == LISTING_ID).expect("listing record");
    assert_eq!(listing["matched_features"]["spotify_audio_features"]["valence"], 0.963);
    assert_eq!(listing["midi_features"]["n_instruments"], 3);

    let manifest: DatasetManifest = read_json(&data.join("manifest.json")).unwrap();
    let files: Vec<&str> = manifest.entries.iter().map(|e| e.file.as_str()).collect();
    assert_eq!(files, c.expected.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(manifest.split(Split::Test).count(), 1);
    assert_eq!(manifest.split(Split::Test).next().unwrap().file, *c.expected.last().unwrap());
    let listing_entry = manifest.entries.iter().find(|e| e.file.ends_with("song_00.mid")).unwrap();
    assert!((listing_entry.condition.valence - 0.926).abs() < 1e-12);

    let summary: serde_json::Value = read_json(&data.join("build_summary.json")).unwrap();
    assert_eq!(summary["duplicates"], 1);
    assert_eq!(summary["skipped"].as_array().unwrap().len(), 1);
    let requests = summary["feature_requests"].as_u64().unwrap();
    assert!(requests > 0);

    // A second build is served from the cache.
    let again = dir.path().join("data2");
    let cache = data.join("feature_cache.json");
    let cfg2 = dir.path().join("cached.cfg");
    fs::write(&cfg2, format!("{}feature_cache = {:?}\n", fs::read_to_string(&cfg).unwrap(), cache)).unwrap();
    assert_eq!(
        run(&[
            "build-dataset",
            "--config",
            cfg2.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
            "--offline",
            "--fixtures",
            c.fixtures.to_str().unwrap()
        ]),
        0
    );
    let summary2: serde_json::Value = read_json(&again.join("build_summary.json")).unwrap();
    assert_eq!(summary2["feature_requests"], 0);
    assert_eq!(fs::read(again.join("manifest.json")).unwrap(), fs::read(data.join("manifest.json")).unwrap());

    // pretrain, finetune, generate, evaluate
    let pre = dir.path().join("pre");
    assert_eq!(run(&["pretrain", "--config", cfg_s, "--out", pre.to_str().unwrap()]), 0);
    let metrics = fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "lr", "grad_norm", "tokens_per_s"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let vanilla = pre.join("model.ckpt");
    let ft = dir.path().join("ft");
    assert_eq!(
        run(&[
            "finetune",
            "--config",
            cfg_s,
            "--out",
            ft.to_str().unwrap(),
            "--variant",
            "continuous-concatenated",
            "--checkpoint",
            vanilla.to_str().unwrap()
        ]),
        0
    );
    let model = ft.join("model.ckpt");

    let gen = |name: &str| {
        let out = dir.path().join(name);
        let code = run(&[
            "generate",
            "--config",
            cfg_s,
            "--out",
            out.to_str().unwrap(),
            "--checkpoint",
            model.to_str().unwrap(),
            "--valence",
            "-0.8",
            "--arousal",
            "0.4",
        ]);
        assert_eq!(code, 0);
        out
    };
    let (g1, g2) = (gen("g1"), gen("g2"));
    for file in ["generated.tokens", "generated.mid"] {
        assert_eq!(fs::read(g1.join(file)).unwrap(), fs::read(g2.join(file)).unwrap(), "{file}");
    }
    assert_eq!(read_tokens(&g1.join("generated.tokens"), Vocab::CONDITIONAL).unwrap().len(), 40);

    let schedule = dir.path().join("schedule.json");
    fs::write(
        &schedule,
        r#"{"mode":"linear","breakpoints":[{"token":0,"valence":-0.8,"arousal":-0.8},{"token":30,"valence":0.8,"arousal":0.8}]}"#,
    )
    .unwrap();
    let sched_out = dir.path().join("sched");
    assert_eq!(
        run(&[
            "generate",
            "--config",
            cfg_s,
            "--out",
            sched_out.to_str().unwrap(),
            "--checkpoint",
            model.to_str().unwrap(),
            "--schedule",
            schedule.to_str().unwrap()
        ]),
        0
    );

    let ep = dir.path().join("ep");
    assert_eq!(run(&["eval-predict", "--config", cfg_s, "--out", ep.to_str().unwrap(), "--checkpoint", model.to_str().unwrap()]), 0);
    let pred: serde_json::Value = read_json(&ep.join("prediction.json")).unwrap();
    let (top1, top5) = (pred["top1"].as_f64().unwrap(), pred["top5"].as_f64().unwrap());
    assert!(top1 <= top5 && pred["nll"].as_f64().unwrap().is_finite());

    let reg = dir.path().join("reg");
    assert_eq!(run(&["train-regressor", "--config", cfg_s, "--out", reg.to_str().unwrap()]), 0);
    let ee = dir.path().join("ee");
    assert_eq!(
        run(&[
            "eval-emotion",
            "--config",
            cfg_s,
            "--out",
            ee.to_str().unwrap(),
            "--checkpoint",
            reg.join("regressor.ckpt").to_str().unwrap(),
            "--checkpoint",
            model.to_str().unwrap(),
            "--tokens",
            "12",
        ]),
        0
    );
    let csv = fs::read_to_string(ee.join("emotion_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 26);
    assert!(fs::read_to_string(ee.join("config.resolved")).unwrap().contains("max_tokens = 12"));
}

#[test]
fn offline_build_without_fixtures_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = mini_corpus(dir.path());
    let cfg = tiny_config(&c);
    let out = dir.path().join("o");
    assert_eq!(run(&["build-dataset", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--offline"]), 1);
    assert!(out.join("config.resolved").exists());
}

#[test]
fn vanilla_generation_rejects_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let c = mini_corpus(dir.path());
    let cfg = tiny_config(&c);
    let pre = dir.path().join("pre");
    assert_eq!(run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", pre.to_str().unwrap()]), 0);
    let ckpt = pre.join("model.ckpt");
    let out = dir.path().join("g");
    let base = ["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    assert_eq!(run(&base), 0);
    let mut with_cond = base.to_vec();
    with_cond.extend(["--valence", "0.4", "--arousal", "0.0"]);
    assert_eq!(run(&with_cond), 1);
}
