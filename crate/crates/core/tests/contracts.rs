//! File contracts shared with external embedding extractors.
//!
//! Files here are written by hand the way a separate extractor process would
//! write them (plain CSV, its own float formatting, sparse metadata), then
//! consumed through the library and the binary.

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use pangram_fusion::dataset::{load_manifest, FeatureMatrix, FeatureSet, Label};
use pangram_fusion::Error;
use rand::{Rng, SeedableRng};

const N: usize = 80;

fn write_manifest(path: &Path) {
    let mut s = String::from(
        "sample_id,participant_id,recording_date,cohort,label,age,sex,ethnicity,disease_duration,audio_path\n",
    );
    for i in 0..N {
        let pd = (i / 2) % 2 == 0;
        let (label, dur) = if pd { ("PD", "4.5") } else { ("Control", "") };
        // Metadata is sparse on purpose: blank age, sex and ethnicity cells.
        let age = if i % 7 == 0 { String::new() } else { format!("{}", 50 + i % 30) };
        let sex = ["Male", "female", ""][i % 3];
        let eth = ["White", "Black or African American", "asian", ""][i % 4];
        writeln!(s, "s{i:03},p{:03},2021-03-{:02},home,{label},{age},{sex},{eth},{dur},audio/s{i:03}.wav", i / 2, 1 + i % 28).unwrap();
    }
    std::fs::write(path, s).unwrap();
}

/// Mean-pooled embeddings as an extractor would emit them: header of
/// `sample_id` plus indexed dims, rows in arbitrary order, `%.7g`-style floats.
fn write_embeddings(path: &Path, dim: usize, seed: u64, shift: f64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("sample_id");
    for j in 0..dim {
        write!(s, ",e{j}").unwrap();
    }
    s.push('\n');
    for i in (0..N).rev() {
        write!(s, "s{i:03}").unwrap();
        let y = if (i / 2) % 2 == 0 { shift } else { -shift };
        for _ in 0..dim {
            let v: f64 = rng.random_range(-1.0..1.0) + y;
            write!(s, ",{v:.7e}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn manifest_with_sparse_metadata_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("manifest.csv");
    write_manifest(&p);
    let recs = load_manifest(&p).unwrap();
    assert_eq!(recs.len(), N);
    assert_eq!(recs.iter().filter(|r| r.label == Label::Pd).count(), N / 2);
    assert!(recs.iter().any(|r| r.age.is_none() && r.sex.is_none()));
    assert!(recs.iter().filter(|r| r.label == Label::Control).all(|r| r.disease_duration.is_none()));
    assert_eq!(recs[3].audio_path.as_deref(), Some("audio/s003.wav"));
}

#[test]
fn embedding_widths_match_reference_extractors() {
    let tmp = tempfile::tempdir().unwrap();
    for (set, dim) in [(FeatureSet::Wavlm, 1024), (FeatureSet::Imagebind, 1024), (FeatureSet::W2v2, 768)] {
        let p = tmp.path().join(format!("{set}.csv"));
        write_embeddings(&p, dim, 3, 0.0);
        let m = FeatureMatrix::load_csv(set.as_str(), &p).unwrap();
        assert_eq!((m.len(), m.dim()), (N, dim));
        m.check_expected_dim(set).unwrap();
        assert!(m.contains("s000") && m.row("s079").is_some());
    }
    // A truncated export is caught before training.
    let p = tmp.path().join("short.csv");
    write_embeddings(&p, 767, 3, 0.0);
    let m = FeatureMatrix::load_csv("w2v2", &p).unwrap();
    assert!(matches!(m.check_expected_dim(FeatureSet::W2v2), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn malformed_embedding_rows_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.csv");
    std::fs::write(&p, "sample_id,e0,e1\ns1,0.1,0.2\ns2,0.3,nan\n").unwrap();
    assert!(matches!(FeatureMatrix::load_csv("w2v2", &p), Err(Error::MalformedRow { row: 2, .. })));
    std::fs::write(&p, "sample_id,e0,e1\ns1,0.1\n").unwrap();
    assert!(matches!(FeatureMatrix::load_csv("w2v2", &p), Err(Error::MalformedRow { row: 1, .. })));
    std::fs::write(&p, "id,e0\ns1,0.1\n").unwrap();
    assert!(matches!(FeatureMatrix::load_csv("w2v2", &p), Err(Error::BadHeader(_))));
}

#[test]
fn binary_trains_fusion_on_external_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.csv");
    write_manifest(&manifest);
    write_embeddings(&tmp.path().join("w2v2.csv"), 768, 5, 0.3);
    write_embeddings(&tmp.path().join("wavlm.csv"), 1024, 6, 0.3);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, br#"{"learning_rate": 0.002, "num_epochs": 4}"#).unwrap();
    let out = tmp.path().join("run");
    let arg = |p: &Path| p.to_str().unwrap().to_string();
    let o = Command::new(env!("CARGO_BIN_EXE_pangram-fusion"))
        .args(["train", "--manifest", &arg(&manifest)])
        .args(["--features", &format!("w2v2={}", arg(&tmp.path().join("w2v2.csv")))])
        .args(["--features", &format!("wavlm={}", arg(&tmp.path().join("wavlm.csv")))])
        .args(["--config", &arg(&cfg), "--out", &arg(&out)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["modalities"], serde_json::json!(["w2v2", "wavlm"]));
}
