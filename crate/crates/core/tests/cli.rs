use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use masked_diffuse::checkpoint::Checkpoint;
use masked_diffuse::guidance::mbr_loss;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_masked-diffuse"));
    c.env_remove("MASKED_DIFFUSE_OUT");
    c
}

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_corpus.jsonl")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prepare_is_deterministic_and_counts_match_the_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(&["prepare", s(&toy()), "--out", s(d.path())]);
    }
    for f in ["vocab.json", "stats.json", "importance.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }

    // The toy corpus is already space-separated, so a plain split is an
    // independent tokenizer for it.
    let mut tf: BTreeMap<String, u64> = BTreeMap::new();
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    let mut docs = 0;
    for line in fs::read_to_string(toy()).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let words: Vec<String> = v["text"].as_str().unwrap().split(' ').map(str::to_lowercase).collect();
        for w in &words {
            *tf.entry(w.clone()).or_default() += 1;
        }
        for w in words.iter().collect::<HashSet<_>>() {
            *df.entry(w.clone()).or_default() += 1;
        }
        docs += 1;
    }
    let vocab: BTreeMap<String, u32> =
        serde_json::from_str(&fs::read_to_string(a.path().join("vocab.json")).unwrap()).unwrap();
    let stats: Value = serde_json::from_str(&fs::read_to_string(a.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["documents"], docs);
    assert_eq!(vocab.len(), tf.len() + 3);
    for (w, &n) in &tf {
        let id = vocab[w] as usize;
        assert_eq!(stats["token_frequency"][id], n, "{w}");
        assert_eq!(stats["document_frequency"][id], df[w], "{w}");
    }
    let dump = fs::read_to_string(a.path().join("importance.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), docs);
}

struct Trained {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
}

const TRAIN_FLAGS: [&str; 12] = [
    "--steps", "40", "--hidden", "16", "--layers", "1", "--diffusion-steps", "30", "--batch-size", "4", "--seed", "5",
];

fn train_into(dir: &Path) -> PathBuf {
    let data = toy();
    let mut args = vec!["train", "--train-data", s(&data), "--out", s(dir)];
    args.extend(TRAIN_FLAGS);
    let out = ok(&args);
    PathBuf::from(out.trim())
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = train_into(dir.path());
        Trained { _dir: dir, checkpoint }
    })
}

#[test]
fn training_is_seed_deterministic_and_writes_its_artifacts() {
    let t = trained();
    let other = tempfile::tempdir().unwrap();
    let again = train_into(other.path());
    assert_eq!(fs::read(&t.checkpoint).unwrap(), fs::read(&again).unwrap());
    let dir = t.checkpoint.parent().unwrap();
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 40);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["train"]["steps"], 40);
    assert_eq!(cfg["model"]["steps"], 30);
}

fn lines(out: &str) -> Vec<String> {
    out.lines().map(str::to_owned).collect()
}

#[test]
fn sample_honours_length_and_count() {
    let ck = trained().checkpoint.to_str().unwrap();
    let out = lines(&ok(&["sample", "--checkpoint", ck, "--control", "length=7", "--samples", "5", "--seed", "3"]));
    assert_eq!(out.len(), 5);
    for l in &out {
        assert_eq!(l.split(' ').count(), 7, "{l}");
    }
    let again = lines(&ok(&["sample", "--checkpoint", ck, "--length", "7", "--samples", "5", "--seed", "3"]));
    assert_eq!(out, again);
}

#[test]
fn mbr_picks_the_brute_force_medoid() {
    let t = trained();
    let ck = t.checkpoint.to_str().unwrap();
    let cands = lines(&ok(&["sample", "--checkpoint", ck, "--length", "6", "--samples", "5", "--seed", "9"]));
    let chosen = lines(&ok(&["sample", "--checkpoint", ck, "--length", "6", "--samples", "5", "--seed", "9", "--mbr"]));
    assert_eq!(chosen.len(), 1);

    let vocab = Checkpoint::load(&t.checkpoint).unwrap().vocabulary().unwrap();
    let ids: Vec<Vec<u32>> = cands.iter().map(|c| vocab.tokenize(c, 64).unwrap().ids).collect();
    let risk = |i: usize| -> f64 { (0..ids.len()).filter(|&j| j != i).map(|j| mbr_loss(&ids[i], &ids[j])).sum() };
    let best = (0..ids.len()).min_by(|&a, &b| risk(a).total_cmp(&risk(b))).unwrap();
    assert_eq!(chosen[0], cands[best]);
}

#[test]
fn errors_report_kind_and_exit_code() {
    let o = run(&["sample", "--checkpoint", "/nonexistent/ck.json", "--length", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=io"));

    let o = run(&["sample", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=usage"));

    let ck = trained().checkpoint.to_str().unwrap();
    let o = run(&["sample", "--checkpoint", ck, "--control", "colour=blue"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=invalid_control"));

    let o = run(&["sample", "--checkpoint", ck, "--control", "content=food:japanese", "--length", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=config"));
}
