use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mmembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmembed"))
        .args(args)
        .env("MMEMBED_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmembed(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Four concepts with five words each, small enough to train in a second.
fn synth(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("synth");
    ok(&[
        "synth", "--out", p(&out), "--concepts", "4", "--words-per-concept", "5",
        "--images-per-concept", "50", "--feature-dim", "64", "--num-triplets", "400",
        "--noise-words", "30",
    ]);
    out
}

fn train_args<'a>(data: &'a Path, ckpt: &'a Path, variant: &'a str, seed: &'a str) -> Vec<String> {
    [
        "train", "--corpus", p(&data.join("corpus.tsv")), "--features", p(&data.join("features.tsv")),
        "--feature-dim", "64", "--variant", variant, "--dim-embed", "8", "--dim-state", "16",
        "--negatives", "8", "--batch", "16", "--epochs", "5", "--min-count", "1", "--seed", seed,
        "--threads", "1", "--out", p(ckpt),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_owned(args: &[String]) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn build_vocab_counts_lines_and_is_stable() {
    let dir = TempDir::new().unwrap();
    let corpus = write(
        &dir,
        "c.tsv",
        "i1\tthe red car is fast\ni1\ta blue car in the rain\ni2\tthe red dress for summer\n",
    );
    let v1 = dir.path().join("v1.tsv");
    let v2 = dir.path().join("v2.tsv");
    let stdout = ok(&["build-vocab", "--corpus", p(&corpus), "--min-count", "1", "--out", p(&v1)]);
    ok(&["build-vocab", "--corpus", p(&corpus), "--min-count", "1", "--out", p(&v2)]);
    let text = std::fs::read_to_string(&v1).unwrap();
    // 12 distinct words plus the three reserved tokens.
    assert_eq!(text.lines().count(), 15);
    assert!(stdout.contains("words=15"));
    assert_eq!(std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());

    let missing = dir.path().join("nope.tsv");
    let out = mmembed(&["build-vocab", "--corpus", p(&missing), "--out", p(&v1)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn malformed_corpus_line_exits_2() {
    let dir = TempDir::new().unwrap();
    let corpus = write(&dir, "c.tsv", "i1\tok sentence here now\nno tab on this line\n");
    let out = mmembed(&["build-vocab", "--corpus", p(&corpus), "--out", p(&dir.path().join("v"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn train_eval_export_nn() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let ckpt = dir.path().join("a.ckpt");
    let stdout = run_owned(&train_args(&data, &ckpt, "a", "7"));
    assert!(stdout.contains("steps="));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("a.ckpt.log.csv")).unwrap();
    assert!(log.lines().count() > 1);

    let triplets = data.join("triplets.tsv");
    let from_ckpt = ok(&["eval", "--checkpoint", p(&ckpt), "--triplets", p(&triplets)]);
    assert!(from_ckpt.contains("scored=400"));
    assert!(from_ckpt.contains("skipped=0"));

    let exported = dir.path().join("a.txt");
    ok(&["export", "--checkpoint", p(&ckpt), "--out", p(&exported)]);
    let from_text = ok(&["eval", "--embeddings", p(&exported), "--triplets", p(&triplets)]);
    let precision = |s: &str| s.lines().find(|l| l.starts_with("precision=")).unwrap().to_owned();
    assert_eq!(precision(&from_ckpt), precision(&from_text));

    for concept in 0..4 {
        let word = format!("c{concept}w0");
        let hits = ok(&["nn", "--embeddings", p(&exported), "--word", &word, "-k", "4"]);
        let same = hits
            .lines()
            .filter(|l| l.starts_with(&format!("c{concept}w")))
            .count();
        assert!(same >= 3, "{word}: {hits}");
    }
    let out = mmembed(&["nn", "--embeddings", p(&exported), "--word", "zebra"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_same_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    run_owned(&train_args(&data, &a, "c", "7"));
    run_owned(&train_args(&data, &b, "c", "7"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn feature_variants_need_features() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir);
    let out = mmembed(&[
        "train", "--corpus", p(&data.join("corpus.tsv")), "--variant", "b", "--min-count", "1",
        "--out", p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("features"));
}

#[test]
fn eval_fixture_and_empty_file() {
    let dir = TempDir::new().unwrap();
    // Unit vectors at 0, 30, 80, 100 and 170 degrees.
    let at = |deg: f64| format!("{:.9} {:.9}", deg.to_radians().cos(), deg.to_radians().sin());
    let emb = write(
        &dir,
        "e.txt",
        &format!("5 2\na {}\nb {}\nc {}\nd {}\nf {}\n", at(0.0), at(30.0), at(80.0), at(100.0), at(170.0)),
    );
    let triplets = write(&dir, "t.tsv", "a\tb\tc\nc\td\ta\na\tf\tb\n");
    let out = ok(&["eval", "--embeddings", p(&emb), "--triplets", p(&triplets)]);
    assert!(out.contains("precision 0.667"), "{out}");
    assert!(out.contains("scored=3"));
    assert!(out.contains("skipped=0"));

    let empty = write(&dir, "empty.tsv", "");
    let out = mmembed(&["eval", "--embeddings", p(&emb), "--triplets", p(&empty)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mine_and_clean() {
    let dir = TempDir::new().unwrap();
    let clicks = write(
        &dir,
        "clicks.tsv",
        "hair styles\ti1\t9\nhair styles\ti2\t6\ncake ideas\ti3\t4\n",
    );
    let ann = write(&dir, "ann.tsv", "i1\tponytail\ni2\thair tutorial\ni3\tfrosting\n");
    let pool = write(&dir, "pool.txt", "pink nail\nhair colors\n");
    let out = dir.path().join("mined.tsv");
    ok(&[
        "mine", "--clicklog", p(&clicks), "--annotations", p(&ann), "--pool", p(&pool),
        "--out", p(&out), "--seed", "1",
    ]);
    let mined = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = mined.lines().collect();
    assert_eq!(lines.len(), 2);
    // "hair tutorial" shares a word with its query; "hair colors" can only
    // be drawn for the cake query.
    assert!(lines[0].starts_with("cake ideas\tfrosting\t"));
    assert_eq!(lines[1], "hair styles\tponytail\tpink nail");

    let votes = write(
        &dir,
        "votes.tsv",
        "hair style\tponytail\tpink nail\tA,A,A,D,R\nsummer\tlunch\tboat\tA,A,D,U\n",
    );
    let gold = dir.path().join("gold.tsv");
    let stdout = ok(&["clean", "--votes", p(&votes), "--out", p(&gold)]);
    assert!(stdout.contains("accepted=1"));
    assert_eq!(
        std::fs::read_to_string(&gold).unwrap(),
        "hair style\tponytail\tpink nail\n"
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "run.cfg", "# synthetic run\nnum_triplets = 7\nfeature-dim=40\nimages_per_concept=2\n");
    let out = dir.path().join("s");
    let stdout = ok(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert!(stdout.contains("triplets=7"));
    let stdout = ok(&["synth", "--config", p(&cfg), "--out", p(&out), "--num-triplets", "9"]);
    assert!(stdout.contains("triplets=9"));

    let bad = write(&dir, "bad.cfg", "no-such-flag = 1\n");
    assert_eq!(mmembed(&["synth", "--config", p(&bad), "--out", p(&out)]).status.code(), Some(2));
}
