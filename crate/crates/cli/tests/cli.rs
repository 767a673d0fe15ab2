use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn taxbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxbox"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn train_into(config: &Path, out: &Path) {
    let o = taxbox(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
}

#[test]
fn train_eval_complete() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_into(&fixture("config.txt"), &run);
    for f in ["model.ckpt", "train_log.tsv", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().starts_with("# effective-config\n"));
    let ckpt = run.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let ranks = dir.path().join("ranks.tsv");
    let eval = taxbox(&["eval", "--checkpoint", ckpt, "--split", "test", "--ranks", ranks.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report = stdout(&eval);
    assert!(report.starts_with("metric\tvalue\nqueries\t4\nskipped\t0\n"), "{report}");
    let again = taxbox(&["report", "--ranks", ranks.to_str().unwrap()]);
    assert_eq!(stdout(&again), report);

    let top1 = taxbox(&["complete", "--checkpoint", ckpt, "--queries", fixture("queries.tsv").to_str().unwrap(), "--topk", "1"]);
    assert!(top1.status.success(), "{}", stderr(&top1));
    let rows: Vec<String> = stdout(&top1).lines().map(String::from).collect();
    assert_eq!(rows[0], "query_id\tparent_id\tchild_id\tscore\trank");
    let ids: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(ids, ["novel", "7"]);
    assert!(rows[1..].iter().all(|r| r.ends_with("\t1")));

    let mut mixed = fs::read_to_string(fixture("queries.tsv")).unwrap();
    mixed.push_str(&fs::read_to_string(fixture("unknown_queries.tsv")).unwrap());
    let mixed_path = dir.path().join("mixed.tsv");
    fs::write(&mixed_path, mixed).unwrap();
    let partial = taxbox(&["complete", "--checkpoint", ckpt, "--queries", mixed_path.to_str().unwrap(), "--topk", "3"]);
    assert!(partial.status.success());
    assert_eq!(stdout(&partial).lines().count(), 1 + 2 * 3);
    assert!(stderr(&partial).contains("error\tghost\t"), "{}", stderr(&partial));

    let none = taxbox(&["complete", "--checkpoint", ckpt, "--queries", fixture("unknown_queries.tsv").to_str().unwrap()]);
    assert_eq!(none.status.code(), Some(3));
}

#[test]
fn training_is_reproducible_and_dumped_config_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train_into(&fixture("config.txt"), &a);
    train_into(&fixture("config.txt"), &b);
    train_into(&a.join("config.txt"), &c);
    let bytes = |d: &Path| fs::read(d.join("model.ckpt")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&c));
    assert_eq!(
        fs::read_to_string(a.join("config.txt")).unwrap(),
        fs::read_to_string(c.join("config.txt")).unwrap()
    );
}

#[test]
fn report_matches_golden() {
    let o = taxbox(&["report", "--ranks", fixture("ranks.tsv").to_str().unwrap(), "--skipped", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(fixture("report.golden")).unwrap());
}

#[test]
fn gen_dataset_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &Path, seed: &str| {
        taxbox(&[
            "gen-dataset",
            "--terms",
            fixture("terms.tsv").to_str().unwrap(),
            "--edges",
            fixture("edges.tsv").to_str().unwrap(),
            "--test-frac",
            "0.25",
            "--valid-count",
            "2",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let (x, y, z) = (dir.path().join("x"), dir.path().join("y"), dir.path().join("z"));
    for (out, seed) in [(&x, "4"), (&y, "4"), (&z, "5")] {
        let o = gen(out, seed);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path, f: &str| fs::read_to_string(d.join(f)).unwrap();
    for f in ["split.tsv", "seed_terms.tsv", "seed_edges.tsv"] {
        assert_eq!(read(&x, f), read(&y, f));
    }
    assert_ne!(read(&x, "split.tsv"), read(&z, "split.tsv"));
    let split = read(&x, "split.tsv");
    assert_eq!(split.lines().filter(|l| l.ends_with("\ttest")).count(), 6);
    assert_eq!(split.lines().filter(|l| l.ends_with("\tvalid")).count(), 2);
    assert!(!split.lines().any(|l| l.starts_with("0\t")));
    assert_eq!(read(&x, "seed_terms.tsv").lines().count(), 24 - 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(taxbox(&["train", "--out", out]).status.code(), Some(2));
    assert_eq!(taxbox(&["eval", "--checkpoint", "x", "--split", "train"]).status.code(), Some(2));
    let too_many = taxbox(&[
        "gen-dataset",
        "--terms",
        fixture("terms.tsv").to_str().unwrap(),
        "--edges",
        fixture("edges.tsv").to_str().unwrap(),
        "--test-count",
        "30",
        "--out",
        out,
    ]);
    assert_eq!(too_many.status.code(), Some(2));
    let missing = taxbox(&["train", "--config", dir.path().join("nope.txt").to_str().unwrap(), "--out", out]);
    assert_eq!(missing.status.code(), Some(3));
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "terms = x\nd_box = many\n").unwrap();
    assert_eq!(taxbox(&["train", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}
