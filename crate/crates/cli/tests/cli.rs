use std::path::Path;
use std::process::{Command, Output};

use wordorder::grammar::LanguageSpec;
use wordorder::metrics::OrderHistogram;

const TINY: &str = "\
# small enough for a test
language = free-markers
max_segments = 2
trajectory_limit = 24
max_epochs = 2
hidden = 8
grid_hidden = 8
grid_batch = 8
grid_seeds = 0,1
generations = 2
metric_samples = 2
eval_limit = 10
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wordorder"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.txt");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn same_file(a: &Path, b: &Path) {
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{} vs {}", a.display(), b.display());
}

#[test]
fn full_forward_iconic_markers_corpus() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["--out", s(d.path()), "gen-corpus", "--language", "forward-iconic", "--markers"]);
    assert!(out.contains("88572 pairs"), "{out}");
    let lines: usize = ["train", "dev", "test"]
        .iter()
        .map(|n| std::fs::read_to_string(d.path().join("corpus").join(format!("{n}.tsv"))).unwrap().lines().count())
        .sum();
    assert!(lines >= 88572);
    let cfg = std::fs::read_to_string(d.path().join("config.txt")).unwrap();
    assert!(cfg.contains("language = forward-iconic") && cfg.contains("markers = true"));
    assert!(d.path().join("seeds.txt").exists());
}

#[test]
fn corpus_reproduces_from_recorded_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "gen-corpus"]);
    ok(&["--config", s(&a.join("config.txt")), "--out", s(&b), "gen-corpus"]);
    for f in ["corpus/train.tsv", "corpus/dev.tsv", "corpus/test.tsv", "corpus/language.txt", "config.txt", "seeds.txt"] {
        same_file(&a.join(f), &b.join(f));
    }
}

#[test]
fn set_overrides_file_and_flags_override_set() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let out = d.path().join("o");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--set",
        "corpus_seed=7",
        "--set",
        "language=free",
        "--language",
        "forward-iconic",
        "gen-corpus",
    ]);
    let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains("corpus_seed = 7"));
    assert!(text.contains("language = forward-iconic"));
    assert!(text.contains("trajectory_limit = 24"));
}

#[test]
fn train_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "--jobs", "1", "train"]);
    ok(&["--config", s(&a.join("config.txt")), "--out", s(&b), "--jobs", "2", "train"]);
    for f in [
        "runs/seed-0/checkpoint.bin",
        "runs/seed-1/checkpoint.bin",
        "runs/seed-1/curve.csv",
        "runs/seed-1/manifest.json",
        "search/h8-b8/checkpoint.bin",
        "summary.csv",
        "seeds.txt",
    ] {
        same_file(&a.join(f), &b.join(f));
    }
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 1 + 2);
    assert!(std::fs::read_to_string(a.join("seeds.txt")).unwrap().contains("train_seeds = 0,1"));

    let e = ok(&["--config", s(&cfg), "--out", s(&a), "eval", "--checkpoint", "runs/seed-0/checkpoint.bin"]);
    assert!(e.contains("speaker"), "{e}");
    let csv = std::fs::read_to_string(a.join("eval/eval.csv")).unwrap();
    assert!(csv.starts_with("metric,value\ntest_speaker,"));
    assert!(a.join("eval/histogram.csv").exists());
    assert!(a.join("eval/config.txt").exists());
}

#[test]
fn iterate_then_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let out = d.path().join("it");
    ok(&["--config", s(&cfg), "--out", s(&out), "--jobs", "1", "iterate", "--parents", "2", "--seeds", "1"]);
    let csv = std::fs::read_to_string(out.join("lineages.csv")).unwrap();
    assert!(csv.starts_with("parent,seed,generation,test_speaker"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    for p in ["parent-0", "parent-1"] {
        let lin = out.join("lineages").join(p).join("seed-0");
        assert!(lin.join("lineage.json").exists());
        assert!(lin.join("gen-1/checkpoint.bin").exists());
    }
    let seeds = std::fs::read_to_string(out.join("seeds.txt")).unwrap();
    assert!(seeds.contains("parent-1.founder_train_seed = 1000000"), "{seeds}");

    let rep = d.path().join("rep");
    ok(&["--out", s(&rep), "report", "--runs", s(&out)]);
    for name in ["accuracy", "entropy", "rank", "long_distance", "markers"] {
        let svg = std::fs::read_to_string(rep.join("report").join(format!("{name}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{name}");
        assert!(rep.join("report").join(format!("{name}.csv")).exists());
    }
    let entropy = std::fs::read_to_string(rep.join("report/entropy.csv")).unwrap();
    assert_eq!(entropy.lines().count(), 1 + 2 * 2);
}

#[test]
fn report_draws_sorted_frequencies_with_uniform_reference() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    let spec = LanguageSpec::free_order(true);
    let templates = spec.templates(3);
    assert_eq!(templates.len(), 6);
    let mut h = OrderHistogram::new();
    for (i, t) in templates.iter().take(4).enumerate() {
        h.add_count(t.clone(), 10 * (i + 1));
    }
    std::fs::create_dir_all(run.join("eval")).unwrap();
    std::fs::write(run.join("eval/histogram.csv"), h.to_csv()).unwrap();
    std::fs::write(run.join("config.txt"), "language = free-markers\n").unwrap();

    let rep = d.path().join("rep");
    ok(&["--out", s(&rep), "report", "--runs", s(&run)]);
    let dir = rep.join("report");
    let name = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .find(|n| n.starts_with("order_frequency") && n.ends_with(".csv"))
        .expect("frequency csv");
    let csv = std::fs::read_to_string(dir.join(&name)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // Unseen orders are listed with zero counts so the support is the full 6.
    assert_eq!(rows.len(), 6);
    let counts: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(counts, vec![40, 30, 20, 10, 0, 0]);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.4);
    assert!(rows.iter().any(|r| r[4] == "most") && rows.iter().any(|r| r[4] == "least"));
    let svg = std::fs::read_to_string(dir.join(name.replace(".csv", ".svg"))).unwrap();
    assert!(svg.contains("uniform 1/6"));
    assert!(svg.contains("stroke-dasharray"));
    assert!(svg.contains("#2ca02c") && svg.contains("#d62728"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = s(d.path());
    let code = |args: &[&str]| run(args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--out", out, "bogus"]), 1);
    assert_eq!(code(&["--out", out, "eval"]), 1);

    let o = run(&["--out", out, "--set", "lr=fast", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));

    let o = run(&["--out", out, "--set", "colour=red", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let o = run(&["--out", out, "--language", "klingon", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("language"));

    let o = run(&["--out", out, "--set", "batch=0", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch"));

    let o = run(&["--out", out, "--config", "missing.txt", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["--out", out, "eval", "--checkpoint", "nope.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.bin"));

    std::fs::write(d.path().join("garbage.bin"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["--out", out, "eval", "--checkpoint", "garbage.bin"]), 2);
}
