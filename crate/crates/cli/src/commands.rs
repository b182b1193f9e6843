//! The five subcommands. Every command writes the resolved `config.txt` and
//! a `seeds.txt` listing every RNG seed it used into its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wordorder::agent::Agent;
use wordorder::corpus::{build_corpus_with, SplitCorpus, SplitName, Vocabulary};
use wordorder::evolution::{generation_metrics, protocol_config, run_protocol, GenerationMetrics};
use wordorder::grammar::{LanguageSpec, OrderTemplate};
use wordorder::metrics::{neighbor_profile, EvalSet, OrderHistogram};
use wordorder::training::{corpus_eval_sets, examples_from_pairs, train_individual, write_run, LearningCurve, TrainData, TrainOutcome};

use crate::config::ExperimentConfig;
use crate::plot::{Chart, Line, Scatter};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    /// Inputs given as relative paths are taken relative to `--out`.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, seeds: &str) -> Result<()> {
    write(&dir.join("config.txt"), format!("# sha256 {}\n{}", cfg.hash(), cfg.to_text()))?;
    write(&dir.join("seeds.txt"), seeds)
}

fn base_seeds(cfg: &ExperimentConfig) -> String {
    format!("corpus_seed = {}\nlanguage_seed = {}\n", cfg.corpus.seed, cfg.language_seed)
}

fn spec_hash(spec: &LanguageSpec) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(spec.to_kv().as_bytes()))
}

fn corpus(cfg: &ExperimentConfig) -> Result<SplitCorpus> {
    cfg.validate()?;
    Ok(build_corpus_with(&cfg.language_spec()?, cfg.corpus)?)
}

pub fn gen_corpus(ctx: &Context) -> Result<SplitCorpus> {
    let c = corpus(&ctx.cfg)?;
    let dir = ctx.out.join("corpus");
    c.export(&dir).map_err(CliError::from)?;
    write_config(&ctx.out, &ctx.cfg, &base_seeds(&ctx.cfg))?;
    println!(
        "{}: {} pairs (train {}, dev {}, test {}) -> {}",
        c.spec.name,
        c.len(),
        c.train.len(),
        c.dev.len(),
        c.test.len(),
        dir.display()
    );
    Ok(c)
}

fn best_record(o: &TrainOutcome) -> (Option<f64>, Option<f64>) {
    o.curve
        .epochs
        .iter()
        .find(|r| r.epoch == o.best_epoch)
        .map_or((None, None), |r| (r.test_speaker, r.test_listener))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let c = corpus(cfg)?;
    let vocab = Vocabulary::standard();
    let parser = c.spec.compile();
    let examples = examples_from_pairs(&vocab, &parser, c.split(SplitName::Train));
    let (dev, test) = corpus_eval_sets(&vocab, &c);
    let data = TrainData {
        vocab: &vocab,
        parser: &parser,
        train: &examples,
        dev: &dev,
        test: Some(&test),
    };
    let result = train_individual(&data, &cfg.train, &cfg.grid, ctx.jobs)?;
    let hash = spec_hash(&c.spec);
    let extra = serde_json::json!({ "config_sha256": cfg.hash(), "language": c.spec.name });
    let mut summary = String::from("phase,hidden,batch,seed,best_epoch,epochs_run,best_dev,test_speaker,test_listener\n");
    let mut row = |phase: &str, o: &TrainOutcome| {
        let (s, l) = best_record(o);
        let k = &o.config;
        let _ = writeln!(
            summary,
            "{phase},{},{},{},{},{},{},{},{}",
            k.hidden,
            k.batch_size,
            k.seed,
            o.best_epoch,
            o.epochs_run,
            o.best_dev,
            opt_cell(s),
            opt_cell(l)
        );
    };
    for o in &result.search {
        let dir = ctx.out.join("search").join(format!("h{}-b{}", o.config.hidden, o.config.batch_size));
        write_run(&dir, o, &hash, extra.clone())?;
        row("search", o);
    }
    for o in &result.reruns {
        write_run(&ctx.out.join("runs").join(format!("seed-{}", o.config.seed)), o, &hash, extra.clone())?;
        row("rerun", o);
    }
    write(&ctx.out.join("summary.csv"), summary)?;
    let best = &result.search[result.best].config;
    let seeds = format!("{}train_seeds = {}\n", base_seeds(cfg), join(&cfg.grid.seeds));
    write_config(&ctx.out, cfg, &seeds)?;
    println!(
        "best grid point: hidden {} batch {}; {} seeds -> {}",
        best.hidden,
        best.batch_size,
        result.reruns.len(),
        ctx.out.join("runs").display()
    );
    Ok(())
}

fn join(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

pub fn iterate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let c = corpus(cfg)?;
    let vocab = Vocabulary::standard();
    let lc = cfg.lineage_config();
    let dir = ctx.out.join("lineages");
    let lineages = run_protocol(&vocab, &c, &lc, cfg.parents, cfg.lineage_seeds, Some(&dir), ctx.jobs)?;

    let mut csv = format!("parent,seed,generation,{}\n", GenerationMetrics::CSV_HEADER);
    for l in &lineages {
        for r in &l.records {
            let _ = writeln!(csv, "{},{},{},{}", l.parent, l.seed, r.generation, r.metrics.csv_row());
        }
    }
    write(&ctx.out.join("lineages.csv"), csv)?;

    let mut seeds = base_seeds(cfg);
    for p in 0..cfg.parents {
        let _ = writeln!(seeds, "parent-{p}.founder_train_seed = {}", protocol_config(&lc, p, 0).train.seed);
        for s in 0..cfg.lineage_seeds {
            let pc = protocol_config(&lc, p, s);
            let train: Vec<u64> = (1..lc.generations as u64).map(|g| pc.train.seed.wrapping_add(g)).collect();
            let _ = writeln!(seeds, "parent-{p}.seed-{s}.sample_seed = {}", pc.seed);
            let _ = writeln!(seeds, "parent-{p}.seed-{s}.train_seeds = {}", join(&train));
        }
    }
    write_config(&ctx.out, cfg, &seeds)?;
    println!("{} lineages x {} generations -> {}", lineages.len(), lc.generations, dir.display());
    Ok(())
}

pub fn parse_split(s: &str) -> Result<SplitName> {
    match s {
        "train" => Ok(SplitName::Train),
        "dev" => Ok(SplitName::Dev),
        "test" => Ok(SplitName::Test),
        _ => Err(CliError::Config(format!("split: expected train, dev or test (got {s:?})"))),
    }
}

/// Scores a checkpoint on one split of the configured corpus: accuracy in
/// both roles plus order, marker and locality statistics.
pub fn eval(ctx: &Context, checkpoint: &Path, split: SplitName) -> Result<GenerationMetrics> {
    let cfg = &ctx.cfg;
    let c = corpus(cfg)?;
    let vocab = Vocabulary::standard();
    let path = ctx.resolve(checkpoint);
    let agent = Agent::load(&path, &vocab).map_err(|e| match e {
        wordorder::Error::Io(io) => CliError::io(path.display().to_string(), io),
        e => e.into(),
    })?;
    let parser = c.spec.compile();
    let pairs = c.split(split);
    let mut set = EvalSet::from_pairs(&vocab, pairs);
    if let Some(k) = cfg.train.eval_limit {
        set = set.truncated(k);
    }
    let trajs = c.trajectories(split);
    let lc = cfg.lineage_config();
    let mut rng = ChaCha8Rng::seed_from_u64(lc.seed);
    let m = generation_metrics(&agent, &vocab, &parser, &set, &trajs, &lc, &mut rng)?;

    let dir = ctx.out.join("eval");
    let mut csv = String::from("metric,value\n");
    let names = GenerationMetrics::CSV_HEADER.split(',');
    for (k, v) in names.zip(m.csv_row().split(',')) {
        let _ = writeln!(csv, "{k},{v}");
    }
    write(&dir.join("eval.csv"), csv)?;
    write(&dir.join("histogram.csv"), m.histogram.to_csv())?;
    let seeds = format!("{}metric_seed = {}\n", base_seeds(cfg), lc.seed);
    write_config(&dir, cfg, &seeds)?;
    println!(
        "{split}: speaker {:.4} listener {:.4} entropy {:.4} -> {}",
        m.test_speaker,
        m.test_listener,
        m.entropy,
        dir.display()
    );
    Ok(m)
}

struct Lineage {
    label: String,
    /// Column name to per-generation values.
    columns: BTreeMap<String, Vec<f64>>,
    histograms: Vec<OrderHistogram>,
}

struct Found {
    curves: Vec<(String, LearningCurve)>,
    lineages: Vec<Lineage>,
    histograms: Vec<(String, OrderHistogram)>,
    spec: Option<LanguageSpec>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn gen_number(p: &Path) -> Option<usize> {
    p.file_name()?.to_str()?.strip_prefix("gen-")?.parse().ok()
}

fn read_lineage(dir: &Path, label: String) -> Result<Lineage> {
    let mut gens: Vec<(usize, PathBuf)> = sorted_entries(dir)?
        .into_iter()
        .filter_map(|p| gen_number(&p).map(|g| (g, p)))
        .collect();
    gens.sort();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut histograms = Vec::new();
    for (_, g) in gens {
        let text = read(&g.join("metrics.csv"))?;
        let mut lines = text.lines();
        let (Some(head), Some(row)) = (lines.next(), lines.next()) else {
            return Err(CliError::Core(wordorder::Error::Format {
                what: "generation metrics",
                detail: g.display().to_string(),
            }));
        };
        for (k, v) in head.split(',').zip(row.split(',')) {
            if let Ok(x) = v.parse::<f64>() {
                columns.entry(k.to_string()).or_default().push(x);
            }
        }
        histograms.push(OrderHistogram::from_csv(&read(&g.join("histogram.csv"))?)?);
    }
    Ok(Lineage {
        label,
        columns,
        histograms,
    })
}

fn walk(root: &Path, dir: &Path, prefix: &str, found: &mut Found) -> Result<()> {
    let rel = |p: &Path| {
        let r = p.strip_prefix(root).unwrap_or(p).display().to_string();
        if r.is_empty() {
            prefix.to_string()
        } else {
            format!("{prefix}/{r}")
        }
    };
    if dir.join("lineage.json").exists() {
        for p in sorted_entries(dir)? {
            if gen_number(&p).is_some() && p.join("curve.csv").exists() {
                found.curves.push((rel(&p), LearningCurve::from_csv(&read(&p.join("curve.csv"))?)?));
            }
        }
        found.lineages.push(read_lineage(dir, rel(dir))?);
        return Ok(());
    }
    if dir.join("curve.csv").exists() {
        found.curves.push((rel(dir), LearningCurve::from_csv(&read(&dir.join("curve.csv"))?)?));
    }
    if dir.join("histogram.csv").exists() {
        found
            .histograms
            .push((rel(dir), OrderHistogram::from_csv(&read(&dir.join("histogram.csv"))?)?));
    }
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            walk(root, &p, prefix, found)?;
        }
    }
    Ok(())
}

fn frequency_chart(title: &str, h: &OrderHistogram, spec: Option<&LanguageSpec>) -> Result<(Chart, String)> {
    let perms = h.permutations();
    let n = perms.iter().map(|(t, _)| t.phrases()).max().unwrap_or(0);
    let universe: Vec<OrderTemplate> = match spec {
        Some(s) if n > 0 => s.templates(n),
        _ => perms.iter().map(|(t, _)| t.clone()).collect(),
    };
    let mut rows: Vec<(OrderTemplate, usize)> = universe
        .iter()
        .map(|t| OrderTemplate::phrase_level(&t.permutation()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|t| {
            let c = perms.count(&t);
            (t, c)
        })
        .collect();
    for (t, c) in perms.iter() {
        if !rows.iter().any(|(u, _)| u == t) {
            rows.push((t.clone(), c));
        }
    }
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total = perms.total().max(1) as f64;
    let support = rows.len().max(1) as f64;
    let profile = neighbor_profile(h, &universe).ok();
    let tag = |t: &OrderTemplate| -> &str {
        match &profile {
            Some(p) if p.most_neighbors.iter().any(|(u, _)| u == t) => "most",
            Some(p) if p.least_neighbors.iter().any(|(u, _)| u == t) => "least",
            _ => "",
        }
    };
    let mut csv = String::from("rank,template,count,frequency,neighbor_of\n");
    let mut freq = Vec::new();
    let (mut green, mut red) = (Vec::new(), Vec::new());
    for (i, (t, c)) in rows.iter().enumerate() {
        let f = *c as f64 / total;
        let x = (i + 1) as f64;
        let _ = writeln!(csv, "{},{t},{c},{f},{}", i + 1, tag(t));
        freq.push((x, f));
        match tag(t) {
            "most" => green.push((x, f)),
            "least" => red.push((x, f)),
            _ => {}
        }
    }
    let mut chart = Chart::new(title, "order (sorted by frequency)", "frequency");
    chart.lines.push(Line::new("frequency", freq).color("#1f77b4"));
    chart
        .lines
        .push(Line::new(format!("uniform 1/{}", rows.len()), vec![(1.0, 1.0 / support), (support, 1.0 / support)]).dashed().color("black"));
    chart.scatters.push(Scatter {
        label: "neighbors of most frequent".into(),
        points: green,
        color: "#2ca02c".into(),
    });
    chart.scatters.push(Scatter {
        label: "neighbors of least frequent".into(),
        points: red,
        color: "#d62728".into(),
    });
    chart.y_include.push(0.0);
    Ok((chart, csv))
}

fn emit(dir: &Path, name: &str, chart: &Chart, csv: &str) -> Result<()> {
    write(&dir.join(format!("{name}.svg")), chart.to_svg())?;
    write(&dir.join(format!("{name}.csv")), csv)
}

/// Renders every curve, lineage and histogram found under `runs` into
/// `out/report`; returns the names of the written charts.
pub fn report(ctx: &Context, runs: &[PathBuf]) -> Result<Vec<String>> {
    let mut found = Found {
        curves: Vec::new(),
        lineages: Vec::new(),
        histograms: Vec::new(),
        spec: None,
    };
    for r in runs {
        let root = ctx.resolve(r);
        if !root.is_dir() {
            return Err(CliError::io(root.display().to_string(), std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let cfg_path = root.join("config.txt");
        if found.spec.is_none() && cfg_path.exists() {
            found.spec = Some(ExperimentConfig::parse(&read(&cfg_path)?)?.language_spec()?);
        }
        let prefix = root.file_name().map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned());
        walk(&root, &root, &prefix, &mut found)?;
    }
    for l in &found.lineages {
        if let Some(h) = l.histograms.first() {
            found.histograms.push((format!("{}/gen-0", l.label), h.clone()));
        }
    }
    let dir = ctx.out.join("report");
    let mut written = Vec::new();

    if !found.curves.is_empty() {
        let mut acc = Chart::new("Accuracy", "epoch", "dev accuracy");
        let mut csv = String::from("run,epoch,metric,value\n");
        for (label, c) in &found.curves {
            let sp: Vec<(f64, f64)> = c.epochs.iter().map(|r| (r.epoch as f64, r.dev_speaker)).collect();
            let li: Vec<(f64, f64)> = c.epochs.iter().map(|r| (r.epoch as f64, r.dev_listener)).collect();
            for r in &c.epochs {
                let _ = writeln!(csv, "{label},{},speaker_accuracy,{}", r.epoch, r.dev_speaker);
                let _ = writeln!(csv, "{label},{},listener_accuracy,{}", r.epoch, r.dev_listener);
            }
            acc.lines.push(Line::new(format!("{label} speaker"), sp));
            acc.lines.push(Line::new(format!("{label} listener"), li).dashed());
        }
        acc.y_include.extend([0.0, 1.0]);
        emit(&dir, "accuracy", &acc, &csv)?;
        written.push("accuracy".to_string());

        let local: Vec<_> = found
            .curves
            .iter()
            .filter(|(_, c)| c.epochs.iter().any(|r| r.dev_long_distance.is_some()))
            .collect();
        if !local.is_empty() {
            let mut chart = Chart::new("Local vs long-distance", "epoch", "fraction of parseable outputs");
            let mut csv = String::from("run,epoch,local,long_distance\n");
            for (label, c) in local {
                let pts: Vec<(f64, f64)> = c
                    .epochs
                    .iter()
                    .filter_map(|r| r.dev_long_distance.map(|f| (r.epoch as f64, f)))
                    .collect();
                for &(e, f) in &pts {
                    let _ = writeln!(csv, "{label},{e},{},{f}", 1.0 - f);
                }
                chart.lines.push(Line::new(format!("{label} local"), pts.iter().map(|&(e, f)| (e, 1.0 - f)).collect()));
                chart.lines.push(Line::new(format!("{label} long"), pts).dashed());
            }
            chart.y_include.extend([0.0, 1.0]);
            emit(&dir, "locality", &chart, &csv)?;
            written.push("locality".to_string());
        }
    }

    if !found.lineages.is_empty() {
        for (name, column, title, y) in [
            ("entropy", "entropy", "Order entropy", "entropy (nats)"),
            ("rank", "forward_rank", "Rank of the forward order", "rank"),
            ("long_distance", "long_distance_fraction", "Long-distance share", "fraction"),
            ("markers", "markers", "Marker tokens", "count"),
        ] {
            let mut chart = Chart::new(title, "generation", y);
            let mut csv = format!("lineage,generation,{column}\n");
            for l in &found.lineages {
                let Some(v) = l.columns.get(column) else { continue };
                for (g, x) in v.iter().enumerate() {
                    let _ = writeln!(csv, "{},{g},{x}", l.label);
                }
                chart.lines.push(Line::new(l.label.clone(), v.iter().enumerate().map(|(g, &x)| (g as f64, x)).collect()));
            }
            if name == "entropy" {
                if let Some(max) = found.lineages.iter().filter_map(|l| l.histograms.first()).map(|h| {
                    let n = h.iter().map(|(t, _)| t.phrases()).max().unwrap_or(0);
                    found.spec.as_ref().map_or(h.support(), |s| s.templates(n).len())
                }).max() {
                    let gens = found.lineages.iter().map(|l| l.histograms.len()).max().unwrap_or(1).max(2) - 1;
                    let u = (max.max(1) as f64).ln();
                    chart.lines.push(Line::new(format!("uniform ln {max}"), vec![(0.0, u), (gens as f64, u)]).dashed().color("black"));
                }
                chart.y_include.push(0.0);
            }
            emit(&dir, name, &chart, &csv)?;
            written.push(name.to_string());
        }
        let mut last = OrderHistogram::new();
        for l in &found.lineages {
            if let Some(h) = l.histograms.last() {
                for (t, c) in h.iter() {
                    last.add_count(t.clone(), c);
                }
            }
        }
        if last.total() > 0 {
            found.histograms.push(("final generation".into(), last));
        }
    }

    let mut merged: BTreeMap<String, OrderHistogram> = BTreeMap::new();
    for (label, h) in &found.histograms {
        let key = if label.ends_with("/gen-0") { "gen-0".to_string() } else { label.clone() };
        let m = merged.entry(key).or_default();
        for (t, c) in h.iter() {
            m.add_count(t.clone(), c);
        }
    }
    for (label, h) in &merged {
        if h.total() == 0 {
            continue;
        }
        let slug: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let name = format!("order_frequency_{slug}");
        let (chart, csv) = frequency_chart(&format!("Order frequency ({label})"), h, found.spec.as_ref())?;
        emit(&dir, &name, &chart, &csv)?;
        written.push(name);
    }
    if written.is_empty() {
        return Err(CliError::Config("runs: no curves, lineages or histograms found".into()));
    }
    println!("{} charts -> {}", written.len(), dir.display());
    Ok(written)
}
