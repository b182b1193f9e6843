//! Iterated learning: each child learns only from its frozen parent's
//! samples.
//!
//! Child training data is drawn once per generation. Dev and test
//! trajectories are those of the generation-0 corpus; a child's speaker is
//! scored against `M` fresh parent samples per trajectory drawn with a fixed
//! evaluation stream, and its listener on one parent sample per trajectory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::agent::{Agent, Decoded, Role};
use crate::corpus::{SplitCorpus, SplitName, TargetPolicy, Vocabulary};
use crate::error::{Error, Result};
use crate::grammar::{LanguageSpec, OrderTemplate, Parser};
use crate::gridworld::Trajectory;
use crate::metrics::{
    communication_accuracy, locality_counts, marker_count_ids, order_entropy, order_histogram, order_rank, speaker_hit,
    utterances_of, EvalSet, ListenerItem, OrderHistogram, SpeakerItem,
};
use crate::training::{corpus_eval_sets, examples_from_pairs, train_from, TrainConfig, TrainData, TrainExample};

/// Anything that can be sampled like a speaker.
pub trait Producer {
    fn produce<R: Rng>(&self, input: &[usize], rng: &mut R, max_len: usize) -> Result<Decoded>;
}

impl Producer for Agent {
    fn produce<R: Rng>(&self, input: &[usize], rng: &mut R, max_len: usize) -> Result<Decoded> {
        self.sample_decode(input, rng, max_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpawnStats {
    pub samples: usize,
    /// Samples that are not a parseable utterance of the language (kept).
    pub unparseable: usize,
    /// Samples cut at `max_len` (kept, EOS appended).
    pub truncated: usize,
}

/// `n` parent samples per trajectory, kept verbatim (EOS appended).
#[allow(clippy::too_many_arguments)]
pub fn parent_samples<P: Producer, R: Rng>(
    parent: &P,
    vocab: &Vocabulary,
    parser: &Parser,
    trajectory: &Trajectory,
    n: usize,
    rng: &mut R,
    max_len: usize,
    stats: &mut SpawnStats,
) -> Result<Vec<Vec<usize>>> {
    let input = vocab.encode_trajectory(trajectory);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let d = parent.produce(&input, rng, max_len)?;
        stats.samples += 1;
        stats.truncated += d.truncated as usize;
        let parses = vocab
            .decode_utterance(&d.tokens)
            .ok()
            .is_some_and(|u| parser.interpret(&u).is_ok());
        stats.unparseable += (!parses) as usize;
        let mut ids = d.tokens;
        ids.push(crate::corpus::EOS);
        out.push(ids);
    }
    Ok(out)
}

/// Child training set: for each trajectory, `n` samples from the frozen
/// parent (repeats allowed and weighted by multiplicity).
pub fn spawn_child_corpus<P: Producer, R: Rng>(
    parent: &P,
    vocab: &Vocabulary,
    parser: &Parser,
    trajectories: &[Trajectory],
    n: usize,
    rng: &mut R,
    max_len: usize,
) -> Result<(Vec<TrainExample>, SpawnStats)> {
    if n == 0 {
        return Err(Error::InvalidConfig("samples_per_trajectory: must be positive".into()));
    }
    let mut stats = SpawnStats::default();
    let mut examples = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let samples = parent_samples(parent, vocab, parser, t, n, rng, max_len, &mut stats)?;
        examples.push(TrainExample::from_samples(vocab, t.clone(), &samples));
    }
    Ok((examples, stats))
}

/// Evaluation set whose references are `m` parent samples per trajectory.
pub fn parent_eval_set<P: Producer, R: Rng>(
    parent: &P,
    vocab: &Vocabulary,
    parser: &Parser,
    trajectories: &[Trajectory],
    m: usize,
    rng: &mut R,
    max_len: usize,
) -> Result<EvalSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("eval_samples: must be positive".into()));
    }
    let mut speaker = Vec::with_capacity(trajectories.len());
    let mut listener = Vec::with_capacity(trajectories.len());
    let mut stats = SpawnStats::default();
    for t in trajectories {
        let samples = parent_samples(parent, vocab, parser, t, m, rng, max_len, &mut stats)?;
        let mut expected = vocab.encode_trajectory(t);
        expected.pop();
        // One draw per trajectory keeps the listener items distributed like
        // the parent's speech; distinct samples would overweight rare ones.
        listener.push(ListenerItem {
            input: samples[0].clone(),
            expected,
        });
        let accepted: HashSet<Vec<usize>> = samples.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        speaker.push(SpeakerItem {
            trajectory: t.clone(),
            input: vocab.encode_trajectory(t),
            accepted: Some(accepted),
        });
    }
    Ok(EvalSet { speaker, listener })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageConfig {
    pub generations: usize,
    /// Utterances sampled from the parent per training trajectory.
    pub samples_per_trajectory: usize,
    /// Parent samples defining the accepted set at evaluation;
    /// `None` means `max(n, 20)`.
    pub eval_samples: Option<usize>,
    /// Training regime for every generation. Generation `i` trains with
    /// seed `train.seed + i`; children always use every parent sample.
    pub train: TrainConfig,
    /// Seed for parent sampling.
    pub seed: u64,
    /// Sampled speaker outputs per test trajectory for order statistics.
    pub metric_samples: usize,
    /// Use only the first `k` test trajectories for order statistics.
    pub metric_limit: Option<usize>,
}

impl Default for LineageConfig {
    fn default() -> Self {
        LineageConfig {
            generations: 10,
            samples_per_trajectory: 6,
            eval_samples: None,
            train: TrainConfig::default(),
            seed: 0,
            metric_samples: 1,
            metric_limit: None,
        }
    }
}

impl LineageConfig {
    pub fn m(&self) -> usize {
        self.eval_samples.unwrap_or(self.samples_per_trajectory.max(20))
    }

    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 {
            return Err(Error::InvalidConfig("generations: must be at least 1".into()));
        }
        if self.samples_per_trajectory == 0 {
            return Err(Error::InvalidConfig("samples_per_trajectory: must be positive".into()));
        }
        if self.metric_samples == 0 {
            return Err(Error::InvalidConfig("metric_samples: must be positive".into()));
        }
        self.train.validate()
    }
}

/// Diagnostics of one generation's agent.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationMetrics {
    /// Accuracy against this generation's teacher (grammar or parent).
    pub test_speaker: f64,
    pub test_listener: f64,
    /// Speaker accuracy against the ground-truth grammar.
    pub test_speaker_grammar: f64,
    /// Order statistics over sampled outputs of the longest test
    /// trajectories.
    pub segments: usize,
    pub entropy: f64,
    pub histogram: OrderHistogram,
    /// Distinct templates among greedy outputs of the longest test
    /// trajectories.
    pub greedy_templates: usize,
    pub forward_rank: usize,
    /// Marker tokens in greedy outputs on all test trajectories.
    pub markers: usize,
    /// Long-distance share of sampled outputs on all test trajectories.
    pub long_distance_fraction: f64,
    pub unparseable_samples: usize,
    pub sampled: usize,
}

impl GenerationMetrics {
    pub const CSV_HEADER: &'static str = "test_speaker,test_listener,test_speaker_grammar,segments,entropy,greedy_templates,forward_rank,markers,long_distance_fraction,unparseable_samples,sampled";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.test_speaker,
            self.test_listener,
            self.test_speaker_grammar,
            self.segments,
            self.entropy,
            self.greedy_templates,
            self.forward_rank,
            self.markers,
            self.long_distance_fraction,
            self.unparseable_samples,
            self.sampled
        )
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Seed this generation's agent was trained with.
    pub train_seed: u64,
    pub agent: Agent,
    pub metrics: GenerationMetrics,
    pub spawn: SpawnStats,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub curve: crate::training::LearningCurve,
}

/// Order, marker and locality statistics for `agent` on `trajectories`.
#[allow(clippy::too_many_arguments)]
pub fn generation_metrics(
    agent: &Agent,
    vocab: &Vocabulary,
    parser: &Parser,
    teacher: &EvalSet,
    trajectories: &[Trajectory],
    cfg: &LineageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationMetrics> {
    let max_len = cfg.train.max_len;
    let s = communication_accuracy(agent, vocab, parser, teacher, Role::Speaker, max_len)?;
    let l = communication_accuracy(agent, vocab, parser, teacher, Role::Listener, max_len)?;

    let trajs: Vec<&Trajectory> = match cfg.metric_limit {
        Some(k) => trajectories.iter().take(k).collect(),
        None => trajectories.iter().collect(),
    };
    let segments = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut greedy = Vec::with_capacity(trajs.len());
    let mut grammar_hits = 0;
    for t in &trajs {
        let input = vocab.encode_trajectory(t);
        let d = agent.greedy_decode(&input, max_len)?;
        let item = SpeakerItem {
            trajectory: (*t).clone(),
            input,
            accepted: None,
        };
        grammar_hits += speaker_hit(vocab, parser, &item, &d).0 as usize;
        greedy.push(d);
    }
    let mut sampled = Vec::with_capacity(trajs.len() * cfg.metric_samples);
    let mut sampled_long = Vec::new();
    for t in &trajs {
        let input = vocab.encode_trajectory(t);
        for _ in 0..cfg.metric_samples {
            let d = agent.sample_decode(&input, rng, max_len)?;
            if t.len() == segments {
                sampled_long.push(d.clone());
            }
            sampled.push(d);
        }
    }
    let sampled_utts = utterances_of(vocab, &sampled);
    let long_utts = utterances_of(vocab, &sampled_long);
    let (histogram, _) = order_histogram(parser, &long_utts);
    let greedy_long: Vec<Decoded> = greedy
        .iter()
        .zip(&trajs)
        .filter(|(_, t)| t.len() == segments)
        .map(|(d, _)| d.clone())
        .collect();
    let (greedy_hist, _) = order_histogram(parser, &utterances_of(vocab, &greedy_long));
    let locality = locality_counts(parser, &sampled_utts);
    let markers = marker_count_ids(vocab, greedy.iter().map(|d| &d.tokens));
    Ok(GenerationMetrics {
        test_speaker: s.value(),
        test_listener: l.value(),
        test_speaker_grammar: if trajs.is_empty() {
            0.0
        } else {
            grammar_hits as f64 / trajs.len() as f64
        },
        segments,
        entropy: order_entropy(&histogram),
        forward_rank: order_rank(&histogram, &forward_template(parser.spec(), segments)),
        greedy_templates: greedy_hist.support(),
        histogram,
        markers,
        long_distance_fraction: locality.fraction(),
        unparseable_samples: sampled.len() - sampled_utts.len() + locality.unparseable,
        sampled: sampled.len(),
    })
}

/// The chronological template of a language with `n` phrases.
fn forward_template(spec: &LanguageSpec, n: usize) -> OrderTemplate {
    spec.templates(n)
        .into_iter()
        .find(|t| !t.is_split() && t.permutation().windows(2).all(|w| w[0] < w[1]))
        .unwrap_or_else(|| OrderTemplate::identity(n))
}

fn generation_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs a lineage: generation 0 learns the ground-truth corpus, each
/// later generation learns from its parent's samples. When `out` is given,
/// every generation is persisted as it completes.
pub fn run_lineage(
    vocab: &Vocabulary,
    corpus: &SplitCorpus,
    cfg: &LineageConfig,
    out: Option<&Path>,
) -> Result<Vec<GenerationRecord>> {
    continue_lineage(vocab, corpus, cfg, None, out)
}

/// Like [`run_lineage`], but generation 0 is `founder` instead of a freshly
/// trained agent.
pub fn continue_lineage(
    vocab: &Vocabulary,
    corpus: &SplitCorpus,
    cfg: &LineageConfig,
    founder: Option<&GenerationRecord>,
    out: Option<&Path>,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    let parser = corpus.spec.compile();
    let train_trajs = corpus.trajectories(SplitName::Train);
    let dev_trajs = corpus.trajectories(SplitName::Dev);
    let test_trajs = corpus.trajectories(SplitName::Test);

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_lineage_manifest(dir, corpus, cfg, founder.is_some())?;
    }

    let mut records: Vec<GenerationRecord> = Vec::with_capacity(cfg.generations);
    for g in 0..cfg.generations {
        let wrap = |e: Error| Error::Generation {
            generation: g,
            source: Box::new(e),
        };
        let record = match (g, founder) {
            (0, Some(f)) => GenerationRecord {
                generation: 0,
                ..f.clone()
            },
            (0, None) => {
                let (dev, test) = corpus_eval_sets(vocab, corpus);
                let train = examples_from_pairs(vocab, &parser, corpus.split(SplitName::Train));
                train_generation(vocab, &parser, cfg, 0, &train, &dev, test, &test_trajs, SpawnStats::default())
                    .map_err(wrap)?
            }
            _ => {
                let parent = &records[g - 1].agent;
                let mut rng = generation_rng(cfg.seed, 2 * g as u64);
                let (train, spawn) = spawn_child_corpus(
                    parent,
                    vocab,
                    &parser,
                    &train_trajs,
                    cfg.samples_per_trajectory,
                    &mut rng,
                    cfg.train.max_len,
                )
                .map_err(wrap)?;
                let mut eval_rng = generation_rng(cfg.seed, 2 * g as u64 + 1);
                let limit = cfg.train.eval_limit.unwrap_or(usize::MAX);
                let dev_trajs = &dev_trajs[..dev_trajs.len().min(limit)];
                let eval_test = &test_trajs[..test_trajs.len().min(limit)];
                let max_len = cfg.train.max_len;
                let dev = parent_eval_set(parent, vocab, &parser, dev_trajs, cfg.m(), &mut eval_rng, max_len)
                    .map_err(wrap)?;
                let test = parent_eval_set(parent, vocab, &parser, eval_test, cfg.m(), &mut eval_rng, max_len)
                    .map_err(wrap)?;
                train_generation(vocab, &parser, cfg, g, &train, &dev, test, &test_trajs, spawn).map_err(wrap)?
            }
        };
        if let Some(dir) = out {
            write_generation(dir, &record).map_err(wrap)?;
        }
        records.push(record);
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn train_generation(
    vocab: &Vocabulary,
    parser: &Parser,
    cfg: &LineageConfig,
    g: usize,
    train: &[TrainExample],
    dev: &EvalSet,
    test: EvalSet,
    test_trajs: &[Trajectory],
    spawn: SpawnStats,
) -> Result<GenerationRecord> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train.seed.wrapping_add(g as u64);
    if g > 0 {
        train_cfg.targets = TargetPolicy::All;
    }
    let data = TrainData {
        vocab,
        parser,
        train,
        dev,
        test: None,
    };
    let outcome = train_from(train_cfg.fresh_agent(vocab), &data, &train_cfg)?;
    let mut metric_rng = generation_rng(cfg.seed ^ 0x6d65_7472_6963, g as u64);
    let test = match cfg.train.eval_limit {
        Some(k) => test.truncated(k),
        None => test,
    };
    let metrics = generation_metrics(&outcome.agent, vocab, parser, &test, test_trajs, cfg, &mut metric_rng)?;
    Ok(GenerationRecord {
        generation: g,
        train_seed: train_cfg.seed,
        agent: outcome.agent,
        metrics,
        spawn,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        curve: outcome.curve,
    })
}

/// Seed offsets separating parents and the lineages grown from each.
const PARENT_STRIDE: u64 = 1_000_000;
const SEED_STRIDE: u64 = 1_000;

/// Configuration of lineage `seed` grown from founder `parent`. Parent `p`
/// trains generation 0 with seed `train.seed + 10^6 p`; its lineage `s`
/// trains generation `g` with `train.seed + 10^6 p + 10^3 s + g` and samples
/// from parents with seed `seed + 10^3 p + s`. With one parent and one seed
/// this is `cfg` itself.
pub fn protocol_config(cfg: &LineageConfig, parent: usize, seed: usize) -> LineageConfig {
    let mut c = cfg.clone();
    c.train.seed = cfg
        .train
        .seed
        .wrapping_add(PARENT_STRIDE.wrapping_mul(parent as u64))
        .wrapping_add(SEED_STRIDE.wrapping_mul(seed as u64));
    c.seed = cfg.seed.wrapping_add(SEED_STRIDE * parent as u64 + seed as u64);
    c
}

/// Lineages of one protocol run, indexed by founder and seed.
#[derive(Debug, Clone)]
pub struct ProtocolLineage {
    pub parent: usize,
    pub seed: usize,
    pub records: Vec<GenerationRecord>,
}

/// `parents` founders trained on the ground truth, each continued by
/// `seeds` independent lineages. Lineage `(p, s)` writes to
/// `out/parent-p/seed-s`; work runs on up to `jobs` threads.
pub fn run_protocol(
    vocab: &Vocabulary,
    corpus: &SplitCorpus,
    cfg: &LineageConfig,
    parents: usize,
    seeds: usize,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<ProtocolLineage>> {
    if parents == 0 || seeds == 0 {
        return Err(Error::InvalidConfig("parents and seeds: must be positive".into()));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("jobs: {e}")))?;
    pool.install(|| {
        let founders: Vec<GenerationRecord> = (0..parents)
            .into_par_iter()
            .map(|p| {
                let c = LineageConfig {
                    generations: 1,
                    ..protocol_config(cfg, p, 0)
                };
                Ok(run_lineage(vocab, corpus, &c, None)?.remove(0))
            })
            .collect::<Result<_>>()?;
        let runs: Vec<(usize, usize)> = (0..parents).flat_map(|p| (0..seeds).map(move |s| (p, s))).collect();
        runs.par_iter()
            .map(|&(p, s)| {
                let dir: Option<PathBuf> = out.map(|d| d.join(format!("parent-{p}")).join(format!("seed-{s}")));
                let c = protocol_config(cfg, p, s);
                let records = continue_lineage(vocab, corpus, &c, Some(&founders[p]), dir.as_deref())?;
                Ok(ProtocolLineage {
                    parent: p,
                    seed: s,
                    records,
                })
            })
            .collect()
    })
}

fn write_lineage_manifest(dir: &Path, corpus: &SplitCorpus, cfg: &LineageConfig, shared_founder: bool) -> Result<()> {
    let manifest = json!({
        "shared_founder": shared_founder,
        "language": corpus.spec.name,
        "corpus_seed": corpus.options.seed,
        "trajectory_limit": corpus.options.trajectory_limit,
        "permutation_closed": corpus.options.permutation_closed,
        "lineage_seed": cfg.seed,
        "train_seeds": (shared_founder as usize..cfg.generations)
            .map(|g| cfg.train.seed.wrapping_add(g as u64))
            .collect::<Vec<_>>(),
        "generations": cfg.generations,
        "samples_per_trajectory": cfg.samples_per_trajectory,
        "eval_samples": cfg.m(),
        "metric_samples": cfg.metric_samples,
        "metric_limit": cfg.metric_limit,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    std::fs::write(dir.join("lineage.json"), text + "\n")?;
    Ok(())
}

fn write_generation(dir: &Path, r: &GenerationRecord) -> Result<()> {
    let g = dir.join(format!("gen-{}", r.generation));
    std::fs::create_dir_all(&g)?;
    r.agent.save(&g.join("checkpoint.bin"))?;
    let mut csv = format!("generation,{},spawned,spawned_unparseable,best_epoch,epochs_run,train_seed\n", GenerationMetrics::CSV_HEADER);
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{}",
        r.generation,
        r.metrics.csv_row(),
        r.spawn.samples,
        r.spawn.unparseable,
        r.best_epoch,
        r.epochs_run,
        r.train_seed
    );
    std::fs::write(g.join("metrics.csv"), csv)?;
    std::fs::write(g.join("histogram.csv"), r.metrics.histogram.to_csv())?;
    std::fs::write(g.join("curve.csv"), r.curve.to_csv())?;
    Ok(())
}

/// One row per generation, for lineage-level summaries.
pub fn lineage_csv(records: &[GenerationRecord]) -> String {
    let mut s = format!("generation,{}\n", GenerationMetrics::CSV_HEADER);
    for r in records {
        let _ = writeln!(s, "{},{}", r.generation, r.metrics.csv_row());
    }
    s
}

/// Per-generation metric series keyed by column name.
pub fn series(records: &[GenerationRecord]) -> BTreeMap<&'static str, Vec<f64>> {
    let mut m: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for r in records {
        let x = &r.metrics;
        m.entry("entropy").or_default().push(x.entropy);
        m.entry("test_speaker").or_default().push(x.test_speaker);
        m.entry("test_listener").or_default().push(x.test_listener);
        m.entry("markers").or_default().push(x.markers as f64);
        m.entry("long_distance_fraction").or_default().push(x.long_distance_fraction);
        m.entry("forward_rank").or_default().push(x.forward_rank as f64);
        m.entry("greedy_templates").or_default().push(x.greedy_templates as f64);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::corpus::{build_corpus_with, CorpusOptions};

    /// Emits one of two fixed outputs with equal probability.
    struct TwoWay(Vec<usize>, Vec<usize>);

    impl Producer for TwoWay {
        fn produce<R: Rng>(&self, _: &[usize], rng: &mut R, _: usize) -> Result<Decoded> {
            let tokens = if rng.gen_bool(0.5) { self.0.clone() } else { self.1.clone() };
            Ok(Decoded {
                tokens,
                truncated: false,
            })
        }
    }

    fn setup() -> (Vocabulary, Parser, Vec<Trajectory>) {
        let spec = LanguageSpec::free_order(true).with_segment_range(1, 2);
        let trajs = vec!["LEFT UP UP".parse().unwrap(), "DOWN".parse().unwrap()];
        (Vocabulary::standard(), spec.compile(), trajs)
    }

    #[test]
    fn spawning_is_deterministic_per_seed() {
        let (v, p, trajs) = setup();
        let parent = Agent::new(&v, AgentConfig { hidden: 8, attention: true }, 1);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            spawn_child_corpus(&parent, &v, &p, &trajs, 6, &mut rng, 40).unwrap()
        };
        let (a, sa) = run(3);
        let (b, sb) = run(3);
        assert_eq!(sa, sb);
        assert_eq!(sa.samples, 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.targets, y.targets);
            assert_eq!(x.counts, y.counts);
            assert_eq!(x.counts.iter().sum::<usize>(), 6);
        }
        // An untrained parent mostly babbles; nothing is filtered out.
        assert!(sa.unparseable > 0);
    }

    #[test]
    fn deterministic_parent_yields_identical_targets() {
        let (v, p, trajs) = setup();
        let u = v.encode_text("first left 1").unwrap();
        let content = u[..u.len() - 1].to_vec();
        let parent = TwoWay(content.clone(), content);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ex, _) = spawn_child_corpus(&parent, &v, &p, &trajs, 6, &mut rng, 40).unwrap();
        assert_eq!(ex[0].targets, vec![u]);
        assert_eq!(ex[0].counts, vec![6]);
        assert!(spawn_child_corpus(&parent, &v, &p, &trajs, 0, &mut rng, 40).is_err());
    }

    #[test]
    fn child_can_collapse_and_still_score_perfectly() {
        let v = Vocabulary::standard();
        let spec = LanguageSpec::free_order(true).with_segment_range(2, 2);
        let parser = spec.compile();
        let t: Trajectory = "LEFT UP UP".parse().unwrap();
        let strip = |s: &str| {
            let mut ids = v.encode_text(s).unwrap();
            ids.pop();
            ids
        };
        let parent = TwoWay(strip("first left 1 second up 2"), strip("second up 2 first left 1"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, _) = spawn_child_corpus(&parent, &v, &parser, std::slice::from_ref(&t), 6, &mut rng, 40).unwrap();
        let dev = parent_eval_set(&parent, &v, &parser, std::slice::from_ref(&t), 20, &mut rng, 40).unwrap();
        assert_eq!(dev.speaker[0].accepted.as_ref().unwrap().len(), 2);
        let cfg = TrainConfig {
            hidden: 8,
            batch_size: 1,
            max_epochs: 5000,
            patience: None,
            targets: TargetPolicy::All,
            stop_at: Some(1.0),
            ..TrainConfig::default()
        };
        let data = TrainData {
            vocab: &v,
            parser: &parser,
            train: &train,
            dev: &dev,
            test: None,
        };
        let child = train_from(Agent::new(&v, cfg.agent_config(), 0), &data, &cfg).unwrap();
        let acc = communication_accuracy(&child.agent, &v, &parser, &dev, Role::Speaker, 40).unwrap();
        assert_eq!(acc.value(), 1.0);
        // Greedy output is a single utterance: the child keeps one of the two.
        let out = child.agent.greedy_decode(&v.encode_trajectory(&t), 40).unwrap();
        assert!(dev.speaker[0].accepted.as_ref().unwrap().contains(&out.tokens));
    }

    #[test]
    fn lineage_persists_and_leaves_parents_untouched() {
        let v = Vocabulary::standard();
        let spec = LanguageSpec::forward_iconic(true).with_segment_range(1, 1);
        let corpus = build_corpus_with(
            &spec,
            CorpusOptions {
                seed: 0,
                trajectory_limit: None,
                permutation_closed: false,
            },
        )
        .unwrap();
        let cfg = LineageConfig {
            generations: 3,
            samples_per_trajectory: 2,
            train: TrainConfig {
                hidden: 6,
                max_epochs: 3,
                ..TrainConfig::default()
            },
            ..LineageConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let records = run_lineage(&v, &corpus, &cfg, Some(dir.path())).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            let g = dir.path().join(format!("gen-{}", r.generation));
            let on_disk = std::fs::read(g.join("checkpoint.bin")).unwrap();
            let mut mem = Vec::new();
            r.agent.write_checkpoint(&mut mem).unwrap();
            // Each parent's checkpoint, written before its child trained, is
            // byte-identical to the parent kept in memory afterwards.
            assert_eq!(on_disk, mem);
            assert!(g.join("metrics.csv").exists());
        }
        assert!(dir.path().join("lineage.json").exists());
        assert_eq!(records[1].spawn.samples, 2 * corpus.trajectories(SplitName::Train).len());
        let again = run_lineage(&v, &corpus, &cfg, None).unwrap();
        assert_eq!(again[2].agent.params(), records[2].agent.params());
    }

    #[test]
    fn protocol_shares_founders() {
        let v = Vocabulary::standard();
        let spec = LanguageSpec::forward_iconic(true).with_segment_range(1, 1);
        let corpus = build_corpus_with(&spec, CorpusOptions::default()).unwrap();
        let cfg = LineageConfig {
            generations: 2,
            samples_per_trajectory: 2,
            train: TrainConfig {
                hidden: 4,
                max_epochs: 2,
                ..TrainConfig::default()
            },
            ..LineageConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let runs = run_protocol(&v, &corpus, &cfg, 2, 2, Some(dir.path()), 2).unwrap();
        assert_eq!(runs.len(), 4);
        let founder = |p: usize, s: usize| runs.iter().find(|r| r.parent == p && r.seed == s).unwrap();
        assert_eq!(founder(0, 0).records[0].agent.params(), founder(0, 1).records[0].agent.params());
        assert_ne!(founder(0, 0).records[0].agent.params(), founder(1, 0).records[0].agent.params());
        assert_ne!(founder(0, 0).records[1].agent.params(), founder(0, 1).records[1].agent.params());
        assert!(dir.path().join("parent-1/seed-1/gen-1/checkpoint.bin").exists());

        // One parent and one seed is a plain lineage.
        let single = run_protocol(&v, &corpus, &cfg, 1, 1, None, 1).unwrap();
        let plain = run_lineage(&v, &corpus, &cfg, None).unwrap();
        assert_eq!(single[0].records[1].agent.params(), plain[1].agent.params());
    }
}
