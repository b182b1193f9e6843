//! Individual learning.
//!
//! Batching: an epoch visits every training trajectory once, in a seeded
//! shuffled order, `batch_size` trajectories per optimizer step. For each
//! trajectory the target policy picks `n_j` of its training utterances; the
//! speaker term is `(1/n_j) Σ_k NLL(u_k | t)` and the listener term is
//! `(1/n_j) Σ_k NLL(t | u_k)` over the same utterances. Both are averaged
//! over the batch and their gradients summed into a single AMSGrad step.
//! Repeated targets (identical parent samples) are merged and weighted by
//! their multiplicity.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::agent::{Agent, AgentConfig, Init, Role, DEFAULT_MAX_LEN};
use crate::corpus::{group_by_trajectory, Pair, SplitCorpus, SplitName, TargetPolicy, Vocabulary};
use crate::error::{Error, Result};
use crate::grammar::{Locality, Parser, SplitPolicy};
use crate::gridworld::Trajectory;
use crate::metrics::{communication_accuracy, long_distance_fraction, utterances_of, EvalSet};
use crate::neural::{AmsgradConfig, AmsgradState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub attention: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; `None` trains for
    /// `max_epochs`.
    pub patience: Option<usize>,
    /// Epochs always run before patience or `stop_at` can end training.
    pub min_epochs: usize,
    pub targets: TargetPolicy,
    pub optimizer: AmsgradConfig,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub max_len: usize,
    /// Evaluate only the first `k` dev (and test) items per role.
    pub eval_limit: Option<usize>,
    /// Stop as soon as the dev score reaches this value.
    pub stop_at: Option<f64>,
    pub init: Init,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 16,
            attention: true,
            batch_size: 16,
            max_epochs: 500,
            patience: Some(5),
            min_epochs: 0,
            targets: TargetPolicy::Subsample(6),
            optimizer: AmsgradConfig::default(),
            clip_norm: None,
            max_len: DEFAULT_MAX_LEN,
            eval_limit: None,
            stop_at: None,
            init: Init::SmallUniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden,
            attention: self.attention,
        }
    }

    pub fn fresh_agent(&self, vocab: &Vocabulary) -> Agent {
        Agent::with_init(vocab, self.agent_config(), self.seed, self.init)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidConfig(format!("{field}: {why}")));
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience", "must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// One trajectory with its candidate speaker targets.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub trajectory: Trajectory,
    /// Action ids with EOS: speaker input and listener target.
    pub actions: Vec<usize>,
    /// Distinct utterance id sequences with EOS.
    pub targets: Vec<Vec<usize>>,
    /// Multiplicity of each target.
    pub counts: Vec<usize>,
    /// Per-target locality, when the language has long-distance forms.
    pub long_distance: Option<Vec<bool>>,
}

impl TrainExample {
    /// Builds an example from raw (possibly repeated) target sequences.
    pub fn from_samples(vocab: &Vocabulary, trajectory: Trajectory, samples: &[Vec<usize>]) -> Self {
        let mut index: HashMap<&[usize], usize> = HashMap::new();
        let mut targets: Vec<Vec<usize>> = Vec::new();
        let mut counts = Vec::new();
        for s in samples {
            match index.get(s.as_slice()) {
                Some(&i) => counts[i] += 1,
                None => {
                    index.insert(s, targets.len());
                    targets.push(s.clone());
                    counts.push(1);
                }
            }
        }
        TrainExample {
            actions: vocab.encode_trajectory(&trajectory),
            trajectory,
            targets,
            counts,
            long_distance: None,
        }
    }

    /// Indices of the targets used in one step, per `policy`.
    pub fn select<R: Rng>(&self, policy: TargetPolicy, rng: &mut R) -> Result<Vec<usize>> {
        let n = self.targets.len();
        if n == 0 {
            return Err(Error::InvalidConfig("example without targets".into()));
        }
        let subsample = |pool: &[usize], k: usize, rng: &mut R| -> Vec<usize> {
            if pool.len() <= k {
                pool.to_vec()
            } else {
                index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
            }
        };
        let all: Vec<usize> = (0..n).collect();
        Ok(match policy {
            TargetPolicy::All => all,
            TargetPolicy::Subsample(k) => subsample(&all, k, rng),
            TargetPolicy::Balanced { per_class } => {
                let flags = self
                    .long_distance
                    .as_ref()
                    .ok_or(Error::UnsupportedLanguage("a long-distance language"))?;
                let (split, local): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| flags[i]);
                if split.is_empty() {
                    match per_class {
                        Some(k) => subsample(&local, k.max(1), rng),
                        None => local,
                    }
                } else {
                    let mut k = local.len().min(split.len()).max(1);
                    if let Some(cap) = per_class {
                        k = k.min(cap.max(1));
                    }
                    let mut out = subsample(&local, k, rng);
                    out.extend(subsample(&split, k, rng));
                    out
                }
            }
        })
    }
}

/// Training examples from ground-truth pairs, grouped by trajectory.
pub fn examples_from_pairs(vocab: &Vocabulary, parser: &Parser, pairs: &[Pair]) -> Vec<TrainExample> {
    let split_lang = parser.spec().split == crate::grammar::SplitPolicy::AllowSplit;
    group_by_trajectory(pairs)
        .into_iter()
        .map(|ex| {
            let long_distance = split_lang.then(|| {
                ex.targets
                    .iter()
                    .map(|u| matches!(parser.classify(u), Ok(Locality::LongDistance)))
                    .collect()
            });
            TrainExample {
                actions: vocab.encode_trajectory(&ex.trajectory),
                targets: ex.targets.iter().map(|u| vocab.encode_utterance(u)).collect(),
                counts: vec![1; ex.targets.len()],
                long_distance,
                trajectory: ex.trajectory,
            }
        })
        .collect()
}

/// Mean over the batch of `(1/n_j) Σ_k NLL(u_k | t_j)`. Each entry is the
/// trajectory input and its target multiset (repeats count repeatedly).
pub fn speaker_loss(agent: &Agent, batch: &[(&[usize], Vec<&[usize]>)], mut grads: Option<&mut [f64]>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (input, targets) in batch {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("empty target set".into()));
        }
        let w = scale / targets.len() as f64;
        let weighted: Vec<(&[usize], f64)> = targets.iter().map(|t| (*t, w)).collect();
        total += agent.weighted_nll(input, &weighted, grads.as_deref_mut())?;
    }
    Ok(total)
}

/// Mean NLL of the action sequence given the utterance over `(u, t)` pairs.
pub fn listener_loss(agent: &Agent, batch: &[(&[usize], &[usize])], mut grads: Option<&mut [f64]>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (u, t) in batch {
        total += agent.weighted_nll(u, &[(*t, w)], grads.as_deref_mut())?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub speaker_loss: f64,
    pub listener_loss: f64,
    pub dev_speaker: f64,
    pub dev_listener: f64,
    pub test_speaker: Option<f64>,
    pub test_listener: Option<f64>,
    /// Long-distance share of parseable greedy dev speaker outputs, for
    /// languages that allow split phrases.
    pub dev_long_distance: Option<f64>,
}

impl EpochRecord {
    pub fn dev_score(&self) -> f64 {
        (self.dev_speaker + self.dev_listener) / 2.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub epochs: Vec<EpochRecord>,
}

impl LearningCurve {
    /// Long format: `epoch,split,metric,value`, metrics `speaker_loss`,
    /// `listener_loss`, `speaker_accuracy`, `listener_accuracy` and
    /// `long_distance_fraction`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.epochs {
            let e = r.epoch;
            let _ = writeln!(s, "{e},train,speaker_loss,{}", r.speaker_loss);
            let _ = writeln!(s, "{e},train,listener_loss,{}", r.listener_loss);
            let _ = writeln!(s, "{e},dev,speaker_accuracy,{}", r.dev_speaker);
            let _ = writeln!(s, "{e},dev,listener_accuracy,{}", r.dev_listener);
            if let Some(f) = r.dev_long_distance {
                let _ = writeln!(s, "{e},dev,long_distance_fraction,{f}");
            }
            if let Some(a) = r.test_speaker {
                let _ = writeln!(s, "{e},test,speaker_accuracy,{a}");
            }
            if let Some(b) = r.test_listener {
                let _ = writeln!(s, "{e},test,listener_accuracy,{b}");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::format("learning curve csv", l);
        let mut by_epoch: BTreeMap<usize, EpochRecord> = BTreeMap::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            let epoch: usize = f[0].parse().map_err(|_| bad(line))?;
            let v: f64 = f[3].parse().map_err(|_| bad(line))?;
            let r = by_epoch.entry(epoch).or_insert(EpochRecord {
                epoch,
                speaker_loss: 0.0,
                listener_loss: 0.0,
                dev_speaker: 0.0,
                dev_listener: 0.0,
                test_speaker: None,
                test_listener: None,
                dev_long_distance: None,
            });
            match (f[1], f[2]) {
                ("train", "speaker_loss") => r.speaker_loss = v,
                ("train", "listener_loss") => r.listener_loss = v,
                ("dev", "speaker_accuracy") => r.dev_speaker = v,
                ("dev", "listener_accuracy") => r.dev_listener = v,
                ("dev", "long_distance_fraction") => r.dev_long_distance = Some(v),
                ("test", "speaker_accuracy") => r.test_speaker = Some(v),
                ("test", "listener_accuracy") => r.test_listener = Some(v),
                _ => return Err(bad(line)),
            }
        }
        Ok(LearningCurve {
            epochs: by_epoch.into_values().collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Parameters from the epoch with the best dev score.
    pub agent: Agent,
    pub curve: LearningCurve,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub epochs_run: usize,
}

/// Everything a training run reads: examples, evaluation sets and the
/// grammar used to score speaker outputs.
pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub parser: &'a Parser,
    pub train: &'a [TrainExample],
    pub dev: &'a EvalSet,
    pub test: Option<&'a EvalSet>,
}

struct Evaluation {
    speaker: f64,
    listener: f64,
    long_distance: Option<f64>,
}

fn evaluate(agent: &Agent, data: &TrainData, set: &EvalSet, cfg: &TrainConfig) -> Result<Evaluation> {
    let limited;
    let set = match cfg.eval_limit {
        Some(k) => {
            limited = set.truncated(k);
            &limited
        }
        None => set,
    };
    let s = communication_accuracy(agent, data.vocab, data.parser, set, Role::Speaker, cfg.max_len)?;
    let l = communication_accuracy(agent, data.vocab, data.parser, set, Role::Listener, cfg.max_len)?;
    let long_distance = if data.parser.spec().split == SplitPolicy::AllowSplit {
        let outputs = set
            .speaker
            .iter()
            .map(|item| agent.greedy_decode(&item.input, cfg.max_len))
            .collect::<Result<Vec<_>>>()?;
        Some(long_distance_fraction(data.parser, &utterances_of(data.vocab, &outputs)))
    } else {
        None
    };
    Ok(Evaluation {
        speaker: s.value(),
        listener: l.value(),
        long_distance,
    })
}

/// One epoch of synchronous speaker+listener training; returns the mean
/// speaker and listener losses over batches.
pub fn train_epoch<R: Rng>(
    agent: &mut Agent,
    opt: &mut AmsgradState,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut grads = vec![0.0; agent.num_params()];
    let (mut s_sum, mut l_sum, mut batches) = (0.0, 0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        grads.fill(0.0);
        let scale = 1.0 / batch.len() as f64;
        let (mut s_loss, mut l_loss) = (0.0, 0.0);
        for &i in batch {
            let ex = &examples[i];
            let chosen = ex.select(cfg.targets, rng)?;
            let total: usize = chosen.iter().map(|&k| ex.counts[k]).sum();
            let weighted: Vec<(&[usize], f64)> = chosen
                .iter()
                .map(|&k| (ex.targets[k].as_slice(), scale * ex.counts[k] as f64 / total as f64))
                .collect();
            s_loss += agent.weighted_nll(&ex.actions, &weighted, Some(&mut grads))?;
            for (u, w) in &weighted {
                l_loss += agent.weighted_nll(u, &[(&ex.actions, *w)], Some(&mut grads))?;
            }
        }
        if let Some(max) = cfg.clip_norm {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grads.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients"));
        }
        opt.update(&cfg.optimizer, agent.params_mut().values_mut(), &grads)?;
        s_sum += s_loss;
        l_sum += l_loss;
        batches += 1;
    }
    let b = batches.max(1) as f64;
    Ok((s_sum / b, l_sum / b))
}

/// Trains one agent from `cfg.seed` with early stopping on the mean of
/// speaker and listener dev accuracy; keeps the best parameters.
pub fn train_run(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(cfg.fresh_agent(data.vocab), data, cfg)
}

/// Like [`train_run`] but starting from given parameters.
pub fn train_from(mut agent: Agent, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AmsgradState::new(agent.num_params());
    let mut curve = LearningCurve::default();
    let mut best = (agent.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let (s_loss, l_loss) = train_epoch(&mut agent, &mut opt, data.train, cfg, &mut rng)?;
        let dev = evaluate(&agent, data, data.dev, cfg)?;
        let test = data.test.map(|t| evaluate(&agent, data, t, cfg)).transpose()?;
        let rec = EpochRecord {
            epoch,
            speaker_loss: s_loss,
            listener_loss: l_loss,
            dev_speaker: dev.speaker,
            dev_listener: dev.listener,
            test_speaker: test.as_ref().map(|t| t.speaker),
            test_listener: test.as_ref().map(|t| t.listener),
            dev_long_distance: dev.long_distance,
        };
        let score = rec.dev_score();
        curve.epochs.push(rec);
        epochs_run = epoch;
        // Ties go to the later, longer-trained parameters; only strict
        // improvement resets patience.
        if score > best.2 {
            stale = 0;
        } else {
            stale += 1;
        }
        if score >= best.2 {
            best = (agent.clone(), epoch, score);
        }
        if epoch < cfg.min_epochs {
            continue;
        }
        if cfg.stop_at.is_some_and(|t| score >= t) {
            break;
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(TrainOutcome {
        config: cfg.clone(),
        agent: best.0,
        curve,
        best_epoch: best.1,
        best_dev: best.2,
        epochs_run,
    })
}

/// Hyper-parameter grid; every other field comes from the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub hidden: Vec<usize>,
    pub batch: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            hidden: vec![16, 20],
            batch: vec![16, 32],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// One run per grid point, all with the first seed.
    pub search: Vec<TrainOutcome>,
    pub best: usize,
    /// The best grid point re-trained with every seed.
    pub reruns: Vec<TrainOutcome>,
}

/// Grid search on dev accuracy, then re-training of the winning point
/// with each seed. Runs use up to `jobs` threads.
pub fn train_individual(data: &TrainData, base: &TrainConfig, grid: &Grid, jobs: usize) -> Result<GridResult> {
    if grid.hidden.is_empty() || grid.batch.is_empty() || grid.seeds.is_empty() {
        return Err(Error::InvalidConfig("grid: every axis needs a value".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("jobs: {e}")))?;
    let points: Vec<TrainConfig> = grid
        .hidden
        .iter()
        .flat_map(|&h| {
            grid.batch.iter().map(move |&b| TrainConfig {
                hidden: h,
                batch_size: b,
                seed: grid.seeds[0],
                ..base.clone()
            })
        })
        .collect();
    let search: Vec<TrainOutcome> = pool.install(|| points.par_iter().map(|c| train_run(data, c)).collect::<Result<_>>())?;
    let best = (0..search.len())
        .max_by(|&a, &b| {
            search[a]
                .best_dev
                .partial_cmp(&search[b].best_dev)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
        .expect("non-empty grid");
    let reruns: Vec<TrainOutcome> = pool.install(|| {
        grid.seeds
            .par_iter()
            .map(|&seed| {
                if seed == search[best].config.seed {
                    Ok(search[best].clone())
                } else {
                    train_run(data, &TrainConfig { seed, ..search[best].config.clone() })
                }
            })
            .collect::<Result<_>>()
    })?;
    Ok(GridResult { search, best, reruns })
}

/// Standard evaluation sets for a ground-truth corpus.
pub fn corpus_eval_sets(vocab: &Vocabulary, corpus: &SplitCorpus) -> (EvalSet, EvalSet) {
    (
        EvalSet::from_pairs(vocab, corpus.split(SplitName::Dev)),
        EvalSet::from_pairs(vocab, corpus.split(SplitName::Test)),
    )
}

/// Writes `curve.csv`, `checkpoint.bin` and `manifest.json` into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, spec_hash: &str, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("curve.csv"), outcome.curve.to_csv())?;
    outcome.agent.save(&dir.join("checkpoint.bin"))?;
    let c = &outcome.config;
    let manifest = json!({
        "config": {
            "hidden": c.hidden,
            "attention": c.attention,
            "batch": c.batch_size,
            "max_epochs": c.max_epochs,
            "patience": c.patience,
            "targets": c.targets.to_string(),
            "lr": c.optimizer.lr,
            "beta1": c.optimizer.beta1,
            "beta2": c.optimizer.beta2,
            "eps": c.optimizer.eps,
            "clip_norm": c.clip_norm,
            "max_len": c.max_len,
            "eval_limit": c.eval_limit,
            "stop_at": c.stop_at,
            "init": c.init.to_string(),
        },
        "seed": c.seed,
        "spec_hash": spec_hash,
        "best_epoch": outcome.best_epoch,
        "best_dev": outcome.best_dev,
        "epochs_run": outcome.epochs_run,
        "extra": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
