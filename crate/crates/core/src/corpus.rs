//! Datasets: vocabulary, trajectory-utterance pairs, splits and target
//! sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grammar::{all_words, LanguageSpec, Locality, Parser, SplitPolicy, Utterance, Word};
use crate::gridworld::{enumerate_range, Direction, Segment, Trajectory};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Pad,
    Sos,
    Eos,
    Action(Direction),
    Word(Word),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Pad => f.write_str("<pad>"),
            Symbol::Sos => f.write_str("<sos>"),
            Symbol::Eos => f.write_str("<eos>"),
            Symbol::Action(d) => f.write_str(d.action_name()),
            Symbol::Word(w) => write!(f, "{w}"),
        }
    }
}

/// Joint symbol inventory shared by encoder inputs and decoder outputs in
/// both roles. Ids are dense: control symbols, then actions, then words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    ids: HashMap<Symbol, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut symbols = vec![Symbol::Pad, Symbol::Sos, Symbol::Eos];
        symbols.extend(Direction::ALL.iter().map(|&d| Symbol::Action(d)));
        symbols.extend(all_words().into_iter().map(Symbol::Word));
        let ids = symbols.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Vocabulary { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, s: Symbol) -> usize {
        self.ids[&s]
    }

    pub fn symbol(&self, id: usize) -> Result<Symbol> {
        self.symbols.get(id).copied().ok_or(Error::OutOfRange {
            index: id,
            len: self.symbols.len(),
        })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn is_word(&self, id: usize) -> bool {
        matches!(self.symbols.get(id), Some(Symbol::Word(_)))
    }

    pub fn is_marker(&self, id: usize) -> bool {
        matches!(self.symbols.get(id), Some(Symbol::Word(Word::Marker(_))))
    }

    /// Word ids followed by EOS.
    pub fn encode_utterance(&self, u: &Utterance) -> Vec<usize> {
        let mut ids: Vec<usize> = u.words().iter().map(|&w| self.id(Symbol::Word(w))).collect();
        ids.push(EOS);
        ids
    }

    /// Action ids followed by EOS.
    pub fn encode_trajectory(&self, t: &Trajectory) -> Vec<usize> {
        let mut ids: Vec<usize> = t
            .to_actions()
            .into_iter()
            .map(|d| self.id(Symbol::Action(d)))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Parses whitespace-separated symbol names (words or actions).
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = text
            .split_whitespace()
            .map(|tok| {
                if let Ok(w) = tok.parse::<Word>() {
                    Ok(self.id(Symbol::Word(w)))
                } else if let Ok(d) = tok.parse::<Direction>() {
                    Ok(self.id(Symbol::Action(d)))
                } else {
                    Err(Error::UnknownToken(tok.to_string()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Symbols up to the first EOS, with PAD dropped.
    pub fn content<'a>(&self, ids: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        ids.iter().copied().take_while(|&i| i != EOS).filter(|&i| i != PAD)
    }

    pub fn decode_utterance(&self, ids: &[usize]) -> Result<Utterance> {
        let words = self
            .content(ids)
            .map(|id| match self.symbol(id)? {
                Symbol::Word(w) => Ok(w),
                other => Err(Error::UnknownToken(other.to_string())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Utterance::new(words))
    }

    pub fn decode_actions(&self, ids: &[usize]) -> Result<Vec<Direction>> {
        self.content(ids)
            .map(|id| match self.symbol(id)? {
                Symbol::Action(d) => Ok(d),
                other => Err(Error::UnknownToken(other.to_string())),
            })
            .collect()
    }

    pub fn decode_trajectory(&self, ids: &[usize]) -> Result<Trajectory> {
        Trajectory::from_actions(&self.decode_actions(ids)?)
    }

    /// Display form of an arbitrary id sequence, for logs.
    pub fn render(&self, ids: &[usize]) -> String {
        let names: Vec<String> = self
            .content(ids)
            .map(|id| match self.symbol(id) {
                Ok(s) => s.to_string(),
                Err(_) => format!("<{id}>"),
            })
            .collect();
        names.join(" ")
    }

    /// SHA-256 over the symbol list, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.to_string().as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub trajectory: Trajectory,
    pub utterance: Utterance,
}

/// A trajectory with its target utterances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub trajectory: Trajectory,
    pub targets: Vec<Utterance>,
}

impl Example {
    /// Full ground-truth support of `P(u|t)`.
    pub fn from_spec(spec: &LanguageSpec, trajectory: Trajectory) -> Result<Self> {
        let targets = spec.utterances_for(&trajectory)?;
        Ok(Example { trajectory, targets })
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }
}

/// Groups pairs by trajectory, keeping first-appearance order.
pub fn group_by_trajectory(pairs: &[Pair]) -> Vec<Example> {
    let mut index: HashMap<&Trajectory, usize> = HashMap::new();
    let mut out: Vec<Example> = Vec::new();
    for p in pairs {
        match index.get(&p.trajectory) {
            Some(&i) => out[i].targets.push(p.utterance.clone()),
            None => {
                index.insert(&p.trajectory, out.len());
                out.push(Example {
                    trajectory: p.trajectory.clone(),
                    targets: vec![p.utterance.clone()],
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusOptions {
    pub seed: u64,
    /// Keep only this many trajectories (seeded uniform sample, enumeration
    /// order preserved) before pairing. `None` keeps the full space.
    pub trajectory_limit: Option<usize>,
    /// After sampling, add every valid reordering of each kept trajectory's
    /// segments, so an unmarked free-order utterance has all of its
    /// interpretations in the corpus.
    pub permutation_closed: bool,
}

#[derive(Debug, Clone)]
pub struct SplitCorpus {
    pub spec: LanguageSpec,
    pub options: CorpusOptions,
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl SplitCorpus {
    pub fn split(&self, which: SplitName) -> &[Pair] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct trajectories of a split, first-appearance order.
    pub fn trajectories(&self, which: SplitName) -> Vec<Trajectory> {
        group_by_trajectory(self.split(which))
            .into_iter()
            .map(|e| e.trajectory)
            .collect()
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for which in [SplitName::Train, SplitName::Dev, SplitName::Test] {
            write_pairs(&dir.join(format!("{which}.tsv")), self.split(which))?;
        }
        std::fs::write(dir.join("language.txt"), self.spec.to_kv())?;
        Ok(())
    }
}

/// Enumerates every distinct trajectory-utterance pair, shuffles them with
/// `seed`, and splits 80/10/10 (dev and test get `round(N/10)` each).
pub fn build_corpus(spec: &LanguageSpec, seed: u64) -> Result<SplitCorpus> {
    build_corpus_with(
        spec,
        CorpusOptions {
            seed,
            trajectory_limit: None,
            permutation_closed: false,
        },
    )
}

pub fn build_corpus_with(spec: &LanguageSpec, options: CorpusOptions) -> Result<SplitCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut trajectories = enumerate_range(spec.min_segments, spec.max_segments)?;
    if let Some(limit) = options.trajectory_limit {
        if limit < trajectories.len() {
            let mut keep = index::sample(&mut rng, trajectories.len(), limit).into_vec();
            keep.sort_unstable();
            let kept: Vec<Trajectory> = keep.into_iter().map(|i| trajectories[i].clone()).collect();
            trajectories = if options.permutation_closed {
                let closed: HashSet<Trajectory> = kept.iter().flat_map(reorderings).collect();
                trajectories.into_iter().filter(|t| closed.contains(t)).collect()
            } else {
                kept
            };
        }
    }
    let mut pairs = Vec::new();
    for t in trajectories {
        for u in spec.utterances_for(&t)? {
            pairs.push(Pair {
                trajectory: t.clone(),
                utterance: u,
            });
        }
    }
    pairs.shuffle(&mut rng);
    let n = pairs.len();
    let held_out = (n as f64 / 10.0).round() as usize;
    let test = pairs.split_off(n - held_out);
    let dev = pairs.split_off(n - 2 * held_out);
    Ok(SplitCorpus {
        spec: spec.clone(),
        options,
        train: pairs,
        dev,
        test,
    })
}

/// Every valid trajectory whose segments are a reordering of `t`'s.
pub fn reorderings(t: &Trajectory) -> Vec<Trajectory> {
    fn go(rest: &mut Vec<Segment>, acc: &mut Vec<Segment>, out: &mut HashSet<Trajectory>) {
        if rest.is_empty() {
            if let Ok(t) = Trajectory::new(acc.clone()) {
                out.insert(t);
            }
            return;
        }
        for i in 0..rest.len() {
            if acc.last().is_some_and(|l| l.direction == rest[i].direction) {
                continue;
            }
            let s = rest.remove(i);
            acc.push(s);
            go(rest, acc, out);
            acc.pop();
            rest.insert(i, s);
        }
    }
    let mut out = HashSet::new();
    go(&mut t.segments().to_vec(), &mut Vec::new(), &mut out);
    let mut v: Vec<Trajectory> = out.into_iter().collect();
    v.sort();
    v
}

pub fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(out, "{}\t{}", p.trajectory, p.utterance)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (t, u) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("corpus line", format!("line {}: missing TAB", i + 1)))?;
        out.push(Pair {
            trajectory: t.parse()?,
            utterance: u.parse()?,
        });
    }
    Ok(out)
}

/// How many speaker targets a trajectory contributes per training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// Uniform sample without replacement of at most `n` targets.
    Subsample(usize),
    /// Every target.
    All,
    /// Equal numbers of local and long-distance targets; optionally capped
    /// per class.
    Balanced { per_class: Option<usize> },
}

impl fmt::Display for TargetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetPolicy::Subsample(n) => write!(f, "{n}"),
            TargetPolicy::All => f.write_str("all"),
            TargetPolicy::Balanced { per_class: None } => f.write_str("balanced"),
            TargetPolicy::Balanced { per_class: Some(k) } => write!(f, "balanced:{k}"),
        }
    }
}

impl std::str::FromStr for TargetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("target policy {s:?}"));
        match s {
            "all" => Ok(TargetPolicy::All),
            "balanced" => Ok(TargetPolicy::Balanced { per_class: None }),
            _ => {
                if let Some(k) = s.strip_prefix("balanced:") {
                    let k = k.parse().map_err(|_| bad())?;
                    return Ok(TargetPolicy::Balanced { per_class: Some(k) });
                }
                let n: usize = s.parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err(bad());
                }
                Ok(TargetPolicy::Subsample(n))
            }
        }
    }
}

/// Uniform sample without replacement of at most `n` targets; the full set
/// when it has `n` or fewer elements.
pub fn sample_targets<R: Rng>(targets: &[Utterance], n: usize, rng: &mut R) -> Vec<Utterance> {
    assert!(n >= 1, "sample size must be positive");
    if targets.len() <= n {
        return targets.to_vec();
    }
    index::sample(rng, targets.len(), n)
        .into_iter()
        .map(|i| targets[i].clone())
        .collect()
}

/// Every local target plus an equally sized uniform sample of the
/// long-distance ones (all locals when there are no long-distance targets).
pub fn balanced_split_sample<R: Rng>(
    parser: &Parser,
    targets: &[Utterance],
    per_class: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Utterance>> {
    if parser.spec().split != SplitPolicy::AllowSplit {
        return Err(Error::UnsupportedLanguage("a long-distance language"));
    }
    let mut local = Vec::new();
    let mut split = Vec::new();
    for u in targets {
        match parser.classify(u)? {
            Locality::Local => local.push(u.clone()),
            Locality::LongDistance => split.push(u.clone()),
        }
    }
    if split.is_empty() {
        return Ok(match per_class {
            Some(k) => sample_targets(&local, k.max(1), rng),
            None => local,
        });
    }
    let mut k = local.len().min(split.len());
    if let Some(cap) = per_class {
        k = k.min(cap);
    }
    let mut out = sample_targets(&local, k.max(1), rng);
    out.extend(sample_targets(&split, k.max(1), rng));
    Ok(out)
}

/// Applies a [`TargetPolicy`] to one example's targets.
pub fn select_targets<R: Rng>(
    policy: TargetPolicy,
    parser: &Parser,
    targets: &[Utterance],
    rng: &mut R,
) -> Result<Vec<Utterance>> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("example without targets".into()));
    }
    match policy {
        TargetPolicy::All => Ok(targets.to_vec()),
        TargetPolicy::Subsample(n) => Ok(sample_targets(targets, n, rng)),
        TargetPolicy::Balanced { per_class } => balanced_split_sample(parser, targets, per_class, rng),
    }
}
