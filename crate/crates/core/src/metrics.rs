//! Evaluation: communication accuracy, phrase-order statistics, marker and
//! locality counts.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::IteratorRandom;
use rand::Rng;

use crate::agent::{Agent, Decoded, Role};
use crate::corpus::{Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::grammar::{Locality, OrderTemplate, Parser, Utterance};
use crate::gridworld::Trajectory;

/// A trajectory to describe, with the utterances that count as correct.
#[derive(Debug, Clone)]
pub struct SpeakerItem {
    pub trajectory: Trajectory,
    pub input: Vec<usize>,
    /// Accepted outputs (ids without EOS). `None` accepts the language's
    /// full support for the trajectory.
    pub accepted: Option<HashSet<Vec<usize>>>,
}

/// An utterance to interpret, with the expected action ids (no EOS).
#[derive(Debug, Clone)]
pub struct ListenerItem {
    pub input: Vec<usize>,
    pub expected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub speaker: Vec<SpeakerItem>,
    pub listener: Vec<ListenerItem>,
}

impl EvalSet {
    /// Ground-truth evaluation over a list of pairs: one speaker item per
    /// distinct trajectory, one listener item per pair.
    pub fn from_pairs(vocab: &Vocabulary, pairs: &[Pair]) -> Self {
        let mut seen = HashSet::new();
        let mut speaker = Vec::new();
        let mut listener = Vec::with_capacity(pairs.len());
        for p in pairs {
            if seen.insert(p.trajectory.clone()) {
                speaker.push(SpeakerItem {
                    trajectory: p.trajectory.clone(),
                    input: vocab.encode_trajectory(&p.trajectory),
                    accepted: None,
                });
            }
            let mut expected = vocab.encode_trajectory(&p.trajectory);
            expected.pop();
            listener.push(ListenerItem {
                input: vocab.encode_utterance(&p.utterance),
                expected,
            });
        }
        EvalSet { speaker, listener }
    }

    /// The first `limit` items of each role.
    pub fn truncated(&self, limit: usize) -> Self {
        EvalSet {
            speaker: self.speaker.iter().take(limit).cloned().collect(),
            listener: self.listener.iter().take(limit).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accuracy {
    pub hits: usize,
    pub total: usize,
    /// Speaker outputs the grammar cannot parse.
    pub unparseable: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Whether a greedy speaker output is acceptable for `item`.
pub fn speaker_hit(vocab: &Vocabulary, parser: &Parser, item: &SpeakerItem, out: &Decoded) -> (bool, bool) {
    if out.truncated {
        return (false, true);
    }
    let utterance = vocab.decode_utterance(&out.tokens).ok();
    let parses = utterance.as_ref().is_some_and(|u| parser.interpret(u).is_ok());
    let hit = match &item.accepted {
        Some(set) => set.contains(&out.tokens),
        None => utterance.is_some_and(|u| parser.accepts(&u, &item.trajectory)),
    };
    (hit, !parses)
}

/// Greedy-decode accuracy in one role. Speaker: hit iff the output is in
/// the item's accepted set. Listener: exact action-sequence match.
pub fn communication_accuracy(
    agent: &Agent,
    vocab: &Vocabulary,
    parser: &Parser,
    set: &EvalSet,
    role: Role,
    max_len: usize,
) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    match role {
        Role::Speaker => {
            for item in &set.speaker {
                let out = agent.greedy_decode(&item.input, max_len)?;
                let (hit, bad) = speaker_hit(vocab, parser, item, &out);
                acc.hits += hit as usize;
                acc.unparseable += bad as usize;
                acc.total += 1;
            }
        }
        Role::Listener => {
            for item in &set.listener {
                let out = agent.greedy_decode(&item.input, max_len)?;
                acc.hits += (!out.truncated && out.tokens == item.expected) as usize;
                acc.total += 1;
            }
        }
    }
    Ok(acc)
}

/// Counts of order templates over produced utterances.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrderHistogram {
    counts: BTreeMap<OrderTemplate, usize>,
    total: usize,
}

impl OrderHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, template: OrderTemplate) {
        *self.counts.entry(template).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn add_count(&mut self, template: OrderTemplate, count: usize) {
        if count > 0 {
            *self.counts.entry(template).or_insert(0) += count;
            self.total += count;
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn support(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, template: &OrderTemplate) -> usize {
        self.counts.get(template).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&OrderTemplate, usize)> {
        self.counts.iter().map(|(t, &c)| (t, c))
    }

    /// Descending count, ties by template order.
    pub fn sorted(&self) -> Vec<(OrderTemplate, usize)> {
        let mut v: Vec<_> = self.counts.iter().map(|(t, &c)| (t.clone(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    /// Projection onto phrase permutations (drops element order and
    /// split structure).
    pub fn permutations(&self) -> OrderHistogram {
        let mut h = OrderHistogram::new();
        for (t, &c) in &self.counts {
            h.add_count(OrderTemplate::phrase_level(&t.permutation()), c);
        }
        h
    }

    /// `template,count` lines in sorted order, with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("template,count\n");
        for (t, c) in self.sorted() {
            let _ = writeln!(s, "{t},{c}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut h = OrderHistogram::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (t, c) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::format("histogram csv", line))?;
            let c: usize = c.trim().parse().map_err(|_| Error::format("histogram csv", line))?;
            h.add_count(t.parse()?, c);
        }
        Ok(h)
    }
}

/// Shannon entropy in nats of the template distribution.
pub fn order_entropy(h: &OrderHistogram) -> f64 {
    if h.total == 0 {
        return 0.0;
    }
    let n = h.total as f64;
    -h.counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// 1-based rank in [`OrderHistogram::sorted`]; templates never produced get
/// `support + 1`.
pub fn order_rank(h: &OrderHistogram, template: &OrderTemplate) -> usize {
    h.sorted()
        .iter()
        .position(|(t, _)| t == template)
        .map_or(h.support() + 1, |i| i + 1)
}

/// Permutations one adjacent transposition away from `perm`.
pub fn neighbors(perm: &[u8]) -> Vec<Vec<u8>> {
    (0..perm.len().saturating_sub(1))
        .map(|i| {
            let mut p = perm.to_vec();
            p.swap(i, i + 1);
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborProfile {
    pub most: (OrderTemplate, usize),
    pub most_neighbors: Vec<(OrderTemplate, usize)>,
    pub least: (OrderTemplate, usize),
    pub least_neighbors: Vec<(OrderTemplate, usize)>,
}

/// Neighbor counts around the most and least frequent permutations. The
/// least frequent is taken over `universe` so unseen orders qualify.
pub fn neighbor_profile(h: &OrderHistogram, universe: &[OrderTemplate]) -> Result<NeighborProfile> {
    let perms = h.permutations();
    if perms.total() == 0 {
        return Err(Error::InvalidConfig("empty histogram".into()));
    }
    let mut all: Vec<(OrderTemplate, usize)> = universe
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
        if !all.iter().any(|(u, _)| u == t) {
            all.push((t.clone(), c));
        }
    }
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let profile = |t: &OrderTemplate| {
        neighbors(&t.permutation())
            .into_iter()
            .map(|p| {
                let n = OrderTemplate::phrase_level(&p);
                let c = perms.count(&n);
                (n, c)
            })
            .collect()
    };
    let most = all.first().cloned().expect("non-empty");
    let least = all.last().cloned().expect("non-empty");
    Ok(NeighborProfile {
        most_neighbors: profile(&most.0),
        least_neighbors: profile(&least.0),
        most,
        least,
    })
}

pub fn marker_count<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> usize {
    utterances
        .into_iter()
        .map(|u| u.words().iter().filter(|w| w.is_marker()).count())
        .sum()
}

/// Marker tokens in raw output id sequences.
pub fn marker_count_ids<'a>(vocab: &Vocabulary, outputs: impl IntoIterator<Item = &'a Vec<usize>>) -> usize {
    outputs
        .into_iter()
        .map(|ids| vocab.content(ids).filter(|&i| vocab.is_marker(i)).count())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LocalityCounts {
    pub local: usize,
    pub long_distance: usize,
    pub unparseable: usize,
}

impl LocalityCounts {
    /// Long-distance share among parseable utterances.
    pub fn fraction(&self) -> f64 {
        let n = self.local + self.long_distance;
        if n == 0 {
            0.0
        } else {
            self.long_distance as f64 / n as f64
        }
    }
}

pub fn locality_counts<'a>(parser: &Parser, utterances: impl IntoIterator<Item = &'a Utterance>) -> LocalityCounts {
    let mut c = LocalityCounts::default();
    for u in utterances {
        match parser.interpret(u).and_then(|_| parser.classify(u)) {
            Ok(Locality::Local) => c.local += 1,
            Ok(Locality::LongDistance) => c.long_distance += 1,
            Err(_) => c.unparseable += 1,
        }
    }
    c
}

pub fn long_distance_fraction<'a>(parser: &Parser, utterances: impl IntoIterator<Item = &'a Utterance>) -> f64 {
    locality_counts(parser, utterances).fraction()
}

/// Histogram of parseable utterances' templates; also returns the number
/// of unparseable ones.
pub fn order_histogram<'a>(parser: &Parser, utterances: impl IntoIterator<Item = &'a Utterance>) -> (OrderHistogram, usize) {
    let mut h = OrderHistogram::new();
    let mut bad = 0;
    for u in utterances {
        match parser.interpret(u).and_then(|_| parser.phrase_order_of(u)) {
            Ok(t) => h.add(t),
            Err(_) => bad += 1,
        }
    }
    (h, bad)
}

/// Monte-Carlo chance level for the listener: guess a uniformly random
/// trajectory among the utterance's interpretations, `draws` times per
/// utterance. Unparseable utterances count as certain misses.
pub fn listener_chance<R: Rng>(parser: &Parser, pairs: &[Pair], draws: usize, rng: &mut R) -> f64 {
    if pairs.is_empty() || draws == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for p in pairs {
        if let Ok(interp) = parser.interpret(&p.utterance) {
            for _ in 0..draws {
                if interp.trajectories.iter().choose(rng) == Some(&p.trajectory) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (pairs.len() * draws) as f64
}

/// Decoded speaker outputs for a list of trajectories.
pub fn speaker_outputs<R: Rng>(
    agent: &Agent,
    vocab: &Vocabulary,
    trajectories: &[Trajectory],
    sample: Option<&mut R>,
    max_len: usize,
) -> Result<Vec<Decoded>> {
    let mut out = Vec::with_capacity(trajectories.len());
    match sample {
        Some(rng) => {
            for t in trajectories {
                out.push(agent.sample_decode(&vocab.encode_trajectory(t), rng, max_len)?);
            }
        }
        None => {
            for t in trajectories {
                out.push(agent.greedy_decode(&vocab.encode_trajectory(t), max_len)?);
            }
        }
    }
    Ok(out)
}

/// Decoded outputs that are well-formed word sequences.
pub fn utterances_of(vocab: &Vocabulary, outputs: &[Decoded]) -> Vec<Utterance> {
    outputs
        .iter()
        .filter(|d| !d.truncated)
        .filter_map(|d| vocab.decode_utterance(&d.tokens).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{permutations, LanguageSpec};
    use crate::gridworld::{enumerate_range, Direction::*};

    fn uniform(n: usize) -> OrderHistogram {
        let mut h = OrderHistogram::new();
        for p in permutations(n) {
            h.add(OrderTemplate::phrase_level(&p));
        }
        h
    }

    #[test]
    fn entropy_of_uniform_and_singleton() {
        let h = uniform(5);
        assert_eq!(h.support(), 120);
        // Oracle: ln 120 computed independently.
        assert!((order_entropy(&h) - 4.787491742782046).abs() < 1e-12);
        let mut single = OrderHistogram::new();
        single.add_count(OrderTemplate::identity(5), 40);
        assert_eq!(order_entropy(&single), 0.0);
    }

    #[test]
    fn entropy_maximal_only_when_uniform() {
        let mut h = uniform(3);
        let u = order_entropy(&h);
        h.add(OrderTemplate::identity(3));
        assert!(order_entropy(&h) < u);
    }

    #[test]
    fn rank_conventions() {
        let mut h = OrderHistogram::new();
        h.add_count(OrderTemplate::phrase_level(&[2, 1, 3]), 5);
        h.add_count(OrderTemplate::phrase_level(&[1, 2, 3]), 5);
        h.add_count(OrderTemplate::phrase_level(&[3, 2, 1]), 9);
        assert_eq!(order_rank(&h, &OrderTemplate::phrase_level(&[3, 2, 1])), 1);
        assert_eq!(order_rank(&h, &OrderTemplate::phrase_level(&[1, 2, 3])), 2);
        assert_eq!(order_rank(&h, &OrderTemplate::phrase_level(&[2, 1, 3])), 3);
        assert_eq!(order_rank(&h, &OrderTemplate::phrase_level(&[1, 3, 2])), 4);
    }

    #[test]
    fn neighbors_are_adjacent_swaps_and_symmetric() {
        assert_eq!(neighbors(&[1, 2, 3, 4, 5]).len(), 4);
        for p in permutations(4) {
            for n in neighbors(&p) {
                assert!(neighbors(&n).contains(&p));
            }
        }
    }

    #[test]
    fn neighbor_profile_picks_extremes() {
        let mut h = OrderHistogram::new();
        h.add_count(OrderTemplate::phrase_level(&[1, 2, 3]), 10);
        h.add_count(OrderTemplate::phrase_level(&[2, 1, 3]), 4);
        let universe: Vec<_> = permutations(3).iter().map(|p| OrderTemplate::phrase_level(p)).collect();
        let prof = neighbor_profile(&h, &universe).unwrap();
        assert_eq!(prof.most.0.to_string(), "1-2-3");
        assert_eq!(prof.most_neighbors.len(), 2);
        assert!(prof.most_neighbors.contains(&(OrderTemplate::phrase_level(&[2, 1, 3]), 4)));
        assert_eq!(prof.least.1, 0);
        assert!(neighbor_profile(&OrderHistogram::new(), &universe).is_err());
    }

    #[test]
    fn marker_counts() {
        let u: Utterance = "first left 2 second right 1".parse().unwrap();
        assert_eq!(marker_count([&u]), 2);
        let local = LanguageSpec::local_language();
        let t = Trajectory::from_pairs(&[(Left, 2), (Right, 1), (Up, 3)]).unwrap();
        for u in local.utterances_for(&t).unwrap() {
            assert_eq!(marker_count([&u]), 6);
        }
        // Phrase markers: one per segment across a whole corpus.
        let spec = LanguageSpec::forward_iconic(true).with_segment_range(1, 3);
        let trajs = enumerate_range(1, 3).unwrap();
        let us: Vec<Utterance> = trajs.iter().flat_map(|t| spec.utterances_for(t).unwrap()).collect();
        let segments: usize = trajs.iter().map(|t| t.len()).sum();
        assert_eq!(marker_count(&us), segments);
    }

    #[test]
    fn long_distance_fraction_of_full_support() {
        let spec = LanguageSpec::long_distance_language();
        let parser = spec.compile();
        let t = Trajectory::from_pairs(&[(Left, 2), (Right, 1), (Up, 3)]).unwrap();
        let all = spec.utterances_for(&t).unwrap();
        assert!((long_distance_fraction(&parser, &all) - 96.0 / 144.0).abs() < 1e-12);
        let local = LanguageSpec::local_language().utterances_for(&t).unwrap();
        assert_eq!(long_distance_fraction(&parser, &local), 0.0);
        let junk: Utterance = "left left".parse().unwrap();
        assert_eq!(locality_counts(&parser, [&junk]).unparseable, 1);
    }

    #[test]
    fn histogram_csv_round_trip() {
        let spec = LanguageSpec::long_distance_language();
        let parser = spec.compile();
        let t = Trajectory::from_pairs(&[(Left, 2), (Right, 1), (Up, 3)]).unwrap();
        let (h, bad) = order_histogram(&parser, &spec.utterances_for(&t).unwrap());
        assert_eq!(bad, 0);
        assert_eq!(h.total(), 144);
        assert_eq!(OrderHistogram::from_csv(&h.to_csv()).unwrap(), h);
        assert_eq!(h.permutations().support(), 6);
    }

    #[test]
    fn chance_is_one_for_unambiguous_languages() {
        let spec = LanguageSpec::forward_iconic(false).with_segment_range(1, 2);
        let parser = spec.compile();
        let pairs: Vec<Pair> = enumerate_range(1, 2)
            .unwrap()
            .into_iter()
            .map(|t| Pair {
                utterance: spec.utterances_for(&t).unwrap().remove(0),
                trajectory: t,
            })
            .collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        assert_eq!(listener_chance(&parser, &pairs, 3, &mut rng), 1.0);
        let free = LanguageSpec::free_order(false).with_segment_range(2, 2);
        let fp = free.compile();
        let t = Trajectory::from_pairs(&[(Left, 1), (Up, 2)]).unwrap();
        let pairs: Vec<Pair> = free
            .utterances_for(&t)
            .unwrap()
            .into_iter()
            .map(|u| Pair {
                trajectory: t.clone(),
                utterance: u,
            })
            .collect();
        let c = listener_chance(&fp, &pairs, 2000, &mut rng);
        assert!((c - 0.5).abs() < 0.05, "{c}");
    }
}
