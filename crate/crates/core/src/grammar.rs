//! Miniature languages over trajectories.
//!
//! Every language is described declaratively by a [`LanguageSpec`]. For a
//! trajectory with `N` segments the spec licenses a set of
//! [`OrderTemplate`]s; a template lists, in surface order, which element
//! (command or quantifier) of which phrase comes next. Realizing a template
//! against a trajectory yields an [`Utterance`]. Interpretation runs the
//! same templates backwards, so generation and parsing cannot drift apart.
//!
//! Phrase `p` always denotes the `p`-th segment of the trajectory; word order
//! only changes where the phrase appears. Markers are ordinals bound to the
//! phrase index, never to the surface position.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{Direction, Segment, Trajectory, MAX_SEGMENTS};

const MARKER_NAMES: [&str; 5] = ["first", "second", "third", "fourth", "fifth"];

/// A word of the language. Control symbols live in the vocabulary, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Word {
    Command(Direction),
    Quantity(u8),
    /// Ordinal marker for phrase `1..=5`.
    Marker(u8),
}

impl Word {
    pub fn is_marker(self) -> bool {
        matches!(self, Word::Marker(_))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Word::Command(d) => f.write_str(d.word_name()),
            Word::Quantity(q) => write!(f, "{q}"),
            Word::Marker(m) => f.write_str(MARKER_NAMES[m as usize - 1]),
        }
    }
}

impl FromStr for Word {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let word = match s {
            "left" => Word::Command(Direction::Left),
            "right" => Word::Command(Direction::Right),
            "up" => Word::Command(Direction::Up),
            "down" => Word::Command(Direction::Down),
            "1" => Word::Quantity(1),
            "2" => Word::Quantity(2),
            "3" => Word::Quantity(3),
            _ => match MARKER_NAMES.iter().position(|m| *m == s) {
                Some(i) => Word::Marker(i as u8 + 1),
                None => return Err(Error::UnknownToken(s.to_string())),
            },
        };
        Ok(word)
    }
}

/// All words, in vocabulary order.
pub fn all_words() -> Vec<Word> {
    let mut words: Vec<Word> = Direction::ALL.iter().map(|&d| Word::Command(d)).collect();
    words.extend((1..=3).map(Word::Quantity));
    words.extend((1..=5).map(Word::Marker));
    words
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Utterance(Vec<Word>);

impl Utterance {
    pub fn new(words: Vec<Word>) -> Self {
        Utterance(words)
    }

    pub fn words(&self) -> &[Word] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, w) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{w}")?;
        }
        Ok(())
    }
}

impl FromStr for Utterance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words = s
            .split_whitespace()
            .map(Word::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(Utterance(words))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Element {
    Command,
    Quantity,
}

impl Element {
    fn other(self) -> Element {
        match self {
            Element::Command => Element::Quantity,
            Element::Quantity => Element::Command,
        }
    }

    fn letter(self) -> char {
        match self {
            Element::Command => 'C',
            Element::Quantity => 'Q',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    /// 1-based phrase index (= segment index).
    pub phrase: u8,
    pub element: Element,
}

/// A long-distance wrap: the elements of `phrase` surround phrase `host`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Split {
    pub phrase: u8,
    pub first_part: Element,
    pub host: u8,
}

/// Surface arrangement of the phrase elements of an `N`-phrase utterance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderTemplate {
    slots: Vec<Slot>,
}

impl OrderTemplate {
    /// Phrases in the given order, each as command then quantifier.
    pub fn phrase_level(permutation: &[u8]) -> Self {
        let orders = vec![Element::Command; permutation.len()];
        Self::from_units(permutation, &orders, None)
    }

    pub fn identity(phrases: usize) -> Self {
        let perm: Vec<u8> = (1..=phrases as u8).collect();
        Self::phrase_level(&perm)
    }

    /// Builds a template from a phrase order (by first appearance), the
    /// leading element of each phrase (indexed by phrase - 1), and an
    /// optional split. A split phrase emits its first part, then the whole
    /// host phrase, then its second part; the host is skipped afterwards.
    pub fn from_units(permutation: &[u8], leading: &[Element], split: Option<Split>) -> Self {
        let mut slots = Vec::with_capacity(permutation.len() * 2);
        let phrase_slots = |p: u8, slots: &mut Vec<Slot>| {
            let first = leading[p as usize - 1];
            slots.push(Slot { phrase: p, element: first });
            slots.push(Slot { phrase: p, element: first.other() });
        };
        for &p in permutation {
            match split {
                Some(s) if s.host == p => continue,
                Some(s) if s.phrase == p => {
                    slots.push(Slot { phrase: p, element: s.first_part });
                    phrase_slots(s.host, &mut slots);
                    slots.push(Slot { phrase: p, element: s.first_part.other() });
                }
                _ => phrase_slots(p, &mut slots),
            }
        }
        OrderTemplate { slots }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn phrases(&self) -> usize {
        self.slots.len() / 2
    }

    /// Phrase indices by first surface appearance.
    pub fn permutation(&self) -> Vec<u8> {
        let mut seen = [false; MAX_SEGMENTS + 1];
        let mut perm = Vec::with_capacity(self.phrases());
        for s in &self.slots {
            if !seen[s.phrase as usize] {
                seen[s.phrase as usize] = true;
                perm.push(s.phrase);
            }
        }
        perm
    }

    /// Element each phrase starts with, indexed by phrase - 1.
    pub fn leading_elements(&self) -> Vec<Element> {
        let mut out = vec![Element::Command; self.phrases()];
        let mut seen = [false; MAX_SEGMENTS + 1];
        for s in &self.slots {
            if !seen[s.phrase as usize] {
                seen[s.phrase as usize] = true;
                out[s.phrase as usize - 1] = s.element;
            }
        }
        out
    }

    pub fn split(&self) -> Option<Split> {
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(next) = self.slots.get(i + 1) {
                if next.phrase != s.phrase
                    && self.slots[i + 1..].iter().any(|o| o.phrase == s.phrase)
                {
                    return Some(Split {
                        phrase: s.phrase,
                        first_part: s.element,
                        host: next.phrase,
                    });
                }
            }
        }
        None
    }

    pub fn is_split(&self) -> bool {
        self.split().is_some()
    }

    fn all_command_first(&self) -> bool {
        self.leading_elements().iter().all(|e| *e == Element::Command)
    }
}

/// Canonical form: `2-3-1` for plain phrase orders, otherwise each phrase
/// carries its element order (`1cq-2qc-3cq`) and a split, if any, is
/// appended as `|split:C1@2` (command of phrase 1 first, wrapped around 2).
impl fmt::Display for OrderTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = self.split();
        let plain = split.is_none() && self.all_command_first();
        let leading = self.leading_elements();
        for (i, p) in self.permutation().iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{p}")?;
            if !plain {
                match leading[*p as usize - 1] {
                    Element::Command => f.write_str("cq")?,
                    Element::Quantity => f.write_str("qc")?,
                }
            }
        }
        if let Some(s) = split {
            write!(f, "|split:{}{}@{}", s.first_part.letter(), s.phrase, s.host)?;
        }
        Ok(())
    }
}

impl FromStr for OrderTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: &str| Error::format("order template", format!("{s:?}: {detail}"));
        let (order, split) = match s.split_once('|') {
            Some((o, rest)) => {
                let body = rest.strip_prefix("split:").ok_or_else(|| bad("expected split:"))?;
                let (lhs, host) = body.split_once('@').ok_or_else(|| bad("expected @"))?;
                let mut chars = lhs.chars();
                let first_part = match chars.next() {
                    Some('C') => Element::Command,
                    Some('Q') => Element::Quantity,
                    _ => return Err(bad("split part must be C or Q")),
                };
                let phrase: u8 = chars.as_str().parse().map_err(|_| bad("split phrase"))?;
                let host: u8 = host.parse().map_err(|_| bad("split host"))?;
                (o, Some(Split { phrase, first_part, host }))
            }
            None => (s, None),
        };
        let mut perm = Vec::new();
        let mut leading_by_unit = Vec::new();
        for unit in order.split('-') {
            let digits: String = unit.chars().take_while(|c| c.is_ascii_digit()).collect();
            let p: u8 = digits.parse().map_err(|_| bad("phrase index"))?;
            let lead = match &unit[digits.len()..] {
                "" | "cq" => Element::Command,
                "qc" => Element::Quantity,
                _ => return Err(bad("element order must be cq or qc")),
            };
            perm.push(p);
            leading_by_unit.push((p, lead));
        }
        let n = perm.len();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted != (1..=n as u8).collect::<Vec<_>>() {
            return Err(bad("not a permutation"));
        }
        if let Some(sp) = split {
            if sp.phrase as usize > n || sp.host as usize > n || sp.phrase == sp.host || sp.phrase == 0
            {
                return Err(bad("split refers to missing phrase"));
            }
        }
        let mut leading = vec![Element::Command; n];
        for (p, e) in leading_by_unit {
            leading[p as usize - 1] = e;
        }
        let template = OrderTemplate::from_units(&perm, &leading, split);
        if template.slots.len() != 2 * n || template.split() != split {
            return Err(bad("inconsistent split"));
        }
        Ok(template)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OrderPolicy {
    /// One permutation of `1..=5`; shorter utterances keep the same relative
    /// order of the phrases they contain.
    Fixed(Vec<u8>),
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarkerPolicy {
    None,
    /// One marker before each phrase.
    PhrasePrefix,
    /// One marker before each command and each quantifier.
    ElementPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitPolicy {
    LocalOnly,
    AllowSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Locality {
    Local,
    LongDistance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageSpec {
    pub name: String,
    pub order: OrderPolicy,
    pub markers: MarkerPolicy,
    pub within_phrase_free: bool,
    pub split: SplitPolicy,
    /// Restricted template sets per segment count (control languages).
    pub template_subsets: Option<BTreeMap<usize, Vec<OrderTemplate>>>,
    pub min_segments: usize,
    pub max_segments: usize,
}

fn marker_suffix(markers: bool) -> &'static str {
    if markers {
        "+markers"
    } else {
        ""
    }
}

fn phrase_markers(markers: bool) -> MarkerPolicy {
    if markers {
        MarkerPolicy::PhrasePrefix
    } else {
        MarkerPolicy::None
    }
}

impl LanguageSpec {
    fn fixed(name: String, perm: Vec<u8>, markers: bool) -> Self {
        LanguageSpec {
            name,
            order: OrderPolicy::Fixed(perm),
            markers: phrase_markers(markers),
            within_phrase_free: false,
            split: SplitPolicy::LocalOnly,
            template_subsets: None,
            min_segments: 1,
            max_segments: MAX_SEGMENTS,
        }
    }

    pub fn forward_iconic(markers: bool) -> Self {
        Self::fixed(
            format!("forward-iconic{}", marker_suffix(markers)),
            vec![1, 2, 3, 4, 5],
            markers,
        )
    }

    pub fn backward_iconic(markers: bool) -> Self {
        Self::fixed(
            format!("backward-iconic{}", marker_suffix(markers)),
            vec![5, 4, 3, 2, 1],
            markers,
        )
    }

    /// Fixed order given by `perm`, a permutation of `1..=5`.
    pub fn non_iconic(perm: Vec<u8>, markers: bool) -> Result<Self> {
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted != [1, 2, 3, 4, 5] {
            return Err(Error::InvalidConfig(format!(
                "fixed order {perm:?} is not a permutation of 1..=5"
            )));
        }
        let label: Vec<String> = perm.iter().map(u8::to_string).collect();
        Ok(Self::fixed(
            format!("non-iconic-{}{}", label.join(""), marker_suffix(markers)),
            perm,
            markers,
        ))
    }

    /// A uniformly drawn fixed order that is neither forward nor backward.
    /// The permutation depends on `seed` only, so the marked and unmarked
    /// variants of one seed share their order.
    pub fn sample_noniconic(seed: u64, markers: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm = vec![1u8, 2, 3, 4, 5];
        loop {
            perm.shuffle(&mut rng);
            if perm != [1, 2, 3, 4, 5] && perm != [5, 4, 3, 2, 1] {
                break;
            }
        }
        Self::non_iconic(perm, markers).expect("shuffled identity is a permutation")
    }

    pub fn free_order(markers: bool) -> Self {
        LanguageSpec {
            name: format!("free{}", marker_suffix(markers)),
            order: OrderPolicy::Free,
            markers: phrase_markers(markers),
            within_phrase_free: false,
            split: SplitPolicy::LocalOnly,
            template_subsets: None,
            min_segments: 1,
            max_segments: MAX_SEGMENTS,
        }
    }

    pub fn local_language() -> Self {
        LanguageSpec {
            name: "local".into(),
            order: OrderPolicy::Free,
            markers: MarkerPolicy::ElementPrefix,
            within_phrase_free: true,
            split: SplitPolicy::LocalOnly,
            template_subsets: None,
            min_segments: 1,
            max_segments: 3,
        }
    }

    pub fn long_distance_language() -> Self {
        LanguageSpec {
            name: "long-distance".into(),
            split: SplitPolicy::AllowSplit,
            ..Self::local_language()
        }
    }

    /// Control language: a fixed random subset of the base language's
    /// templates, the same for every trajectory of a given length. For
    /// 3/2/1 segments it keeps 24/4/2 templates; a base that allows splits
    /// keeps its local : split proportion.
    pub fn sample_control(base: &LanguageSpec, seed: u64) -> Result<Self> {
        if base.markers != MarkerPolicy::ElementPrefix || base.max_segments > 3 {
            return Err(Error::UnsupportedLanguage(
                "a local or long-distance base language",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subsets = BTreeMap::new();
        for n in base.min_segments..=base.max_segments {
            let keep = match n {
                1 => 2,
                2 => 4,
                3 => 24,
                _ => unreachable!("checked above"),
            };
            let all = base.full_templates(n);
            let (local, split): (Vec<_>, Vec<_>) = all.into_iter().partition(|t| !t.is_split());
            let keep_local = keep * local.len() / (local.len() + split.len());
            let keep_split = keep - keep_local;
            let mut chosen: Vec<OrderTemplate> = local
                .choose_multiple(&mut rng, keep_local)
                .cloned()
                .chain(split.choose_multiple(&mut rng, keep_split).cloned())
                .collect();
            chosen.sort();
            subsets.insert(n, chosen);
        }
        Ok(LanguageSpec {
            name: format!("{}-control-{seed}", base.name),
            template_subsets: Some(subsets),
            ..base.clone()
        })
    }

    /// Restricts the trajectory lengths the language is used with.
    pub fn with_segment_range(mut self, min_segments: usize, max_segments: usize) -> Self {
        self.min_segments = min_segments;
        self.max_segments = max_segments;
        self
    }

    pub fn has_markers(&self) -> bool {
        self.markers != MarkerPolicy::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad(format!(
                "segment range {}..={}",
                self.min_segments, self.max_segments
            ));
        }
        if self.max_segments > MAX_SEGMENTS {
            return bad(format!("max_segments {} > {MAX_SEGMENTS}", self.max_segments));
        }
        if let OrderPolicy::Fixed(p) = &self.order {
            let mut s = p.clone();
            s.sort_unstable();
            if s != [1, 2, 3, 4, 5] {
                return bad(format!("fixed order {p:?} is not a permutation of 1..=5"));
            }
        }
        if self.split == SplitPolicy::AllowSplit
            && (self.order != OrderPolicy::Free || self.markers != MarkerPolicy::ElementPrefix)
        {
            return bad("splits require free order with element markers".into());
        }
        if let Some(subsets) = &self.template_subsets {
            for (n, ts) in subsets {
                if ts.iter().any(|t| t.phrases() != *n) {
                    return bad(format!("template subset for {n} segments has wrong arity"));
                }
            }
        }
        Ok(())
    }

    /// Every template the unrestricted grammar licenses for `n` phrases,
    /// sorted.
    fn full_templates(&self, n: usize) -> Vec<OrderTemplate> {
        let perms: Vec<Vec<u8>> = match &self.order {
            OrderPolicy::Fixed(p) => vec![p.iter().copied().filter(|&i| i as usize <= n).collect()],
            OrderPolicy::Free => permutations(n),
        };
        let leadings = leading_combinations(n, self.within_phrase_free);
        let mut out = Vec::new();
        for perm in &perms {
            for lead in &leadings {
                out.push(OrderTemplate::from_units(perm, lead, None));
            }
        }
        if self.split == SplitPolicy::AllowSplit {
            // The split block is ordered like its outer phrase, so permuting
            // `phrases - {host}` places the block among the remaining phrases.
            for phrase in 1..=n as u8 {
                for host in (1..=n as u8).filter(|&h| h != phrase) {
                    let units: Vec<u8> = (1..=n as u8).filter(|&u| u != host).collect();
                    for order in permutations(units.len()) {
                        let perm: Vec<u8> = order.iter().map(|&i| units[i as usize - 1]).collect();
                        for lead in &leadings {
                            let split = Split {
                                phrase,
                                first_part: lead[phrase as usize - 1],
                                host,
                            };
                            out.push(OrderTemplate::from_units(&perm, lead, Some(split)));
                        }
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Templates licensed for `n`-segment trajectories.
    pub fn templates(&self, n: usize) -> Vec<OrderTemplate> {
        if n < self.min_segments || n > self.max_segments {
            return Vec::new();
        }
        match self.template_subsets.as_ref().and_then(|m| m.get(&n)) {
            Some(subset) => subset.clone(),
            None => self.full_templates(n),
        }
    }

    /// Surface form of `t` under `template`.
    pub fn realize(&self, template: &OrderTemplate, t: &Trajectory) -> Utterance {
        let segs = t.segments();
        let mut words = Vec::with_capacity(template.slots.len() * 2);
        let mut marked = [false; MAX_SEGMENTS + 1];
        for slot in &template.slots {
            let p = slot.phrase as usize;
            match self.markers {
                MarkerPolicy::None => {}
                MarkerPolicy::PhrasePrefix => {
                    if !marked[p] {
                        marked[p] = true;
                        words.push(Word::Marker(slot.phrase));
                    }
                }
                MarkerPolicy::ElementPrefix => words.push(Word::Marker(slot.phrase)),
            }
            let seg = segs[p - 1];
            words.push(match slot.element {
                Element::Command => Word::Command(seg.direction),
                Element::Quantity => Word::Quantity(seg.steps),
            });
        }
        Utterance(words)
    }

    /// Support of the ground-truth distribution `P(u|t)`: every licensed
    /// utterance for `t`, duplicate-free, in template order.
    pub fn utterances_for(&self, t: &Trajectory) -> Result<Vec<Utterance>> {
        if t.len() > self.max_segments || t.len() < self.min_segments {
            return Err(Error::TrajectoryTooLong {
                segments: t.len(),
                max: self.max_segments,
            });
        }
        let mut seen = HashSet::new();
        Ok(self
            .templates(t.len())
            .iter()
            .map(|tpl| self.realize(tpl, t))
            .filter(|u| seen.insert(u.clone()))
            .collect())
    }

    /// Utterances of `t` grouped by locality.
    pub fn utterances_by_locality(&self, t: &Trajectory) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let mut local = Vec::new();
        let mut split = Vec::new();
        for tpl in self.templates(t.len()) {
            let u = self.realize(&tpl, t);
            if tpl.is_split() {
                split.push(u);
            } else {
                local.push(u);
            }
        }
        Ok((local, split))
    }

    pub fn compile(&self) -> Parser {
        Parser::new(self.clone())
    }

    pub fn interpret(&self, u: &Utterance) -> Result<Interpretation> {
        self.compile().interpret(u)
    }

    pub fn phrase_order_of(&self, u: &Utterance) -> Result<OrderTemplate> {
        self.compile().phrase_order_of(u)
    }

    pub fn classify_utterance(&self, u: &Utterance) -> Result<Locality> {
        self.compile().classify(u)
    }

    /// Plain-text `key = value` document.
    ///
    /// ```text
    /// name = free+markers
    /// order = free            # or: fixed 1-2-3-4-5
    /// markers = phrase        # none | phrase | element
    /// within_phrase_free = false
    /// split = local           # local | allow
    /// min_segments = 1
    /// max_segments = 5
    /// templates.3 = 1cq-2cq-3cq,...   # control languages only
    /// ```
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name = {}\n", self.name));
        match &self.order {
            OrderPolicy::Free => out.push_str("order = free\n"),
            OrderPolicy::Fixed(p) => {
                let s: Vec<String> = p.iter().map(u8::to_string).collect();
                out.push_str(&format!("order = fixed {}\n", s.join("-")));
            }
        }
        let markers = match self.markers {
            MarkerPolicy::None => "none",
            MarkerPolicy::PhrasePrefix => "phrase",
            MarkerPolicy::ElementPrefix => "element",
        };
        out.push_str(&format!("markers = {markers}\n"));
        out.push_str(&format!("within_phrase_free = {}\n", self.within_phrase_free));
        let split = match self.split {
            SplitPolicy::LocalOnly => "local",
            SplitPolicy::AllowSplit => "allow",
        };
        out.push_str(&format!("split = {split}\n"));
        out.push_str(&format!("min_segments = {}\n", self.min_segments));
        out.push_str(&format!("max_segments = {}\n", self.max_segments));
        if let Some(subsets) = &self.template_subsets {
            for (n, ts) in subsets {
                let s: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                out.push_str(&format!("templates.{n} = {}\n", s.join(",")));
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("language spec", d);
        let mut spec = LanguageSpec::free_order(false);
        spec.name = String::new();
        let mut subsets: BTreeMap<usize, Vec<OrderTemplate>> = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => spec.name = value.to_string(),
                "order" => {
                    spec.order = if value == "free" {
                        OrderPolicy::Free
                    } else if let Some(p) = value.strip_prefix("fixed ") {
                        OrderPolicy::Fixed(
                            p.trim()
                                .split('-')
                                .map(|x| x.parse::<u8>().map_err(|_| bad(format!("order {value:?}"))))
                                .collect::<Result<_>>()?,
                        )
                    } else {
                        return Err(bad(format!("order {value:?}")));
                    }
                }
                "markers" => {
                    spec.markers = match value {
                        "none" => MarkerPolicy::None,
                        "phrase" => MarkerPolicy::PhrasePrefix,
                        "element" => MarkerPolicy::ElementPrefix,
                        _ => return Err(bad(format!("markers {value:?}"))),
                    }
                }
                "within_phrase_free" => {
                    spec.within_phrase_free =
                        value.parse().map_err(|_| bad(format!("within_phrase_free {value:?}")))?
                }
                "split" => {
                    spec.split = match value {
                        "local" => SplitPolicy::LocalOnly,
                        "allow" => SplitPolicy::AllowSplit,
                        _ => return Err(bad(format!("split {value:?}"))),
                    }
                }
                "min_segments" => {
                    spec.min_segments = value.parse().map_err(|_| bad(format!("min_segments {value:?}")))?
                }
                "max_segments" => {
                    spec.max_segments = value.parse().map_err(|_| bad(format!("max_segments {value:?}")))?
                }
                k if k.starts_with("templates.") => {
                    let n: usize = k["templates.".len()..]
                        .parse()
                        .map_err(|_| bad(format!("key {k:?}")))?;
                    let ts = value
                        .split(',')
                        .map(|s| s.trim().parse::<OrderTemplate>())
                        .collect::<Result<Vec<_>>>()?;
                    subsets.insert(n, ts);
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        if spec.name.is_empty() {
            return Err(bad("missing name".into()));
        }
        if !subsets.is_empty() {
            spec.template_subsets = Some(subsets);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// All permutations of `1..=n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<u8>> {
    fn rec(cur: &mut Vec<u8>, used: &mut [bool], out: &mut Vec<Vec<u8>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i as u8 + 1);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn leading_combinations(n: usize, free: bool) -> Vec<Vec<Element>> {
    if !free {
        return vec![vec![Element::Command; n]];
    }
    (0..1u32 << n)
        .map(|mask| {
            (0..n)
                .map(|i| {
                    if mask >> (n - 1 - i) & 1 == 0 {
                        Element::Command
                    } else {
                        Element::Quantity
                    }
                })
                .collect()
        })
        .collect()
}

/// Set of trajectories an utterance can denote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interpretation {
    pub trajectories: BTreeSet<Trajectory>,
}

impl Interpretation {
    pub fn is_ambiguous(&self) -> bool {
        self.trajectories.len() > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Marker(u8),
    Command(u8),
    Quantity(u8),
}

#[derive(Debug, Clone)]
struct Pattern {
    phrases: usize,
    template: OrderTemplate,
    tokens: Vec<Expect>,
}

/// A language with its templates compiled to token patterns.
#[derive(Debug, Clone)]
pub struct Parser {
    spec: LanguageSpec,
    patterns: Vec<Pattern>,
}

enum Match {
    Ok(Vec<Option<Segment>>),
    FailAt(usize),
}

impl Parser {
    pub fn new(spec: LanguageSpec) -> Self {
        let mut patterns = Vec::new();
        for n in spec.min_segments..=spec.max_segments {
            for template in spec.templates(n) {
                let mut tokens = Vec::new();
                let mut marked = [false; MAX_SEGMENTS + 1];
                for slot in template.slots() {
                    let p = slot.phrase;
                    match spec.markers {
                        MarkerPolicy::None => {}
                        MarkerPolicy::PhrasePrefix => {
                            if !marked[p as usize] {
                                marked[p as usize] = true;
                                tokens.push(Expect::Marker(p));
                            }
                        }
                        MarkerPolicy::ElementPrefix => tokens.push(Expect::Marker(p)),
                    }
                    tokens.push(match slot.element {
                        Element::Command => Expect::Command(p),
                        Element::Quantity => Expect::Quantity(p),
                    });
                }
                patterns.push(Pattern {
                    phrases: n,
                    template,
                    tokens,
                });
            }
        }
        Parser { spec, patterns }
    }

    pub fn spec(&self) -> &LanguageSpec {
        &self.spec
    }

    fn match_pattern(pattern: &Pattern, words: &[Word]) -> Match {
        let mut dirs: [Option<Direction>; MAX_SEGMENTS] = [None; MAX_SEGMENTS];
        let mut steps: [Option<u8>; MAX_SEGMENTS] = [None; MAX_SEGMENTS];
        let common = pattern.tokens.len().min(words.len());
        for (i, (&expect, &word)) in pattern.tokens.iter().zip(words).enumerate() {
            let ok = match (expect, word) {
                (Expect::Marker(p), Word::Marker(m)) => p == m,
                (Expect::Command(p), Word::Command(d)) => {
                    dirs[p as usize - 1] = Some(d);
                    true
                }
                (Expect::Quantity(p), Word::Quantity(q)) => {
                    steps[p as usize - 1] = Some(q);
                    true
                }
                _ => false,
            };
            if !ok {
                return Match::FailAt(i);
            }
        }
        if pattern.tokens.len() != words.len() {
            return Match::FailAt(common);
        }
        let segs = (0..pattern.phrases)
            .map(|i| match (dirs[i], steps[i]) {
                (Some(direction), Some(steps)) => Some(Segment { direction, steps }),
                _ => None,
            })
            .collect();
        Match::Ok(segs)
    }

    /// Runs every pattern, returning matched templates with the trajectory
    /// they denote (if valid), or the furthest failure position.
    fn matches(&self, u: &Utterance) -> Result<Vec<(&OrderTemplate, Option<Trajectory>)>> {
        let words = u.words();
        let mut furthest = 0;
        let mut found = Vec::new();
        for pattern in &self.patterns {
            match Self::match_pattern(pattern, words) {
                Match::Ok(segs) => {
                    let t = segs
                        .into_iter()
                        .collect::<Option<Vec<_>>>()
                        .and_then(|s| Trajectory::new(s).ok());
                    found.push((&pattern.template, t));
                }
                Match::FailAt(i) => furthest = furthest.max(i),
            }
        }
        if found.is_empty() {
            let found = words
                .get(furthest)
                .map(|w| format!("`{w}`"))
                .unwrap_or_else(|| "end of utterance".to_string());
            return Err(Error::Unparseable {
                position: furthest,
                found,
            });
        }
        Ok(found)
    }

    /// All trajectories `t` with `u` in `utterances_for(t)`.
    pub fn interpret(&self, u: &Utterance) -> Result<Interpretation> {
        let trajectories: BTreeSet<Trajectory> =
            self.matches(u)?.into_iter().filter_map(|(_, t)| t).collect();
        if trajectories.is_empty() {
            return Err(Error::NoTrajectory);
        }
        Ok(Interpretation { trajectories })
    }

    /// `true` iff `u` is a licensed utterance for `t`.
    pub fn accepts(&self, u: &Utterance, t: &Trajectory) -> bool {
        match self.matches(u) {
            Ok(found) => found.iter().any(|(_, tt)| tt.as_ref() == Some(t)),
            Err(_) => false,
        }
    }

    /// The template realized by `u`. Without markers the phrase order is
    /// positional and the identity template is returned.
    pub fn phrase_order_of(&self, u: &Utterance) -> Result<OrderTemplate> {
        if !self.spec.has_markers() {
            let n = u.len() / 2;
            if !u.len().is_multiple_of(2) || n == 0 || n > self.spec.max_segments {
                return Err(Error::Unparseable {
                    position: u.len(),
                    found: "end of utterance".into(),
                });
            }
            self.matches(u)?;
            return Ok(OrderTemplate::identity(n));
        }
        let found = self.matches(u)?;
        Ok(found[0].0.clone())
    }

    pub fn classify(&self, u: &Utterance) -> Result<Locality> {
        Ok(if self.phrase_order_of(u)?.is_split() {
            Locality::LongDistance
        } else {
            Locality::Local
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{enumerate_range, Direction::*};

    fn traj(p: &[(Direction, u8)]) -> Trajectory {
        Trajectory::from_pairs(p).unwrap()
    }

    fn example3() -> Trajectory {
        traj(&[(Left, 2), (Right, 1), (Up, 3)])
    }

    fn utt(s: &str) -> Utterance {
        s.parse().unwrap()
    }

    fn strings(us: &[Utterance]) -> Vec<String> {
        us.iter().map(|u| u.to_string()).collect()
    }

    #[test]
    fn forward_iconic_generation() {
        let plain = LanguageSpec::forward_iconic(false);
        assert_eq!(strings(&plain.utterances_for(&example3()).unwrap()), ["left 2 right 1 up 3"]);
        let marked = LanguageSpec::forward_iconic(true);
        assert_eq!(
            strings(&marked.utterances_for(&example3()).unwrap()),
            ["first left 2 second right 1 third up 3"]
        );
        assert_eq!(
            strings(&plain.utterances_for(&traj(&[(Down, 1)])).unwrap()),
            ["down 1"]
        );
        assert_eq!(
            strings(&plain.utterances_for(&traj(&[(Left, 1), (Down, 2)])).unwrap()),
            ["left 1 down 2"]
        );
    }

    #[test]
    fn backward_iconic_generation() {
        let t = traj(&[(Left, 1), (Down, 2)]);
        let plain = LanguageSpec::backward_iconic(false);
        assert_eq!(strings(&plain.utterances_for(&t).unwrap()), ["down 2 left 1"]);
        let marked = LanguageSpec::backward_iconic(true);
        assert_eq!(strings(&marked.utterances_for(&t).unwrap()), ["second down 2 first left 1"]);
        let one = traj(&[(Up, 3)]);
        assert_eq!(
            plain.utterances_for(&one).unwrap(),
            LanguageSpec::forward_iconic(false).utterances_for(&one).unwrap()
        );
    }

    #[test]
    fn non_iconic_induced_orders() {
        let spec = LanguageSpec::non_iconic(vec![2, 4, 3, 5, 1], false).unwrap();
        assert_eq!(spec.templates(3), vec![OrderTemplate::phrase_level(&[2, 3, 1])]);
        assert_eq!(strings(&spec.utterances_for(&example3()).unwrap()), ["right 1 up 3 left 2"]);
        assert_eq!(spec.templates(2), vec![OrderTemplate::phrase_level(&[2, 1])]);
    }

    #[test]
    fn noniconic_sampling() {
        for seed in 0..50 {
            let a = LanguageSpec::sample_noniconic(seed, false);
            assert_eq!(a, LanguageSpec::sample_noniconic(seed, false));
            let OrderPolicy::Fixed(p) = &a.order else { panic!() };
            assert_ne!(p, &[1, 2, 3, 4, 5]);
            assert_ne!(p, &[5, 4, 3, 2, 1]);
            let b = LanguageSpec::sample_noniconic(seed, true);
            assert_eq!(a.order, b.order);
        }
    }

    #[test]
    fn fixed_relative_order_holds_for_every_length() {
        let spec = LanguageSpec::sample_noniconic(7, true);
        let OrderPolicy::Fixed(full) = spec.order.clone() else { panic!() };
        let pos = |p: u8| full.iter().position(|&x| x == p).unwrap();
        for n in 1..=5 {
            for tpl in spec.templates(n) {
                let perm = tpl.permutation();
                for w in perm.windows(2) {
                    assert!(pos(w[0]) < pos(w[1]));
                }
            }
        }
    }

    #[test]
    fn free_order_cardinalities() {
        let marked = LanguageSpec::free_order(true);
        assert_eq!(marked.utterances_for(&example3()).unwrap().len(), 6);
        let five = traj(&[(Down, 1), (Right, 2), (Up, 3), (Right, 1), (Left, 2)]);
        assert_eq!(marked.utterances_for(&five).unwrap().len(), 120);
        let two = traj(&[(Left, 1), (Down, 2)]);
        assert_eq!(
            strings(&marked.utterances_for(&two).unwrap()),
            ["first left 1 second down 2", "second down 2 first left 1"]
        );
        let plain = LanguageSpec::free_order(false);
        assert_eq!(plain.utterances_for(&example3()).unwrap().len(), 6);
        // Identical phrases collapse without markers.
        let rep = traj(&[(Left, 1), (Up, 2), (Left, 1)]);
        assert_eq!(plain.utterances_for(&rep).unwrap().len(), 3);
    }

    #[test]
    fn free_without_markers_is_ambiguous() {
        let plain = LanguageSpec::free_order(false);
        let got = plain.interpret(&utt("down 2 left 1")).unwrap();
        let expected: BTreeSet<_> = [traj(&[(Down, 2), (Left, 1)]), traj(&[(Left, 1), (Down, 2)])]
            .into_iter()
            .collect();
        assert_eq!(got.trajectories, expected);
    }

    #[test]
    fn local_and_long_distance_cardinalities() {
        let t = example3();
        let local = LanguageSpec::local_language();
        assert_eq!(local.utterances_for(&t).unwrap().len(), 48);
        let long = LanguageSpec::long_distance_language();
        let (l, s) = long.utterances_by_locality(&t).unwrap();
        assert_eq!((l.len(), s.len()), (48, 96));
        assert_eq!(long.utterances_for(&t).unwrap().len(), 144);
        let two = traj(&[(Left, 1), (Down, 2)]);
        let (l, s) = long.utterances_by_locality(&two).unwrap();
        assert_eq!((l.len(), s.len()), (8, 8));
        let ex = utt("first left second right second 1 first 2 third up third 3");
        assert!(long.utterances_for(&t).unwrap().contains(&ex));
        assert!(!local.utterances_for(&t).unwrap().contains(&ex));
    }

    #[test]
    fn split_template_structure() {
        let long = LanguageSpec::long_distance_language();
        let u = utt("first left second right second 1 first 2 third up third 3");
        let tpl = long.phrase_order_of(&u).unwrap();
        assert_eq!(
            tpl.split(),
            Some(Split {
                phrase: 1,
                first_part: Element::Command,
                host: 2
            })
        );
        assert_eq!(tpl.permutation(), vec![1, 2, 3]);
        assert_eq!(tpl.to_string(), "1cq-2cq-3cq|split:C1@2");
        assert_eq!(long.classify_utterance(&u).unwrap(), Locality::LongDistance);
        let interp = long.interpret(&u).unwrap();
        assert_eq!(interp.trajectories.into_iter().collect::<Vec<_>>(), vec![example3()]);
    }

    #[test]
    fn classify_examples() {
        let long = LanguageSpec::long_distance_language();
        assert_eq!(
            long.classify_utterance(&utt("first down first 3 second left second 3 third up third 1"))
                .unwrap(),
            Locality::Local
        );
        assert_eq!(
            long.classify_utterance(&utt("first down first 3 second left third up third 1 second 3"))
                .unwrap(),
            Locality::LongDistance
        );
        assert_eq!(long.classify_utterance(&utt("first 2 first up")).unwrap(), Locality::Local);
    }

    #[test]
    fn phrase_order_examples() {
        let free = LanguageSpec::free_order(true);
        assert_eq!(
            free.phrase_order_of(&utt("second down 2 first left 1")).unwrap().permutation(),
            vec![2, 1]
        );
        let tpl = free
            .phrase_order_of(&utt("first left 2 second right 1 third up 3"))
            .unwrap();
        assert_eq!(tpl, OrderTemplate::identity(3));
        assert_eq!(tpl.to_string(), "1-2-3");
        let plain = LanguageSpec::free_order(false);
        assert_eq!(
            plain.phrase_order_of(&utt("down 2 left 1")).unwrap(),
            OrderTemplate::identity(2)
        );
    }

    #[test]
    fn interpret_examples_and_errors() {
        let fwd = LanguageSpec::forward_iconic(false);
        let got = fwd.interpret(&utt("left 2 right 1 up 3")).unwrap();
        assert_eq!(got.trajectories.len(), 1);
        assert!(got.trajectories.contains(&example3()));

        match fwd.interpret(&utt("left 2 first")) {
            Err(Error::Unparseable { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        match LanguageSpec::free_order(true).interpret(&utt("first left 2 first up 1")) {
            Err(Error::Unparseable { position, .. }) => assert_eq!(position, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(fwd.interpret(&utt("left 2 left 1")), Err(Error::NoTrajectory)));
        assert!(fwd.interpret(&Utterance::default()).is_err());
    }

    #[test]
    fn controls() {
        let local = LanguageSpec::local_language();
        let c = LanguageSpec::sample_control(&local, 3).unwrap();
        assert_eq!(c, LanguageSpec::sample_control(&local, 3).unwrap());
        assert_eq!(c.utterances_for(&example3()).unwrap().len(), 24);
        assert_eq!(c.templates(2).len(), 4);
        assert_eq!(c.templates(1).len(), 2);
        assert_eq!(c.templates(1), local.templates(1));

        let long = LanguageSpec::long_distance_language();
        let c = LanguageSpec::sample_control(&long, 3).unwrap();
        let (l, s) = c.utterances_by_locality(&example3()).unwrap();
        assert_eq!((l.len(), s.len()), (8, 16));
        let two = c.templates(2);
        assert_eq!(two.iter().filter(|t| t.is_split()).count(), 2);
        assert_eq!(two.len(), 4);

        assert!(LanguageSpec::sample_control(&LanguageSpec::free_order(true), 1).is_err());
    }

    #[test]
    fn template_strings_round_trip() {
        for spec in [LanguageSpec::long_distance_language(), LanguageSpec::free_order(true)] {
            for n in 1..=3 {
                for tpl in spec.templates(n) {
                    let s = tpl.to_string();
                    assert_eq!(s.parse::<OrderTemplate>().unwrap(), tpl, "{s}");
                }
            }
        }
        assert!("1-1".parse::<OrderTemplate>().is_err());
        assert!("1-2|split:C1@1".parse::<OrderTemplate>().is_err());
    }

    #[test]
    fn spec_kv_round_trip() {
        let specs = [
            LanguageSpec::forward_iconic(true),
            LanguageSpec::sample_noniconic(2, false),
            LanguageSpec::free_order(false).with_segment_range(1, 3),
            LanguageSpec::sample_control(&LanguageSpec::long_distance_language(), 9).unwrap(),
        ];
        for spec in specs {
            assert_eq!(LanguageSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        }
        assert!(LanguageSpec::from_kv("name = x\nmarkers = loud\n").is_err());
        assert!(LanguageSpec::from_kv("name = x\norder = fixed 1-2-3\n").is_err());
    }

    #[test]
    fn soundness_and_unambiguity_exhaustive_short() {
        let local = LanguageSpec::local_language();
        let long = LanguageSpec::long_distance_language();
        let specs = [
            LanguageSpec::forward_iconic(false),
            LanguageSpec::backward_iconic(true),
            LanguageSpec::sample_noniconic(1, false),
            LanguageSpec::free_order(true),
            LanguageSpec::sample_control(&local, 1).unwrap(),
            LanguageSpec::sample_control(&long, 1).unwrap(),
            local,
            long,
        ];
        let trajs = enumerate_range(1, 2).unwrap();
        for spec in &specs {
            let parser = spec.compile();
            for t in &trajs {
                for u in spec.utterances_for(t).unwrap() {
                    let got = parser.interpret(&u).unwrap();
                    assert_eq!(got.trajectories.len(), 1, "{} {u}", spec.name);
                    assert!(got.trajectories.contains(t));
                }
            }
        }
    }

    #[test]
    fn vocabularies_are_disjoint() {
        for w in all_words() {
            let s = w.to_string();
            assert!(s.parse::<Direction>().is_err());
            assert_eq!(s.parse::<Word>().unwrap(), w);
        }
    }
}
