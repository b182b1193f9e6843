//! The speaker/listener seq2seq agent.
//!
//! Wiring: one embedding matrix `E` (`V x h`) feeds both LSTMs. The decoder
//! starts from the encoder's final `(h, c)`. With attention, the decoder
//! state `s` queries the encoder states and the output feature is
//! `o = tanh(W_c [s; ctx] + b_c)`; without attention `o = s`. Logits are
//! `E o + b_out`, so the output layer is the transposed input embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::neural::{
    add_assign, gemv_acc, gemv_t_acc, ger_acc, softmax_in_place, Attention, AttentionCache, Lstm,
    LstmCache, ParamSet,
};

pub const DEFAULT_MAX_LEN: usize = 40;
pub const INIT_SCALE: f64 = 0.08;

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Every parameter uniform in `[-0.08, 0.08]`.
    #[default]
    SmallUniform,
    /// Embedding `N(0, 1)`; every other block uniform in
    /// `±1/sqrt(fan_in)` (the usual deep-learning library defaults).
    FanIn,
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::SmallUniform => "uniform",
            Init::FanIn => "fan-in",
        })
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Init::SmallUniform),
            "fan-in" => Ok(Init::FanIn),
            _ => Err(Error::InvalidConfig(format!("init: unknown scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Trajectory to utterance.
    Speaker,
    /// Utterance to trajectory.
    Listener,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentConfig {
    pub hidden: usize,
    pub attention: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: std::ops::Range<usize>,
    out_bias: std::ops::Range<usize>,
    encoder: Lstm,
    decoder: Lstm,
    attention: Option<Attention>,
    combine_w: std::ops::Range<usize>,
    combine_b: std::ops::Range<usize>,
}

impl Layout {
    fn build(vocab: usize, cfg: AgentConfig) -> (Layout, ParamSet) {
        let h = cfg.hidden;
        let mut ps = ParamSet::new();
        let embedding = ps.add("embedding", &[vocab, h]);
        let out_bias = ps.add("output.bias", &[vocab]);
        let encoder = Lstm::register(&mut ps, "encoder", h, h);
        let decoder = Lstm::register(&mut ps, "decoder", h, h);
        let (attention, combine_w, combine_b) = if cfg.attention {
            let a = Attention::register(&mut ps, "attention", h);
            let w = ps.add("combine.w", &[h, 2 * h]);
            let b = ps.add("combine.bias", &[h]);
            (Some(a), w, b)
        } else {
            (None, 0..0, 0..0)
        };
        let layout = Layout {
            embedding,
            out_bias,
            encoder,
            decoder,
            attention,
            combine_w,
            combine_b,
        };
        (layout, ps)
    }
}

/// One parameter set serving both roles.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    vocab_size: usize,
    vocab_hash: String,
    layout: Layout,
    params: ParamSet,
}

/// Encoder states (row-major `L x h`), final cell and precomputed keys.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    keys: Vec<f64>,
    caches: Vec<LstmCache>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

/// Decoder recurrent state between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct StepCache {
    prev: usize,
    lstm: LstmCache,
    attn: AttentionCache,
    /// Output feature fed to the tied projection.
    out: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Emitted ids, EOS excluded.
    pub tokens: Vec<usize>,
    /// `true` when `max_len` was hit before EOS.
    pub truncated: bool,
}

impl Agent {
    pub fn new(vocab: &Vocabulary, config: AgentConfig, seed: u64) -> Self {
        Agent::with_init(vocab, config, seed, Init::SmallUniform)
    }

    pub fn with_init(vocab: &Vocabulary, config: AgentConfig, seed: u64, init: Init) -> Self {
        let (layout, mut params) = Layout::build(vocab.len(), config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match init {
            Init::SmallUniform => params.init_uniform(&mut rng, INIT_SCALE),
            Init::FanIn => {
                let h = config.hidden;
                for block in params.blocks().to_vec() {
                    let values = &mut params.values_mut()[block.range()];
                    if block.name == "embedding" {
                        values.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                        continue;
                    }
                    let fan_in = match (block.shape.as_slice(), block.name.as_str()) {
                        ([_, cols], _) => *cols,
                        (_, "combine.bias") => 2 * h,
                        _ => h,
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    values.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
                }
            }
        }
        Agent {
            config,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
            layout,
            params,
        }
    }

    pub fn config(&self) -> AgentConfig {
        self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab_size) {
            Some(&i) => Err(Error::OutOfRange {
                index: i,
                len: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, id: usize) -> &[f64] {
        let h = self.config.hidden;
        let e = &self.params.values()[self.layout.embedding.clone()];
        &e[id * h..(id + 1) * h]
    }

    /// Runs the encoder over `ids` (callers append EOS themselves).
    pub fn encode(&self, ids: &[usize]) -> Result<Encoded> {
        if ids.is_empty() {
            return Err(Error::Shape("empty encoder input".into()));
        }
        self.check_ids(ids)?;
        Ok(self.encode_unchecked(ids))
    }

    fn encode_unchecked(&self, ids: &[usize]) -> Encoded {
        let h = self.config.hidden;
        let p = self.params.values();
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut states = Vec::with_capacity(ids.len() * h);
        let mut caches = Vec::with_capacity(ids.len());
        for &id in ids {
            let mut cache = LstmCache::default();
            self.layout.encoder.forward(p, self.embed(id), &hs, &cs, &mut cache);
            hs.clone_from(&cache.h);
            cs.clone_from(&cache.c);
            states.extend_from_slice(&cache.h);
            caches.push(cache);
        }
        let keys = match &self.layout.attention {
            Some(a) => a.keys(p, &states),
            None => Vec::new(),
        };
        Encoded {
            states,
            h: hs,
            c: cs,
            keys,
            caches,
        }
    }

    pub fn initial_state(&self, enc: &Encoded) -> DecoderState {
        DecoderState {
            h: enc.h.clone(),
            c: enc.c.clone(),
        }
    }

    fn step_forward(&self, prev: usize, state: &mut DecoderState, enc: &Encoded, cache: &mut StepCache) {
        let p = self.params.values();
        let h = self.config.hidden;
        cache.prev = prev;
        self.layout
            .decoder
            .forward(p, self.embed(prev), &state.h, &state.c, &mut cache.lstm);
        state.h.clone_from(&cache.lstm.h);
        state.c.clone_from(&cache.lstm.c);
        cache.out.clear();
        match &self.layout.attention {
            Some(a) => {
                a.forward(p, &state.h, &enc.states, &enc.keys, &mut cache.attn);
                let mut joint = Vec::with_capacity(2 * h);
                joint.extend_from_slice(&state.h);
                joint.extend_from_slice(&cache.attn.context);
                cache.out.extend_from_slice(&p[self.layout.combine_b.clone()]);
                gemv_acc(&mut cache.out, &p[self.layout.combine_w.clone()], &joint);
                for v in &mut cache.out {
                    *v = v.tanh();
                }
            }
            None => cache.out.extend_from_slice(&state.h),
        }
        cache.probs.clear();
        cache.probs.extend_from_slice(&p[self.layout.out_bias.clone()]);
        gemv_acc(&mut cache.probs, &p[self.layout.embedding.clone()], &cache.out);
    }

    /// Logits over the whole vocabulary for the next token; advances `state`.
    pub fn step_logits(&self, prev: usize, state: &mut DecoderState, enc: &Encoded) -> Result<Vec<f64>> {
        self.check_ids(&[prev])?;
        let h = self.config.hidden;
        if state.h.len() != h || state.c.len() != h || enc.states.len() != enc.len() * h {
            return Err(Error::Shape(format!("decoder state must have {h} units")));
        }
        let mut cache = StepCache::default();
        self.step_forward(prev, state, enc, &mut cache);
        Ok(cache.probs)
    }

    /// Greedy decoding; ties go to the lowest id.
    pub fn greedy_decode(&self, input: &[usize], max_len: usize) -> Result<Decoded> {
        self.decode_with(input, max_len, |probs| {
            let mut best = 0;
            for (i, &v) in probs.iter().enumerate() {
                if v > probs[best] {
                    best = i;
                }
            }
            best
        })
    }

    /// Ancestral sampling at temperature 1.
    pub fn sample_decode<R: Rng>(&self, input: &[usize], rng: &mut R, max_len: usize) -> Result<Decoded> {
        self.decode_with(input, max_len, |logits| {
            let mut probs = logits.to_vec();
            softmax_in_place(&mut probs);
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if r < acc {
                    return i;
                }
            }
            // Rounding left `acc` just below 1: take the last non-zero entry.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        })
    }

    fn decode_with(&self, input: &[usize], max_len: usize, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Decoded> {
        if max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        let enc = self.encode(input)?;
        let mut state = self.initial_state(&enc);
        let mut cache = StepCache::default();
        let mut prev = SOS;
        let mut tokens = Vec::new();
        for _ in 0..max_len {
            self.step_forward(prev, &mut state, &enc, &mut cache);
            let next = pick(&cache.probs);
            if next == EOS {
                return Ok(Decoded {
                    tokens,
                    truncated: false,
                });
            }
            tokens.push(next);
            prev = next;
        }
        Ok(Decoded {
            tokens,
            truncated: true,
        })
    }

    /// Per-token log-probabilities of `target` (EOS-terminated) under
    /// teacher forcing.
    pub fn token_log_probs(&self, input: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        self.check_ids(target)?;
        let enc = self.encode(input)?;
        let mut state = self.initial_state(&enc);
        let mut cache = StepCache::default();
        let mut prev = SOS;
        let mut out = Vec::with_capacity(target.len());
        for &t in target {
            self.step_forward(prev, &mut state, &enc, &mut cache);
            let logit = cache.probs[t];
            out.push(logit - softmax_in_place(&mut cache.probs));
            prev = t;
        }
        Ok(out)
    }

    /// `Σ_k w_k · NLL(target_k | input)` with teacher forcing, encoding the
    /// input once. When `grads` is given, the gradient of that sum is added
    /// to it (same layout as [`Agent::params`]).
    pub fn weighted_nll(&self, input: &[usize], targets: &[(&[usize], f64)], grads: Option<&mut [f64]>) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("empty target set".into()));
        }
        if let Some(g) = &grads {
            if g.len() != self.params.len() {
                return Err(Error::Shape(format!(
                    "gradient buffer of {} for {} parameters",
                    g.len(),
                    self.params.len()
                )));
            }
        }
        for (t, w) in targets {
            if t.is_empty() {
                return Err(Error::Shape("empty target sequence".into()));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("target weight"));
            }
            self.check_ids(t)?;
        }
        let enc = self.encode(input)?;
        match grads {
            None => {
                let mut total = 0.0;
                let mut cache = StepCache::default();
                for (target, w) in targets {
                    let mut state = self.initial_state(&enc);
                    let mut prev = SOS;
                    let mut nll = 0.0;
                    for &t in target.iter() {
                        self.step_forward(prev, &mut state, &enc, &mut cache);
                        let logit = cache.probs[t];
                        nll += softmax_in_place(&mut cache.probs) - logit;
                        prev = t;
                    }
                    total += w * nll;
                }
                Ok(total)
            }
            Some(g) => Ok(self.backward(input, &enc, targets, g)),
        }
    }

    fn backward(&self, input: &[usize], enc: &Encoded, targets: &[(&[usize], f64)], g: &mut [f64]) -> f64 {
        let h = self.config.hidden;
        let p = self.params.values();
        let l = &self.layout;
        let mut d_states = vec![0.0; enc.states.len()];
        let mut d_keys = vec![0.0; enc.keys.len()];
        let mut d_enc_h = vec![0.0; h];
        let mut d_enc_c = vec![0.0; h];
        let mut caches: Vec<StepCache> = Vec::new();
        let mut total = 0.0;

        let mut d_out = vec![0.0; h];
        let mut d_pre = vec![0.0; h];
        let mut d_joint = vec![0.0; 2 * h];
        let mut joint = vec![0.0; 2 * h];
        let mut dh = vec![0.0; h];
        let mut dc = vec![0.0; h];
        let mut dx = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        let mut dc_prev = vec![0.0; h];

        for (target, w) in targets {
            let mut state = self.initial_state(enc);
            caches.resize_with(target.len(), StepCache::default);
            let mut prev = SOS;
            for (k, &t) in target.iter().enumerate() {
                let cache = &mut caches[k];
                self.step_forward(prev, &mut state, enc, cache);
                let logit = cache.probs[t];
                total += w * (softmax_in_place(&mut cache.probs) - logit);
                prev = t;
            }
            dh.fill(0.0);
            dc.fill(0.0);
            for k in (0..target.len()).rev() {
                let cache = &caches[k];
                // d logits = w (softmax - onehot), reusing the probs buffer.
                let mut d_logits = cache.probs.clone();
                d_logits[target[k]] -= 1.0;
                for v in &mut d_logits {
                    *v *= w;
                }
                add_assign(&mut g[l.out_bias.clone()], &d_logits);
                ger_acc(&mut g[l.embedding.clone()], &d_logits, &cache.out);
                d_out.fill(0.0);
                gemv_t_acc(&mut d_out, &p[l.embedding.clone()], &d_logits);

                match &l.attention {
                    Some(a) => {
                        for i in 0..h {
                            d_pre[i] = d_out[i] * (1.0 - cache.out[i] * cache.out[i]);
                        }
                        joint[..h].copy_from_slice(&cache.lstm.h);
                        joint[h..].copy_from_slice(&cache.attn.context);
                        ger_acc(&mut g[l.combine_w.clone()], &d_pre, &joint);
                        add_assign(&mut g[l.combine_b.clone()], &d_pre);
                        d_joint.fill(0.0);
                        gemv_t_acc(&mut d_joint, &p[l.combine_w.clone()], &d_pre);
                        add_assign(&mut dh, &d_joint[..h]);
                        a.backward(
                            p,
                            g,
                            &enc.states,
                            &cache.attn,
                            &d_joint[h..],
                            &mut dh,
                            &mut d_states,
                            &mut d_keys,
                        );
                    }
                    None => add_assign(&mut dh, &d_out),
                }

                dx.fill(0.0);
                dh_prev.fill(0.0);
                dc_prev.fill(0.0);
                l.decoder
                    .backward(p, g, &cache.lstm, &dh, &dc, &mut dx, &mut dh_prev, &mut dc_prev);
                let row = cache.prev * h;
                add_assign(&mut g[l.embedding.start + row..l.embedding.start + row + h], &dx);
                std::mem::swap(&mut dh, &mut dh_prev);
                std::mem::swap(&mut dc, &mut dc_prev);
            }
            add_assign(&mut d_enc_h, &dh);
            add_assign(&mut d_enc_c, &dc);
        }

        if let Some(a) = &l.attention {
            a.keys_backward(p, g, &enc.states, &d_keys, &mut d_states);
        }
        let n = enc.len();
        add_assign(&mut d_states[(n - 1) * h..], &d_enc_h);
        dh.fill(0.0);
        dc.copy_from_slice(&d_enc_c);
        for t in (0..n).rev() {
            add_assign(&mut dh, &d_states[t * h..(t + 1) * h]);
            dx.fill(0.0);
            dh_prev.fill(0.0);
            dc_prev.fill(0.0);
            l.encoder
                .backward(p, g, &enc.caches[t], &dh, &dc, &mut dx, &mut dh_prev, &mut dc_prev);
            let row = input[t] * h;
            add_assign(&mut g[l.embedding.start + row..l.embedding.start + row + h], &dx);
            std::mem::swap(&mut dh, &mut dh_prev);
            std::mem::swap(&mut dc, &mut dc_prev);
        }
        total
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = vec![
            ("vocab_hash".to_string(), self.vocab_hash.clone()),
            ("vocab_size".to_string(), self.vocab_size.to_string()),
            ("hidden".to_string(), self.config.hidden.to_string()),
            ("attention".to_string(), self.config.attention.to_string()),
        ];
        self.params.write_checkpoint(out, &header)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: std::io::BufRead>(input: &mut R, vocab: &Vocabulary) -> Result<Agent> {
        let (params, header) = ParamSet::read_checkpoint(input)?;
        let get = |k: &str| {
            header
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format("agent checkpoint", format!("missing header {k}")))
        };
        if get("vocab_hash")? != vocab.hash() {
            return Err(Error::format("agent checkpoint", "vocabulary hash mismatch"));
        }
        let hidden: usize = get("hidden")?
            .parse()
            .map_err(|_| Error::format("agent checkpoint", "hidden"))?;
        let attention: bool = get("attention")?
            .parse()
            .map_err(|_| Error::format("agent checkpoint", "attention"))?;
        let config = AgentConfig { hidden, attention };
        let (layout, fresh) = Layout::build(vocab.len(), config);
        if fresh.blocks() != params.blocks() {
            return Err(Error::format("agent checkpoint", "parameter layout mismatch"));
        }
        Ok(Agent {
            config,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
            layout,
            params,
        })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Agent> {
        Agent::read_checkpoint(&mut BufReader::new(File::open(path)?), vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::softmax;

    fn vocab() -> Vocabulary {
        Vocabulary::standard()
    }

    fn agent(attention: bool, seed: u64) -> Agent {
        Agent::new(&vocab(), AgentConfig { hidden: 6, attention }, seed)
    }

    /// Central differences at step 1e-5 carry ~1e-10 absolute roundoff on
    /// these losses, so the denominator is floored at 1e-5.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    #[test]
    fn encode_shapes_and_errors() {
        let a = agent(true, 1);
        let enc = a.encode(&[3, 4, 5, EOS]).unwrap();
        assert_eq!(enc.len(), 4);
        assert_eq!(enc.states.len(), 4 * 6);
        assert!(a.encode(&[]).is_err());
        assert!(a.encode(&[99]).is_err());
        let again = a.encode(&[3, 4, 5, EOS]).unwrap();
        assert_eq!(enc.states, again.states);
    }

    #[test]
    fn step_logits_cover_vocabulary() {
        for att in [false, true] {
            let a = agent(att, 2);
            let enc = a.encode(&[3, 3, EOS]).unwrap();
            let mut st = a.initial_state(&enc);
            let logits = a.step_logits(SOS, &mut st, &enc).unwrap();
            assert_eq!(logits.len(), 19);
            let s: f64 = softmax(&logits).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let mut bad = DecoderState {
                h: vec![0.0; 3],
                c: vec![0.0; 3],
            };
            assert!(a.step_logits(SOS, &mut bad, &enc).is_err());
        }
    }

    #[test]
    fn embedding_is_tied() {
        let mut a = agent(false, 3);
        let before_enc = a.encode(&[3, EOS]).unwrap().states;
        let mut st = a.initial_state(&a.encode(&[4, EOS]).unwrap());
        let enc = a.encode(&[4, EOS]).unwrap();
        let before_logits = a.step_logits(SOS, &mut st, &enc).unwrap();
        // Row of symbol 3 is both an input embedding and an output score row.
        let block = a.params().block("embedding").unwrap().range();
        for v in &mut a.params_mut().values_mut()[block.start + 3 * 6..block.start + 4 * 6] {
            *v += 0.5;
        }
        assert_ne!(a.encode(&[3, EOS]).unwrap().states, before_enc);
        let enc = a.encode(&[4, EOS]).unwrap();
        let mut st = a.initial_state(&enc);
        let after = a.step_logits(SOS, &mut st, &enc).unwrap();
        assert_ne!(after[3], before_logits[3]);
        assert!(a.params().block("output.w").is_none());
    }

    #[test]
    fn greedy_is_deterministic_and_sampling_reproducible() {
        let a = agent(true, 4);
        let x = [3, 4, 4, EOS];
        let g1 = a.greedy_decode(&x, 40).unwrap();
        assert_eq!(g1, a.greedy_decode(&x, 40).unwrap());
        let s1 = a.sample_decode(&x, &mut ChaCha8Rng::seed_from_u64(9), 40).unwrap();
        let s2 = a.sample_decode(&x, &mut ChaCha8Rng::seed_from_u64(9), 40).unwrap();
        assert_eq!(s1, s2);
        assert!(a.greedy_decode(&x, 0).is_err());
        let short = a.greedy_decode(&x, 1).unwrap();
        assert!(short.tokens.len() <= 1);
    }

    #[test]
    fn greedy_ties_go_to_lowest_id() {
        // All-zero parameters: every logit is 0, so argmax is id 0 forever.
        let mut a = agent(true, 5);
        a.params_mut().values_mut().fill(0.0);
        let d = a.greedy_decode(&[3, EOS], 5).unwrap();
        assert_eq!(d.tokens, vec![0; 5]);
        assert!(d.truncated);
    }

    #[test]
    fn peaked_logits_make_sampling_greedy() {
        let mut a = agent(false, 6);
        a.params_mut().values_mut().fill(0.0);
        // A dominant output bias makes every step one-hot in practice.
        let bias = a.params().block("output.bias").unwrap().range();
        a.params_mut().values_mut()[bias.start + 7] = 80.0;
        let g = a.greedy_decode(&[3, EOS], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(a.sample_decode(&[3, EOS], &mut rng, 4).unwrap(), g);
        }
    }

    #[test]
    fn weighted_nll_is_linear_in_weights() {
        let a = agent(true, 7);
        let x = [3, 4, EOS];
        let u1 = [7usize, 12, EOS];
        let u2 = [8usize, 13, EOS];
        let single = |u: &[usize]| a.weighted_nll(&x, &[(u, 1.0)], None).unwrap();
        let both = a.weighted_nll(&x, &[(&u1, 2.0), (&u2, 0.5)], None).unwrap();
        assert!((both - (2.0 * single(&u1) + 0.5 * single(&u2))).abs() < 1e-12);
        let lp: f64 = a.token_log_probs(&x, &u1).unwrap().iter().sum();
        assert!((single(&u1) + lp).abs() < 1e-12);
        let mut g = vec![0.0; a.num_params()];
        let with_grad = a.weighted_nll(&x, &[(&u1, 2.0), (&u2, 0.5)], Some(&mut g)).unwrap();
        assert!((with_grad - both).abs() < 1e-12);
        assert!(a.weighted_nll(&x, &[], None).is_err());
    }

    fn check_gradients(attention: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = agent(attention, seed);
        a.params_mut().init_uniform(&mut rng, 0.5);
        let x: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..19)).chain([EOS]).collect();
        let targets: Vec<Vec<usize>> = (0..rng.gen_range(1..4))
            .map(|_| (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..19)).chain([EOS]).collect())
            .collect();
        let weights: Vec<f64> = targets.iter().map(|_| rng.gen_range(0.2..1.5)).collect();
        let pairs: Vec<(&[usize], f64)> = targets.iter().map(|t| t.as_slice()).zip(weights.iter().copied()).collect();

        let mut g = vec![0.0; a.num_params()];
        a.weighted_nll(&x, &pairs, Some(&mut g)).unwrap();
        let step = 1e-5;
        for block in a.params().blocks().to_vec() {
            for i in block.range() {
                let orig = a.params().values()[i];
                a.params_mut().values_mut()[i] = orig + step;
                let up = a.weighted_nll(&x, &pairs, None).unwrap();
                a.params_mut().values_mut()[i] = orig - step;
                let down = a.weighted_nll(&x, &pairs, None).unwrap();
                a.params_mut().values_mut()[i] = orig;
                let num = (up - down) / (2.0 * step);
                assert!(
                    rel_err(g[i], num) < 1e-4,
                    "{} [{}]: analytic {} numeric {}",
                    block.name,
                    i - block.offset,
                    g[i],
                    num
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_attention() {
        for seed in 0..3 {
            check_gradients(false, seed);
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_attention() {
        for seed in 10..13 {
            check_gradients(true, seed);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = agent(true, 8);
        let mut buf = Vec::new();
        a.write_checkpoint(&mut buf).unwrap();
        let b = Agent::read_checkpoint(&mut buf.as_slice(), &vocab()).unwrap();
        assert_eq!(b.config(), a.config());
        assert_eq!(b.params(), a.params());
        let mut again = Vec::new();
        b.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}
