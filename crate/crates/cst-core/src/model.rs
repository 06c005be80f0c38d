//! Tiny autoregressive language model with exact log-probabilities and
//! gradients.
//!
//! The architecture is a neural n-gram chosen so every quantity the
//! preference objective needs is computable exactly in `f64`:
//!
//! ```text
//! window  w        last K token ids of the context, left-padded with BOS
//! pooled  x_e      mean over slots i of (tok_emb[w_i] + pos_emb[i])
//! hidden  h        tanh(W1 x + b1)
//! logits  z        W2 h + b2
//! p(t|w)           softmax(z)_t
//! ```
//!
//! Note the pooling means the window acts as a bag of its last K tokens; the
//! per-slot position embeddings survive pooling only as a learned constant
//! offset. That is deliberate — the model only has to route "which system
//! prompt and which words are in view" to the next token, and a bag does
//! that with a fraction of the parameters a sequence model would need.
//!
//! Parameters live in one flat `Vec<f64>` in the fixed order given by
//! [`TinyLM::layout`] (`tok_emb`, `pos_emb`, `w1`, `b1`, `w2`, `b2`), so a
//! gradient is just another vector of the same length and optimizers stay
//! oblivious to the architecture.
//!
//! Contexts are rendered as
//! `[BOS, SEP_SYS, tokens(s), SEP_USR, tokens(x), SEP_ASST, tokens(y), EOS]`
//! and the scored completion span is `tokens(y) + EOS`. Tokenization is
//! whitespace splitting, case-preserving; unknown words map to `UNK`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::Lcg64;

/// Reserved marker token ids. They occupy the first six vocabulary slots in
/// this order; corpus tokens follow sorted lexicographically.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP_SYS: usize = 2;
pub const SEP_USR: usize = 3;
pub const SEP_ASST: usize = 4;
pub const UNK: usize = 5;

/// String forms of the reserved markers, indexed by their token ids.
pub const RESERVED_TOKENS: [&str; 6] = ["<bos>", "<eos>", "<sys>", "<usr>", "<asst>", "<unk>"];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("checkpoint {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type ModelResult<T> = Result<T, ModelError>;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token/index bijection: six reserved markers first, then the deduplicated
/// corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from corpus records. Tokenization is whitespace splitting with
    /// case preserved; words colliding with a reserved marker string are
    /// dropped so the bijection holds.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> ModelResult<Self> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut words: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for record in corpus {
            for word in record.as_ref().split_whitespace() {
                if !RESERVED_TOKENS.contains(&word) {
                    words.insert(word);
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(str::to_string));
        Self::from_tokens(tokens).map_err(|reason| ModelError::BadCheckpoint {
            path: "<built>".into(),
            reason,
        })
    }

    /// Rebuild from an explicit token list (checkpoint load path). Validates
    /// the reserved prefix and that no token repeats.
    fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err("vocabulary shorter than the reserved marker set".into());
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(format!(
                    "reserved slot {i} holds {:?}, expected {expected:?}",
                    tokens[i]
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(format!("duplicate token {tok:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Number of tokens, reserved markers included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // six reserved tokens are always present
    }

    /// String form of a token id. Panics on out-of-range ids; ids only come
    /// from this vocabulary.
    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Full token list in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a word, or `UNK` if it is out of vocabulary.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// True if the exact word is in vocabulary (not via the UNK fallback).
    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Whitespace-tokenize and map to ids, UNK for out-of-vocabulary words.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Render the full training sequence for (system, prompt, completion):
    /// `[BOS, SEP_SYS, s…, SEP_USR, x…, SEP_ASST, y…, EOS]`.
    pub fn render_context(&self, system: &str, prompt: &str, completion: &str) -> Vec<usize> {
        let mut seq = vec![BOS, SEP_SYS];
        seq.extend(self.encode(system));
        seq.push(SEP_USR);
        seq.extend(self.encode(prompt));
        seq.push(SEP_ASST);
        seq.extend(self.encode(completion));
        seq.push(EOS);
        seq
    }

    /// Number of scored positions for a completion: its tokens plus EOS.
    pub fn completion_len(&self, completion: &str) -> usize {
        self.encode(completion).len() + 1
    }
}

// ---------------------------------------------------------------------------
// Architecture and parameter layout
// ---------------------------------------------------------------------------

/// Architecture sizes. Field names match the checkpoint JSON keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Context window length in tokens.
    #[serde(rename = "K")]
    pub k: usize,
    /// Embedding width.
    #[serde(rename = "E")]
    pub e: usize,
    /// Hidden width.
    #[serde(rename = "H")]
    pub h: usize,
    /// Vocabulary size.
    #[serde(rename = "V")]
    pub v: usize,
}

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

impl Arch {
    /// Deterministic parameter layout. The flat vector is the concatenation
    /// of these blocks in order.
    pub fn layout(&self) -> [LayoutEntry; 6] {
        let (k, e, h, v) = (self.k, self.e, self.h, self.v);
        let sizes = [
            ("tok_emb", v * e),
            ("pos_emb", k * e),
            ("w1", h * e),
            ("b1", h),
            ("w2", v * h),
            ("b2", v),
        ];
        let mut entries = [LayoutEntry {
            name: "",
            offset: 0,
            len: 0,
        }; 6];
        let mut offset = 0;
        for (slot, (name, len)) in entries.iter_mut().zip(sizes) {
            *slot = LayoutEntry { name, offset, len };
            offset += len;
        }
        entries
    }

    /// Total parameter count: the sum of the layout blocks.
    pub fn param_len(&self) -> usize {
        self.layout().iter().map(|e| e.len).sum()
    }
}

// ---------------------------------------------------------------------------
// TinyLM
// ---------------------------------------------------------------------------

/// The trainable model: a vocabulary, an architecture, and one flat f64
/// parameter vector in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    vocab: Vocabulary,
    arch: Arch,
    params: Vec<f64>,
}

/// Frozen copy of a [`TinyLM`] taken by [`TinyLM::snapshot`]. There is no
/// mutable access, so the reference a training run scores against cannot
/// drift.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    model: TinyLM,
}

impl ReferenceModel {
    pub fn seq_logprob(&self, system: &str, prompt: &str, completion: &str) -> f64 {
        self.model.seq_logprob(system, prompt, completion)
    }

    /// Read-only view of the frozen model.
    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    /// Snapshotting a snapshot yields the same parameters again.
    pub fn snapshot(&self) -> ReferenceModel {
        self.clone()
    }
}

/// On-disk checkpoint schema, format_version 1. `params` round-trips through
/// serde_json's shortest-representation float encoding, which preserves every
/// f64 bit for bit.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    arch: Arch,
    vocab: Vec<String>,
    params: Vec<f64>,
}

impl TinyLM {
    /// Fresh model with parameters drawn uniformly from [-0.05, 0.05] by the
    /// seeded generator, in layout order.
    pub fn new(vocab: Vocabulary, k: usize, e: usize, h: usize, seed: u64) -> Self {
        let arch = Arch {
            k,
            e,
            h,
            v: vocab.len(),
        };
        let mut rng = Lcg64::new(seed);
        let params = (0..arch.param_len())
            .map(|_| rng.next_range(-0.05, 0.05))
            .collect();
        Self {
            vocab,
            arch,
            params,
        }
    }

    /// All-zero parameters: every context yields the uniform distribution.
    pub fn zeros(vocab: Vocabulary, k: usize, e: usize, h: usize) -> Self {
        let arch = Arch {
            k,
            e,
            h,
            v: vocab.len(),
        };
        let params = vec![0.0; arch.param_len()];
        Self {
            vocab,
            arch,
            params,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Parameter layout; the parameter vector length always equals its total.
    pub fn layout(&self) -> [LayoutEntry; 6] {
        self.arch.layout()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for optimizers. The training loop is the
    /// only writer; nothing here is shared across threads.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Frozen copy for use as a DPO reference.
    pub fn snapshot(&self) -> ReferenceModel {
        ReferenceModel {
            model: self.clone(),
        }
    }

    fn block(&self, name: &str) -> &[f64] {
        let entry = self
            .layout()
            .into_iter()
            .find(|e| e.name == name)
            .expect("known block name");
        &self.params[entry.offset..entry.offset + entry.len]
    }

    /// The K-token window that predicts position `pos` of `seq`: the last K
    /// tokens before it, left-padded with BOS when the prefix is short.
    fn window(&self, seq: &[usize], pos: usize) -> Vec<usize> {
        let k = self.arch.k;
        let mut w = Vec::with_capacity(k);
        let start = pos.saturating_sub(k);
        let pad = k - (pos - start);
        w.resize(pad, BOS);
        w.extend_from_slice(&seq[start..pos]);
        w
    }

    /// Forward pass for one window. Returns (pooled, hidden, logits).
    fn forward(&self, window: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let Arch { k, e, h, v } = self.arch;
        debug_assert_eq!(window.len(), k);
        let tok_emb = self.block("tok_emb");
        let pos_emb = self.block("pos_emb");
        let w1 = self.block("w1");
        let b1 = self.block("b1");
        let w2 = self.block("w2");
        let b2 = self.block("b2");

        let mut pooled = vec![0.0; e];
        for (slot, &tok) in window.iter().enumerate() {
            for d in 0..e {
                pooled[d] += tok_emb[tok * e + d] + pos_emb[slot * e + d];
            }
        }
        let inv_k = 1.0 / k as f64;
        for d in pooled.iter_mut() {
            *d *= inv_k;
        }

        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let row = &w1[j * e..(j + 1) * e];
            let mut acc = b1[j];
            for d in 0..e {
                acc += row[d] * pooled[d];
            }
            hidden[j] = acc.tanh();
        }

        let mut logits = vec![0.0; v];
        for t in 0..v {
            let row = &w2[t * h..(t + 1) * h];
            let mut acc = b2[t];
            for j in 0..h {
                acc += row[j] * hidden[j];
            }
            logits[t] = acc;
        }
        (pooled, hidden, logits)
    }

    /// Log-sum-exp stabilized by the max logit.
    fn log_sum_exp(logits: &[f64]) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        max + sum.ln()
    }

    /// Next-token distribution for the window ending just before `pos` of a
    /// rendered sequence. Exposed for inspection; sums to 1 within 1e-12.
    pub fn next_token_probs(&self, window: &[usize]) -> Vec<f64> {
        let (_, _, logits) = self.forward(window);
        let lse = Self::log_sum_exp(&logits);
        logits.iter().map(|z| (z - lse).exp()).collect()
    }

    /// Exact log-probability of the completion (its tokens plus EOS) given
    /// the rendered (system, prompt) context. Always <= 0; each position is
    /// a log-softmax, so exp of a single term is a probability.
    pub fn seq_logprob(&self, system: &str, prompt: &str, completion: &str) -> f64 {
        let seq = self.vocab.render_context(system, prompt, completion);
        let span = self.vocab.completion_len(completion);
        let mut total = 0.0;
        for pos in seq.len() - span..seq.len() {
            let window = self.window(&seq, pos);
            let (_, _, logits) = self.forward(&window);
            total += logits[seq[pos]] - Self::log_sum_exp(&logits);
        }
        total
    }

    /// Gradient of [`Self::seq_logprob`] with respect to every parameter, in
    /// layout order. Allocates a fresh vector; see
    /// [`Self::add_seq_logprob_grad`] for the accumulating form the training
    /// loop uses.
    pub fn seq_logprob_grad(&self, system: &str, prompt: &str, completion: &str) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.add_seq_logprob_grad(system, prompt, completion, 1.0, &mut grad);
        grad
    }

    /// Add `scale * d seq_logprob / d params` into `acc` and return the
    /// log-probability itself (the forward pass comes for free). Positions
    /// are accumulated in sequence order so results are bit-reproducible.
    pub fn add_seq_logprob_grad(
        &self,
        system: &str,
        prompt: &str,
        completion: &str,
        scale: f64,
        acc: &mut [f64],
    ) -> f64 {
        assert_eq!(acc.len(), self.params.len(), "gradient buffer length");
        let Arch { k, e, h, v } = self.arch;
        let layout = self.layout();
        let (tok_off, pos_off, w1_off, b1_off, w2_off, b2_off) = (
            layout[0].offset,
            layout[1].offset,
            layout[2].offset,
            layout[3].offset,
            layout[4].offset,
            layout[5].offset,
        );

        let seq = self.vocab.render_context(system, prompt, completion);
        let span = self.vocab.completion_len(completion);
        let inv_k = 1.0 / k as f64;
        let mut total = 0.0;

        for pos in seq.len() - span..seq.len() {
            let window = self.window(&seq, pos);
            let target = seq[pos];
            let (pooled, hidden, logits) = self.forward(&window);
            let lse = Self::log_sum_exp(&logits);
            total += logits[target] - lse;

            // d logp(target) / d z_t = [t == target] - softmax(z)_t
            let mut dz = vec![0.0; v];
            for t in 0..v {
                dz[t] = -((logits[t] - lse).exp());
            }
            dz[target] += 1.0;

            // Output layer: b2 and w2 rows, then pull back to the hidden.
            let w2 = self.block("w2");
            let mut dh = vec![0.0; h];
            for t in 0..v {
                let g = dz[t];
                acc[b2_off + t] += scale * g;
                let row = t * h;
                for j in 0..h {
                    acc[w2_off + row + j] += scale * g * hidden[j];
                    dh[j] += g * w2[row + j];
                }
            }

            // tanh backward, hidden layer, pull back to the pooled input.
            let w1 = self.block("w1");
            let mut dx = vec![0.0; e];
            for j in 0..h {
                let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                acc[b1_off + j] += scale * da;
                let row = j * e;
                for d in 0..e {
                    acc[w1_off + row + d] += scale * da * pooled[d];
                    dx[d] += da * w1[row + d];
                }
            }

            // Mean pooling spreads dx/K over every slot's token and position
            // embedding; repeated tokens accumulate once per occurrence.
            for (slot, &tok) in window.iter().enumerate() {
                for d in 0..e {
                    let g = scale * dx[d] * inv_k;
                    acc[tok_off + tok * e + d] += g;
                    acc[pos_off + slot * e + d] += g;
                }
            }
        }
        total
    }

    /// Greedy decoding from the `[…, SEP_ASST]` position: repeatedly take the
    /// argmax token (ties broken toward the lowest index) until EOS or
    /// `max_len` tokens. Returns the generated words joined by single spaces;
    /// EOS itself is not rendered. Pure — no RNG is involved.
    pub fn greedy_generate(&self, system: &str, prompt: &str, max_len: usize) -> String {
        let mut seq = vec![BOS, SEP_SYS];
        seq.extend(self.vocab.encode(system));
        seq.push(SEP_USR);
        seq.extend(self.vocab.encode(prompt));
        seq.push(SEP_ASST);

        let mut words: Vec<&str> = Vec::new();
        for _ in 0..max_len {
            let window = self.window(&seq, seq.len());
            let (_, _, logits) = self.forward(&window);
            let mut best = 0;
            for (t, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = t;
                }
            }
            if best == EOS {
                break;
            }
            words.push(self.vocab.token(best));
            seq.push(best);
        }
        words.join(" ")
    }

    /// Serialize to the format_version-1 checkpoint JSON.
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: 1,
            arch: self.arch,
            vocab: self.vocab.tokens.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    /// Parse a checkpoint produced by [`Self::to_json`], validating the
    /// format version, vocabulary, and parameter-vector length.
    pub fn from_json(json: &str, origin: &str) -> ModelResult<Self> {
        let file: CheckpointFile = serde_json::from_str(json).map_err(|source| ModelError::Json {
            path: origin.to_string(),
            source,
        })?;
        let bad = |reason: String| ModelError::BadCheckpoint {
            path: origin.to_string(),
            reason,
        };
        if file.format_version != 1 {
            return Err(bad(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        if file.arch.v != file.vocab.len() {
            return Err(bad(format!(
                "arch says V={} but the vocabulary holds {} tokens",
                file.arch.v,
                file.vocab.len()
            )));
        }
        let expected = file.arch.param_len();
        if file.params.len() != expected {
            return Err(bad(format!(
                "parameter vector holds {} values, layout requires {expected}",
                file.params.len()
            )));
        }
        let vocab = Vocabulary::from_tokens(file.vocab).map_err(bad)?;
        Ok(Self {
            vocab,
            arch: file.arch,
            params: file.params,
        })
    }

    /// Write the checkpoint JSON (single line, trailing newline) to a file.
    pub fn save(&self, path: &Path) -> ModelResult<()> {
        let mut body = self.to_json();
        body.push('\n');
        std::fs::write(path, body).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a checkpoint written by [`Self::save`].
    pub fn load(path: &Path) -> ModelResult<Self> {
        let body = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&body, &path.display().to_string())
    }
}

impl fmt::Display for TinyLM {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TinyLM(K={}, E={}, H={}, V={}, {} params)",
            self.arch.k,
            self.arch.e,
            self.arch.h,
            self.arch.v,
            self.params.len()
        )
    }
}
