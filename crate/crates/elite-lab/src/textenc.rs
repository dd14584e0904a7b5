//! Word-level tokenizer, token embedding table, and a small bidirectional
//! transformer text encoder, with a pseudo-word injection path that
//! splices learned concept embeddings into the token sequence before
//! encoding.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, TransformerBlock};

/// The pseudo-word placeholder as written in prompts.
pub const PLACEHOLDER: &str = "S*";

const TEMPLATES_TEXT: &str = include_str!("../resources/templates.txt");

/// Training templates, one per line in the shipped resource, each
/// containing exactly one placeholder.
pub fn templates() -> &'static [&'static str] {
    static LIST: OnceLock<Vec<&'static str>> = OnceLock::new();
    LIST.get_or_init(|| TEMPLATES_TEXT.lines().filter(|l| !l.trim().is_empty()).collect())
}

/// Uniformly samples one training template.
pub fn sample_template(rng: &mut ChaCha8Rng) -> &'static str {
    let list = templates();
    list[rng.random_range(0..list.len())]
}

/// Replaces the placeholder with a concrete phrase, e.g. a category name.
pub fn instantiate(template: &str, replacement: &str) -> String {
    template.replace(PLACEHOLDER, replacement)
}

/// Extra prompt words not already present in templates or category names.
const EXTRA_WORDS: [&str; 8] = ["on", "background", "in", "with", "beside", "above", "tiny", "huge"];

/// Fixed word-level vocabulary with reserved special tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    by_word: BTreeMap<String, usize>,
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const STAR: usize = 3;

impl Vocab {
    /// Builds the vocabulary from the template list, the dataset's
    /// category words, and a few edit-prompt extras. Deterministic: words
    /// are sorted.
    pub fn build() -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in templates() {
            for w in t.split_whitespace() {
                if w != PLACEHOLDER {
                    set.insert(w.to_lowercase());
                }
            }
        }
        for w in data::SHAPE_NAMES.iter().chain(&data::COLOR_NAMES).chain(&data::TEXTURE_NAMES) {
            set.insert(w.to_string());
        }
        for w in EXTRA_WORDS {
            set.insert(w.to_string());
        }
        let mut words = vec!["<bos>".into(), "<eos>".into(), "<unk>".into(), PLACEHOLDER.into()];
        words.extend(set.into_iter());
        let by_word = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        Vocab { words, by_word }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        if word == PLACEHOLDER {
            return STAR;
        }
        self.by_word.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

/// A tokenized prompt: ids with begin/end markers and the position of the
/// placeholder, if present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    pub placeholder_position: Option<usize>,
    pub text: String,
}

impl TokenizedPrompt {
    /// The empty prompt (markers only), used as the unconditional context
    /// for classifier-free guidance.
    pub fn empty() -> Self {
        TokenizedPrompt { ids: vec![BOS, EOS], placeholder_position: None, text: String::new() }
    }

    /// Content length excluding the begin/end markers.
    pub fn content_len(&self) -> usize {
        self.ids.len() - 2
    }
}

/// How learned concept words replace the placeholder slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectMode {
    /// Only the primary word w0; sequence length unchanged.
    PrimaryOnly,
    /// All N words; sequence grows by N-1.
    Full,
}

/// The learned concept: N word embeddings, row 0 from the deepest tap.
#[derive(Debug, Clone)]
pub struct WordEmbeddingSet<S: Scalar> {
    /// `[n, d]` matrix of word embeddings.
    pub words: Tensor<S>,
    /// Always 0: the primary word is the deepest tap's row.
    pub primary_index: usize,
    pub tap_layer_ids: Vec<usize>,
}

/// On-disk JSON form of a [`WordEmbeddingSet`].
#[derive(Debug, Serialize, Deserialize)]
pub struct WordEmbeddingSetFile {
    pub words: Vec<Vec<f64>>,
    pub primary_index: usize,
    pub tap_layer_ids: Vec<usize>,
}

impl<S: Scalar> WordEmbeddingSet<S> {
    pub fn num_words(&self) -> usize {
        self.words.dim(0)
    }

    pub fn to_file(&self) -> WordEmbeddingSetFile {
        let d = self.words.dim(1);
        let words = self
            .words
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|&v| v.to_f64()).collect())
            .collect();
        WordEmbeddingSetFile {
            words,
            primary_index: self.primary_index,
            tap_layer_ids: self.tap_layer_ids.clone(),
        }
    }

    pub fn from_file(f: &WordEmbeddingSetFile) -> Result<Self> {
        let n = f.words.len();
        if n == 0 {
            return Err(Error::Contract("word embedding set must have at least one row".into()));
        }
        let d = f.words[0].len();
        let mut data = Vec::with_capacity(n * d);
        for row in &f.words {
            if row.len() != d {
                return Err(Error::Shape("ragged word embedding rows".into()));
            }
            data.extend(row.iter().map(|&v| S::from_f64(v)));
        }
        Ok(WordEmbeddingSet {
            words: Tensor::new(vec![n, d], data)?,
            primary_index: f.primary_index,
            tap_layer_ids: f.tap_layer_ids.clone(),
        })
    }
}

/// Token table plus transformer encoder mapping embedded sequences to
/// per-token textual features.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub embed: ParamRef,
    pub pos: ParamRef,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        blocks: usize,
        max_len: usize,
    ) -> Result<Self> {
        let vocab = Vocab::build();
        let embed = ps.register(
            &format!("{prefix}.embed"),
            Tensor::randn(vec![vocab.len(), dim], 0.02, rng),
        )?;
        let pos =
            ps.register(&format!("{prefix}.pos"), Tensor::randn(vec![max_len, dim], 0.02, rng))?;
        let blocks = (0..blocks)
            .map(|i| TransformerBlock::new(ps, rng, &format!("{prefix}.block{i}"), dim, 2))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(ps, &format!("{prefix}.lnf"), dim)?;
        Ok(TextEncoder { vocab, embed, pos, blocks, ln_f, max_len, dim })
    }

    /// Whitespace tokenization against the fixed vocabulary; unknown words
    /// map to UNK, the placeholder keeps its reserved id.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        if text.trim().is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        let mut ids = vec![BOS];
        let mut placeholder_position = None;
        for w in text.split_whitespace() {
            let id = self.vocab.id(w);
            if id == STAR {
                if placeholder_position.is_some() {
                    return Err(Error::Contract(format!(
                        "prompt has more than one {PLACEHOLDER}: {text}"
                    )));
                }
                placeholder_position = Some(ids.len());
            }
            ids.push(id);
        }
        ids.push(EOS);
        Ok(TokenizedPrompt { ids, placeholder_position, text: text.to_string() })
    }

    /// Inverse of [`tokenize`] up to whitespace normalization; unknown
    /// words come back as `<unk>`.
    pub fn detokenize(&self, tok: &TokenizedPrompt) -> String {
        tok.ids
            .iter()
            .filter(|&&id| id != BOS && id != EOS)
            .map(|&id| self.vocab.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Builds the embedded sequence in the word-embedding space, splicing
    /// concept words into the placeholder slot when supplied. The result
    /// is `[L', d]` on the tape and differentiable into `words`.
    pub fn inject_concept<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        tok: &TokenizedPrompt,
        words: Option<Var>,
        mode: InjectMode,
    ) -> Result<Var> {
        let table = tape.param(ps, self.embed);
        let spliced = match (words, tok.placeholder_position) {
            (None, _) => tape.gather_rows(table, &tok.ids)?,
            (Some(_), None) => {
                return Err(Error::Contract(format!(
                    "concept words supplied but prompt has no {PLACEHOLDER}: {}",
                    tok.text
                )))
            }
            (Some(v), Some(pos)) => {
                let n = tape.shape(v)[0];
                let part = match mode {
                    InjectMode::PrimaryOnly => tape.slice_rows(v, 0, 1)?,
                    InjectMode::Full => v,
                };
                if tape.shape(part)[1] != self.dim {
                    return Err(Error::Shape(format!(
                        "concept word dim {} does not match text dim {}",
                        tape.shape(part)[1],
                        self.dim
                    )));
                }
                let before = tape.gather_rows(table, &tok.ids[..pos])?;
                let after = tape.gather_rows(table, &tok.ids[pos + 1..])?;
                let _ = n;
                tape.concat0(&[before, part, after])?
            }
        };
        Ok(spliced)
    }

    /// Encodes an embedded `[L, d]` sequence into per-token textual
    /// features `[L, d]` (positions added here, bidirectional attention).
    pub fn encode_text<S: Scalar>(
        &self,
        tape: &Tape<S>,
        ps: &ParamSet<S>,
        embedded: Var,
    ) -> Result<Var> {
        let len = tape.shape(embedded)[0];
        if len > self.max_len {
            return Err(Error::Length(format!(
                "sequence of {len} tokens exceeds maximum {}",
                self.max_len
            )));
        }
        let pos = tape.param(ps, self.pos);
        let pos_slice = tape.slice_rows(pos, 0, len)?;
        let mut x = tape.add(embedded, pos_slice)?;
        for block in &self.blocks {
            x = block.forward(tape, ps, x)?;
        }
        self.ln_f.forward(tape, ps, x)
    }

    /// Tokenize, embed (optionally splicing a concept), and encode in one
    /// call over a fresh tape; returns the plain feature matrix.
    pub fn encode_prompt<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        text: &str,
        concept: Option<&WordEmbeddingSet<S>>,
        mode: InjectMode,
    ) -> Result<Tensor<S>> {
        let tok = self.tokenize(text)?;
        self.encode_tokens(ps, &tok, concept, mode)
    }

    /// Like [`encode_prompt`] for an already tokenized prompt.
    pub fn encode_tokens<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        tok: &TokenizedPrompt,
        concept: Option<&WordEmbeddingSet<S>>,
        mode: InjectMode,
    ) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let words = concept.map(|c| tape.leaf(c.words.clone()));
        let embedded = self.inject_concept(&tape, ps, tok, words, mode)?;
        let encoded = self.encode_text(&tape, ps, embedded)?;
        Ok(tape.value(encoded))
    }

    /// Mean-pooled text embedding used by the matching metric.
    pub fn pooled<S: Scalar>(&self, ps: &ParamSet<S>, text: &str) -> Result<Tensor<S>> {
        let feats = self.encode_prompt(ps, text, None, InjectMode::PrimaryOnly)?;
        crate::imageenc::pool_features(&feats)
    }
}
