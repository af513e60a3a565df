//! Clinical prompt construction, attribute masking and token embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::phantom::TabularRecord;

pub const PAD: usize = 0;
pub const MASK: usize = 1;

/// Words in the prompt template, attribute slots included.
pub const TEMPLATE_LEN: usize = 12;

const TEMPLATE: [&str; TEMPLATE_LEN] = [
    "this", "is", "a", "[AGE]", "years", "old", "[SEX]", "patient", "of", "weight", "[WEIGHT]",
    "kg",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribute {
    Age,
    Sex,
    Weight,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Age, Attribute::Sex, Attribute::Weight];

    fn slot(self) -> &'static str {
        match self {
            Attribute::Age => "[AGE]",
            Attribute::Sex => "[SEX]",
            Attribute::Weight => "[WEIGHT]",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Sex => "sex",
            Attribute::Weight => "weight",
        }
    }
}

/// Token vocabulary: `PAD`, `MASK`, template words, then attribute bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub age_bins: usize,
    pub weight_bins: usize,
    pub age_range: [f64; 2],
    pub weight_range: [f64; 2],
    pub max_len: usize,
}

impl Vocabulary {
    pub fn new(
        age_range: [f64; 2],
        weight_range: [f64; 2],
        bins: usize,
        max_len: usize,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Param("need at least one bin".into()));
        }
        if max_len < TEMPLATE.len() {
            return Err(Error::Param(format!(
                "prompt length {max_len} shorter than template ({})",
                TEMPLATE.len()
            )));
        }
        if !(age_range[0] < age_range[1]) || !(weight_range[0] < weight_range[1]) {
            return Err(Error::Param("attribute ranges must be increasing".into()));
        }
        let words = TEMPLATE
            .iter()
            .filter(|w| !w.starts_with('['))
            .map(|w| w.to_string())
            .collect();
        Ok(Self {
            words,
            age_bins: bins,
            weight_bins: bins,
            age_range,
            weight_range,
            max_len,
        })
    }

    fn word_base(&self) -> usize {
        2
    }

    fn age_base(&self) -> usize {
        self.word_base() + self.words.len()
    }

    fn sex_base(&self) -> usize {
        self.age_base() + self.age_bins
    }

    fn weight_base(&self) -> usize {
        self.sex_base() + 2
    }

    pub fn size(&self) -> usize {
        self.weight_base() + self.weight_bins
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i + self.word_base())
    }

    /// Number of classes for an attribute.
    pub fn classes(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Age => self.age_bins,
            Attribute::Sex => 2,
            Attribute::Weight => self.weight_bins,
        }
    }

    /// Equal-width bin of `value` over `range`; the upper edge joins the last bin.
    fn bin(
        attribute: &'static str,
        value: f64,
        range: [f64; 2],
        bins: usize,
    ) -> Result<usize> {
        let [lo, hi] = range;
        if !(value >= lo && value <= hi) {
            return Err(Error::Binning {
                attribute,
                value,
                lo,
                hi,
            });
        }
        let b = ((value - lo) / (hi - lo) * bins as f64).floor() as usize;
        Ok(b.min(bins - 1))
    }

    /// Class index of each attribute, in `Attribute::ALL` order.
    pub fn attribute_classes(&self, record: &TabularRecord) -> Result<[usize; 3]> {
        Ok([
            Self::bin("age", record.age, self.age_range, self.age_bins)?,
            record.sex.code() as usize,
            Self::bin("weight", record.weight, self.weight_range, self.weight_bins)?,
        ])
    }

    /// Token id of class `class` of `attr`.
    pub fn attribute_token(&self, attr: Attribute, class: usize) -> usize {
        debug_assert!(class < self.classes(attr));
        match attr {
            Attribute::Age => self.age_base() + class,
            Attribute::Sex => self.sex_base() + class,
            Attribute::Weight => self.weight_base() + class,
        }
    }

    /// Positions of the attribute slots in every prompt.
    pub fn slot_positions(&self) -> [usize; 3] {
        Attribute::ALL.map(|a| TEMPLATE.iter().position(|w| *w == a.slot()).unwrap())
    }
}

/// Template token ids with attribute slots filled by bin tokens, padded.
pub fn build_prompt(record: &TabularRecord, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let classes = vocab.attribute_classes(record)?;
    let mut tokens = Vec::with_capacity(vocab.max_len);
    for w in TEMPLATE {
        let id = match Attribute::ALL.iter().position(|a| a.slot() == w) {
            Some(i) => vocab.attribute_token(Attribute::ALL[i], classes[i]),
            None => vocab.word_id(w).expect("template word in vocabulary"),
        };
        tokens.push(id);
    }
    tokens.resize(vocab.max_len, PAD);
    Ok(tokens)
}

/// Replaces the attribute slots with `MASK`.
pub fn mask_prompt(tokens: &[usize], vocab: &Vocabulary) -> (Vec<usize>, Vec<usize>) {
    let positions = vocab.slot_positions().to_vec();
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    (masked, positions)
}

/// Inverse of [`mask_prompt`] given the original slot tokens.
pub fn unmask(masked: &[usize], positions: &[usize], originals: &[usize]) -> Vec<usize> {
    let mut out = masked.to_vec();
    for (&p, &t) in positions.iter().zip(originals) {
        out[p] = t;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub tokens: Vec<usize>,
    pub masked_tokens: Vec<usize>,
    pub mask_positions: Vec<usize>,
    /// Attribute classes in `Attribute::ALL` order.
    pub classes: [usize; 3],
}

impl PromptBundle {
    pub fn new(record: &TabularRecord, vocab: &Vocabulary) -> Result<Self> {
        let tokens = build_prompt(record, vocab)?;
        let (masked_tokens, mask_positions) = mask_prompt(&tokens, vocab);
        Ok(Self {
            tokens,
            masked_tokens,
            mask_positions,
            classes: vocab.attribute_classes(record)?,
        })
    }
}

/// Learned token and positional embeddings.
#[derive(Clone, Copy, Debug)]
pub struct TokenEmbedding {
    pub table: ParamId,
    pub pos: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
    pub len: usize,
}

impl TokenEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_randn("text.embed", &[vocab.size(), dim], 0.5, rng);
        let pos = store.add_randn("text.pos", &[vocab.max_len, dim], 0.1, rng);
        Self {
            table,
            pos,
            vocab_size: vocab.size(),
            dim,
            len: vocab.max_len,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.table, self.pos]
    }

    /// Embeds a batch of token sequences into `[B, d, L]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        let b = batch.len();
        let mut flat = Vec::with_capacity(b * self.len);
        for seq in batch {
            if seq.len() != self.len {
                return Err(Error::Shape(format!(
                    "token sequence of length {} (expected {})",
                    seq.len(),
                    self.len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Param(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            flat.extend_from_slice(seq);
        }
        let table = g.param(store, self.table);
        let pos = g.param(store, self.pos);
        let rows = g.gather_rows(table, &flat);
        let rows = g.reshape(rows, &[b, self.len, self.dim]);
        let rows = g.add_bcast_lead(rows, pos);
        Ok(g.transpose_last2(rows))
    }
}
