//! Structured attribute captions: schema, canonical text form, the closed
//! word-level vocabulary, and value masking for the discrete forward process.
//!
//! Canonical form: `Color: {v}; Material: {v}; Design features: {v}; Clothing Fashion Style: {v}`.
//! Multi-word keys are single tokens, punctuation is tokenized separately, and
//! every caption encodes to exactly [`CAPTION_LEN`] ids with value slots at
//! fixed positions.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedules::DiscreteSchedule;

pub const CAPTION_LEN: usize = 24;
pub const NUM_ATTRIBUTES: usize = 4;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const COLON: u32 = 2;
pub const SEMI: u32 = 3;
pub const COMMA: u32 = 4;

pub const PAD_WORD: &str = "<pad>";
pub const MASK_WORD: &str = "<extra_id0>";
pub const NULL_WORD: &str = "<null>";

pub const SEPARATORS: [&str; 3] = [":", ";", ","];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Color,
    Material,
    DesignFeatures,
    Style,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] =
        [Attribute::Color, Attribute::Material, Attribute::DesignFeatures, Attribute::Style];

    pub fn key(self) -> &'static str {
        match self {
            Attribute::Color => "Color",
            Attribute::Material => "Material",
            Attribute::DesignFeatures => "Design features",
            Attribute::Style => "Clothing Fashion Style",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_key(key: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.key() == key)
    }

    /// Every value word the vocabulary knows for this attribute.
    pub fn master_values(self) -> &'static [&'static str] {
        match self {
            Attribute::Color => &["black", "navy", "red", "blue", "green", "yellow", "pink", "beige"],
            Attribute::Material => &["cotton", "denim", "leather", "silk", "wool", "linen"],
            Attribute::DesignFeatures => {
                &["pleated", "striped", "floral", "plaid", "ruffled", "embroidered", "quilted", "cropped"]
            }
            Attribute::Style => &["casual", "formal", "sporty", "bohemian", "vintage"],
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Words of the task-definition template other than the category slot.
pub const TEMPLATE_WORDS: [&str; 8] = ["Recommend", "a", "fashion", "item", "on", "white", "background", "."];

/// Item categories the vocabulary can express.
pub const CATEGORIES: [&str; 8] = ["top", "bottom", "shoes", "bag", "accessory", "sneakers", "dress", "outerwear"];

/// Value-vocabulary per attribute, a prefix of the master lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    pub keys: [Attribute; NUM_ATTRIBUTES],
    pub value_vocab: Vec<Vec<String>>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self::with_sizes([8, 6, 8, 5]).expect("default sizes fit the master vocabulary")
    }
}

impl AttributeSchema {
    pub fn with_sizes(sizes: [usize; NUM_ATTRIBUTES]) -> Result<Self> {
        let mut value_vocab = Vec::with_capacity(NUM_ATTRIBUTES);
        for (a, &n) in Attribute::ALL.iter().zip(&sizes) {
            let master = a.master_values();
            if n == 0 || n > master.len() {
                return Err(Error::Spec(format!("{a} vocabulary size {n} outside 1..={}", master.len())));
            }
            value_vocab.push(master[..n].iter().map(|s| s.to_string()).collect());
        }
        Ok(Self { keys: Attribute::ALL, value_vocab })
    }

    pub fn sizes(&self) -> [usize; NUM_ATTRIBUTES] {
        [0, 1, 2, 3].map(|i| self.value_vocab[i].len())
    }

    pub fn values(&self, a: Attribute) -> &[String] {
        &self.value_vocab[a.index()]
    }

    pub fn value_index(&self, a: Attribute, v: &str) -> Option<usize> {
        self.values(a).iter().position(|x| x == v)
    }

    /// Number of valid captions.
    pub fn caption_count(&self) -> usize {
        self.sizes().iter().product()
    }

    pub fn caption_from_indices(&self, idx: [usize; NUM_ATTRIBUTES]) -> StructuredCaption {
        StructuredCaption { values: [0, 1, 2, 3].map(|i| self.value_vocab[i][idx[i]].clone()) }
    }

    pub fn indices(&self, c: &StructuredCaption) -> Result<[usize; NUM_ATTRIBUTES]> {
        let mut out = [0; NUM_ATTRIBUTES];
        for a in Attribute::ALL {
            out[a.index()] = self
                .value_index(a, c.get(a))
                .ok_or_else(|| Error::Schema(format!("{} is not a valid {a}", c.get(a))))?;
        }
        Ok(out)
    }

    pub fn validate(&self, c: &StructuredCaption) -> Result<()> {
        self.indices(c).map(|_| ())
    }

    /// All valid captions in lexicographic index order.
    pub fn all_captions(&self) -> Vec<StructuredCaption> {
        let s = self.sizes();
        let mut out = Vec::with_capacity(self.caption_count());
        for a in 0..s[0] {
            for b in 0..s[1] {
                for c in 0..s[2] {
                    for d in 0..s[3] {
                        out.push(self.caption_from_indices([a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

/// One value per attribute, in key order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StructuredCaption {
    pub values: [String; NUM_ATTRIBUTES],
}

impl StructuredCaption {
    pub fn new(color: &str, material: &str, design: &str, style: &str) -> Self {
        Self { values: [color, material, design, style].map(str::to_string) }
    }

    pub fn get(&self, a: Attribute) -> &str {
        &self.values[a.index()]
    }

    pub fn set(&mut self, a: Attribute, v: impl Into<String>) {
        self.values[a.index()] = v.into();
    }

    pub fn render(&self) -> String {
        Attribute::ALL
            .iter()
            .map(|a| format!("{}: {}", a.key(), self.get(*a)))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Inverse of [`StructuredCaption::render`]. Keys must appear once each, in order.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split("; ").collect();
        if parts.len() != NUM_ATTRIBUTES {
            return Err(Error::Schema(format!("expected {NUM_ATTRIBUTES} key-value pairs in {text:?}")));
        }
        let mut values: [String; NUM_ATTRIBUTES] = Default::default();
        for (a, part) in Attribute::ALL.iter().zip(parts) {
            let (k, v) = part
                .split_once(": ")
                .ok_or_else(|| Error::Schema(format!("missing ': ' in {part:?}")))?;
            if k != a.key() {
                return Err(Error::Schema(format!("expected key {:?}, found {k:?}", a.key())));
            }
            if v.is_empty() || v.contains(' ') {
                return Err(Error::Schema(format!("bad value {v:?} for {a}")));
            }
            values[a.index()] = v.to_string();
        }
        Ok(Self { values })
    }
}

impl fmt::Display for StructuredCaption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// The closed vocabulary. Ids `0..caption_vocab_size()` cover everything a
/// caption can contain; condition-only words (null, template, categories) follow.
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
    caption_size: usize,
    null: u32,
    value_attr: Vec<Option<Attribute>>,
}

impl Vocab {
    fn build() -> Self {
        let mut words: Vec<String> = vec![PAD_WORD.into(), MASK_WORD.into()];
        words.extend(SEPARATORS.iter().map(|s| s.to_string()));
        words.extend(Attribute::ALL.iter().map(|a| a.key().to_string()));
        let mut value_attr = vec![None; words.len()];
        for a in Attribute::ALL {
            for v in a.master_values() {
                words.push(v.to_string());
                value_attr.push(Some(a));
            }
        }
        let caption_size = words.len();
        words.push(NULL_WORD.into());
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        words.extend(CATEGORIES.iter().map(|s| s.to_string()));
        value_attr.resize(words.len(), None);
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let null = caption_size as u32;
        Self { words, ids, caption_size, null, value_attr }
    }

    pub fn global() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn caption_vocab_size(&self) -> usize {
        self.caption_size
    }

    pub fn null(&self) -> u32 {
        self.null
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.ids.get(word).copied().ok_or_else(|| Error::Vocab(format!("out-of-vocabulary word {word:?}")))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("token id {id} outside vocabulary")))
    }

    /// The attribute whose value vocabulary contains `id`, if any.
    pub fn value_attribute(&self, id: u32) -> Option<Attribute> {
        self.value_attr.get(id as usize).copied().flatten()
    }

    pub fn is_category(&self, word: &str) -> bool {
        CATEGORIES.contains(&word)
    }

    /// Word-level tokenization of canonical text. Punctuation splits off and
    /// multi-word keys merge into single tokens.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut pieces: Vec<String> = Vec::new();
        for word in text.split_whitespace() {
            let mut cur = String::new();
            for ch in word.chars() {
                if matches!(ch, ':' | ';' | ',' | '.') {
                    if !cur.is_empty() {
                        pieces.push(std::mem::take(&mut cur));
                    }
                    pieces.push(ch.to_string());
                } else {
                    cur.push(ch);
                }
            }
            if !cur.is_empty() {
                pieces.push(cur);
            }
        }
        if pieces.is_empty() {
            return Err(Error::Vocab("cannot tokenize empty text".into()));
        }
        let multi: Vec<Vec<&str>> = Attribute::ALL
            .iter()
            .map(|a| a.key().split(' ').collect::<Vec<_>>())
            .filter(|w| w.len() > 1)
            .collect();
        let mut out = Vec::with_capacity(pieces.len());
        let mut i = 0;
        'outer: while i < pieces.len() {
            for m in &multi {
                if i + m.len() <= pieces.len() && m.iter().zip(&pieces[i..]).all(|(a, b)| a == b) {
                    out.push(self.id(&m.join(" "))?);
                    i += m.len();
                    continue 'outer;
                }
            }
            out.push(self.id(&pieces[i])?);
            i += 1;
        }
        Ok(out)
    }

    /// Joins tokens back into text, dropping pads. Punctuation attaches to the previous word.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            let w = self.word(id)?;
            let punct = matches!(w, ":" | ";" | "," | ".");
            if !s.is_empty() && !punct {
                s.push(' ');
            }
            s.push_str(w);
        }
        Ok(s)
    }
}

/// Fixed-length token encoding of a caption plus its value-slot mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_caption(c: &StructuredCaption) -> Result<Self> {
        Self::tokenize(&c.render())
    }

    /// Tokenizes a canonical caption rendering to length [`CAPTION_LEN`].
    pub fn tokenize(text: &str) -> Result<Self> {
        let vocab = Vocab::global();
        let mut tokens = vocab.tokenize(text)?;
        if tokens.len() > CAPTION_LEN {
            return Err(Error::Vocab(format!("caption of {} tokens exceeds {CAPTION_LEN}", tokens.len())));
        }
        let mask = tokens.iter().map(|&t| vocab.value_attribute(t).is_some()).collect::<Vec<_>>();
        let mut mask = mask;
        tokens.resize(CAPTION_LEN, PAD);
        mask.resize(CAPTION_LEN, false);
        Ok(Self { tokens, mask })
    }

    pub fn detokenize(&self) -> Result<String> {
        Vocab::global().detokenize(&self.tokens)
    }

    pub fn to_caption(&self) -> Result<StructuredCaption> {
        StructuredCaption::parse(&self.detokenize()?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn value_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| self.mask[j]).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.value_positions().into_iter().filter(|&j| self.tokens[j] == MASK).collect()
    }

    /// Copy with every value slot replaced by the mask id.
    pub fn fully_masked(&self) -> Self {
        let mut out = self.clone();
        for j in 0..out.tokens.len() {
            if out.mask[j] {
                out.tokens[j] = MASK;
            }
        }
        out
    }

    /// Caption skeleton (keys and separators intact) with all values masked.
    pub fn masked_template() -> Self {
        let placeholder = StructuredCaption::new("black", "cotton", "pleated", "casual");
        Self::from_caption(&placeholder).expect("template tokenizes").fully_masked()
    }

    /// The attribute that owns value slot `pos`, following key order.
    pub fn slot_attribute(&self, pos: usize) -> Option<Attribute> {
        self.value_positions().iter().position(|&p| p == pos).map(|i| Attribute::ALL[i])
    }
}

/// Replaces each value slot with the mask id independently with probability `mask_prob(t)`.
/// Non-value positions are never touched. One uniform draw is consumed per value slot.
pub fn mask_values<R: Rng + ?Sized>(y0: &TokenSequence, t: f64, rng: &mut R) -> Result<TokenSequence> {
    let p = DiscreteSchedule.mask_prob(t)?;
    let mut out = y0.clone();
    for j in 0..out.tokens.len() {
        if out.mask[j] {
            let u: f64 = rng.random();
            if u < p {
                out.tokens[j] = MASK;
            }
        }
    }
    Ok(out)
}
