//! Vocabulary, prompts, examples and the template mini-language.
//!
//! Tokenization is a whitespace split over a closed vocabulary. Every type in
//! this module is immutable once built.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DEFAULT_MASK_MARKER: &str = "<mask>";

/// Bidirectional token string / token id map.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    inner: Arc<VocabInner>,
}

#[derive(PartialEq, Eq)]
struct VocabInner {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    separator: String,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("len", &self.len())
            .field("separator", &self.inner.separator)
            .finish()
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose decoded text joins tokens with a single space.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_separator(tokens, " ")
    }

    /// Builds a vocabulary with a custom join separator (`""` for fused subwords).
    pub fn with_separator<I, S>(tokens: I, separator: &str) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidVocabulary("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!(
                    "token {id} ({tok:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            inner: Arc::new(VocabInner {
                tokens,
                index,
                separator: separator.to_string(),
            }),
        })
    }

    /// Reads a newline-delimited vocabulary file; line number is the token id.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self> {
        let body = raw.strip_suffix('\n').unwrap_or(raw);
        Self::new(body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn to_file_contents(&self) -> String {
        let mut out = self.inner.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.inner.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.tokens.is_empty()
    }

    pub fn separator(&self) -> &str {
        &self.inner.separator
    }

    pub fn tokens(&self) -> &[String] {
        &self.inner.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.inner.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.inner.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.inner.index.contains_key(token)
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidTokenId {
                id,
                vocab_size: self.len(),
            })
        }
    }

    /// Splits `text` on whitespace and looks every unit up.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|unit| self.id(unit).ok_or_else(|| Error::UnknownToken(unit.to_string())))
            .collect()
    }

    /// Looks up pre-split token strings, e.g. from the wire protocol.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(Error::InvalidTokenId {
                id,
                vocab_size: self.len(),
            })?;
            if i > 0 {
                out.push_str(&self.inner.separator);
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn token_strings(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id).map(str::to_string).ok_or(Error::InvalidTokenId {
                    id,
                    vocab_size: self.len(),
                })
            })
            .collect()
    }
}

/// A fixed-length sequence of prompt tokens together with its decoded text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    ids: Vec<TokenId>,
    text: String,
}

impl Prompt {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidConfig("prompt length must be at least 1".into()));
        }
        let text = vocab.decode(&ids)?;
        Ok(Self { ids, text })
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.encode_tokens(tokens)?, vocab)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// One task input with an optional class label and optional style target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_target: Option<usize>,
}

impl Example {
    pub fn new(input_text: impl Into<String>) -> Self {
        Self {
            input_text: input_text.into(),
            label: None,
            style_target: None,
        }
    }

    pub fn labeled(input_text: impl Into<String>, label: usize) -> Self {
        Self {
            label: Some(label),
            ..Self::new(input_text)
        }
    }

    pub fn styled(input_text: impl Into<String>, style_target: usize) -> Self {
        Self {
            style_target: Some(style_target),
            ..Self::new(input_text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Literal(usize, usize),
    Input,
    Prompt,
    Mask,
}

/// A pattern holding exactly one `{input}`, one `{prompt}` and at most one `{mask}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pattern: String,
    segments: Vec<Segment>,
}

impl Template {
    pub const INPUT: &'static str = "{input}";
    pub const PROMPT: &'static str = "{prompt}";
    pub const MASK: &'static str = "{mask}";

    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let mut segments = Vec::new();
        let (mut inputs, mut prompts, mut masks) = (0, 0, 0);
        let mut lit_start = 0;
        let mut i = 0;
        let bytes = pattern.as_bytes();
        while i < bytes.len() {
            let rest = &pattern[i..];
            let hit = [
                (Self::INPUT, Segment::Input),
                (Self::PROMPT, Segment::Prompt),
                (Self::MASK, Segment::Mask),
            ]
            .into_iter()
            .find(|(p, _)| rest.starts_with(p));
            match hit {
                Some((p, seg)) => {
                    if lit_start < i {
                        segments.push(Segment::Literal(lit_start, i));
                    }
                    segments.push(seg);
                    match seg {
                        Segment::Input => inputs += 1,
                        Segment::Prompt => prompts += 1,
                        Segment::Mask => masks += 1,
                        Segment::Literal(..) => unreachable!(),
                    }
                    i += p.len();
                    lit_start = i;
                }
                None => i += rest.chars().next().map_or(1, char::len_utf8),
            }
        }
        if lit_start < pattern.len() {
            segments.push(Segment::Literal(lit_start, pattern.len()));
        }
        for (name, count) in [(Self::INPUT, inputs), (Self::PROMPT, prompts), (Self::MASK, masks)] {
            if count > 1 {
                return Err(Error::DuplicatePlaceholder(name));
            }
        }
        if inputs == 0 {
            return Err(Error::MissingPlaceholder(Self::INPUT));
        }
        if prompts == 0 {
            return Err(Error::MissingPlaceholder(Self::PROMPT));
        }
        Ok(Self { pattern, segments })
    }

    /// A template for mask-infilling classification; `{mask}` is required.
    pub fn classification(pattern: impl Into<String>) -> Result<Self> {
        let t = Self::new(pattern)?;
        if !t.has_mask() {
            return Err(Error::MissingPlaceholder(Self::MASK));
        }
        Ok(t)
    }

    /// A template for generation tasks; `{mask}` must be absent.
    pub fn generation(pattern: impl Into<String>) -> Result<Self> {
        let t = Self::new(pattern)?;
        if t.has_mask() {
            return Err(Error::InvalidConfig(
                "generation templates must not contain {mask}".into(),
            ));
        }
        Ok(t)
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn has_mask(&self) -> bool {
        self.segments.contains(&Segment::Mask)
    }

    /// Substitutes each placeholder once. Placeholder-like text inside the
    /// substituted values is left alone.
    pub fn render(&self, prompt_text: &str, input_text: &str, mask_marker: &str) -> String {
        let mut out = String::with_capacity(self.pattern.len() + prompt_text.len() + input_text.len());
        for seg in &self.segments {
            match *seg {
                Segment::Literal(a, b) => out.push_str(&self.pattern[a..b]),
                Segment::Input => out.push_str(input_text),
                Segment::Prompt => out.push_str(prompt_text),
                Segment::Mask => out.push_str(mask_marker),
            }
        }
        out
    }
}

impl Serialize for Template {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.pattern)
    }
}

impl<'de> Deserialize<'de> for Template {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pattern = String::deserialize(d)?;
        Template::new(pattern).map_err(serde::de::Error::custom)
    }
}

/// Free-function form of [`Template::render`] taking a [`Prompt`].
pub fn render(template: &Template, prompt: &Prompt, input_text: &str, mask_marker: &str) -> String {
    template.render(prompt.text(), input_text, mask_marker)
}

/// One label token per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizers {
    class_tokens: Vec<TokenId>,
}

impl Verbalizers {
    pub fn new(class_tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        if class_tokens.is_empty() {
            return Err(Error::InvalidVerbalizers("no classes".into()));
        }
        for &id in &class_tokens {
            vocab.check_id(id)?;
        }
        let mut sorted = class_tokens.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidVerbalizers("class tokens must be distinct".into()));
        }
        Ok(Self { class_tokens })
    }

    pub fn from_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.encode_tokens(words)?, vocab)
    }

    pub fn class_tokens(&self) -> &[TokenId] {
        &self.class_tokens
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }
}
