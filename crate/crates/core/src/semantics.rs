//! Toy text encoder: token embeddings, prompts, pooling, base-word offsets.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, LabRng};
use crate::world::{ProductWorld, WorldSpec};
use crate::{Error, Result};

pub const EMPTY: &str = "<empty>";
pub const DEFAULT_EMBED_DIM: usize = 8;
const VOCAB_STREAM: u64 = 0x766f_6361_62;

/// Token naming identity sub-cluster `k` of `subject`. Such tokens only occur
/// in training captions; user prompts never contain them.
pub fn descriptor_token(subject: &str, k: usize) -> String {
    format!("{subject}#{k}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub embed_dim: usize,
    pub tokens: BTreeMap<String, Vec<f64>>,
}

/// Embeddings `Normal(0, I/m)` for every subject, context, descriptor and
/// extra template token, drawn in that order from `seed`.
pub fn make_vocab(world: &WorldSpec, extra_tokens: &[&str], seed: u64) -> Result<Vocabulary> {
    make_vocab_dim(world, extra_tokens, seed, DEFAULT_EMBED_DIM)
}

pub fn make_vocab_dim(world: &WorldSpec, extra_tokens: &[&str], seed: u64, embed_dim: usize) -> Result<Vocabulary> {
    if embed_dim == 0 {
        return Err(Error::arg("embed_dim must be positive"));
    }
    let mut names: Vec<String> = Vec::new();
    names.extend(world.subjects.iter().map(|s| s.token.clone()));
    names.extend(world.contexts.iter().map(|c| c.token.clone()));
    for s in &world.subjects {
        names.extend((0..s.subclusters.len()).map(|k| descriptor_token(&s.token, k)));
    }
    names.extend(extra_tokens.iter().map(|t| t.to_string()));
    let mut rng = rng::stream(seed, VOCAB_STREAM);
    let scale = 1.0 / (embed_dim as f64).sqrt();
    let mut tokens = BTreeMap::new();
    tokens.insert(EMPTY.to_string(), vec![0.0; embed_dim]);
    for name in names {
        let e: Vec<f64> = rng::normal_vec(&mut rng, embed_dim).iter().map(|x| x * scale).collect();
        if tokens.insert(name.clone(), e).is_some() {
            return Err(Error::arg(format!("duplicate token `{name}`")));
        }
    }
    Ok(Vocabulary { embed_dim, tokens })
}

impl Vocabulary {
    pub fn get(&self, token: &str) -> Result<&[f64]> {
        self.tokens.get(token).map(|v| v.as_slice()).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.tokens.get(EMPTY) {
            Some(e) if e.iter().all(|&x| x == 0.0) => {}
            _ => return Err(Error::arg(format!("vocabulary must map {EMPTY} to the zero vector"))),
        }
        if let Some((t, _)) = self.tokens.iter().find(|(_, v)| v.len() != self.embed_dim) {
            return Err(Error::dim(format!("token `{t}` embedding does not have width {}", self.embed_dim)));
        }
        Ok(())
    }

    pub fn embed_prompt(&self, prompt: &Prompt) -> Result<PromptEmbedding> {
        embed_prompt(self, prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<String>,
    pub base_indices: Vec<usize>,
}

impl Prompt {
    pub fn new(tokens: Vec<String>, base_indices: Vec<usize>) -> Result<Self> {
        let p = Prompt { tokens, base_indices };
        p.validate()?;
        Ok(p)
    }

    /// `[base_1, ..., base_L, context]` with every subject token as a base word.
    pub fn subject(base_tokens: &[&str], context: &str) -> Self {
        let mut tokens: Vec<String> = base_tokens.iter().map(|t| t.to_string()).collect();
        tokens.push(context.to_string());
        Prompt { tokens, base_indices: (0..base_tokens.len()).collect() }
    }

    pub fn empty() -> Self {
        Prompt { tokens: vec![EMPTY.to_string()], base_indices: vec![] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::arg("prompt has no tokens"));
        }
        for (i, &b) in self.base_indices.iter().enumerate() {
            if b >= self.tokens.len() {
                return Err(Error::arg(format!("base index {b} outside prompt of {} tokens", self.tokens.len())));
            }
            if self.base_indices[..i].contains(&b) {
                return Err(Error::arg(format!("base index {b} listed twice")));
            }
        }
        Ok(())
    }

    pub fn base_tokens(&self) -> Vec<&str> {
        self.base_indices.iter().map(|&i| self.tokens[i].as_str()).collect()
    }

    /// World subject named by the base words (joined with `+` for several).
    pub fn subject_key(&self) -> String {
        self.base_tokens().join("+")
    }

    /// The last non-base token, read as the context.
    pub fn context_token(&self) -> Option<&str> {
        (0..self.tokens.len()).rev().find(|i| !self.base_indices.contains(i)).map(|i| self.tokens[i].as_str())
    }

    pub fn with_context(&self, context: &str) -> Result<Prompt> {
        let i = (0..self.tokens.len())
            .rev()
            .find(|i| !self.base_indices.contains(i))
            .ok_or_else(|| Error::arg("prompt has no context token"))?;
        let mut p = self.clone();
        p.tokens[i] = context.to_string();
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub tokens: Vec<Vec<f64>>,
    pub base_indices: Vec<usize>,
}

impl PromptEmbedding {
    pub fn pooled(&self) -> Vec<f64> {
        pool_condition(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn embed_prompt(vocab: &Vocabulary, prompt: &Prompt) -> Result<PromptEmbedding> {
    prompt.validate()?;
    let tokens = prompt.tokens.iter().map(|t| vocab.get(t).map(|e| e.to_vec())).collect::<Result<_>>()?;
    Ok(PromptEmbedding { tokens, base_indices: prompt.base_indices.clone() })
}

/// `c'_b = c_b + v c_delta` at every base index, one offset per base word.
pub fn offset_base(c: &PromptEmbedding, deltas: &[Vec<f64>], v: f64) -> Result<PromptEmbedding> {
    if c.base_indices.is_empty() {
        return Err(Error::arg("prompt has no base word to offset"));
    }
    if deltas.len() != c.base_indices.len() {
        return Err(Error::dim(format!("{} offsets for {} base words", deltas.len(), c.base_indices.len())));
    }
    let mut out = c.clone();
    for (&b, d) in c.base_indices.iter().zip(deltas) {
        let tok = out.tokens.get_mut(b).ok_or_else(|| Error::arg(format!("base index {b} missing from prompt")))?;
        if d.len() != tok.len() {
            return Err(Error::dim(format!("offset has width {}, embedding has {}", d.len(), tok.len())));
        }
        for (x, dx) in tok.iter_mut().zip(d) {
            *x += v * dx;
        }
    }
    Ok(out)
}

/// Mean of the token embeddings.
pub fn pool_condition(c: &PromptEmbedding) -> Vec<f64> {
    assert!(!c.tokens.is_empty(), "cannot pool an empty prompt");
    let m = c.tokens[0].len();
    let mut acc = vec![0.0; m];
    for t in &c.tokens {
        for (a, x) in acc.iter_mut().zip(t) {
            *a += x;
        }
    }
    let n = c.tokens.len() as f64;
    acc.iter().map(|a| a / n).collect()
}

/// `c_empty + g (c - c_empty)` token by token, with `c_empty = 0`.
pub fn semantic_interpolate_empty(c: &PromptEmbedding, g: f64) -> PromptEmbedding {
    PromptEmbedding {
        tokens: c.tokens.iter().map(|t| t.iter().map(|x| 0.0 + g * (x - 0.0)).collect()).collect(),
        base_indices: c.base_indices.clone(),
    }
}

/// How training captions are written for one world subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub subject: usize,
    pub base_tokens: Vec<String>,
    /// For each sub-cluster, one descriptor per base token.
    pub descriptors: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionModel {
    pub entries: Vec<CaptionEntry>,
}

impl CaptionModel {
    pub fn for_world(world: &WorldSpec) -> Self {
        let entries = world
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| CaptionEntry {
                subject: i,
                base_tokens: vec![s.token.clone()],
                descriptors: (0..s.subclusters.len()).map(|k| vec![descriptor_token(&s.token, k)]).collect(),
            })
            .collect();
        CaptionModel { entries }
    }

    pub fn for_product(pw: &ProductWorld) -> Self {
        let parts = pw.part_tokens();
        let n = pw.joint.n_subclusters(0);
        let descriptors = (0..n)
            .map(|j| pw.split_component(j).iter().zip(&parts).map(|(&k, t)| descriptor_token(t, k)).collect())
            .collect();
        CaptionModel { entries: vec![CaptionEntry { subject: 0, base_tokens: parts, descriptors }] }
    }

    /// Caption for a sample of sub-cluster `k`: every base word is followed by
    /// its descriptor with probability `p_desc`, then the context.
    pub fn caption(&self, entry: &CaptionEntry, k: usize, context: &str, p_desc: f64, rng: &mut LabRng) -> Prompt {
        let mut tokens = Vec::with_capacity(2 * entry.base_tokens.len() + 1);
        let mut base_indices = Vec::with_capacity(entry.base_tokens.len());
        for (i, b) in entry.base_tokens.iter().enumerate() {
            base_indices.push(tokens.len());
            tokens.push(b.clone());
            if rng.gen::<f64>() < p_desc {
                tokens.push(entry.descriptors[k][i].clone());
            }
        }
        tokens.push(context.to_string());
        Prompt { tokens, base_indices }
    }
}
