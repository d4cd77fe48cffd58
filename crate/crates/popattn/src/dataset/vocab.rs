//! Token vocabulary with reserved padding and unknown ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenize::tokenize;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    min_freq: usize,
    /// Index = token id; starts with PAD, UNK.
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from raw captions. Tokens seen at least `min_freq` times get ids
    /// in order of (frequency desc, token asc); everything else encodes to
    /// UNK.
    pub fn build<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from zero captions"));
        }
        if min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for caption in captions {
            for token in tokenize(caption.as_ref()) {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(min_freq, tokens))
    }

    fn from_tokens(min_freq: usize, tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { min_freq, tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenize and map a caption, truncating to `t_max` ids. An empty
    /// caption encodes as a single UNK so downstream attention always has at
    /// least one real position.
    pub fn encode(&self, caption: &str, t_max: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(caption)
            .into_iter()
            .take(t_max.max(1))
            .map(|t| self.id_of(&t))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }

    /// Hash of the full token table; artifacts built against a vocabulary
    /// record this and refuse to run against a different one.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.min_freq.to_le_bytes());
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(self)?;
        body.push(b'\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read(path)?;
        let raw: Vocabulary = serde_json::from_slice(&body).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("vocabulary is not valid JSON: {e}"),
        })?;
        if raw.tokens.len() < 2 || raw.tokens[0] != PAD_TOKEN || raw.tokens[1] != UNK_TOKEN {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                msg: format!("first two tokens must be {PAD_TOKEN:?}, {UNK_TOKEN:?}"),
            });
        }
        Ok(Self::from_tokens(raw.min_freq, raw.tokens))
    }
}
