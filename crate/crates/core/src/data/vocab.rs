use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EOS, PAD, SOS};

/// Language of an output unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    /// Character-based language; scored by characters.
    #[serde(rename = "a")]
    Alpha,
    /// Word-piece language; scored by words.
    #[serde(rename = "b")]
    Beta,
}

/// Marker ending a β word piece that continues into the next piece.
pub const CONTINUATION: &str = "@@";

/// Output units: pad, sos, eos, then α characters, then β word pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetVocab {
    units: Vec<String>,
    langs: Vec<Option<Lang>>,
    index: HashMap<String, usize>,
}

impl TargetVocab {
    pub fn new(alpha_chars: &[String], beta_pieces: &[String]) -> Result<Self> {
        let mut units = vec!["<pad>".to_string(), "<sos>".to_string(), "<eos>".to_string()];
        let mut langs = vec![None, None, None];
        for c in alpha_chars {
            if c.chars().count() != 1 {
                return Err(Error::Config(format!("α unit {c:?} is not a single character")));
            }
            units.push(c.clone());
            langs.push(Some(Lang::Alpha));
        }
        for p in beta_pieces {
            units.push(p.clone());
            langs.push(Some(Lang::Beta));
        }
        let mut index = HashMap::new();
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate output unit {u:?}")));
            }
        }
        debug_assert_eq!((PAD, SOS, EOS), (0, 1, 2));
        Ok(TargetVocab { units, langs, index })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    pub fn lang(&self, id: usize) -> Option<Lang> {
        self.langs.get(id).copied().flatten()
    }

    /// True for β pieces that carry the continuation marker.
    pub fn is_continuation(&self, id: usize) -> bool {
        self.lang(id) == Some(Lang::Beta) && self.units[id].ends_with(CONTINUATION)
    }

    pub fn ids_of(&self, lang: Lang) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.lang(i) == Some(lang)).collect()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// Looks up unit strings, failing on the first unknown one.
    pub fn encode(&self, units: &[String]) -> Result<Vec<usize>> {
        units
            .iter()
            .map(|u| self.id(u).ok_or_else(|| Error::Oov(u.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.unit(i).unwrap_or("<unk>").to_string()).collect()
    }
}
