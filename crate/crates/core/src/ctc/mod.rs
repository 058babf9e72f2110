//! CTC training criterion and n-best prefix beam search.
//!
//! Blank is always id 0. Label sequences never contain it.

mod beam;
mod loss;

pub use beam::{greedy_collapse, greedy_decode, prefix_beam_search_nbest, NBestList};
pub use loss::{ctc_feasible, ctc_loss, min_frames};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const WORD_BOUNDARY: &str = "<wb>";
pub const BLANK_SYMBOL: &str = "<blank>";

/// Which synthetic language a phoneme belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhonemeClass {
    Blank,
    WordBoundary,
    Alpha,
    Beta,
}

/// Symbol table for the A2P output layer: blank at 0, `<wb>` at 1, then the
/// α phonemes, then the β phonemes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    n_alpha: usize,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new(alpha: &[String], beta: &[String]) -> Result<Self> {
        let mut symbols = vec![BLANK_SYMBOL.to_string(), WORD_BOUNDARY.to_string()];
        symbols.extend(alpha.iter().cloned());
        symbols.extend(beta.iter().cloned());
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate phoneme symbol {s:?}")));
            }
        }
        Ok(PhonemeInventory {
            symbols,
            n_alpha: alpha.len(),
            index,
        })
    }

    /// Output layer width, blank included.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn wb_id(&self) -> usize {
        1
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn class(&self, id: usize) -> PhonemeClass {
        match id {
            0 => PhonemeClass::Blank,
            1 => PhonemeClass::WordBoundary,
            i if i < 2 + self.n_alpha => PhonemeClass::Alpha,
            _ => PhonemeClass::Beta,
        }
    }

    /// Parses a whitespace-separated symbol string.
    pub fn parse(&self, text: &str) -> Result<PhonemeSeq> {
        let ids = text
            .split_whitespace()
            .map(|s| self.id(s).ok_or_else(|| Error::Oov(format!("phoneme {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        PhonemeSeq::new(ids)
    }

    pub fn render(&self, seq: &PhonemeSeq) -> String {
        seq.ids()
            .iter()
            .map(|&i| self.symbol(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Phoneme ids with no blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhonemeSeq(Vec<usize>);

impl PhonemeSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Input("phoneme sequence contains the blank id".into()));
        }
        Ok(PhonemeSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }
}

impl fmt::Display for PhonemeSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}
