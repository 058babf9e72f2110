//! Deterministic toy bilingual corpus: two artificial languages with
//! disjoint phoneme inventories, a pronunciation lexicon, and prototype-based
//! acoustic features.
//!
//! Language α is character-based with some homophones: characters that
//! share a phoneme string and differ acoustically only by a tone offset added
//! to their frames. Language β is spelled with word pieces; each word's
//! phoneme string ends with `<wb>`.

mod corpus;
mod features;
mod lexicon;
mod vocab;

pub use corpus::{
    build_corpus, derive_seed, read_manifest, read_text_manifest, sample_sentence, write_manifest, write_text_manifest,
    Corpus, MixTag, TextPair, Utterance,
};
pub use features::{nearest_prototype, synthesize_features, Acoustics};
pub use lexicon::{AlphaEntry, BetaWord, Lexicon};
pub use vocab::{Lang, TargetVocab, CONTINUATION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything that determines a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_alpha_phonemes: usize,
    pub n_beta_phonemes: usize,
    pub n_alpha_chars: usize,
    /// Pairs of α characters sharing one phoneme string.
    pub n_homophone_pairs: usize,
    pub n_tones: usize,
    /// Length of the tone offset added to every frame of an α character.
    pub tone_scale: f64,
    pub n_beta_words: usize,
    /// β words spelled with two pieces; the rest use one.
    pub n_beta_two_piece: usize,
    pub d_feat: usize,
    pub noise_sigma: f64,
    /// Frames per duration unit; each phoneme lasts 2, 3 or 4 units.
    pub duration_scale: usize,
    /// Sentence length range in mixed units (α characters, β words).
    pub min_units: usize,
    pub max_units: usize,
    pub n_cs_train: usize,
    pub n_alpha_train: usize,
    pub n_beta_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Code-switching sentences without audio, for text-only pretraining.
    pub n_text: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_alpha_phonemes: 24,
            n_beta_phonemes: 16,
            n_alpha_chars: 40,
            n_homophone_pairs: 12,
            n_tones: 3,
            tone_scale: 0.6,
            n_beta_words: 30,
            n_beta_two_piece: 20,
            d_feat: 16,
            noise_sigma: 0.3,
            duration_scale: 4,
            min_units: 3,
            max_units: 6,
            n_cs_train: 200,
            n_alpha_train: 500,
            n_beta_train: 0,
            n_dev: 60,
            n_test: 60,
            n_text: 1500,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_alpha_phonemes < 2 || self.n_beta_phonemes < 2 {
            return bad("each language needs at least two phonemes".into());
        }
        if self.n_alpha_chars == 0 || self.n_beta_words == 0 {
            return bad("each language needs at least one unit".into());
        }
        if 2 * self.n_homophone_pairs > self.n_alpha_chars {
            return bad(format!("{} homophone pairs need more than {} characters", self.n_homophone_pairs, self.n_alpha_chars));
        }
        if self.n_homophone_pairs > 0 && self.n_tones < 2 {
            return bad("homophones need at least two tones".into());
        }
        if self.n_beta_two_piece > self.n_beta_words {
            return bad("more two-piece words than words".into());
        }
        if self.d_feat < 4 || self.duration_scale == 0 {
            return bad("d_feat must be ≥ 4 and duration_scale ≥ 1".into());
        }
        if self.noise_sigma < 0.0 || self.tone_scale < 0.0 {
            return bad("noise_sigma and tone_scale must be nonnegative".into());
        }
        if self.min_units < 2 || self.max_units < self.min_units {
            return bad(format!("bad sentence length range {}..={}", self.min_units, self.max_units));
        }
        if self.n_cs_train + self.n_alpha_train + self.n_beta_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("train, dev and test must be nonempty".into());
        }
        Ok(())
    }

    /// Phoneme layer width: blank, `<wb>`, α phonemes, β phonemes.
    pub fn phoneme_vocab(&self) -> usize {
        2 + self.n_alpha_phonemes + self.n_beta_phonemes
    }

    /// Output vocabulary: pad, sos, eos, α characters, β pieces.
    pub fn target_vocab(&self) -> usize {
        3 + self.n_alpha_chars + self.n_beta_words + self.n_beta_two_piece
    }
}

#[cfg(test)]
mod tests;
