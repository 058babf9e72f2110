use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Lang, TargetVocab, CONTINUATION};
use super::SynthConfig;
use crate::ctc::{PhonemeInventory, PhonemeSeq};
use crate::error::{Error, Result};
use crate::model::TargetSeq;

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaEntry {
    pub unit: usize,
    pub phonemes: Vec<usize>,
    pub tone: usize,
}

/// A β word: its pieces in order and its phoneme string (ending in `<wb>`).
#[derive(Clone, Debug, PartialEq)]
pub struct BetaWord {
    pub pieces: Vec<usize>,
    pub phonemes: Vec<usize>,
}

/// Pronunciations for every output unit, plus the symbol tables they use.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub vocab: TargetVocab,
    pub inventory: PhonemeInventory,
    pub alpha: Vec<AlphaEntry>,
    pub beta: Vec<BetaWord>,
    alpha_of: HashMap<usize, usize>,
    piece_code: HashMap<usize, Vec<usize>>,
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const FIRST_ALPHA_CHAR: u32 = 0x4E00;

fn symbols(prefix: char, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn syllable(rng: &mut impl Rng) -> String {
    let mut s = String::new();
    s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
    s.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    if rng.random_bool(0.5) {
        s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
    }
    s
}

/// `n` distinct prefix-free codes over `alphabet`, returned as
/// `(short, long)` with lengths `short_len` and `short_len + 1`, roughly
/// half of each.
fn prefix_free_codes(
    rng: &mut impl Rng,
    alphabet: &[usize],
    n: usize,
    short_len: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let mut all_short: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..short_len {
        all_short = all_short
            .iter()
            .flat_map(|p| alphabet.iter().map(move |&s| [p.as_slice(), &[s]].concat()))
            .collect();
    }
    all_short.shuffle(rng);
    // Short strings not used as codes become prefixes of the long codes,
    // which keeps the whole set prefix-free.
    let n_short = n.div_ceil(2).min(all_short.len().saturating_sub(1));
    let (whole, prefixes) = all_short.split_at(n_short);
    let mut long: Vec<Vec<usize>> = prefixes
        .iter()
        .flat_map(|p| alphabet.iter().map(move |&s| [p.as_slice(), &[s]].concat()))
        .collect();
    if long.len() < n - n_short {
        return Err(Error::Config(format!(
            "cannot build {n} prefix-free codes over {} phonemes",
            alphabet.len()
        )));
    }
    long.shuffle(rng);
    long.truncate(n - n_short);
    Ok((whole.to_vec(), long))
}

impl Lexicon {
    /// Builds the phoneme inventory, vocabulary and pronunciations from the
    /// corpus seed.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(cfg.seed, 0x1E, 0));
        let inventory = PhonemeInventory::new(&symbols('a', cfg.n_alpha_phonemes), &symbols('b', cfg.n_beta_phonemes))?;
        let alpha_ph: Vec<usize> = (2..2 + cfg.n_alpha_phonemes).collect();
        let beta_ph: Vec<usize> = (2 + cfg.n_alpha_phonemes..inventory.size()).collect();

        // α: characters, 1–2 phoneme codes, homophone pairs share a code.
        let n_codes = cfg.n_alpha_chars - cfg.n_homophone_pairs;
        let (short, long) = prefix_free_codes(&mut rng, &alpha_ph, n_codes, 1)?;
        let mut alpha_codes = [short, long].concat();
        alpha_codes.shuffle(&mut rng);
        let chars: Vec<String> = (0..cfg.n_alpha_chars as u32)
            .map(|i| char::from_u32(FIRST_ALPHA_CHAR + i).expect("CJK block").to_string())
            .collect();
        let mut alpha_pron = Vec::with_capacity(cfg.n_alpha_chars);
        for pair in 0..cfg.n_homophone_pairs {
            let t0 = rng.random_range(0..cfg.n_tones);
            let t1 = (t0 + rng.random_range(1..cfg.n_tones)) % cfg.n_tones;
            alpha_pron.push((alpha_codes[pair].clone(), t0));
            alpha_pron.push((alpha_codes[pair].clone(), t1));
        }
        for code in &alpha_codes[cfg.n_homophone_pairs..] {
            alpha_pron.push((code.clone(), rng.random_range(0..cfg.n_tones.max(1))));
        }

        // β: words of one or two pieces with 2–3 phoneme piece codes.
        // Continuation pieces always get 2-phoneme codes, so a word's code
        // splits back into pieces unambiguously.
        let n_pieces = cfg.n_beta_words + cfg.n_beta_two_piece;
        let (short, long) = prefix_free_codes(&mut rng, &beta_ph, n_pieces, 2)?;
        if short.len() < cfg.n_beta_two_piece {
            return Err(Error::Config("too few short β codes for continuation pieces".into()));
        }
        let (cont_codes, rest) = short.split_at(cfg.n_beta_two_piece);
        let mut final_codes = [rest.to_vec(), long].concat();
        final_codes.shuffle(&mut rng);
        let mut seen_pieces = HashSet::new();
        let mut seen_words = HashSet::new();
        let mut word_pieces: Vec<Vec<String>> = Vec::new();
        while word_pieces.len() < cfg.n_beta_words {
            let two = word_pieces.len() < cfg.n_beta_two_piece;
            let pieces: Vec<String> = if two {
                vec![format!("{}{CONTINUATION}", syllable(&mut rng)), syllable(&mut rng)]
            } else {
                vec![syllable(&mut rng)]
            };
            let word: String = pieces.iter().map(|p| p.trim_end_matches(CONTINUATION)).collect();
            if pieces.iter().any(|p| seen_pieces.contains(p)) || seen_words.contains(&word) {
                continue;
            }
            seen_pieces.extend(pieces.iter().cloned());
            seen_words.insert(word);
            word_pieces.push(pieces);
        }
        let piece_strings: Vec<String> = word_pieces.iter().flatten().cloned().collect();
        let vocab = TargetVocab::new(&chars, &piece_strings)?;

        let mut text = String::new();
        for (c, (code, _)) in chars.iter().zip(&alpha_pron) {
            text.push_str(&format!("{c}\t{}\n", render(&inventory, code)));
        }
        let mut next_cont = cont_codes.iter();
        let mut next_final = final_codes.iter();
        for pieces in &word_pieces {
            let mut code = Vec::new();
            if pieces.len() == 2 {
                code.extend(next_cont.next().expect("one code per continuation piece"));
            }
            code.extend(next_final.next().expect("one code per final piece"));
            code.push(inventory.wb_id());
            text.push_str(&format!("{}\t{}\n", pieces.join(" "), render(&inventory, &code)));
        }
        let mut lex = Self::from_text(&text, inventory)?;
        for (entry, (_, tone)) in lex.alpha.iter_mut().zip(&alpha_pron) {
            entry.tone = *tone;
        }
        debug_assert_eq!(lex.vocab, vocab);
        Ok(lex)
    }

    /// Parses the `unit TAB phonemes` lexicon text. β lines list the word's
    /// pieces separated by spaces; their phoneme string is split back into
    /// pieces by unique prefix-free decoding. Tones are not part of the text
    /// and come back as 0.
    pub fn from_text(text: &str, inventory: PhonemeInventory) -> Result<Self> {
        let mut chars = Vec::new();
        let mut alpha_codes = Vec::new();
        let mut beta_lines: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (unit, pron) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("lexicon line {}: missing tab", n + 1)))?;
            let code = inventory.parse(pron)?.into_ids();
            if code.is_empty() {
                return Err(Error::Input(format!("lexicon line {}: empty pronunciation", n + 1)));
            }
            let pieces: Vec<String> = unit.split(' ').map(str::to_string).collect();
            if code.last() == Some(&inventory.wb_id()) {
                beta_lines.push((pieces, code));
            } else {
                if pieces.len() != 1 || code.contains(&inventory.wb_id()) {
                    return Err(Error::Input(format!("lexicon line {}: malformed α entry", n + 1)));
                }
                chars.push(unit.to_string());
                alpha_codes.push(code);
            }
        }
        let piece_strings: Vec<String> = beta_lines.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
        let vocab = TargetVocab::new(&chars, &piece_strings)?;
        let alpha: Vec<AlphaEntry> = chars
            .iter()
            .zip(alpha_codes)
            .map(|(c, phonemes)| AlphaEntry {
                unit: vocab.id(c).expect("just added"),
                phonemes,
                tone: 0,
            })
            .collect();
        let beta: Vec<BetaWord> = beta_lines
            .iter()
            .map(|(pieces, code)| BetaWord {
                pieces: pieces.iter().map(|p| vocab.id(p).expect("just added")).collect(),
                phonemes: code.clone(),
            })
            .collect();
        let mut lex = Lexicon {
            alpha_of: alpha.iter().enumerate().map(|(i, e)| (e.unit, i)).collect(),
            vocab,
            inventory,
            alpha,
            beta,
            piece_code: HashMap::new(),
        };
        lex.split_piece_codes()?;
        lex.check_disjoint()?;
        Ok(lex)
    }

    /// Recovers each piece's own code from the word codes: a continuation
    /// piece owns the first two phonemes, the final piece the rest.
    fn split_piece_codes(&mut self) -> Result<()> {
        let wb = self.inventory.wb_id();
        let mut codes = HashMap::new();
        for w in &self.beta {
            let body = &w.phonemes[..w.phonemes.len() - 1];
            if body.contains(&wb) {
                return Err(Error::Input("`<wb>` inside a β word".into()));
            }
            let (first, last) = match w.pieces.as_slice() {
                [p] => (None, *p),
                [c, p] if self.vocab.is_continuation(*c) && !self.vocab.is_continuation(*p) => (Some(*c), *p),
                _ => return Err(Error::Input("β word must be one final piece or a continuation plus a final".into())),
            };
            let tail = match first {
                Some(c) if body.len() >= 4 => {
                    codes.insert(c, body[..2].to_vec());
                    &body[2..]
                }
                Some(_) => return Err(Error::Input("two-piece β word code is too short".into())),
                None => body,
            };
            if tail.is_empty() {
                return Err(Error::Input("β piece with an empty code".into()));
            }
            codes.insert(last, tail.to_vec());
        }
        self.piece_code = codes;
        Ok(())
    }

    fn check_disjoint(&self) -> Result<()> {
        use crate::ctc::PhonemeClass;
        let alpha_ok = self
            .alpha
            .iter()
            .all(|e| e.phonemes.iter().all(|&p| self.inventory.class(p) == PhonemeClass::Alpha));
        let beta_ok = self.beta.iter().all(|w| {
            w.phonemes[..w.phonemes.len() - 1]
                .iter()
                .all(|&p| self.inventory.class(p) == PhonemeClass::Beta)
        });
        if !(alpha_ok && beta_ok) {
            return Err(Error::Input("α and β pronunciations share phonemes".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.alpha {
            out.push_str(&format!(
                "{}\t{}\n",
                self.vocab.unit(e.unit).expect("unit"),
                render(&self.inventory, &e.phonemes)
            ));
        }
        for w in &self.beta {
            let pieces: Vec<&str> = w.pieces.iter().map(|&p| self.vocab.unit(p).expect("unit")).collect();
            out.push_str(&format!("{}\t{}\n", pieces.join(" "), render(&self.inventory, &w.phonemes)));
        }
        out
    }

    pub fn alpha_entry(&self, unit: usize) -> Option<&AlphaEntry> {
        self.alpha_of.get(&unit).map(|&i| &self.alpha[i])
    }

    pub fn piece_code(&self, piece: usize) -> Option<&[usize]> {
        self.piece_code.get(&piece).map(Vec::as_slice)
    }

    /// Phonemes of a target: each α character's code, and for β the piece
    /// codes of a word followed by `<wb>`.
    pub fn text_to_phonemes(&self, target: &TargetSeq) -> Result<PhonemeSeq> {
        Ok(PhonemeSeq::new(self.text_to_phonemes_with_tones(target)?.0)?)
    }

    /// Like [`Lexicon::text_to_phonemes`], also returning each phoneme's tone
    /// (`None` for β phonemes and `<wb>`).
    pub fn text_to_phonemes_with_tones(&self, target: &TargetSeq) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let mut ids = Vec::new();
        let mut tones = Vec::new();
        let mut open_word = false;
        for &u in target.units() {
            match self.vocab.lang(u) {
                Some(Lang::Alpha) => {
                    if open_word {
                        return Err(Error::Input("β word interrupted by an α unit".into()));
                    }
                    let e = self.alpha_entry(u).ok_or_else(|| Error::Oov(self.unit_name(u)))?;
                    ids.extend(&e.phonemes);
                    tones.extend(std::iter::repeat_n(Some(e.tone), e.phonemes.len()));
                }
                Some(Lang::Beta) => {
                    let code = self.piece_code(u).ok_or_else(|| Error::Oov(self.unit_name(u)))?;
                    ids.extend(code);
                    tones.extend(std::iter::repeat_n(None, code.len()));
                    open_word = self.vocab.is_continuation(u);
                    if !open_word {
                        ids.push(self.inventory.wb_id());
                        tones.push(None);
                    }
                }
                None => return Err(Error::Oov(self.unit_name(u))),
            }
        }
        if open_word {
            return Err(Error::Input("target ends inside a β word".into()));
        }
        Ok((ids, tones))
    }

    /// Same as [`Lexicon::text_to_phonemes`] for unit strings.
    pub fn units_to_phonemes(&self, units: &[String]) -> Result<PhonemeSeq> {
        let ids = self.vocab.encode(units)?;
        self.text_to_phonemes(&TargetSeq::new(ids, self.vocab.len())?)
    }

    fn unit_name(&self, u: usize) -> String {
        self.vocab.unit(u).map_or_else(|| format!("#{u}"), str::to_string)
    }

    /// True when no two α characters share a pronunciation.
    pub fn is_unambiguous(&self) -> bool {
        let codes: BTreeSet<&Vec<usize>> = self.alpha.iter().map(|e| &e.phonemes).collect();
        codes.len() == self.alpha.len()
    }

    /// Greedy left-to-right inverse of [`Lexicon::text_to_phonemes`]. For
    /// homophones the first listed character wins.
    pub fn phonemes_to_text(&self, phonemes: &PhonemeSeq) -> Result<TargetSeq> {
        let alpha_codes: HashMap<&[usize], usize> = self
            .alpha
            .iter()
            .rev()
            .map(|e| (e.phonemes.as_slice(), e.unit))
            .collect();
        let piece_of: HashMap<&[usize], usize> = self.piece_code.iter().map(|(&p, c)| (c.as_slice(), p)).collect();
        let wb = self.inventory.wb_id();
        let ids = phonemes.ids();
        let mut out = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            let is_alpha = self.inventory.class(ids[i]) == crate::ctc::PhonemeClass::Alpha;
            let table = if is_alpha { &alpha_codes } else { &piece_of };
            let found = (1..=3)
                .filter(|&n| i + n <= ids.len())
                .find_map(|n| table.get(&ids[i..i + n]).map(|&u| (u, n)));
            let (unit, n) = found.ok_or_else(|| Error::Input(format!("no unit matches phonemes at position {i}")))?;
            out.push(unit);
            i += n;
            if !is_alpha && !self.vocab.is_continuation(unit) {
                if ids.get(i) != Some(&wb) {
                    return Err(Error::Input(format!("expected `<wb>` at position {i}")));
                }
                i += 1;
            }
        }
        TargetSeq::new(out, self.vocab.len())
    }
}

fn render(inv: &PhonemeInventory, code: &[usize]) -> String {
    inv.render(&PhonemeSeq::new(code.to_vec()).expect("no blank in codes"))
}
