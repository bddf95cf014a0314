//! Seeded corruption channel standing in for speech-to-text errors and
//! informal writing, with calibration to a target corpus WER.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::corpus_wer;
use crate::tokenize::normalize_words;

/// Single-word replacements read from `from<TAB>to` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhraseTable {
    entries: BTreeMap<String, String>,
}

impl PhraseTable {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((from, to)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected from<TAB>to".into(),
                });
            };
            let from = from.trim().to_lowercase();
            if entries
                .insert(from.clone(), to.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate entry for {from:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<A: Into<String>, B: Into<String>>(
        pairs: impl IntoIterator<Item = (A, B)>,
    ) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        }
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.entries.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(a, b)| format!("{a}\t{b}\n"))
            .collect()
    }

    pub fn abbreviations() -> Self {
        Self::from_tsv(include_str!("../data/abbreviations.tsv")).expect("built-in table")
    }

    pub fn casual() -> Self {
        Self::from_tsv(include_str!("../data/casual.tsv")).expect("built-in table")
    }

    /// Station-name confusions seen in speech-to-text output.
    pub fn stt_substitutions() -> Self {
        Self::from_tsv(include_str!("../data/stt_substitutions.tsv")).expect("built-in table")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubstitutionPool {
    /// Replace only words found in the substitution table.
    TableOnly,
    /// Replace with a different word drawn from the pool words.
    Corpus,
    /// Table entry when there is one, pool word otherwise.
    #[default]
    TableThenCorpus,
}

impl fmt::Display for SubstitutionPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubstitutionPool::TableOnly => "table",
            SubstitutionPool::Corpus => "corpus",
            SubstitutionPool::TableThenCorpus => "table+corpus",
        })
    }
}

impl FromStr for SubstitutionPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(SubstitutionPool::TableOnly),
            "corpus" => Ok(SubstitutionPool::Corpus),
            "table+corpus" => Ok(SubstitutionPool::TableThenCorpus),
            other => Err(Error::Config(format!(
                "unknown substitution pool {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub deletion: f64,
    pub substitution: f64,
    pub repeat_letter: f64,
    pub abbreviation: f64,
    pub casual: f64,
    pub pool: SubstitutionPool,
    pub substitutions: PhraseTable,
    /// Candidate replacement words for pool substitution.
    pub pool_words: Vec<String>,
    pub abbreviations: PhraseTable,
    pub casual_spellings: PhraseTable,
    pub seed: u64,
    pub target_wer: Option<f64>,
}

impl Default for NoiseSpec {
    /// No corruption, built-in tables.
    fn default() -> Self {
        Self {
            deletion: 0.0,
            substitution: 0.0,
            repeat_letter: 0.0,
            abbreviation: 0.0,
            casual: 0.0,
            pool: SubstitutionPool::default(),
            substitutions: PhraseTable::stt_substitutions(),
            pool_words: Vec::new(),
            abbreviations: PhraseTable::abbreviations(),
            casual_spellings: PhraseTable::casual(),
            seed: 0,
            target_wer: None,
        }
    }
}

enum Action {
    Keep,
    Delete,
    Substitute,
    Repeat,
    Abbreviate,
    Casual,
}

impl NoiseSpec {
    fn probabilities(&self) -> [(&'static str, f64); 5] {
        [
            ("deletion", self.deletion),
            ("substitution", self.substitution),
            ("repeat_letter", self.repeat_letter),
            ("abbreviation", self.abbreviation),
            ("casual", self.casual),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for (name, p) in self.probabilities() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if sum > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "corruption probabilities sum to {sum} > 1"
            )));
        }
        if let Some(t) = self.target_wer {
            if !(t > 0.0 && t <= 2.0) {
                return Err(Error::Config(format!("target WER {t} outside (0, 2]")));
            }
        }
        Ok(())
    }

    /// Each word falls into one category by a single uniform draw against
    /// the cumulative probabilities, in field order.
    fn action(&self, u: f64) -> Action {
        let mut edge = 0.0;
        for (p, action) in [
            (self.deletion, Action::Delete),
            (self.substitution, Action::Substitute),
            (self.repeat_letter, Action::Repeat),
            (self.abbreviation, Action::Abbreviate),
            (self.casual, Action::Casual),
        ] {
            edge += p;
            if u < edge {
                return action;
            }
        }
        Action::Keep
    }

    fn pool_word(&self, word: &str, v: f64) -> Option<String> {
        let candidates: Vec<&String> = self
            .pool_words
            .iter()
            .filter(|w| w.as_str() != word)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let i = ((v * candidates.len() as f64) as usize).min(candidates.len() - 1);
        Some(candidates[i].clone())
    }

    fn substitute(&self, word: &str, v: f64) -> String {
        let table = || self.substitutions.get(word).map(str::to_string);
        let replacement = match self.pool {
            SubstitutionPool::TableOnly => table(),
            SubstitutionPool::Corpus => self.pool_word(word, v),
            SubstitutionPool::TableThenCorpus => table().or_else(|| self.pool_word(word, v)),
        };
        replacement.unwrap_or_else(|| word.to_string())
    }
}

/// Repeats one letter of `word` two to five extra times.
fn repeat_letter(word: &str, v: f64, w: f64) -> String {
    let chars: Vec<char> = word.chars().collect();
    let letters: Vec<usize> = (0..chars.len())
        .filter(|&i| chars[i].is_alphabetic())
        .collect();
    if letters.is_empty() {
        return word.to_string();
    }
    let at = letters[((v * letters.len() as f64) as usize).min(letters.len() - 1)];
    let extra = 2 + ((w * 4.0) as usize).min(3);
    let mut out = String::with_capacity(word.len() + extra);
    for (i, c) in chars.iter().enumerate() {
        out.push(*c);
        if i == at {
            for _ in 0..extra {
                out.push(*c);
            }
        }
    }
    out
}

/// Corrupts the sentence at position `index` of a corpus. The output is a
/// pure function of `(sentence, spec, index)`; every word consumes the same
/// three draws whatever happens to it, so raising a probability only moves
/// words into that category.
pub fn corrupt_at(sentence: &str, spec: &NoiseSpec, index: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut out = Vec::new();
    for word in normalize_words(sentence) {
        let (u, v, w): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let replaced = match spec.action(u) {
            Action::Keep => word,
            Action::Delete => continue,
            Action::Substitute => spec.substitute(&word, v),
            Action::Repeat => repeat_letter(&word, v, w),
            Action::Abbreviate => spec
                .abbreviations
                .get(&word)
                .map_or(word.clone(), str::to_string),
            Action::Casual => spec
                .casual_spellings
                .get(&word)
                .map_or(word.clone(), str::to_string),
        };
        out.push(replaced);
    }
    out.join(" ")
}

pub fn corrupt(sentence: &str, spec: &NoiseSpec) -> String {
    corrupt_at(sentence, spec, 0)
}

/// Corrupts every sentence, using its position as the stream index.
pub fn corrupt_corpus<S: AsRef<str>>(corpus: &[S], spec: &NoiseSpec) -> Vec<String> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt_at(s.as_ref(), spec, i as u64))
        .collect()
}

pub const CALIBRATION_TOLERANCE: f64 = 0.05;
pub const CALIBRATION_MAX_ITERATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub spec: NoiseSpec,
    /// Pooled corpus WER of the returned spec.
    pub achieved: f64,
    pub iterations: usize,
}

/// Scales the deletion and substitution probabilities by a common factor,
/// found by bisection, until the pooled corpus WER is within 0.05 of the
/// target. The other categories are left as they are. When both base
/// probabilities are zero they are treated as equal.
pub fn calibrate<S: AsRef<str>>(corpus: &[S], spec: &NoiseSpec) -> Result<Calibrated> {
    spec.validate()?;
    let target = spec
        .target_wer
        .ok_or_else(|| Error::Config("calibration needs a target WER".into()))?;
    let (base_del, base_sub) = if spec.deletion + spec.substitution > 0.0 {
        (spec.deletion, spec.substitution)
    } else {
        (0.5, 0.5)
    };
    let others = spec.repeat_letter + spec.abbreviation + spec.casual;
    let max_scale = (1.0 - others).max(0.0) / (base_del + base_sub);

    let measure = |scale: f64| -> Result<(NoiseSpec, f64)> {
        let mut s = spec.clone();
        s.deletion = (base_del * scale).min(1.0);
        s.substitution = (base_sub * scale).min(1.0 - s.deletion);
        let noisy = corrupt_corpus(corpus, &s);
        Ok((s.clone(), corpus_wer(corpus, &noisy)?.pooled))
    };

    let (mut lo, mut hi) = (0.0, max_scale);
    let mut best: Option<(NoiseSpec, f64)> = None;
    for iteration in 1..=CALIBRATION_MAX_ITERATIONS {
        let scale = if iteration == 1 {
            max_scale
        } else {
            0.5 * (lo + hi)
        };
        let (s, achieved) = measure(scale)?;
        if (achieved - target).abs() <= CALIBRATION_TOLERANCE {
            return Ok(Calibrated {
                spec: s,
                achieved,
                iterations: iteration,
            });
        }
        if best
            .as_ref()
            .is_none_or(|(_, b)| (achieved - target).abs() < (b - target).abs())
        {
            best = Some((s, achieved));
        }
        if iteration == 1 {
            if achieved < target {
                break;
            }
            continue;
        }
        if achieved < target {
            lo = scale;
        } else {
            hi = scale;
        }
    }
    let achieved = best.map_or(0.0, |(_, a)| a);
    Err(Error::Calibration { target, achieved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ibleu, wer};

    const STATION: &str = "how to get from bonner platz to freimann";

    fn spec() -> NoiseSpec {
        NoiseSpec {
            seed: 7,
            ..NoiseSpec::default()
        }
    }

    fn corpus() -> Vec<String> {
        let stations = [
            "garching",
            "freimann",
            "marienplatz",
            "moosach",
            "odeonsplatz",
        ];
        let mut out = Vec::new();
        for (i, a) in stations.iter().enumerate() {
            for b in &stations[i + 1..] {
                out.push(format!("how do i get from {a} to {b}"));
                out.push(format!("when does the next train leave {a} for {b}"));
            }
        }
        out
    }

    #[test]
    fn zero_probabilities_are_identity() {
        assert_eq!(corrupt(STATION, &spec()), STATION);
        assert_eq!(corrupt("", &spec()), "");
    }

    #[test]
    fn certain_deletion_empties_sentence() {
        let s = NoiseSpec {
            deletion: 1.0,
            ..spec()
        };
        assert_eq!(corrupt(STATION, &s), "");
    }

    #[test]
    fn table_substitution_on_station_example() {
        let s = NoiseSpec {
            substitution: 1.0,
            pool: SubstitutionPool::TableOnly,
            substitutions: PhraseTable::from_pairs([("freimann", "fry")]),
            ..spec()
        };
        let out = corrupt(STATION, &s);
        assert_eq!(out, "how to get from bonner platz to fry");
        assert_eq!(wer(STATION, &out).unwrap(), 0.125);
    }

    #[test]
    fn channel_is_deterministic_per_position() {
        let s = NoiseSpec {
            deletion: 0.2,
            substitution: 0.2,
            repeat_letter: 0.1,
            pool_words: vec!["bus".into(), "tram".into()],
            ..spec()
        };
        assert_eq!(corrupt_at(STATION, &s, 3), corrupt_at(STATION, &s, 3));
        let across: Vec<String> = (0..20).map(|i| corrupt_at(STATION, &s, i)).collect();
        assert!(across.iter().any(|o| o != &across[0]));
        let other_seed = NoiseSpec {
            seed: 8,
            ..s.clone()
        };
        let differs =
            (0..20).any(|i| corrupt_at(STATION, &s, i) != corrupt_at(STATION, &other_seed, i));
        assert!(differs);
    }

    #[test]
    fn table_categories() {
        let s = NoiseSpec {
            abbreviation: 1.0,
            ..spec()
        };
        assert_eq!(corrupt("please tell you", &s), "pls tell u");
        let s = NoiseSpec {
            casual: 1.0,
            ..spec()
        };
        assert_eq!(corrupt("i know the answer", &s), "i kno teh answer");
        let s = NoiseSpec {
            repeat_letter: 1.0,
            ..spec()
        };
        let out = corrupt("sleep", &s);
        assert!(out.len() >= 7 && out.len() <= 10, "{out}");
        let squeezed: String = out.chars().fold(String::new(), |mut acc, c| {
            if !acc.ends_with(c) || c == 'e' {
                acc.push(c);
            }
            acc
        });
        assert!(squeezed.starts_with("sl") && squeezed.ends_with('p'));
    }

    #[test]
    fn pool_substitution_changes_the_word() {
        let s = NoiseSpec {
            substitution: 1.0,
            pool: SubstitutionPool::Corpus,
            pool_words: vec!["to".into(), "bus".into()],
            ..spec()
        };
        assert_eq!(corrupt("to to to", &s), "bus bus bus");
    }

    #[test]
    fn validation() {
        assert!(NoiseSpec {
            deletion: 1.2,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(NoiseSpec {
            deletion: 0.6,
            substitution: 0.6,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(NoiseSpec {
            target_wer: Some(0.0),
            ..spec()
        }
        .validate()
        .is_err());
        assert!(NoiseSpec {
            target_wer: Some(2.5),
            ..spec()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn table_parsing() {
        let t = PhraseTable::from_tsv("a\tb\n\n# note\nC\td e\n").unwrap();
        assert_eq!(t.get("c"), Some("d e"));
        assert_eq!(t.len(), 2);
        assert!(matches!(
            PhraseTable::from_tsv("a b\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            PhraseTable::from_tsv("a\tb\na\tc\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(PhraseTable::from_tsv(&t.to_tsv()).unwrap(), t);
        assert!(PhraseTable::abbreviations().len() > 10);
        assert_eq!(
            PhraseTable::stt_substitutions().get("freimann"),
            Some("fry")
        );
    }

    #[test]
    fn calibration_hits_target() {
        let c = corpus();
        let s = NoiseSpec {
            deletion: 0.1,
            substitution: 0.1,
            target_wer: Some(0.25),
            pool_words: vec!["bus".into(), "platz".into(), "tram".into()],
            ..spec()
        };
        let cal = calibrate(&c, &s).unwrap();
        assert!((cal.achieved - 0.25).abs() <= 0.05);
        assert!(cal.iterations <= CALIBRATION_MAX_ITERATIONS);
        let noisy = corrupt_corpus(&c, &cal.spec);
        assert_eq!(corpus_wer(&c, &noisy).unwrap().pooled, cal.achieved);
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        let c = corpus();
        let s = NoiseSpec {
            target_wer: Some(0.0),
            ..spec()
        };
        assert!(matches!(calibrate(&c, &s), Err(Error::Config(_))));
        // deletion alone tops out at WER 1
        let s = NoiseSpec {
            target_wer: Some(1.8),
            ..spec()
        };
        match calibrate(&c, &s) {
            Err(Error::Calibration { target, achieved }) => {
                assert_eq!(target, 1.8);
                assert!(achieved <= 1.0 + 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn higher_deletion_never_lowers_expected_wer() {
        let c = corpus();
        let mut prev = -1.0;
        for p in [0.0, 0.1, 0.2, 0.4, 0.8] {
            let mean: f64 = (0..200u64)
                .map(|seed| {
                    let s = NoiseSpec {
                        deletion: p,
                        seed,
                        ..spec()
                    };
                    corpus_wer(&c, &corrupt_corpus(&c, &s)).unwrap().pooled
                })
                .sum::<f64>()
                / 200.0;
            assert!(mean >= prev, "{p}: {mean} < {prev}");
            prev = mean;
        }
    }

    #[test]
    fn corrupting_more_sentences_never_lowers_expected_ibleu() {
        let c = corpus();
        let mut prev = -1.0;
        for k in [0, 5, 10, 15, 20] {
            let mean: f64 = (0..50u64)
                .map(|seed| {
                    let s = NoiseSpec {
                        deletion: 0.3,
                        substitution: 0.2,
                        pool_words: vec!["bus".into(), "tram".into()],
                        seed,
                        ..spec()
                    };
                    let noisy: Vec<String> = c
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            if i < k {
                                corrupt_at(x, &s, i as u64)
                            } else {
                                x.clone()
                            }
                        })
                        .collect();
                    ibleu(&c, &noisy).unwrap()
                })
                .sum::<f64>()
                / 50.0;
            assert!(mean >= prev, "{k}: {mean} < {prev}");
            prev = mean;
        }
    }
}
