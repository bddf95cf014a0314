//! Noise scores (WER, BLEU/iBLEU) and classification scores over a
//! confusion matrix.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tokenize::normalize_words;

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> usize {
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0; n + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r.as_ref() != h.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// `(S + D + I) / N` over normalised words. Can exceed 1.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_words(reference);
    if r.is_empty() {
        return Err(Error::UndefinedReference("reference has no words".into()));
    }
    let h = normalize_words(hypothesis);
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusWer {
    /// Total edits over total reference words.
    pub pooled: f64,
    /// Mean of the sentence-level scores.
    pub mean: f64,
}

pub fn corpus_wer<S: AsRef<str>, T: AsRef<str>>(
    references: &[S],
    hypotheses: &[T],
) -> Result<CorpusWer> {
    if references.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let (mut edits, mut words, mut sum) = (0usize, 0usize, 0.0);
    for (r, h) in references.iter().zip(hypotheses) {
        let r = normalize_words(r.as_ref());
        if r.is_empty() {
            return Err(Error::UndefinedReference("reference has no words".into()));
        }
        let e = edit_distance(&r, &normalize_words(h.as_ref()));
        edits += e;
        words += r.len();
        sum += e as f64 / r.len() as f64;
    }
    Ok(CorpusWer {
        pooled: edits as f64 / words as f64,
        mean: sum / references.len() as f64,
    })
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

pub const BLEU_MAX_N: usize = 4;

/// Corpus BLEU with one reference per hypothesis and n-grams up to 4.
///
/// Clipped matches and hypothesis n-gram totals are pooled over the corpus.
/// For an order `n ≥ 2` at which no reference has `n` words, 1 is added to
/// the numerator and denominator of that precision.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(references: &[S], hypotheses: &[T]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let refs: Vec<Vec<String>> = references
        .iter()
        .map(|s| normalize_words(s.as_ref()))
        .collect();
    let hyps: Vec<Vec<String>> = hypotheses
        .iter()
        .map(|s| normalize_words(s.as_ref()))
        .collect();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let (mut matches, mut total) = (0usize, 0usize);
        for (r, h) in refs.iter().zip(&hyps) {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches += c.min(rc.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        let short_references = n >= 2 && refs.iter().all(|r| r.len() < n);
        let (num, den) = if short_references {
            (matches + 1, total + 1)
        } else {
            (matches, total)
        };
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let brevity = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * (log_sum / BLEU_MAX_N as f64).exp())
}

/// `1 − BLEU`; higher means noisier.
pub fn ibleu<S: AsRef<str>, T: AsRef<str>>(references: &[S], hypotheses: &[T]) -> Result<f64> {
    Ok(1.0 - bleu(references, hypotheses)?)
}

/// Counts with rows indexed by true label and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predictions of this class, precision set to 0.
    pub precision_undefined: bool,
    /// No instances of this class, recall set to 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    /// Harmonic mean of the macro precision and macro recall.
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
}

impl MacroScores {
    pub fn has_undefined(&self) -> bool {
        self.per_class
            .iter()
            .any(|c| c.precision_undefined || c.recall_undefined)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Rows with no instances, emitted as zeros.
    pub empty_rows: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes;
        for label in [truth, predicted] {
            if label >= n {
                return Err(Error::Label(format!("label {label} outside 0..{n}")));
            }
        }
        self.counts[truth * n + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Data("confusion matrix is empty".into()));
        }
        Ok(())
    }

    /// Micro precision, recall and F1, all equal to `trace / total`.
    pub fn micro_scores(&self) -> Result<MicroScores> {
        self.require_nonempty()?;
        let v = self.trace() as f64 / self.total() as f64;
        Ok(MicroScores {
            precision: v,
            recall: v,
            f1: v,
        })
    }

    pub fn class_scores(&self, c: usize) -> ClassScores {
        let tp = self.get(c, c);
        let (precision, precision_undefined) = ratio(tp, self.col_sum(c));
        let (recall, recall_undefined) = ratio(tp, self.row_sum(c));
        ClassScores {
            precision,
            recall,
            f1: harmonic(precision, recall),
            precision_undefined,
            recall_undefined,
        }
    }

    /// Per-class precision and recall averaged over classes; F1 is the
    /// harmonic mean of those two averages.
    pub fn macro_scores(&self) -> Result<MacroScores> {
        self.require_nonempty()?;
        let per_class: Vec<ClassScores> = (0..self.num_classes)
            .map(|c| self.class_scores(c))
            .collect();
        let n = self.num_classes as f64;
        let precision = per_class.iter().map(|c| c.precision).sum::<f64>() / n;
        let recall = per_class.iter().map(|c| c.recall).sum::<f64>() / n;
        Ok(MacroScores {
            precision,
            recall,
            f1: harmonic(precision, recall),
            per_class,
        })
    }

    /// Each row divided by its total.
    pub fn normalize(&self) -> NormalizedMatrix {
        let mut empty_rows = Vec::new();
        let rows = (0..self.num_classes)
            .map(|t| {
                let total = self.row_sum(t);
                if total == 0 {
                    empty_rows.push(t);
                    return vec![0.0; self.num_classes];
                }
                (0..self.num_classes)
                    .map(|p| self.get(t, p) as f64 / total as f64)
                    .collect()
            })
            .collect();
        NormalizedMatrix { rows, empty_rows }
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(f, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub micro: MicroScores,
    pub macro_scores: MacroScores,
    pub normalized: NormalizedMatrix,
    pub wer: Option<CorpusWer>,
    pub ibleu: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            micro: confusion.micro_scores()?,
            macro_scores: confusion.macro_scores()?,
            normalized: confusion.normalize(),
            confusion,
            wer: None,
            ibleu: None,
        })
    }

    /// Attaches noise scores of the incomplete side against the complete side.
    pub fn with_noise<S: AsRef<str>, T: AsRef<str>>(
        mut self,
        complete: &[S],
        incomplete: &[T],
    ) -> Result<Self> {
        self.wer = Some(corpus_wer(complete, incomplete)?);
        self.ibleu = Some(ibleu(complete, incomplete)?);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wer_basic_cases() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert_eq!(wer("a b", "x y z w").unwrap(), 2.0);
        assert!(matches!(wer("", "a"), Err(Error::UndefinedReference(_))));
        assert!(matches!(
            wer(" ?! ", "a"),
            Err(Error::UndefinedReference(_))
        ));
    }

    #[test]
    fn wer_on_station_example() {
        let w = wer(
            "how to get from bonner platz to freimann",
            "how to get from bonner platz to fry",
        )
        .unwrap();
        assert_eq!(w, 0.125);
        // normalisation strips punctuation and case
        assert_eq!(
            wer(
                "How to get from bonner platz to freimann?",
                "how to get from bonner platz to fry."
            )
            .unwrap(),
            0.125
        );
    }

    /// Minimum edit cost by exhaustive search over alignments.
    fn brute_force(r: &[u8], h: &[u8]) -> usize {
        match (r, h) {
            ([], h) => h.len(),
            (r, []) => r.len(),
            ([a, rt @ ..], [b, ht @ ..]) => {
                let sub = brute_force(rt, ht) + usize::from(a != b);
                let del = brute_force(rt, h) + 1;
                let ins = brute_force(r, ht) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for c in 0..3u8 {
                    let mut t: Vec<u8> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn edit_distance_matches_exhaustive_oracle_on_short_sequences() {
        let seqs = all_sequences(3);
        let words = ["a", "b", "c"];
        for r in &seqs {
            let rw: Vec<&str> = r.iter().map(|&c| words[c as usize]).collect();
            for h in &seqs {
                let hw: Vec<&str> = h.iter().map(|&c| words[c as usize]).collect();
                assert_eq!(edit_distance(&rw, &hw), brute_force(r, h));
            }
        }
    }

    #[test]
    fn corpus_wer_pooled_and_mean() {
        let refs = ["a b c d", "e f"];
        let hyps = ["a b c", "x"];
        let w = corpus_wer(&refs, &hyps).unwrap();
        assert_eq!(w.pooled, 3.0 / 6.0);
        assert_eq!(w.mean, (0.25 + 1.0) / 2.0);
        assert!(corpus_wer(&refs, &hyps[..1]).is_err());
    }

    #[test]
    fn bleu_limits() {
        let refs = ["the cat sat on the mat", "a dog ran in the park today"];
        assert_eq!(bleu(&refs, &refs).unwrap(), 1.0);
        assert_eq!(ibleu(&refs, &refs).unwrap(), 0.0);
        let hyps = ["x y z w v u", "q r s t o p l"];
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
        assert_eq!(ibleu(&refs, &hyps).unwrap(), 1.0);
        assert!(matches!(bleu(&refs, &hyps[..1]), Err(Error::Data(_))));
    }

    #[test]
    fn bleu_two_sentence_hand_count() {
        let refs = ["the cat is on the mat", "there is a dog here"];
        let hyps = ["the cat the cat on the mat", "there is dog here"];
        // hyp 1: 7 words; ref 1: 6 words.
        //  1-grams: the×3 (ref 2) → 2, cat×2 (ref 1) → 1, on 1, mat 1 → 5 of 7
        //  2-grams: the-cat×2 → 1, cat-the 0, cat-on 0, on-the 1, the-mat 1 → 3 of 6
        //  3-grams: the-cat-the 0, cat-the-cat 0, the-cat-on 0, cat-on-the 0, on-the-mat 1 → 1 of 5
        //  4-grams: the-cat-the-cat, cat-the-cat-on, the-cat-on-the, cat-on-the-mat → 0 of 4
        // hyp 2: 4 words; ref 2: 5 words.
        //  1-grams 4 of 4; 2-grams: there-is 1, is-dog 0, dog-here 1 → 2 of 3
        //  3-grams: there-is-dog 0, is-dog-here 0 → 0 of 2; 4-grams 0 of 1
        // p4 = 0 / 5 → BLEU 0
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);

        let hyps = ["the cat the cat on the mat", "there is a dog"];
        // hyp 2 now: 1-grams 4/4, 2-grams 3/3, 3-grams 2/2, 4-grams 1/1
        let p: [f64; 4] = [9.0 / 11.0, 6.0 / 9.0, 3.0 / 7.0, 1.0 / 5.0];
        // hypothesis and reference corpora both have 11 words: exp(1 − 11/11) = 1
        let oracle = (p.iter().map(|v| v.ln()).sum::<f64>() / 4.0).exp();
        assert!((bleu(&refs, &hyps).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_and_short_reference_smoothing() {
        // single short pair: no reference has 2 or more words
        let refs = ["hello"];
        let hyps = ["hello"];
        assert_eq!(bleu(&refs, &hyps).unwrap(), 1.0);

        let refs = ["a b c d e f"];
        let hyps = ["a b c d"];
        // all n-gram precisions 1, brevity exp(1 − 6/4)
        let oracle = (1.0f64 - 1.5).exp();
        assert!((bleu(&refs, &hyps).unwrap() - oracle).abs() < 1e-12);

        // the reference has 4-grams but the hypothesis does not
        assert_eq!(bleu(&refs, &["a b c"]).unwrap(), 0.0);
        assert!((bleu(&refs, &hyps).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn three_class_example_matrix() {
        // rows: true 0 = [TN, FP], true 1 = [FN, TP]
        let cm = ConfusionMatrix::from_rows(&[vec![15, 5], vec![10, 20]]).unwrap();
        let m = cm.macro_scores().unwrap();
        assert_eq!(m.per_class[1].precision, 0.8);
        assert_eq!(m.per_class[0].precision, 0.6);
        assert_eq!(m.per_class[1].recall, 20.0 / 30.0);
        assert_eq!(m.per_class[0].recall, 0.75);
        assert!((m.precision - 0.7).abs() < 1e-15);
        assert!((m.recall - 17.0 / 24.0).abs() < 1e-15);
        assert!((m.f1 - 119.0 / 169.0).abs() < 1e-15);
        assert!(!m.has_undefined());
    }

    #[test]
    fn micro_scores_cases() {
        let cm = ConfusionMatrix::from_rows(&[vec![20, 5], vec![7, 18]]).unwrap();
        let s = cm.micro_scores().unwrap();
        assert_eq!(s.f1, 0.76);
        assert_eq!((s.precision, s.recall), (0.76, 0.76));
        let diag =
            ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(diag.micro_scores().unwrap().f1, 1.0);
        assert!(matches!(
            ConfusionMatrix::new(2).micro_scores(),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn micro_invariant_under_relabeling() {
        let cm =
            ConfusionMatrix::from_rows(&[vec![4, 1, 2], vec![0, 5, 3], vec![2, 2, 6]]).unwrap();
        let perm = [2, 0, 1];
        let mut rows = vec![vec![0; 3]; 3];
        for t in 0..3 {
            for p in 0..3 {
                rows[perm[t]][perm[p]] = cm.get(t, p);
            }
        }
        let permuted = ConfusionMatrix::from_rows(&rows).unwrap();
        assert_eq!(cm.micro_scores().unwrap(), permuted.micro_scores().unwrap());
    }

    #[test]
    fn balanced_diagonal_gives_unit_macro_scores() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 5]]).unwrap();
        let m = cm.macro_scores().unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn undefined_class_scores_are_zero_and_flagged() {
        // class 1 never predicted, class 2 never occurs
        let cm =
            ConfusionMatrix::from_rows(&[vec![3, 0, 1], vec![2, 0, 0], vec![0, 0, 0]]).unwrap();
        let m = cm.macro_scores().unwrap();
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[1].precision, 0.0);
        assert!(m.per_class[2].recall_undefined);
        assert!(m.has_undefined());
    }

    #[test]
    fn macro_f1_can_exceed_every_class_f1() {
        // P0 = 1, R0 = 0.1, P1 = 0.1, R1 = 1
        let cm = ConfusionMatrix::from_rows(&[vec![1, 9], vec![0, 1]]).unwrap();
        let m = cm.macro_scores().unwrap();
        let class_f1 = 2.0 * 0.1 / 1.1;
        assert!((m.per_class[0].f1 - class_f1).abs() < 1e-15);
        assert!((m.per_class[1].f1 - class_f1).abs() < 1e-15);
        assert!((m.f1 - 0.55).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_bounds_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(2..=5);
            let rows: Vec<Vec<u64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0..20)).collect())
                .collect();
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            if cm.total() == 0 {
                continue;
            }
            let m = cm.macro_scores().unwrap();
            // the harmonic mean is concave, so it dominates the mean class F1
            let mean_f1 = m.per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64;
            assert!(m.f1 >= mean_f1 - 1e-12, "{rows:?}");
            assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        }
    }

    #[test]
    fn normalize_cases() {
        let eye = ConfusionMatrix::from_rows(&[vec![2, 0], vec![0, 7]]).unwrap();
        assert_eq!(eye.normalize().rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 2]]).unwrap();
        assert_eq!(cm.normalize().rows, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 0]]).unwrap();
        let n = cm.normalize();
        assert_eq!(n.empty_rows, vec![1]);
        assert_eq!(n.rows[1], vec![0.0, 0.0]);
    }

    #[test]
    fn record_checks_labels() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(1, 0).unwrap();
        assert!(matches!(cm.record(2, 0), Err(Error::Label(_))));
        assert_eq!(cm.total(), 1);
    }

    proptest! {
        #[test]
        fn normalized_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(1u64..50, 4), 4)) {
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            for row in cm.normalize().rows {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn wer_is_zero_on_self_and_nonnegative(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            if !normalize_words(&a).is_empty() {
                prop_assert_eq!(wer(&a, &a).unwrap(), 0.0);
                prop_assert!(wer(&a, &b).unwrap() >= 0.0);
            }
        }
    }
}
