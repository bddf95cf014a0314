//! End-to-end steps shared by the command-line tool and the tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{hash_hex, Checkpoint};
use crate::config::Settings;
use crate::data::{format_corpus, Manifest, PairedExample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{Mode, StackedDebert};
use crate::tokenize::Vocabulary;
use crate::train::{evaluate, fit, LogRecord};

pub const EVAL_HEADER: &str = "dataset,mode,seed,micro_f1,macro_p,macro_r,macro_f1,wer,ibleu";

/// Labelled sentences as `(label, text)`.
pub type Labelled = Vec<(usize, String)>;

/// Deterministic train/test split of labelled sentences.
pub fn split_corpus(
    corpus: &[(usize, String)],
    test_fraction: f64,
    seed: u64,
) -> Result<(Labelled, Labelled)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (corpus.len() as f64 * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| corpus[i].clone())
            .collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(test_idx)))
}

/// Vocabulary over the incomplete and complete training sentences.
pub fn build_vocab(train: &[PairedExample], min_count: usize) -> Result<Vocabulary> {
    let text: Vec<&str> = train
        .iter()
        .flat_map(|e| std::iter::once(e.incomplete.as_str()).chain(e.complete.as_deref()))
        .collect();
    Vocabulary::build(&text, min_count)
}

/// One more than the largest label, and at least two.
pub fn infer_num_classes(train: &[PairedExample]) -> usize {
    train.iter().map(|e| e.label + 1).max().unwrap_or(0).max(2)
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Builds the vocabulary and model from `settings`, then runs both training
/// phases. The model is initialised from `seed` alone, so both modes share
/// their encoder and head starting point.
pub fn train_model(
    train: &[PairedExample],
    settings: &Settings,
    mode: Mode,
    num_classes: usize,
) -> Result<TrainedRun> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let train_cfg = settings.train_config()?;
    let vocab = build_vocab(train, settings.parse("min_count")?)?;
    let config = settings.model_config(vocab.len(), num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model = StackedDebert::init(&mut rng, config, mode)?;
    let log = fit(&model, &vocab, train, &train_cfg)?;
    let training_hash = hash_hex(&format!(
        "{}mode = {mode}\n{}",
        settings.resolved_text(),
        format_corpus(train)
    ));
    Ok(TrainedRun {
        checkpoint: Checkpoint {
            model,
            vocab,
            training_hash,
        },
        log,
    })
}

/// Confusion matrix from gold labels and predicted labels.
pub fn confusion_from_predictions(
    test: &[PairedExample],
    predicted: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if test.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} test sentences",
            predicted.len(),
            test.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (e, &p) in test.iter().zip(predicted) {
        cm.record(e.label, p)?;
    }
    Ok(cm)
}

/// One label per non-empty line.
pub fn parse_predictions(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("expected a label, found {:?}", l.trim()),
            })
        })
        .collect()
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, test: &[PairedExample]) -> Result<MetricsReport> {
    MetricsReport::from_confusion(evaluate(&ckpt.model, &ckpt.vocab, test)?)
}

/// CSV row matching [`EVAL_HEADER`]. Noise columns come from the dataset
/// manifest's test-split values and are blank without one.
pub fn eval_row(
    dataset: &str,
    mode: &str,
    seed: &str,
    report: &MetricsReport,
    manifest: Option<&Manifest>,
) -> String {
    let noise = |key: &str| {
        manifest
            .and_then(|m| m.get_f64(key))
            .map_or(String::new(), |v| format!("{v:.4}"))
    };
    format!(
        "{dataset},{mode},{seed},{:.4},{:.4},{:.4},{:.4},{},{}",
        report.micro.f1,
        report.macro_scores.precision,
        report.macro_scores.recall,
        report.macro_scores.f1,
        noise("test_wer"),
        noise("test_ibleu"),
    )
}

/// Row-normalised confusion matrix as CSV, header `true\pred,0,1,…`.
pub fn normalized_csv(report: &MetricsReport) -> String {
    let n = report.confusion.num_classes();
    let mut out = String::from("true\\pred");
    for c in 0..n {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (i, row) in report.normalized.rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:.4}"));
        }
        out.push('\n');
    }
    out
}

/// Human-readable summary: scores, per-class table, raw confusion matrix.
pub fn text_report(report: &MetricsReport) -> String {
    let m = &report.macro_scores;
    let mut out = format!(
        "micro F1  {:.4}\nmacro P   {:.4}\nmacro R   {:.4}\nmacro F1  {:.4}\n",
        report.micro.f1, m.precision, m.recall, m.f1
    );
    if let Some(w) = &report.wer {
        out.push_str(&format!(
            "WER       {:.4} (sentence mean {:.4})\n",
            w.pooled, w.mean
        ));
    }
    if let Some(ib) = report.ibleu {
        out.push_str(&format!("iBLEU     {ib:.4}\n"));
    }
    out.push_str("\nclass  precision  recall  f1\n");
    for (c, s) in m.per_class.iter().enumerate() {
        let flag = if s.precision_undefined || s.recall_undefined {
            "  (undefined, set to 0)"
        } else {
            ""
        };
        out.push_str(&format!(
            "{c:>5}  {:>9.4}  {:>6.4}  {:.4}{flag}\n",
            s.precision, s.recall, s.f1
        ));
    }
    out.push_str("\nconfusion (rows = true, columns = predicted)\n");
    out.push_str(&report.confusion.to_string());
    if !report.normalized.empty_rows.is_empty() {
        out.push_str(&format!(
            "rows with no instances: {:?}\n",
            report.normalized.empty_rows
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(label: usize, s: &str) -> PairedExample {
        PairedExample::new(label, s, None)
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let corpus: Vec<(usize, String)> = (0..10).map(|i| (i % 2, format!("s{i}"))).collect();
        let (a_train, a_test) = split_corpus(&corpus, 0.3, 4).unwrap();
        let (b_train, b_test) = split_corpus(&corpus, 0.3, 4).unwrap();
        assert_eq!((&a_train, &a_test), (&b_train, &b_test));
        assert_eq!((a_train.len(), a_test.len()), (7, 3));
        let mut all: Vec<_> = a_train.into_iter().chain(a_test).collect();
        all.sort();
        let mut expected = corpus.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert!(split_corpus(&corpus, 1.0, 0).is_err());
    }

    #[test]
    fn diagonal_predictions_score_one() {
        let test = vec![
            example(0, "a"),
            example(1, "b"),
            example(2, "c"),
            example(1, "d"),
        ];
        let cm = confusion_from_predictions(&test, &[0, 1, 2, 1], 3).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert_eq!((r.micro.f1, r.macro_scores.f1), (1.0, 1.0));
        let row = eval_row("toy", "oracle", "-", &r, None);
        assert_eq!(row, "toy,oracle,-,1.0000,1.0000,1.0000,1.0000,,");
        assert_eq!(EVAL_HEADER.split(',').count(), row.split(',').count());
        assert!(normalized_csv(&r).starts_with("true\\pred,0,1,2\n0,1.0000,0.0000,0.0000\n"));
    }

    #[test]
    fn prediction_errors() {
        let test = vec![example(0, "a")];
        assert!(matches!(
            confusion_from_predictions(&test, &[0, 1], 2),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            confusion_from_predictions(&test, &[5], 2),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            parse_predictions("0\nx\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(parse_predictions("1\n\n0\n").unwrap(), vec![1, 0]);
    }

    #[test]
    fn manifest_fills_noise_columns() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 4]]).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        let m = Manifest::parse("test_wer = 0.25\ntest_ibleu = 0.4\n").unwrap();
        let row = eval_row("d", "stacked", "0", &r, Some(&m));
        assert!(row.ends_with(",0.2500,0.4000"), "{row}");
        let text = text_report(&r);
        assert!(text.contains("micro F1  0.8750"), "{text}");
    }
}
