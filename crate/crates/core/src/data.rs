//! Paired corpora: TSV ingestion, a synthetic intent corpus and noisy
//! dataset emission.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenize::normalize_words;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedExample {
    pub label: usize,
    pub incomplete: String,
    /// Absent in test records.
    pub complete: Option<String>,
}

impl PairedExample {
    pub fn new(label: usize, incomplete: impl Into<String>, complete: Option<String>) -> Self {
        Self {
            label,
            incomplete: incomplete.into(),
            complete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    /// The complete column is discarded while reading.
    Test,
}

/// Parses `label<TAB>incomplete[<TAB>complete]` lines. Blank lines are
/// skipped. Labels are checked against `num_classes` when given.
pub fn parse_corpus(
    text: &str,
    split: Split,
    num_classes: Option<usize>,
) -> Result<Vec<PairedExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected 2 or 3 tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label {:?} is not a non-negative integer", fields[0]),
        })?;
        if let Some(n) = num_classes {
            if label >= n {
                return Err(Error::Label(format!(
                    "line {line_no}: label {label} outside 0..{n}"
                )));
            }
        }
        let incomplete = fields[1].trim();
        if normalize_words(incomplete).is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "incomplete sentence has no words".into(),
            });
        }
        let complete = match split {
            Split::Test => None,
            Split::Train => fields
                .get(2)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(str::to_string),
        };
        out.push(PairedExample::new(label, incomplete, complete));
    }
    Ok(out)
}

pub fn load_corpus(
    path: &Path,
    split: Split,
    num_classes: Option<usize>,
) -> Result<Vec<PairedExample>> {
    parse_corpus(
        &fs::read_to_string(path).map_err(crate::error::at_path(path))?,
        split,
        num_classes,
    )
}

pub fn format_corpus(examples: &[PairedExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&format!("{}\t{}", e.label, e.incomplete));
        if let Some(c) = &e.complete {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
    }
    out
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Number of examples per label.
pub fn class_counts(examples: &[PairedExample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for e in examples {
        if e.label < num_classes {
            counts[e.label] += 1;
        }
    }
    counts
}

const DEPARTURE_TEMPLATES: &[&str] = &[
    "when does the next {v} leave from {a}",
    "when is the next {v} from {a}",
    "what time does the {v} depart at {a}",
    "when does the next {v} depart at {a}",
    "at what time does the {v} leave {a}",
    "when will the {v} arrive at {a}",
    "next {v} at {a}",
    "{v} departure {a}",
    "{a} next {v}",
];

const CONNECTION_TEMPLATES: &[&str] = &[
    "how do i get from {a} to {b}",
    "how can i get from {a} to {b}",
    "find a connection from {a} to {b}",
    "how to get from {a} to {b}",
    "i need a route from {a} to {b}",
    "which way is best from {a} to {b}",
    "{a} to {b}",
    "from {a} to {b}",
    "{a} {b} connection",
];

const STATIONS: &[&str] = &[
    "garching",
    "freimann",
    "bonner platz",
    "milbertshofen",
    "prinzregentenplatz",
    "rotkreuzplatz",
    "marienplatz",
    "odeonsplatz",
    "sendlinger tor",
    "hauptbahnhof",
    "moosach",
    "studentenstadt",
    "olympiazentrum",
    "scheidplatz",
];

const VEHICLES: &[&str] = &["bus", "train", "tram", "u-bahn", "s-bahn"];

/// Two-intent transport corpus: 0 = departure time, 1 = find connection.
/// Classes alternate, so any prefix is balanced.
pub fn synthetic_intent_corpus(per_class: usize, seed: u64) -> Vec<(usize, String)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for label in 0..2 {
            let templates = if label == 0 {
                DEPARTURE_TEMPLATES
            } else {
                CONNECTION_TEMPLATES
            };
            let template = templates.choose(&mut rng).expect("templates");
            let picked: Vec<&&str> = STATIONS.choose_multiple(&mut rng, 2).collect();
            let vehicle = VEHICLES.choose(&mut rng).expect("vehicles");
            let sentence = template
                .replace("{a}", picked[0])
                .replace("{b}", picked[1])
                .replace("{v}", vehicle);
            out.push((label, sentence));
        }
    }
    out
}

/// Key/value record of how a noisy dataset was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }
}

/// Noisy paired splits produced from clean labelled sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
    pub manifest: Manifest,
}

/// Normalises and corrupts every clean sentence (train first, then test, each at its own
/// corpus position), calibrating first when the spec has a target WER. Train
/// records keep the clean sentence as the complete side; test records drop it.
pub fn make_dataset(
    train_clean: &[(usize, String)],
    test_clean: &[(usize, String)],
    spec: &crate::noise::NoiseSpec,
) -> Result<Dataset> {
    use crate::metrics::{corpus_wer, ibleu};
    use crate::noise::{calibrate, corrupt_corpus};

    let all: Vec<String> = train_clean
        .iter()
        .chain(test_clean)
        .map(|(_, s)| normalize_words(s).join(" "))
        .collect();
    if all.is_empty() {
        return Err(Error::Data("clean corpus is empty".into()));
    }
    let mut spec = spec.clone();
    if spec.pool_words.is_empty() {
        let mut words: Vec<String> = all.iter().flat_map(|s| normalize_words(s)).collect();
        words.sort();
        words.dedup();
        spec.pool_words = words;
    }
    spec.validate()?;
    if spec.target_wer.is_some() {
        spec = calibrate(&all, &spec)?.spec;
    }
    if let Some(i) = all.iter().position(|s| s.is_empty()) {
        return Err(Error::Data(format!("clean sentence {i} has no words")));
    }
    // A fully deleted sentence keeps its first clean word so every record
    // has a non-empty incomplete side.
    let mut restored = 0usize;
    let noisy: Vec<String> = corrupt_corpus(&all, &spec)
        .into_iter()
        .zip(&all)
        .map(|(n, c)| {
            if n.is_empty() {
                restored += 1;
                c.split(' ').next().unwrap_or_default().to_string()
            } else {
                n
            }
        })
        .collect();
    let (train_noisy, test_noisy) = noisy.split_at(train_clean.len());

    let train = train_clean
        .iter()
        .zip(train_noisy)
        .zip(&all)
        .map(|(((l, _), n), c)| PairedExample::new(*l, n.clone(), Some(c.clone())))
        .collect::<Vec<_>>();
    let test = test_clean
        .iter()
        .zip(test_noisy)
        .map(|((l, _), n)| PairedExample::new(*l, n.clone(), None))
        .collect::<Vec<_>>();

    let f = |v: f64| format!("{v}");
    let mut entries = vec![
        ("seed".to_string(), spec.seed.to_string()),
        ("deletion".into(), f(spec.deletion)),
        ("substitution".into(), f(spec.substitution)),
        ("repeat_letter".into(), f(spec.repeat_letter)),
        ("abbreviation".into(), f(spec.abbreviation)),
        ("casual".into(), f(spec.casual)),
        ("pool".into(), spec.pool.to_string()),
        (
            "target_wer".into(),
            spec.target_wer.map_or("none".into(), f),
        ),
        ("train_size".into(), train.len().to_string()),
        ("test_size".into(), test.len().to_string()),
        ("restored_empty".into(), restored.to_string()),
    ];
    let score = |clean: &[String], noisy: &[String]| -> Result<(f64, f64, f64)> {
        let w = corpus_wer(clean, noisy)?;
        Ok((w.pooled, w.mean, ibleu(clean, noisy)?))
    };
    let (wer, wer_mean, ib) = score(&all, &noisy)?;
    entries.push(("wer".into(), f(wer)));
    entries.push(("wer_sentence_mean".into(), f(wer_mean)));
    entries.push(("ibleu".into(), f(ib)));
    if !test_clean.is_empty() {
        let (wer, _, ib) = score(&all[train_clean.len()..], test_noisy)?;
        entries.push(("test_wer".into(), f(wer)));
        entries.push(("test_ibleu".into(), f(ib)));
    }
    Ok(Dataset {
        train,
        test,
        manifest: Manifest { entries },
    })
}

/// Writes `train.tsv`, `test.tsv` and `manifest.txt` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join("train.tsv"),
        format_corpus(&dataset.train).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test.tsv"),
        format_corpus(&dataset.test).as_bytes(),
    )?;
    write_atomic(
        &dir.join("manifest.txt"),
        dataset.manifest.to_text().as_bytes(),
    )?;
    Ok(())
}
