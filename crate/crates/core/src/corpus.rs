//! Annotated-corpus ingestion: confidence filtering, per-class balanced
//! sampling, and depression-keyword grouping.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subtask::{LabelValue, Subtask, SubtaskLabelSet};

/// Keyword-presence group of a sample text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeywordGroup {
    /// Mentioned depression: a lexicon stem occurs in the text.
    #[serde(rename = "md")]
    Md,
    /// No mention of depression.
    #[serde(rename = "nmd")]
    Nmd,
}

impl KeywordGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            KeywordGroup::Md => "MD",
            KeywordGroup::Nmd => "NMD",
        }
    }
}

/// Lowercase stems matched case-insensitively as substrings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordLexicon {
    stems: Vec<String>,
}

impl Default for KeywordLexicon {
    /// The single stem "depress" subsumes the inflected forms
    /// (depressed, depressing, depression, depressive, ...).
    fn default() -> Self {
        Self {
            stems: vec!["depress".to_string()],
        }
    }
}

impl KeywordLexicon {
    pub fn new(stems: Vec<String>) -> Result<Self> {
        let stems: Vec<String> = stems
            .into_iter()
            .map(|s| s.trim().to_lowercase())
            .filter(|s| !s.is_empty())
            .collect();
        if stems.is_empty() {
            return Err(Error::Validation("lexicon must not be empty".into()));
        }
        Ok(Self { stems })
    }

    /// Loads one stem per line; '#' starts a comment, blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut stems = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            let stem = line.split('#').next().unwrap_or("").trim();
            if !stem.is_empty() {
                stems.push(stem.to_string());
            }
        }
        Self::new(stems)
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }
}

/// MD iff any lexicon stem occurs as a case-insensitive substring.
pub fn classify_keyword_group(text: &str, lexicon: &KeywordLexicon) -> KeywordGroup {
    let lower = text.to_lowercase();
    if lexicon.stems().iter().any(|stem| lower.contains(stem)) {
        KeywordGroup::Md
    } else {
        KeywordGroup::Nmd
    }
}

/// One annotated tweet with complete gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub gold: SubtaskLabelSet,
    /// Raw source class string, informational only.
    pub severity_label: String,
    pub confidence: f64,
    pub keyword_group: KeywordGroup,
}

/// Filter parameters recorded alongside the selected samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProvenance {
    pub source_path: String,
    pub confidence_threshold: f64,
    pub per_class_count: usize,
    pub seed: u64,
}

/// The selected, balanced, id-sorted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub provenance: CorpusProvenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Writes the snapshot as line-delimited JSON, one sample per line.
    pub fn write_snapshot<W: Write>(&self, mut writer: W) -> Result<()> {
        let header = serde_json::json!({
            "kind": "corpus",
            "provenance": self.provenance,
            "samples": self.samples.len(),
        });
        writeln!(writer, "{header}")?;
        for sample in &self.samples {
            writeln!(writer, "{}", serde_json::to_string(sample)?)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(reader: R) -> Result<Corpus> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Validation("empty corpus snapshot".into()))??;
        let header: serde_json::Value = serde_json::from_str(&header_line)?;
        let provenance: CorpusProvenance =
            serde_json::from_value(header["provenance"].clone())?;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line)?);
        }
        Ok(Corpus {
            samples,
            provenance,
        })
    }
}

/// Maps source-file column names onto the fields the loader needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub text: String,
    pub label: String,
    pub confidence: String,
    /// Column names for the gold S, S1..S9 annotations in canonical order.
    pub subtasks: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: "text".into(),
            label: "label".into(),
            confidence: "confidence".into(),
            subtasks: ["s", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Source-file format: delimiter plus column mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFormat {
    pub delimiter: u8,
    pub columns: ColumnMap,
}

impl Default for CorpusFormat {
    fn default() -> Self {
        Self {
            delimiter: b',',
            columns: ColumnMap::default(),
        }
    }
}

/// Any severity other than "non-depressed" collapses to a positive
/// depression label.
pub const NON_DEPRESSED_LABEL: &str = "non-depressed";

fn is_depressed(severity_label: &str) -> bool {
    !severity_label.trim().eq_ignore_ascii_case(NON_DEPRESSED_LABEL)
}

struct RawRow {
    id: String,
    text: String,
    severity_label: String,
    confidence: f64,
    phq: [LabelValue; 10], // S, S1..S9
}

/// Loads, filters, and balances the corpus.
///
/// From rows with `confidence > confidence_threshold` (strict), selects
/// `per_class_count` depressed and `per_class_count` non-depressed samples
/// uniformly at random under `seed`, then sorts by id. Reruns with identical
/// arguments produce an identical corpus.
pub fn load_corpus(
    path: &Path,
    format: &CorpusFormat,
    lexicon: &KeywordLexicon,
    confidence_threshold: f64,
    per_class_count: usize,
    seed: u64,
) -> Result<Corpus> {
    if per_class_count == 0 {
        return Err(Error::Validation("per_class_count must be >= 1".into()));
    }
    let rows = read_rows(path, format)?;

    let mut ids = BTreeSet::new();
    for row in &rows {
        if !ids.insert(row.id.clone()) {
            return Err(Error::Validation(format!("duplicate sample id: {}", row.id)));
        }
    }

    let qualifying: Vec<&RawRow> = rows
        .iter()
        .filter(|r| r.confidence > confidence_threshold)
        .collect();
    let depressed: Vec<&RawRow> = qualifying
        .iter()
        .copied()
        .filter(|r| is_depressed(&r.severity_label))
        .collect();
    let non_depressed: Vec<&RawRow> = qualifying
        .iter()
        .copied()
        .filter(|r| !is_depressed(&r.severity_label))
        .collect();

    for (class, pool) in [("depressed", &depressed), ("non-depressed", &non_depressed)] {
        if pool.len() < per_class_count {
            return Err(Error::InsufficientSamples {
                class: class.to_string(),
                needed: per_class_count,
                found: pool.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&RawRow> = Vec::with_capacity(per_class_count * 2);
    for pool in [&depressed, &non_depressed] {
        let chosen = rand::seq::index::sample(&mut rng, pool.len(), per_class_count);
        picked.extend(chosen.iter().map(|i| pool[i]));
    }

    let mut samples: Vec<Sample> = picked
        .into_iter()
        .map(|row| {
            let d = if is_depressed(&row.severity_label) {
                LabelValue::Yes
            } else {
                LabelValue::No
            };
            let mut gold = SubtaskLabelSet::new();
            for (i, subtask) in Subtask::ALL[..10].iter().enumerate() {
                gold.set(*subtask, Some(row.phq[i]));
            }
            gold.set(Subtask::D, Some(d));
            Sample {
                id: row.id.clone(),
                text: row.text.clone(),
                gold,
                severity_label: row.severity_label.clone(),
                confidence: row.confidence,
                keyword_group: classify_keyword_group(&row.text, lexicon),
            }
        })
        .collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    Ok(Corpus {
        samples,
        provenance: CorpusProvenance {
            source_path: path.display().to_string(),
            confidence_threshold,
            per_class_count,
            seed,
        },
    })
}

fn read_rows(path: &Path, format: &CorpusFormat) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(false)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Validation(format!("missing column '{name}' in corpus header"))
        })
    };
    let id_col = col(&format.columns.id)?;
    let text_col = col(&format.columns.text)?;
    let label_col = col(&format.columns.label)?;
    let conf_col = col(&format.columns.confidence)?;
    if format.columns.subtasks.len() != 10 {
        return Err(Error::Validation(
            "column map must name 10 subtask columns (S, S1..S9)".into(),
        ));
    }
    let subtask_cols: Vec<usize> = format
        .columns
        .subtasks
        .iter()
        .map(|name| col(name))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is line 1; first data row is line 2.
        let line = i + 2;
        let record = record.map_err(|e| Error::ParseRow {
            line,
            message: e.to_string(),
        })?;
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::ParseRow {
                line,
                message: format!("missing field at column index {idx}"),
            })
        };
        let confidence: f64 = field(conf_col)?.trim().parse().map_err(|_| Error::ParseRow {
            line,
            message: format!("invalid confidence value '{}'", field(conf_col).unwrap_or("")),
        })?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::ParseRow {
                line,
                message: format!("confidence {confidence} outside [0, 1]"),
            });
        }
        let mut phq = [LabelValue::No; 10];
        for (slot, idx) in phq.iter_mut().zip(&subtask_cols) {
            let raw = field(*idx)?;
            *slot = LabelValue::parse(raw).ok_or_else(|| Error::ParseRow {
                line,
                message: format!("invalid label value '{raw}'"),
            })?;
        }
        rows.push(RawRow {
            id: field(id_col)?.to_string(),
            text: field(text_col)?.to_string(),
            severity_label: field(label_col)?.to_string(),
            confidence,
            phq,
        });
    }
    Ok(rows)
}

/// Per-subtask Yes/No shares within one (D class, S value) stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDistribution {
    pub d_class: LabelValue,
    pub s_value: LabelValue,
    pub count: usize,
    /// Share of this stratum within its D class, percent.
    pub share_of_class_pct: f64,
    /// Keyed by canonical subtask order; Yes% + No% = 100 per subtask.
    pub per_subtask: Vec<SubtaskShare>,
    pub md_pct: f64,
    pub nmd_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskShare {
    pub subtask: Subtask,
    pub yes_pct: f64,
    pub no_pct: f64,
}

/// Annotation distribution table over the two D classes, stratified by the
/// gold self-reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub total: usize,
    pub strata: Vec<StratumDistribution>,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Computes per-stratum Yes/No percentages for every subtask plus the MD/NMD
/// split, for each (D class × gold S value) stratum present in the corpus.
pub fn annotation_distribution(corpus: &Corpus) -> Result<DistributionTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut strata = Vec::new();
    for d_class in [LabelValue::Yes, LabelValue::No] {
        let class: Vec<&Sample> = corpus
            .samples
            .iter()
            .filter(|s| s.gold.get(Subtask::D) == Some(d_class))
            .collect();
        for s_value in [LabelValue::Yes, LabelValue::No] {
            let members: Vec<&&Sample> = class
                .iter()
                .filter(|s| s.gold.get(Subtask::S) == Some(s_value))
                .collect();
            if members.is_empty() {
                continue;
            }
            let per_subtask = Subtask::ALL
                .iter()
                .map(|subtask| {
                    let yes = members
                        .iter()
                        .filter(|s| s.gold.get(*subtask) == Some(LabelValue::Yes))
                        .count();
                    SubtaskShare {
                        subtask: *subtask,
                        yes_pct: pct(yes, members.len()),
                        no_pct: pct(members.len() - yes, members.len()),
                    }
                })
                .collect();
            let md = members
                .iter()
                .filter(|s| s.keyword_group == KeywordGroup::Md)
                .count();
            strata.push(StratumDistribution {
                d_class,
                s_value,
                count: members.len(),
                share_of_class_pct: pct(members.len(), class.len()),
                per_subtask,
                md_pct: pct(md, members.len()),
                nmd_pct: pct(members.len() - md, members.len()),
            });
        }
    }
    Ok(DistributionTable {
        total: corpus.len(),
        strata,
    })
}
