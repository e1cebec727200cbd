//! Cross-model correctness partitioning and SFT/DPO dataset curation.
//!
//! Each sample's K responses are graded correct (C) or wrong (W) against the
//! gold labels; samples then fall into the all-correct, partially-correct,
//! and all-wrong collections. SFT rows and DPO preference pairs are drawn
//! from the partially-correct collection only, keeping the all-wrong
//! collection clean as a held-out evaluation split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GoldMap, RecordStatus, RunRecord};
use crate::prompt::MessageSequence;
use crate::subtask::{ExtractionScheme, Subtask, SubtaskLabelSet};
use crate::util::sha256_hex;

/// Correctness grade of one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "c")]
    C,
    #[serde(rename = "w")]
    W,
}

/// C iff every one of the eleven extracted labels is present and equals the
/// gold label.
pub fn response_verdict(labels: &SubtaskLabelSet, gold: &SubtaskLabelSet) -> Verdict {
    let all_match = Subtask::ALL.iter().all(|subtask| {
        let predicted = labels.get(*subtask);
        predicted.is_some() && predicted == gold.get(*subtask)
    });
    if all_match {
        Verdict::C
    } else {
        Verdict::W
    }
}

/// Grade for one record; transport failures are wrong by definition.
pub fn record_verdict(record: &RunRecord, gold: &SubtaskLabelSet, scheme: ExtractionScheme) -> Verdict {
    if record.status == RecordStatus::Failed {
        return Verdict::W;
    }
    response_verdict(record.labels(scheme), gold)
}

/// One sample's verdicts across the K models, in model order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub sample_id: String,
    pub verdicts: Vec<Verdict>,
}

/// The N×K verdict matrix; rows sorted by sample id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictMatrix {
    pub model_order: Vec<String>,
    pub rows: Vec<VerdictRow>,
}

impl VerdictMatrix {
    /// Builds the matrix from a record batch, requiring exactly one record
    /// per (sample, model) cell.
    pub fn from_records(
        records: &[RunRecord],
        gold: &GoldMap,
        scheme: ExtractionScheme,
        model_order: &[String],
    ) -> Result<VerdictMatrix> {
        if model_order.is_empty() {
            return Err(Error::Validation("model order must not be empty".into()));
        }
        let mut cells: BTreeMap<&str, BTreeMap<&str, Verdict>> = BTreeMap::new();
        for record in records {
            if !model_order.iter().any(|m| m == &record.model_name) {
                return Err(Error::Validation(format!(
                    "record model '{}' not in model order",
                    record.model_name
                )));
            }
            let gold_labels = gold.get(&record.sample_id).ok_or_else(|| {
                Error::Validation(format!("no gold labels for sample '{}'", record.sample_id))
            })?;
            let verdict = record_verdict(record, gold_labels, scheme);
            let previous = cells
                .entry(&record.sample_id)
                .or_default()
                .insert(&record.model_name, verdict);
            if previous.is_some() {
                return Err(Error::Validation(format!(
                    "duplicate record for sample '{}' and model '{}'",
                    record.sample_id, record.model_name
                )));
            }
        }
        let mut rows = Vec::with_capacity(cells.len());
        for (sample_id, by_model) in cells {
            let verdicts = model_order
                .iter()
                .map(|model| {
                    by_model.get(model.as_str()).copied().ok_or_else(|| {
                        Error::Validation(format!(
                            "missing record for sample '{sample_id}' and model '{model}'"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(VerdictRow {
                sample_id: sample_id.to_string(),
                verdicts,
            });
        }
        Ok(VerdictMatrix {
            model_order: model_order.to_vec(),
            rows,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.rows.len()
    }

    pub fn model_count(&self) -> usize {
        self.model_order.len()
    }
}

/// The three disjoint sample collections plus the matrix they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub scheme: ExtractionScheme,
    /// Samples where every response is correct.
    pub t_c: Vec<String>,
    /// Samples with both correct and wrong responses.
    pub t_p: Vec<String>,
    /// Samples where every response is wrong.
    pub t_w: Vec<String>,
    pub matrix: VerdictMatrix,
}

impl PartitionResult {
    /// Content digest over the scheme and the three id collections, used to
    /// tie emitted datasets to the partition they came from.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "scheme": self.scheme,
            "t_c": self.t_c,
            "t_p": self.t_p,
            "t_w": self.t_w,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn collection_of(&self, sample_id: &str) -> Option<&'static str> {
        if self.t_c.iter().any(|id| id == sample_id) {
            Some("t_c")
        } else if self.t_p.iter().any(|id| id == sample_id) {
            Some("t_p")
        } else if self.t_w.iter().any(|id| id == sample_id) {
            Some("t_w")
        } else {
            None
        }
    }
}

/// Partitions samples by their verdict rows.
///
/// The collections are exhaustive and disjoint: every sample lands in
/// exactly one of them, so the sizes always sum back to N. For example, a
/// five-model run over 3,132 samples might split 87 / 1,963 / 1,082:
///
/// ```
/// use phqeval::curation::{partition, Verdict, VerdictMatrix, VerdictRow};
/// use phqeval::subtask::ExtractionScheme;
///
/// let models: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
/// let rows = (0..3132)
///     .map(|i| VerdictRow {
///         sample_id: format!("s{i:04}"),
///         verdicts: if i < 87 {
///             vec![Verdict::C; 5]
///         } else if i < 87 + 1963 {
///             vec![Verdict::C, Verdict::W, Verdict::W, Verdict::W, Verdict::W]
///         } else {
///             vec![Verdict::W; 5]
///         },
///     })
///     .collect();
/// let matrix = VerdictMatrix { model_order: models, rows };
/// let result = partition(matrix, ExtractionScheme::Sr).unwrap();
/// assert_eq!(result.t_c.len(), 87);
/// assert_eq!(result.t_p.len(), 1963);
/// assert_eq!(result.t_w.len(), 1082);
/// assert_eq!(87 + 1963 + 1082, 3132);
/// assert_eq!(result.t_c.len() + result.t_p.len() + result.t_w.len(), 3132);
/// ```
pub fn partition(matrix: VerdictMatrix, scheme: ExtractionScheme) -> Result<PartitionResult> {
    if matrix.model_order.is_empty() {
        return Err(Error::Validation("cannot partition with zero models".into()));
    }
    let mut t_c = Vec::new();
    let mut t_p = Vec::new();
    let mut t_w = Vec::new();
    for row in &matrix.rows {
        if row.verdicts.len() != matrix.model_order.len() {
            return Err(Error::Internal(format!(
                "verdict row for '{}' has {} entries, expected {}",
                row.sample_id,
                row.verdicts.len(),
                matrix.model_order.len()
            )));
        }
        let correct = row.verdicts.iter().filter(|v| **v == Verdict::C).count();
        if correct == row.verdicts.len() {
            t_c.push(row.sample_id.clone());
        } else if correct == 0 {
            t_w.push(row.sample_id.clone());
        } else {
            t_p.push(row.sample_id.clone());
        }
    }
    if t_c.len() + t_p.len() + t_w.len() != matrix.rows.len() {
        return Err(Error::Internal("partition does not cover the sample set".into()));
    }
    Ok(PartitionResult {
        scheme,
        t_c,
        t_p,
        t_w,
        matrix,
    })
}

/// One qualified (fully correct) response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualifiedResponse {
    pub sample_id: String,
    pub model_name: String,
    pub response: String,
}

/// The set of correct responses under one extraction scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualifiedSet {
    pub scheme: ExtractionScheme,
    pub responses: Vec<QualifiedResponse>,
    pub counts_by_model: BTreeMap<String, usize>,
}

impl QualifiedSet {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    fn keys(&self) -> BTreeSet<(&str, &str)> {
        self.responses
            .iter()
            .map(|r| (r.sample_id.as_str(), r.model_name.as_str()))
            .collect()
    }

    /// (sample, model) keys qualified under `self` but not `other`; used to
    /// compare the first-label and last-label qualification criteria.
    pub fn difference(&self, other: &QualifiedSet) -> Vec<(String, String)> {
        let other_keys = other.keys();
        self.keys()
            .into_iter()
            .filter(|k| !other_keys.contains(k))
            .map(|(s, m)| (s.to_string(), m.to_string()))
            .collect()
    }
}

/// Collects the responses graded C under the scheme, with per-model counts.
pub fn qualify_responses(
    records: &[RunRecord],
    gold: &GoldMap,
    scheme: ExtractionScheme,
) -> Result<QualifiedSet> {
    let mut responses = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        let gold_labels = gold.get(&record.sample_id).ok_or_else(|| {
            Error::Validation(format!("no gold labels for sample '{}'", record.sample_id))
        })?;
        if record_verdict(record, gold_labels, scheme) == Verdict::C {
            responses.push(QualifiedResponse {
                sample_id: record.sample_id.clone(),
                model_name: record.model_name.clone(),
                response: record.raw_text.clone(),
            });
            *counts.entry(record.model_name.clone()).or_default() += 1;
        }
    }
    responses.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then_with(|| a.model_name.cmp(&b.model_name))
    });
    Ok(QualifiedSet {
        scheme,
        responses,
        counts_by_model: counts,
    })
}

/// One supervised fine-tuning row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRow {
    pub messages: MessageSequence,
    pub response: String,
    pub sample_id: String,
    pub model: String,
}

/// Prompt sequences keyed by sample id.
pub type PromptMap = BTreeMap<String, MessageSequence>;

fn model_rank(model_order: &[String], model: &str) -> usize {
    model_order.iter().position(|m| m == model).unwrap_or(usize::MAX)
}

/// Builds SFT rows: one per qualified response whose sample is in the
/// partially-correct collection. `include_easy` additionally admits the
/// all-correct collection's responses, off by default.
pub fn build_sft_dataset(
    partition: &PartitionResult,
    qualified: &QualifiedSet,
    prompts: &PromptMap,
    include_easy: bool,
) -> Result<Vec<SftRow>> {
    if qualified.scheme != partition.scheme {
        return Err(Error::Validation(format!(
            "qualified set scheme {} does not match partition scheme {}",
            qualified.scheme, partition.scheme
        )));
    }
    let t_p: BTreeSet<&str> = partition.t_p.iter().map(String::as_str).collect();
    let t_c: BTreeSet<&str> = partition.t_c.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for response in &qualified.responses {
        let id = response.sample_id.as_str();
        if !(t_p.contains(id) || (include_easy && t_c.contains(id))) {
            continue;
        }
        let messages = prompts
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no prompt for sample '{id}'")))?;
        rows.push(SftRow {
            messages: messages.clone(),
            response: response.response.clone(),
            sample_id: response.sample_id.clone(),
            model: response.model_name.clone(),
        });
    }
    rows.sort_by(|a, b| {
        a.sample_id.cmp(&b.sample_id).then_with(|| {
            model_rank(&partition.matrix.model_order, &a.model)
                .cmp(&model_rank(&partition.matrix.model_order, &b.model))
        })
    });
    Ok(rows)
}

/// How correct and wrong responses of one sample are combined into pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Every (correct × wrong) combination.
    CrossProduct,
    /// First correct × first wrong, in model order.
    OnePerSample,
}

impl PairingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            PairingPolicy::CrossProduct => "cross_product",
            PairingPolicy::OnePerSample => "one_per_sample",
        }
    }

    pub fn parse(text: &str) -> Option<PairingPolicy> {
        match text.trim().to_ascii_lowercase().as_str() {
            "cross_product" => Some(PairingPolicy::CrossProduct),
            "one_per_sample" => Some(PairingPolicy::OnePerSample),
            _ => None,
        }
    }
}

/// One DPO preference pair; chosen is graded C, rejected W, same sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub messages: MessageSequence,
    pub chosen: String,
    pub rejected: String,
    pub sample_id: String,
    pub chosen_model: String,
    pub rejected_model: String,
}

/// Builds preference pairs from the partially-correct collection.
pub fn build_dpo_pairs(
    partition: &PartitionResult,
    records: &[RunRecord],
    gold: &GoldMap,
    scheme: ExtractionScheme,
    policy: PairingPolicy,
    prompts: &PromptMap,
) -> Result<Vec<PreferencePair>> {
    if scheme != partition.scheme {
        return Err(Error::Validation(format!(
            "pairing scheme {scheme} does not match partition scheme {}",
            partition.scheme
        )));
    }
    let mut by_sample: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for record in records {
        by_sample.entry(&record.sample_id).or_default().push(record);
    }
    let model_order = &partition.matrix.model_order;

    let mut pairs = Vec::new();
    for sample_id in &partition.t_p {
        let mut sample_records = by_sample
            .get(sample_id.as_str())
            .cloned()
            .unwrap_or_default();
        sample_records.sort_by_key(|r| model_rank(model_order, &r.model_name));
        let gold_labels = gold.get(sample_id).ok_or_else(|| {
            Error::Validation(format!("no gold labels for sample '{sample_id}'"))
        })?;
        let (correct, wrong): (Vec<&RunRecord>, Vec<&RunRecord>) = sample_records
            .iter()
            .partition(|r| record_verdict(r, gold_labels, scheme) == Verdict::C);
        if correct.is_empty() || wrong.is_empty() {
            // A partially-correct sample has both by definition.
            return Err(Error::Internal(format!(
                "sample '{sample_id}' is in the partially-correct collection but has {} correct and {} wrong responses",
                correct.len(),
                wrong.len()
            )));
        }
        let messages = prompts
            .get(sample_id)
            .ok_or_else(|| Error::Validation(format!("no prompt for sample '{sample_id}'")))?;
        let combos: Vec<(&RunRecord, &RunRecord)> = match policy {
            PairingPolicy::CrossProduct => correct
                .iter()
                .flat_map(|c| wrong.iter().map(move |w| (*c, *w)))
                .collect(),
            PairingPolicy::OnePerSample => vec![(correct[0], wrong[0])],
        };
        for (chosen, rejected) in combos {
            pairs.push(PreferencePair {
                messages: messages.clone(),
                chosen: chosen.raw_text.clone(),
                rejected: rejected.raw_text.clone(),
                sample_id: sample_id.clone(),
                chosen_model: chosen.model_name.clone(),
                rejected_model: rejected.model_name.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Held-out evaluation manifest: the all-wrong collection, with the
/// all-correct collection kept as an easy reference split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub eval: Vec<String>,
    pub easy_reference: Vec<String>,
}

pub fn emit_eval_split(partition: &PartitionResult) -> EvalSplit {
    EvalSplit {
        eval: partition.t_w.clone(),
        easy_reference: partition.t_c.clone(),
    }
}

fn dataset_header(
    kind: &str,
    scheme: ExtractionScheme,
    policy: Option<PairingPolicy>,
    partition_digest: &str,
    rows: usize,
) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "scheme": scheme,
        "pairing_policy": policy.map(|p| p.as_str()),
        "partition_digest": partition_digest,
        "rows": rows,
    })
}

/// Writes the SFT dataset: a header line, then one JSON row per line.
pub fn write_sft_file<W: Write>(
    mut writer: W,
    rows: &[SftRow],
    scheme: ExtractionScheme,
    partition_digest: &str,
) -> Result<()> {
    let header = dataset_header("sft", scheme, None, partition_digest, rows.len());
    writeln!(writer, "{header}")?;
    for row in rows {
        writeln!(writer, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

/// Writes the DPO dataset: a header line, then one JSON pair per line.
pub fn write_dpo_file<W: Write>(
    mut writer: W,
    pairs: &[PreferencePair],
    scheme: ExtractionScheme,
    policy: PairingPolicy,
    partition_digest: &str,
) -> Result<()> {
    let header = dataset_header("dpo", scheme, Some(policy), partition_digest, pairs.len());
    writeln!(writer, "{header}")?;
    for pair in pairs {
        writeln!(writer, "{}", serde_json::to_string(pair)?)?;
    }
    Ok(())
}

/// Writes the evaluation-split manifest as a single JSON document.
pub fn write_eval_split<W: Write>(
    mut writer: W,
    split: &EvalSplit,
    scheme: ExtractionScheme,
    partition_digest: &str,
) -> Result<()> {
    let doc = serde_json::json!({
        "kind": "eval_split",
        "scheme": scheme,
        "partition_digest": partition_digest,
        "eval": split.eval,
        "easy_reference": split.easy_reference,
    });
    writeln!(writer, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
