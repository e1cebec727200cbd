//! Linguistic-quality and logical-reasoning metrics over run records:
//! format adherence, per-subtask micro F1, joint correct ratios, readability,
//! length statistics, embedding similarity, keyword-group confusion, and
//! outlier flagging.
//!
//! All spread statistics use the population standard deviation; reports
//! state this convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::KeywordGroup;
use crate::error::{Error, Result};
use crate::parse::{self, ParsedResponse};
use crate::subtask::{ExtractionScheme, LabelValue, Subtask, SubtaskLabelSet};

/// Transport outcome of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// One model response to one sample, with its parse and extracted labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sample_id: String,
    pub model_name: String,
    pub raw_text: String,
    pub parsed: ParsedResponse,
    pub labels_ir: SubtaskLabelSet,
    pub labels_sr: SubtaskLabelSet,
    pub status: RecordStatus,
}

impl RunRecord {
    /// Parses the raw text and derives both label sets.
    pub fn from_raw(
        sample_id: impl Into<String>,
        model_name: impl Into<String>,
        raw_text: impl Into<String>,
        status: RecordStatus,
    ) -> Self {
        let raw_text = raw_text.into();
        let parsed = parse::parse_response(&raw_text);
        let labels_ir = parse::extract_labels(&parsed, ExtractionScheme::Ir);
        let labels_sr = parse::extract_labels(&parsed, ExtractionScheme::Sr);
        Self {
            sample_id: sample_id.into(),
            model_name: model_name.into(),
            raw_text,
            parsed,
            labels_ir,
            labels_sr,
            status,
        }
    }

    pub fn labels(&self, scheme: ExtractionScheme) -> &SubtaskLabelSet {
        match scheme {
            ExtractionScheme::Ir => &self.labels_ir,
            ExtractionScheme::Sr => &self.labels_sr,
        }
    }
}

/// Gold labels keyed by sample id.
pub type GoldMap = BTreeMap<String, SubtaskLabelSet>;

/// Keyword groups keyed by sample id.
pub type GroupMap = BTreeMap<String, KeywordGroup>;

fn gold_for<'a>(gold: &'a GoldMap, sample_id: &str) -> Result<&'a SubtaskLabelSet> {
    gold.get(sample_id)
        .ok_or_else(|| Error::Validation(format!("no gold labels for sample '{sample_id}'")))
}

/// Fraction of records whose parse is adherent. Failed records count in the
/// denominator only.
pub fn adherence_rate(records: &[RunRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedRatio);
    }
    let adherent = records.iter().filter(|r| r.parsed.adherent).count();
    Ok(adherent as f64 / records.len() as f64)
}

/// Binary confusion counts with Yes as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: LabelValue, gold: LabelValue) {
        match (predicted, gold) {
            (LabelValue::Yes, LabelValue::Yes) => self.tp += 1,
            (LabelValue::Yes, LabelValue::No) => self.fp += 1,
            (LabelValue::No, LabelValue::Yes) => self.fn_ += 1,
            (LabelValue::No, LabelValue::No) => self.tn += 1,
        }
    }

    /// F1 = 2TP / (2TP + FP + FN); undefined when no positives exist on
    /// either side.
    pub fn f1(&self) -> Option<f64> {
        let denominator = 2 * self.tp + self.fp + self.fn_;
        if denominator == 0 {
            None
        } else {
            Some(2.0 * self.tp as f64 / denominator as f64)
        }
    }
}

/// How micro F1 treats records whose extracted label is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentPolicy {
    /// Drop absent-labeled records from the confusion and report them
    /// separately (default).
    Exclude,
    /// Score an absent label as the wrong prediction for its gold value.
    CountAsWrong,
}

impl AbsentPolicy {
    pub fn parse(text: &str) -> Option<AbsentPolicy> {
        match text.trim().to_ascii_lowercase().as_str() {
            "exclude" => Some(AbsentPolicy::Exclude),
            "count_as_wrong" => Some(AbsentPolicy::CountAsWrong),
            _ => None,
        }
    }
}

/// Micro-F1 result for one subtask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub f1: Option<f64>,
    pub confusion: Confusion,
    /// Records excluded because the subtask label was absent.
    pub unlabeled_count: usize,
}

/// Micro F1 for one subtask with Yes as the positive class, excluding
/// absent-labeled records from the confusion.
pub fn micro_f1(
    records: &[RunRecord],
    gold: &GoldMap,
    subtask: Subtask,
    scheme: ExtractionScheme,
) -> Result<F1Result> {
    micro_f1_with_policy(records, gold, subtask, scheme, AbsentPolicy::Exclude)
}

pub fn micro_f1_with_policy(
    records: &[RunRecord],
    gold: &GoldMap,
    subtask: Subtask,
    scheme: ExtractionScheme,
    policy: AbsentPolicy,
) -> Result<F1Result> {
    let mut confusion = Confusion::default();
    let mut unlabeled = 0;
    for record in records {
        let gold_value = gold_for(gold, &record.sample_id)?
            .get(subtask)
            .ok_or_else(|| {
                Error::Validation(format!("gold label {subtask} absent for '{}'", record.sample_id))
            })?;
        match record.labels(scheme).get(subtask) {
            Some(predicted) => confusion.add(predicted, gold_value),
            None => match policy {
                AbsentPolicy::Exclude => unlabeled += 1,
                AbsentPolicy::CountAsWrong => {
                    let wrong = match gold_value {
                        LabelValue::Yes => LabelValue::No,
                        LabelValue::No => LabelValue::Yes,
                    };
                    confusion.add(wrong, gold_value);
                }
            },
        }
    }
    if confusion.total() == 0 {
        return Err(Error::NoScorablePredictions {
            subtask: subtask.name().to_string(),
        });
    }
    Ok(F1Result {
        f1: confusion.f1(),
        confusion,
        unlabeled_count: unlabeled,
    })
}

/// Subtask scopes for the joint correct ratio, from easiest to hardest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Phq9,
    Phq9D,
    SPhq9D,
}

impl Scope {
    pub fn subtasks(self) -> &'static [Subtask] {
        const PHQ9: &[Subtask] = &Subtask::PHQ9;
        const PHQ9_D: &[Subtask] = &[
            Subtask::S1,
            Subtask::S2,
            Subtask::S3,
            Subtask::S4,
            Subtask::S5,
            Subtask::S6,
            Subtask::S7,
            Subtask::S8,
            Subtask::S9,
            Subtask::D,
        ];
        const ALL: &[Subtask] = &Subtask::ALL;
        match self {
            Scope::Phq9 => PHQ9,
            Scope::Phq9D => PHQ9_D,
            Scope::SPhq9D => ALL,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scope::Phq9 => "PHQ9",
            Scope::Phq9D => "PHQ9+D",
            Scope::SPhq9D => "S+PHQ9+D",
        }
    }
}

/// True iff every subtask in the scope is extracted and equals gold.
pub fn record_correct_for_scope(
    record: &RunRecord,
    gold: &SubtaskLabelSet,
    scope: Scope,
    scheme: ExtractionScheme,
) -> bool {
    scope.subtasks().iter().all(|subtask| {
        let predicted = record.labels(scheme).get(*subtask);
        predicted.is_some() && predicted == gold.get(*subtask)
    })
}

/// Fraction of records fully correct on every subtask in the scope.
pub fn correct_ratio(
    records: &[RunRecord],
    gold: &GoldMap,
    scope: Scope,
    scheme: ExtractionScheme,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedRatio);
    }
    let mut correct = 0;
    for record in records {
        let gold_labels = gold_for(gold, &record.sample_id)?;
        if record_correct_for_scope(record, gold_labels, scope, scheme) {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Automated Readability Index from surface counts:
/// `4.71 * chars/words + 0.5 * words/sentences - 21.43`.
pub fn ari_from_counts(char_count: usize, word_count: usize, sentence_count: usize) -> Result<f64> {
    if word_count == 0 || sentence_count == 0 {
        return Err(Error::DegenerateText);
    }
    Ok(4.71 * (char_count as f64 / word_count as f64)
        + 0.5 * (word_count as f64 / sentence_count as f64)
        - 21.43)
}

/// ARI of a parsed response's surface counts.
pub fn ari(parsed: &ParsedResponse) -> Result<f64> {
    ari_from_counts(parsed.char_count, parsed.word_count, parsed.sentence_count)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn compute(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::UndefinedRatio);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: variance.sqrt(),
        })
    }
}

/// Mean and population std of the token counts.
pub fn length_stats(records: &[RunRecord]) -> Result<MeanStd> {
    if records.is_empty() {
        return Err(Error::UndefinedRatio);
    }
    let lengths: Vec<f64> = records.iter().map(|r| r.parsed.token_count as f64).collect();
    MeanStd::compute(&lengths)
}

/// Cosine similarity; errors on zero vectors or dimension mismatch.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(dot / (norm_a * norm_b))
}

/// Per-record mean cosine similarity against the reference vectors.
pub fn embed_similarity(
    record_vectors: &[Vec<f64>],
    reference_vectors: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if reference_vectors.is_empty() {
        return Err(Error::Validation("no reference vectors".into()));
    }
    record_vectors
        .iter()
        .map(|record| {
            let mut sum = 0.0;
            for reference in reference_vectors {
                sum += cosine_similarity(record, reference)?;
            }
            Ok(sum / reference_vectors.len() as f64)
        })
        .collect()
}

/// Confusion and within-group error rates for one keyword group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub confusion: Confusion,
    /// FP / (FP + TN): share of gold-negative records predicted positive.
    /// `None` when the group has no scorable gold-negative records.
    pub fp_rate: Option<f64>,
    /// FN / (FN + TP): share of gold-positive records predicted negative.
    pub fn_rate: Option<f64>,
    /// Records excluded because the depression label was absent.
    pub unlabeled_count: usize,
}

impl ConfusionRates {
    fn from_confusion(confusion: Confusion, unlabeled_count: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                None
            } else {
                Some(num as f64 / den as f64)
            }
        };
        Self {
            confusion,
            fp_rate: ratio(confusion.fp, confusion.fp + confusion.tn),
            fn_rate: ratio(confusion.fn_, confusion.fn_ + confusion.tp),
            unlabeled_count,
        }
    }
}

/// Depression-decision confusion split by keyword group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub md: ConfusionRates,
    pub nmd: ConfusionRates,
}

impl GroupConfusion {
    pub fn get(&self, group: KeywordGroup) -> &ConfusionRates {
        match group {
            KeywordGroup::Md => &self.md,
            KeywordGroup::Nmd => &self.nmd,
        }
    }
}

/// Confusion counts and FP/FN rates on the depression decision, within each
/// keyword group.
pub fn group_confusion(
    records: &[RunRecord],
    gold: &GoldMap,
    groups: &GroupMap,
    scheme: ExtractionScheme,
) -> Result<GroupConfusion> {
    let mut confusion = BTreeMap::from([
        (KeywordGroup::Md.as_str(), (Confusion::default(), 0usize)),
        (KeywordGroup::Nmd.as_str(), (Confusion::default(), 0usize)),
    ]);
    for record in records {
        let gold_d = gold_for(gold, &record.sample_id)?
            .get(Subtask::D)
            .ok_or_else(|| {
                Error::Validation(format!("gold D absent for '{}'", record.sample_id))
            })?;
        let group = groups.get(&record.sample_id).ok_or_else(|| {
            Error::Validation(format!("no keyword group for sample '{}'", record.sample_id))
        })?;
        let entry = confusion.get_mut(group.as_str()).unwrap();
        match record.labels(scheme).get(Subtask::D) {
            Some(predicted) => entry.0.add(predicted, gold_d),
            None => entry.1 += 1,
        }
    }
    let (md_confusion, md_unlabeled) = confusion[KeywordGroup::Md.as_str()];
    let (nmd_confusion, nmd_unlabeled) = confusion[KeywordGroup::Nmd.as_str()];
    Ok(GroupConfusion {
        md: ConfusionRates::from_confusion(md_confusion, md_unlabeled),
        nmd: ConfusionRates::from_confusion(nmd_confusion, nmd_unlabeled),
    })
}

/// Why a record was flagged for manual review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierReason {
    TokenCount,
    Ari,
    Similarity,
    NonAdherent,
    Hedged,
}

impl OutlierReason {
    pub fn as_str(self) -> &'static str {
        match self {
            OutlierReason::TokenCount => "token_count",
            OutlierReason::Ari => "ari",
            OutlierReason::Similarity => "similarity",
            OutlierReason::NonAdherent => "non_adherent",
            OutlierReason::Hedged => "hedged",
        }
    }
}

/// One flagged record, with the statistics that triggered the flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierFlag {
    pub sample_id: String,
    pub model_name: String,
    pub reason: OutlierReason,
    /// Signed z-score of the triggering metric; absent for non-adherent or
    /// hedged flags.
    pub z: Option<f64>,
    pub token_count: usize,
    pub ari: Option<f64>,
    pub similarity: Option<f64>,
}

/// A record plus its optional per-record similarity, for outlier screening.
#[derive(Debug, Clone)]
pub struct OutlierInput<'a> {
    pub record: &'a RunRecord,
    pub similarity: Option<f64>,
}

/// Flags records whose token count, ARI, or similarity z-score exceeds the
/// threshold in magnitude, plus every non-adherent and hedged record.
/// Sorted by |z| descending; z-less flags follow, ordered by (sample, model).
pub fn flag_outliers(inputs: &[OutlierInput], z_threshold: f64) -> Vec<OutlierFlag> {
    let zscores = |values: &[Option<f64>]| -> Vec<Option<f64>> {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let stats = match MeanStd::compute(&present) {
            Ok(s) => s,
            Err(_) => return vec![None; values.len()],
        };
        values
            .iter()
            .map(|v| {
                v.map(|v| {
                    if stats.std == 0.0 {
                        0.0
                    } else {
                        (v - stats.mean) / stats.std
                    }
                })
            })
            .collect()
    };

    let tokens: Vec<Option<f64>> = inputs
        .iter()
        .map(|i| Some(i.record.parsed.token_count as f64))
        .collect();
    let aris: Vec<Option<f64>> = inputs.iter().map(|i| ari(&i.record.parsed).ok()).collect();
    let sims: Vec<Option<f64>> = inputs.iter().map(|i| i.similarity).collect();
    let token_z = zscores(&tokens);
    let ari_z = zscores(&aris);
    let sim_z = zscores(&sims);

    let mut flags = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let candidates = [
            (OutlierReason::TokenCount, token_z[i]),
            (OutlierReason::Ari, ari_z[i]),
            (OutlierReason::Similarity, sim_z[i]),
        ];
        let exceeded = candidates
            .iter()
            .filter_map(|(reason, z)| z.map(|z| (*reason, z)))
            .filter(|(_, z)| z.abs() > z_threshold)
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        let reason_z = match exceeded {
            Some((reason, z)) => Some((reason, Some(z))),
            None if !input.record.parsed.adherent => Some((OutlierReason::NonAdherent, None)),
            None if input.record.parsed.hedged => Some((OutlierReason::Hedged, None)),
            None => None,
        };
        if let Some((reason, z)) = reason_z {
            flags.push(OutlierFlag {
                sample_id: input.record.sample_id.clone(),
                model_name: input.record.model_name.clone(),
                reason,
                z,
                token_count: input.record.parsed.token_count,
                ari: aris[i],
                similarity: input.similarity,
            });
        }
    }
    sort_outlier_flags(&mut flags);
    flags
}

/// Orders flags by |z| descending; z-less flags follow, by (sample, model).
pub fn sort_outlier_flags(flags: &mut [OutlierFlag]) {
    flags.sort_by(|a, b| {
        let za = a.z.map(f64::abs);
        let zb = b.z.map(f64::abs);
        match (za, zb) {
            (Some(x), Some(y)) => y
                .total_cmp(&x)
                .then_with(|| a.sample_id.cmp(&b.sample_id))
                .then_with(|| a.model_name.cmp(&b.model_name)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a
                .sample_id
                .cmp(&b.sample_id)
                .then_with(|| a.model_name.cmp(&b.model_name)),
        }
    });
}

/// Per-subtask F1 row inside a report, canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtaskF1 {
    pub subtask: Subtask,
    #[serde(flatten)]
    pub result: F1Result,
}

/// Joint correct ratios over the three scopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectRatios {
    pub phq9: f64,
    pub phq9_d: f64,
    pub s_phq9_d: f64,
}

/// All metrics for one model's record batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub scheme: ExtractionScheme,
    pub record_count: usize,
    pub adherence: f64,
    pub f1: Vec<SubtaskF1>,
    pub correct: CorrectRatios,
    pub ari: MeanStd,
    /// Records whose ARI was not computable (no words or sentences).
    pub ari_skipped: usize,
    pub length: MeanStd,
    pub similarity: Option<MeanStd>,
    pub group_confusion: GroupConfusion,
    /// How absent labels entered the F1 confusions.
    pub absent_policy: AbsentPolicy,
    /// Spread convention used throughout this report.
    pub std_convention: String,
}

/// Computes the full metric report for one model's records with the default
/// absent-label policy. Similarities, when supplied, are aligned with the
/// records; entries may be absent for records that produced no text.
pub fn compute_metric_report(
    model: &str,
    records: &[RunRecord],
    gold: &GoldMap,
    groups: &GroupMap,
    scheme: ExtractionScheme,
    similarities: Option<&[Option<f64>]>,
) -> Result<MetricReport> {
    compute_metric_report_with_policy(
        model,
        records,
        gold,
        groups,
        scheme,
        similarities,
        AbsentPolicy::Exclude,
    )
}

pub fn compute_metric_report_with_policy(
    model: &str,
    records: &[RunRecord],
    gold: &GoldMap,
    groups: &GroupMap,
    scheme: ExtractionScheme,
    similarities: Option<&[Option<f64>]>,
    absent_policy: AbsentPolicy,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::UndefinedRatio);
    }
    if let Some(similarities) = similarities {
        if similarities.len() != records.len() {
            return Err(Error::Validation(format!(
                "similarity count {} does not match record count {}",
                similarities.len(),
                records.len()
            )));
        }
    }

    let f1 = Subtask::ALL
        .iter()
        .map(|subtask| {
            Ok(SubtaskF1 {
                subtask: *subtask,
                result: micro_f1_with_policy(records, gold, *subtask, scheme, absent_policy)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ari_values: Vec<f64> = records.iter().filter_map(|r| ari(&r.parsed).ok()).collect();
    let ari_stats = MeanStd::compute(&ari_values).unwrap_or(MeanStd { mean: 0.0, std: 0.0 });

    Ok(MetricReport {
        model: model.to_string(),
        scheme,
        record_count: records.len(),
        adherence: adherence_rate(records)?,
        f1,
        correct: CorrectRatios {
            phq9: correct_ratio(records, gold, Scope::Phq9, scheme)?,
            phq9_d: correct_ratio(records, gold, Scope::Phq9D, scheme)?,
            s_phq9_d: correct_ratio(records, gold, Scope::SPhq9D, scheme)?,
        },
        ari: ari_stats,
        ari_skipped: records.len() - ari_values.len(),
        length: length_stats(records)?,
        similarity: similarities.and_then(|sims| {
            let present: Vec<f64> = sims.iter().flatten().copied().collect();
            MeanStd::compute(&present).ok()
        }),
        group_confusion: group_confusion(records, gold, groups, scheme)?,
        absent_policy,
        std_convention: "population".to_string(),
    })
}
