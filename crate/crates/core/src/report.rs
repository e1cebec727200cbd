//! Rendering of metric reports into aligned text tables, machine-readable
//! JSON, and CSV exports. Everything here formats values computed by the
//! metrics module; no metric is recomputed during rendering.

use serde::Serialize;

use crate::corpus::DistributionTable;
use crate::error::{Error, Result};
use crate::metrics::{GroupConfusion, MetricReport, OutlierFlag, RunRecord};
use crate::subtask::Subtask;

/// Row labels of the few-shot evaluation table, in order.
pub const TABLE2_ROWS: [&str; 15] = [
    "A", "D", "S", "S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9", "PHQ9", "PHQ9+D",
    "S+PHQ9+D",
];

/// Converts a ratio to a percentage rounded to one decimal place.
fn percent(ratio: f64) -> f64 {
    (ratio * 1000.0).round() / 10.0
}

/// Rendered table pair: aligned text plus JSON carrying identical cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub json: serde_json::Value,
}

fn report_for<'a>(reports: &'a [MetricReport], model: &str) -> Result<&'a MetricReport> {
    reports
        .iter()
        .find(|r| r.model == model)
        .ok_or_else(|| Error::MissingModel(model.to_string()))
}

fn table2_cell(report: &MetricReport, row: &str) -> Option<f64> {
    match row {
        "A" => Some(percent(report.adherence)),
        "PHQ9" => Some(percent(report.correct.phq9)),
        "PHQ9+D" => Some(percent(report.correct.phq9_d)),
        "S+PHQ9+D" => Some(percent(report.correct.s_phq9_d)),
        name => {
            let subtask = Subtask::from_name(name)?;
            report
                .f1
                .iter()
                .find(|entry| entry.subtask == subtask)
                .and_then(|entry| entry.result.f1)
                .map(percent)
        }
    }
}

fn align_columns(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut write_row = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                out.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                out.push_str(&format!("  {:>width$}", cell, width = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    write_row(header);
    for row in rows {
        write_row(row);
    }
    out
}

fn format_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.1}"),
        None => "-".to_string(),
    }
}

/// Renders the few-shot evaluation table: adherence, the eleven subtask F1
/// rows, and the three joint correct ratios, one column per model.
pub fn render_table2(reports: &[MetricReport], models: &[String]) -> Result<RenderedTable> {
    let columns: Vec<&MetricReport> = models
        .iter()
        .map(|m| report_for(reports, m))
        .collect::<Result<_>>()?;

    let mut json_rows = Vec::new();
    let mut text_rows = Vec::new();
    for row in TABLE2_ROWS {
        let values: Vec<Option<f64>> = columns.iter().map(|r| table2_cell(r, row)).collect();
        text_rows.push(
            std::iter::once(row.to_string())
                .chain(values.iter().map(|v| format_cell(*v)))
                .collect::<Vec<_>>(),
        );
        json_rows.push(serde_json::json!({ "metric": row, "values": values }));
    }
    let header: Vec<String> = std::iter::once("metric".to_string())
        .chain(models.iter().cloned())
        .collect();
    Ok(RenderedTable {
        text: align_columns(&header, &text_rows),
        json: serde_json::json!({ "columns": models, "rows": json_rows }),
    })
}

/// Renders the keyword-group bias table: FP/FN rates per group, one row per
/// labeled condition.
pub fn render_bias_table(rows: &[(String, GroupConfusion)]) -> RenderedTable {
    let header: Vec<String> = ["condition", "MD FP%", "MD FN%", "NMD FP%", "NMD FN%"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut text_rows = Vec::new();
    let mut json_rows = Vec::new();
    for (label, confusion) in rows {
        let cells = [
            confusion.md.fp_rate.map(percent),
            confusion.md.fn_rate.map(percent),
            confusion.nmd.fp_rate.map(percent),
            confusion.nmd.fn_rate.map(percent),
        ];
        text_rows.push(
            std::iter::once(label.clone())
                .chain(cells.iter().map(|c| format_cell(*c)))
                .collect::<Vec<_>>(),
        );
        json_rows.push(serde_json::json!({
            "condition": label,
            "md_fp": cells[0],
            "md_fn": cells[1],
            "nmd_fp": cells[2],
            "nmd_fn": cells[3],
        }));
    }
    RenderedTable {
        text: align_columns(&header, &text_rows),
        json: serde_json::json!({ "rows": json_rows }),
    }
}

/// Renders the annotation distribution: per-stratum Yes/No percentages for
/// each subtask, with the keyword-group split as the final row.
pub fn render_distribution_table(table: &DistributionTable) -> RenderedTable {
    let mut header = vec!["annotation".to_string()];
    for stratum in &table.strata {
        let name = format!(
            "D={}/S={}",
            stratum.d_class, stratum.s_value
        );
        header.push(format!("{name} No"));
        header.push(format!("{name} Yes"));
    }
    let mut text_rows = Vec::new();
    let mut count_row = vec!["count".to_string()];
    for stratum in &table.strata {
        count_row.push(stratum.count.to_string());
        count_row.push(String::new());
    }
    text_rows.push(count_row);
    for subtask in Subtask::ALL {
        let mut row = vec![subtask.name().to_string()];
        for stratum in &table.strata {
            let share = &stratum.per_subtask[subtask.index()];
            row.push(format!("{:.1}", share.no_pct));
            row.push(format!("{:.1}", share.yes_pct));
        }
        text_rows.push(row);
    }
    let mut group_row = vec!["NMD/MD".to_string()];
    for stratum in &table.strata {
        group_row.push(format!("{:.1}", stratum.nmd_pct));
        group_row.push(format!("{:.1}", stratum.md_pct));
    }
    text_rows.push(group_row);

    RenderedTable {
        text: align_columns(&header, &text_rows),
        json: serde_json::to_value(table).expect("distribution table serializes"),
    }
}

/// Confusion quadrant counts per model per keyword group, as CSV.
pub fn confusion_csv(reports: &[MetricReport]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["model", "group", "tp", "fp", "fn", "tn", "unlabeled"])?;
    for report in reports {
        for (group, rates) in [
            ("MD", &report.group_confusion.md),
            ("NMD", &report.group_confusion.nmd),
        ] {
            writer.write_record([
                report.model.as_str(),
                group,
                &rates.confusion.tp.to_string(),
                &rates.confusion.fp.to_string(),
                &rates.confusion.fn_.to_string(),
                &rates.confusion.tn.to_string(),
                &rates.unlabeled_count.to_string(),
            ])?;
        }
    }
    finish_csv(writer)
}

/// One row per outlier flag, sorted as flagged, with the raw response text
/// escaped by the CSV writer.
pub fn export_outliers(flags: &[OutlierFlag], records: &[RunRecord]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "sample_id",
        "model",
        "reason",
        "z",
        "token_count",
        "ari",
        "similarity",
        "raw_text",
    ])?;
    for flag in flags {
        let raw_text = records
            .iter()
            .find(|r| r.sample_id == flag.sample_id && r.model_name == flag.model_name)
            .map(|r| r.raw_text.as_str())
            .unwrap_or("");
        let optional = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writer.write_record([
            flag.sample_id.as_str(),
            flag.model_name.as_str(),
            flag.reason.as_str(),
            &optional(flag.z),
            &flag.token_count.to_string(),
            &optional(flag.ari),
            &optional(flag.similarity),
            raw_text,
        ])?;
    }
    finish_csv(writer)
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Internal(format!("csv writer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(format!("csv not utf-8: {e}")))
}

/// Serializes any report document as pretty JSON with a trailing newline.
pub fn to_json_document<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Every rendered artifact of one evaluation run. Assembly only formats
/// values already computed upstream.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub table1_distribution: RenderedTable,
    pub table2_fewshot: RenderedTable,
    pub table4_bias: RenderedTable,
    pub figure_confusion_csv: String,
    pub outliers_csv: Option<String>,
}

impl ReportBundle {
    pub fn assemble(
        reports: &[MetricReport],
        models: &[String],
        distribution: &DistributionTable,
        outliers: Option<(&[OutlierFlag], &[RunRecord])>,
    ) -> Result<ReportBundle> {
        let bias_rows: Vec<(String, GroupConfusion)> = reports
            .iter()
            .map(|r| (r.model.clone(), r.group_confusion))
            .collect();
        Ok(ReportBundle {
            table1_distribution: render_distribution_table(distribution),
            table2_fewshot: render_table2(reports, models)?,
            table4_bias: render_bias_table(&bias_rows),
            figure_confusion_csv: confusion_csv(reports)?,
            outliers_csv: outliers
                .map(|(flags, records)| export_outliers(flags, records))
                .transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KeywordGroup;
    use crate::metrics::{
        compute_metric_report, GoldMap, GroupMap, RecordStatus, RunRecord,
    };
    use crate::subtask::{ExtractionScheme, LabelValue, SubtaskLabelSet};

    fn full_response(values: [LabelValue; 11]) -> String {
        Subtask::ALL
            .iter()
            .zip(values)
            .map(|(s, v)| {
                format!("{}: {}\n", s.name(), if v == LabelValue::Yes { "Yes" } else { "No" })
            })
            .collect()
    }

    fn perfect_report(model: &str) -> MetricReport {
        let values = [LabelValue::Yes; 11];
        let records = vec![
            RunRecord::from_raw("a", model, full_response(values), RecordStatus::Ok),
            RunRecord::from_raw("b", model, full_response(values), RecordStatus::Ok),
        ];
        let gold: GoldMap = [
            ("a".to_string(), SubtaskLabelSet::complete(values)),
            ("b".to_string(), SubtaskLabelSet::complete(values)),
        ]
        .into_iter()
        .collect();
        let groups: GroupMap = [
            ("a".to_string(), KeywordGroup::Md),
            ("b".to_string(), KeywordGroup::Nmd),
        ]
        .into_iter()
        .collect();
        compute_metric_report(model, &records, &gold, &groups, ExtractionScheme::Ir, None).unwrap()
    }

    #[test]
    fn table2_has_canonical_rows_and_columns() {
        let reports = vec![perfect_report("alpha"), perfect_report("beta")];
        let models = vec!["alpha".to_string(), "beta".to_string()];
        let rendered = render_table2(&reports, &models).unwrap();

        let lines: Vec<&str> = rendered.text.lines().collect();
        assert_eq!(lines.len(), 16); // header + 15 rows
        let row_labels: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(row_labels, TABLE2_ROWS.to_vec());

        // Perfect predictions: every cell 100.0.
        for row in &lines[1..] {
            let cells: Vec<&str> = row.split_whitespace().skip(1).collect();
            assert_eq!(cells, vec!["100.0", "100.0"], "row {row}");
        }
    }

    #[test]
    fn table2_missing_model_errors() {
        let reports = vec![perfect_report("alpha")];
        let models = vec!["alpha".to_string(), "gamma".to_string()];
        let err = render_table2(&reports, &models).unwrap_err();
        assert!(matches!(err, Error::MissingModel(m) if m == "gamma"));
    }

    #[test]
    fn table2_text_and_json_agree_cell_for_cell() {
        let reports = vec![perfect_report("alpha")];
        let models = vec!["alpha".to_string()];
        let rendered = render_table2(&reports, &models).unwrap();

        let rows = rendered.json["rows"].as_array().unwrap();
        for (line, row) in rendered.text.lines().skip(1).zip(rows) {
            let text_cells: Vec<&str> = line.split_whitespace().skip(1).collect();
            let json_values = row["values"].as_array().unwrap();
            assert_eq!(text_cells.len(), json_values.len());
            for (text_cell, json_value) in text_cells.iter().zip(json_values) {
                match json_value.as_f64() {
                    Some(v) => assert_eq!(text_cell.parse::<f64>().unwrap(), v),
                    None => assert_eq!(*text_cell, "-"),
                }
            }
        }
    }

    #[test]
    fn rendering_is_idempotent() {
        let reports = vec![perfect_report("alpha")];
        let models = vec!["alpha".to_string()];
        let first = render_table2(&reports, &models).unwrap();
        let second = render_table2(&reports, &models).unwrap();
        assert_eq!(first.text, second.text);
        assert_eq!(first.json, second.json);
    }

    #[test]
    fn outlier_csv_rows() {
        let flags = vec![];
        let records: Vec<RunRecord> = vec![];
        let csv = export_outliers(&flags, &records).unwrap();
        assert_eq!(csv.lines().count(), 1); // header only

        let record = RunRecord::from_raw("s1", "m", "no labels, \"quoted\" text", RecordStatus::Ok);
        let flags = vec![crate::metrics::OutlierFlag {
            sample_id: "s1".into(),
            model_name: "m".into(),
            reason: crate::metrics::OutlierReason::NonAdherent,
            z: None,
            token_count: 5,
            ari: None,
            similarity: None,
        }];
        let csv = export_outliers(&flags, &[record]).unwrap();
        let mut lines = csv.lines();
        lines.next();
        let row = lines.next().unwrap();
        assert!(row.starts_with("s1,m,non_adherent,,5,,,"));
        // RFC-4180 escaping of the embedded quotes.
        assert!(row.contains("\"\"quoted\"\""));
    }

    #[test]
    fn bias_table_undefined_rates_render_as_dash() {
        let report = perfect_report("alpha");
        let rows = vec![("alpha".to_string(), report.group_confusion)];
        let rendered = render_bias_table(&rows);
        // MD group: one gold-positive sample, no gold-negative -> FP undefined.
        let line = rendered.text.lines().nth(1).unwrap();
        assert!(line.contains('-'));
    }

    #[test]
    fn five_model_table_layout() {
        let models: Vec<String> = (0..5).map(|i| format!("model{i}")).collect();
        let reports: Vec<MetricReport> = models.iter().map(|m| perfect_report(m)).collect();
        let rendered = render_table2(&reports, &models).unwrap();
        let lines: Vec<&str> = rendered.text.lines().collect();
        assert_eq!(lines.len(), 16); // header + 15 rows
        for line in &lines {
            assert_eq!(line.split_whitespace().count(), 6); // label + 5 columns
        }
    }

    #[test]
    fn bundle_assembles_all_artifacts() {
        use crate::corpus::{Corpus, CorpusProvenance, Sample};

        let report = perfect_report("alpha");
        let models = vec!["alpha".to_string()];
        let corpus = Corpus {
            samples: vec![Sample {
                id: "a".into(),
                text: "depressed text".into(),
                gold: SubtaskLabelSet::complete([LabelValue::Yes; 11]),
                severity_label: "severe".into(),
                confidence: 0.99,
                keyword_group: KeywordGroup::Md,
            }],
            provenance: CorpusProvenance {
                source_path: "x".into(),
                confidence_threshold: 0.95,
                per_class_count: 1,
                seed: 0,
            },
        };
        let distribution = crate::corpus::annotation_distribution(&corpus).unwrap();
        let bundle = ReportBundle::assemble(&[report], &models, &distribution, None).unwrap();
        assert!(bundle.table2_fewshot.text.starts_with("metric"));
        assert!(bundle.table1_distribution.text.contains("NMD/MD"));
        assert!(bundle.figure_confusion_csv.starts_with("model,group"));
        assert!(bundle.outliers_csv.is_none());
    }
}
