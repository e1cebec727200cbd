//! Stage implementations. Every stage reads and writes only inside the run
//! directory (plus the shared cache root) and is a pure function of the
//! resolved configuration and its upstream artifacts.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use phqeval::corpus::{annotation_distribution, load_corpus, Corpus, KeywordLexicon};
use phqeval::curation::{
    build_dpo_pairs, build_sft_dataset, emit_eval_split, partition, qualify_responses,
    write_dpo_file, write_eval_split, write_sft_file, PartitionResult, VerdictMatrix,
};
use phqeval::gateway::{
    run_fewshot, ChatClient, Embedder, RawRunRecord, RawStatus, ResponseCache,
};
use phqeval::metrics::{
    self, compute_metric_report_with_policy, GoldMap, GroupMap, MetricReport, OutlierInput,
    RecordStatus, RunRecord,
};
use phqeval::prompt::{build_fewshot_messages, PromptAssets};
use phqeval::report::{export_outliers, to_json_document, ReportBundle};
use phqeval::subtask::ExtractionScheme;

use crate::config::Config;

pub struct Ctx {
    pub config: Config,
    pub digest: String,
    pub run_dir: PathBuf,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const RAW_RECORDS_FILE: &str = "records_raw.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const METRICS_FILE: &str = "eval/metrics.json";
pub const RECORD_STATS_FILE: &str = "eval/record_stats.jsonl";
pub const PARTITION_FILE: &str = "partition.json";
pub const SFT_FILE: &str = "datasets/sft.jsonl";
pub const DPO_FILE: &str = "datasets/dpo.jsonl";
pub const EVAL_SPLIT_FILE: &str = "datasets/eval_split.json";
pub const REPORT_DIR: &str = "report";
pub const OUTLIERS_FILE: &str = "report/outliers.csv";

impl Ctx {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<std::fs::File>> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(&path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn lexicon(&self) -> Result<KeywordLexicon> {
        match &self.config.lexicon {
            Some(path) => KeywordLexicon::load(path)
                .with_context(|| format!("cannot load lexicon {}", path.display())),
            None => Ok(KeywordLexicon::default()),
        }
    }

    fn assets(&self) -> Result<PromptAssets> {
        match &self.config.assets_dir {
            Some(dir) => PromptAssets::load_dir(dir)
                .with_context(|| format!("cannot load prompt assets from {}", dir.display())),
            None => Ok(PromptAssets::builtin().context("bundled prompt assets are invalid")?),
        }
    }

    fn client(&self) -> Result<ChatClient> {
        Ok(ChatClient::new(
            self.config.retry_policy(),
            Duration::from_secs(self.config.run.request_timeout_secs),
        )?)
    }

    fn cache(&self) -> Result<ResponseCache> {
        Ok(ResponseCache::new(self.config.cache_root(&self.run_dir))?)
    }

    fn corpus(&self) -> Result<Corpus> {
        let path = self.path(CORPUS_FILE);
        let file = std::fs::File::open(&path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        Ok(Corpus::read_snapshot(BufReader::new(file))?)
    }

    fn records(&self) -> Result<Vec<RunRecord>> {
        read_jsonl(&self.path(RECORDS_FILE))
    }

    fn metric_reports(&self) -> Result<Vec<MetricReport>> {
        let path = self.path(METRICS_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn scheme(&self) -> Result<ExtractionScheme> {
        self.config.scheme()
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file =
        std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line)
                .with_context(|| format!("bad record at {}:{}", path.display(), i + 1))?,
        );
    }
    Ok(items)
}

fn gold_map(corpus: &Corpus) -> GoldMap {
    corpus
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.gold))
        .collect()
}

fn group_map(corpus: &Corpus) -> GroupMap {
    corpus
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.keyword_group))
        .collect()
}

pub fn stage_ingest(ctx: &Ctx) -> Result<()> {
    let lexicon = ctx.lexicon()?;
    let corpus = load_corpus(
        &ctx.config.corpus.path,
        &ctx.config.corpus_format(),
        &lexicon,
        ctx.config.corpus.confidence_threshold,
        ctx.config.corpus.per_class_count,
        ctx.config.corpus.seed,
    )?;
    let mut writer = ctx.create(CORPUS_FILE)?;
    corpus.write_snapshot(&mut writer)?;
    writer.flush()?;
    eprintln!("ingest: {} samples -> {}", corpus.len(), ctx.path(CORPUS_FILE).display());
    Ok(())
}

pub fn prompt_preview(ctx: &Ctx, sample_id: Option<&str>, index: usize) -> Result<()> {
    let corpus = ctx.corpus()?;
    let sample = match sample_id {
        Some(id) => corpus
            .get(id)
            .with_context(|| format!("no sample with id '{id}'"))?,
        None => corpus
            .samples
            .get(index)
            .with_context(|| format!("sample index {index} out of range ({} samples)", corpus.len()))?,
    };
    let assets = ctx.assets()?;
    let instruction = assets.instruction_text()?;
    let sequence = build_fewshot_messages(&sample.text, &instruction, &assets.examples)?;
    println!("# prompt for sample {} ({} messages)", sample.id, sequence.len());
    for message in sequence.messages() {
        println!("--- {} ---", message.role);
        println!("{}", message.content);
    }
    Ok(())
}

pub fn stage_run(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let assets = ctx.assets()?;
    let models = ctx.config.model_configs();
    // Fail fast on missing API keys rather than recording N failures.
    for model in &models {
        if let Some(env_name) = &model.api_key_env {
            if std::env::var(env_name).is_err() {
                bail!("environment variable '{env_name}' (api key for model '{}') is not set", model.name);
            }
        }
    }
    let client = ctx.client()?;
    let cache = ctx.cache()?;
    let records = run_fewshot(
        &client,
        &corpus,
        &models,
        &assets,
        &cache,
        ctx.config.run.parallelism,
    )?;

    let ok = records.iter().filter(|r| r.status == RawStatus::Ok).count();
    let cached = records.iter().filter(|r| r.from_cache).count();
    let mut writer = ctx.create(RAW_RECORDS_FILE)?;
    for record in &records {
        writeln!(writer, "{}", serde_json::to_string(record)?)?;
    }
    writer.flush()?;
    eprintln!(
        "run: {} records ({} ok, {} failed, {} from cache) -> {}",
        records.len(),
        ok,
        records.len() - ok,
        cached,
        ctx.path(RAW_RECORDS_FILE).display()
    );
    Ok(())
}

pub fn stage_parse(ctx: &Ctx) -> Result<()> {
    let raw: Vec<RawRunRecord> = read_jsonl(&ctx.path(RAW_RECORDS_FILE))?;
    let mut writer = ctx.create(RECORDS_FILE)?;
    let mut adherent = 0usize;
    for record in &raw {
        let status = match record.status {
            RawStatus::Ok => RecordStatus::Ok,
            RawStatus::Failed => RecordStatus::Failed,
        };
        let parsed = RunRecord::from_raw(
            record.sample_id.clone(),
            record.model_name.clone(),
            record.raw_text.clone(),
            status,
        );
        if parsed.parsed.adherent {
            adherent += 1;
        }
        writeln!(writer, "{}", serde_json::to_string(&parsed)?)?;
    }
    writer.flush()?;
    eprintln!(
        "parse: {} records ({adherent} adherent) -> {}",
        raw.len(),
        ctx.path(RECORDS_FILE).display()
    );
    Ok(())
}

/// Per-record surface statistics kept alongside the metric reports so that
/// outlier export never recomputes metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordStat {
    pub sample_id: String,
    pub model: String,
    pub token_count: usize,
    pub ari: Option<f64>,
    pub similarity: Option<f64>,
    pub adherent: bool,
    pub hedged: bool,
}

pub fn stage_eval(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let records = ctx.records()?;
    let gold = gold_map(&corpus);
    let groups = group_map(&corpus);
    let scheme = ctx.scheme()?;

    // Per-record similarity against the worked-example responses, when an
    // embedding source is configured.
    let similarities: Vec<Option<f64>> = match ctx.config.embedding_source() {
        None => vec![None; records.len()],
        Some(source) => {
            let assets = ctx.assets()?;
            let client = ctx.client()?;
            let cache = ctx.cache()?;
            let embedder = Embedder {
                source: &source,
                client: &client,
                cache: &cache,
            };
            let references: Vec<String> = assets
                .examples
                .iter()
                .map(|e| e.ideal_response.clone())
                .collect();
            let reference_vectors = embedder.embed(&references)?;
            let texts: Vec<String> = records
                .iter()
                .filter(|r| !r.raw_text.is_empty())
                .map(|r| r.raw_text.clone())
                .collect();
            let vectors = embedder.embed(&texts)?;
            let per_text = metrics::embed_similarity(&vectors, &reference_vectors)?;
            let mut iter = per_text.into_iter();
            records
                .iter()
                .map(|r| {
                    if r.raw_text.is_empty() {
                        None
                    } else {
                        iter.next()
                    }
                })
                .collect()
        }
    };

    let mut reports = Vec::new();
    for model in ctx.config.model_names() {
        let indexed: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.model_name == model)
            .map(|(i, _)| i)
            .collect();
        if indexed.is_empty() {
            bail!("no records for configured model '{model}'");
        }
        let model_records: Vec<RunRecord> =
            indexed.iter().map(|i| records[*i].clone()).collect();
        let model_sims: Vec<Option<f64>> = indexed.iter().map(|i| similarities[*i]).collect();
        let with_sims = ctx.config.embedding_source().is_some();
        reports.push(compute_metric_report_with_policy(
            &model,
            &model_records,
            &gold,
            &groups,
            scheme,
            if with_sims { Some(&model_sims) } else { None },
            ctx.config.absent_policy()?,
        )?);
    }

    let mut writer = ctx.create(METRICS_FILE)?;
    writer.write_all(to_json_document(&reports)?.as_bytes())?;
    writer.flush()?;

    let mut stats_writer = ctx.create(RECORD_STATS_FILE)?;
    for (record, similarity) in records.iter().zip(&similarities) {
        let stat = RecordStat {
            sample_id: record.sample_id.clone(),
            model: record.model_name.clone(),
            token_count: record.parsed.token_count,
            ari: metrics::ari(&record.parsed).ok(),
            similarity: *similarity,
            adherent: record.parsed.adherent,
            hedged: record.parsed.hedged,
        };
        writeln!(stats_writer, "{}", serde_json::to_string(&stat)?)?;
    }
    stats_writer.flush()?;
    eprintln!(
        "eval: {} models x {} records -> {}",
        reports.len(),
        records.len(),
        ctx.path(METRICS_FILE).display()
    );
    Ok(())
}

/// Serialized partition stage output.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub kind: String,
    pub digest: String,
    pub result: PartitionResult,
    pub qualified_ir_count: usize,
    pub qualified_sr_count: usize,
    pub qualified_counts_by_model_ir: BTreeMap<String, usize>,
    pub qualified_counts_by_model_sr: BTreeMap<String, usize>,
    /// (sample, model) keys qualified under exactly one scheme.
    pub ir_only: Vec<(String, String)>,
    pub sr_only: Vec<(String, String)>,
}

pub fn stage_partition(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let records = ctx.records()?;
    let gold = gold_map(&corpus);
    let scheme = ctx.scheme()?;
    let model_names = ctx.config.model_names();

    let matrix = VerdictMatrix::from_records(&records, &gold, scheme, &model_names)?;
    let result = partition(matrix, scheme)?;

    let qualified_ir = qualify_responses(&records, &gold, ExtractionScheme::Ir)?;
    let qualified_sr = qualify_responses(&records, &gold, ExtractionScheme::Sr)?;
    let document = PartitionDocument {
        kind: "partition".into(),
        digest: result.digest(),
        qualified_ir_count: qualified_ir.len(),
        qualified_sr_count: qualified_sr.len(),
        qualified_counts_by_model_ir: qualified_ir.counts_by_model.clone(),
        qualified_counts_by_model_sr: qualified_sr.counts_by_model.clone(),
        ir_only: qualified_ir.difference(&qualified_sr),
        sr_only: qualified_sr.difference(&qualified_ir),
        result,
    };

    let mut writer = ctx.create(PARTITION_FILE)?;
    writer.write_all(to_json_document(&document)?.as_bytes())?;
    writer.flush()?;
    eprintln!(
        "partition ({}): |T_C|={} |T_P|={} |T_W|={} -> {}",
        scheme,
        document.result.t_c.len(),
        document.result.t_p.len(),
        document.result.t_w.len(),
        ctx.path(PARTITION_FILE).display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitKind {
    Sft,
    Dpo,
    EvalSplit,
}

fn partition_document(ctx: &Ctx) -> Result<PartitionDocument> {
    let path = ctx.path(PARTITION_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn prompts_for(
    ctx: &Ctx,
    corpus: &Corpus,
    ids: impl Iterator<Item = String>,
) -> Result<phqeval::curation::PromptMap> {
    let assets = ctx.assets()?;
    let instruction = assets.instruction_text()?;
    let by_id: BTreeMap<&str, &str> = corpus
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.text.as_str()))
        .collect();
    let mut prompts = phqeval::curation::PromptMap::new();
    for id in ids {
        let text = by_id
            .get(id.as_str())
            .with_context(|| format!("partition references unknown sample '{id}'"))?;
        prompts.insert(
            id,
            build_fewshot_messages(text, &instruction, &assets.examples)?,
        );
    }
    Ok(prompts)
}

pub fn stage_emit(ctx: &Ctx, kind: EmitKind) -> Result<()> {
    let document = partition_document(ctx)?;
    let result = &document.result;
    let scheme = ctx.scheme()?;
    if result.scheme != scheme {
        bail!(
            "partition was computed under scheme {} but the current scheme is {scheme}",
            result.scheme
        );
    }

    match kind {
        EmitKind::Sft => {
            let corpus = ctx.corpus()?;
            let records = ctx.records()?;
            let gold = gold_map(&corpus);
            let qualified = qualify_responses(&records, &gold, scheme)?;
            let include_easy = ctx.config.eval.include_easy_in_sft;
            let mut ids: Vec<String> = result.t_p.clone();
            if include_easy {
                ids.extend(result.t_c.iter().cloned());
            }
            let prompts = prompts_for(ctx, &corpus, ids.into_iter())?;
            let rows = build_sft_dataset(result, &qualified, &prompts, include_easy)?;
            if rows.is_empty() {
                eprintln!("warning: SFT dataset is empty");
            }
            let mut writer = ctx.create(SFT_FILE)?;
            write_sft_file(&mut writer, &rows, scheme, &document.digest)?;
            writer.flush()?;
            eprintln!("emit sft: {} rows -> {}", rows.len(), ctx.path(SFT_FILE).display());
        }
        EmitKind::Dpo => {
            let corpus = ctx.corpus()?;
            let records = ctx.records()?;
            let gold = gold_map(&corpus);
            let policy = ctx.config.pairing()?;
            let prompts = prompts_for(ctx, &corpus, result.t_p.iter().cloned())?;
            let pairs = build_dpo_pairs(result, &records, &gold, scheme, policy, &prompts)?;
            if pairs.is_empty() {
                eprintln!("warning: DPO dataset is empty");
            }
            let mut writer = ctx.create(DPO_FILE)?;
            write_dpo_file(&mut writer, &pairs, scheme, policy, &document.digest)?;
            writer.flush()?;
            eprintln!("emit dpo: {} pairs -> {}", pairs.len(), ctx.path(DPO_FILE).display());
        }
        EmitKind::EvalSplit => {
            let split = emit_eval_split(result);
            if split.eval.is_empty() {
                eprintln!("warning: evaluation split is empty (no all-wrong samples)");
            }
            let mut writer = ctx.create(EVAL_SPLIT_FILE)?;
            write_eval_split(&mut writer, &split, scheme, &document.digest)?;
            writer.flush()?;
            eprintln!(
                "emit eval-split: {} eval ids, {} easy-reference ids -> {}",
                split.eval.len(),
                split.easy_reference.len(),
                ctx.path(EVAL_SPLIT_FILE).display()
            );
        }
    }
    Ok(())
}

pub fn stage_report(ctx: &Ctx) -> Result<()> {
    let reports = ctx.metric_reports()?;
    let corpus = ctx.corpus()?;
    let models = ctx.config.model_names();
    let distribution = annotation_distribution(&corpus)?;
    let bundle = ReportBundle::assemble(&reports, &models, &distribution, None)?;

    let artifacts: Vec<(&str, String)> = vec![
        ("report/table2.txt", bundle.table2_fewshot.text),
        ("report/table2.json", to_json_document(&bundle.table2_fewshot.json)?),
        ("report/table1.txt", bundle.table1_distribution.text),
        ("report/table1.json", to_json_document(&bundle.table1_distribution.json)?),
        ("report/bias.txt", bundle.table4_bias.text),
        ("report/bias.json", to_json_document(&bundle.table4_bias.json)?),
        ("report/confusion.csv", bundle.figure_confusion_csv),
    ];
    for (rel, content) in &artifacts {
        let mut writer = ctx.create(rel)?;
        writer.write_all(content.as_bytes())?;
        writer.flush()?;
    }
    let manifest = serde_json::json!({
        "kind": "report",
        "config_digest": ctx.digest,
        "artifacts": artifacts.iter().map(|(rel, _)| rel).collect::<Vec<_>>(),
    });
    let mut writer = ctx.create("report/manifest.json")?;
    writer.write_all(to_json_document(&manifest)?.as_bytes())?;
    writer.flush()?;
    eprintln!("report: {} artifacts -> {}", artifacts.len() + 1, ctx.path(REPORT_DIR).display());
    Ok(())
}

pub fn stage_outliers(ctx: &Ctx) -> Result<()> {
    let records = ctx.records()?;
    let stats: Vec<RecordStat> = read_jsonl(&ctx.path(RECORD_STATS_FILE))?;
    let similarity_by_key: BTreeMap<(&str, &str), Option<f64>> = stats
        .iter()
        .map(|s| ((s.sample_id.as_str(), s.model.as_str()), s.similarity))
        .collect();

    let mut flags = Vec::new();
    for model in ctx.config.model_names() {
        let model_records: Vec<&RunRecord> =
            records.iter().filter(|r| r.model_name == model).collect();
        let inputs: Vec<OutlierInput> = model_records
            .iter()
            .map(|record| OutlierInput {
                record,
                similarity: similarity_by_key
                    .get(&(record.sample_id.as_str(), record.model_name.as_str()))
                    .copied()
                    .flatten(),
            })
            .collect();
        flags.extend(metrics::flag_outliers(&inputs, ctx.config.eval.z_threshold));
    }
    metrics::sort_outlier_flags(&mut flags);

    let csv = export_outliers(&flags, &records)?;
    let mut writer = ctx.create(OUTLIERS_FILE)?;
    writer.write_all(csv.as_bytes())?;
    writer.flush()?;
    eprintln!(
        "outliers: {} flagged -> {}",
        flags.len(),
        ctx.path(OUTLIERS_FILE).display()
    );
    Ok(())
}
