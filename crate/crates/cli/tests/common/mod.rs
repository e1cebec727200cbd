//! Shared fixtures for the binary tests: a synthetic annotated corpus with
//! known keyword groups, per-model response plans with planted error rates,
//! and helpers for driving the `phqeval` binary against a stub endpoint.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phqeval::corpus::KeywordGroup;
use phqeval::stub::{StubBehavior, StubRule, StubServer};
use phqeval::subtask::{LabelValue, Subtask, SubtaskLabelSet};

pub const MODEL_ALPHA: &str = "alpha";
pub const MODEL_BETA: &str = "beta";

/// Planted depression-decision error rates for the measured model, as
/// fractions of each (group x gold class) cell.
pub const ALPHA_FP_MD: f64 = 0.30;
pub const ALPHA_FP_NMD: f64 = 0.10;
pub const ALPHA_FN_MD: f64 = 0.04;
pub const ALPHA_FN_NMD: f64 = 0.24;

#[derive(Debug, Clone)]
#[allow(dead_code)] // test binaries consume different subsets of the plan
pub struct PlannedSample {
    pub id: String,
    pub text: String,
    pub gold: SubtaskLabelSet,
    pub group: KeywordGroup,
    pub predicted: BTreeMap<String, SubtaskLabelSet>,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub samples: Vec<PlannedSample>,
    pub per_class_count: usize,
}

fn flip(value: LabelValue) -> LabelValue {
    match value {
        LabelValue::Yes => LabelValue::No,
        LabelValue::No => LabelValue::Yes,
    }
}

fn gold_for(depressed: bool) -> SubtaskLabelSet {
    let mut values = [LabelValue::No; 11];
    if depressed {
        values[Subtask::S.index()] = LabelValue::Yes;
        values[Subtask::S2.index()] = LabelValue::Yes;
        values[Subtask::D.index()] = LabelValue::Yes;
    }
    SubtaskLabelSet::complete(values)
}

/// Four cells of `n_per_cell` samples each: (MD, NMD) x (depressed, not).
/// Error rates are planted by within-cell index, so recovered rates are
/// exact fractions of the cell size.
pub fn synthetic_corpus(n_per_cell: usize) -> Synthetic {
    let cells: [(&str, bool, KeywordGroup, &str); 4] = [
        (
            "md-d",
            true,
            KeywordGroup::Md,
            "my depression keeps me awake and i feel hopeless about it",
        ),
        (
            "md-n",
            false,
            KeywordGroup::Md,
            "the documentary about depression awareness was informative and well made",
        ),
        (
            "nd-d",
            true,
            KeywordGroup::Nmd,
            "i feel empty and nothing matters anymore no matter what i try",
        ),
        (
            "nd-n",
            false,
            KeywordGroup::Nmd,
            "lovely weather today and the garden is finally coming together",
        ),
    ];

    let mut samples = Vec::new();
    for (prefix, depressed, group, filler) in cells {
        for i in 0..n_per_cell {
            let id = format!("{prefix}-{i:03}");
            let text = format!("subject {id}: {filler}");
            let gold = gold_for(depressed);

            // Alpha: keyword-conditioned flips of D plus sporadic subtask
            // errors, all by within-cell index.
            let mut alpha = gold;
            let d_error_rate = match (group, depressed) {
                (KeywordGroup::Md, false) => ALPHA_FP_MD,
                (KeywordGroup::Nmd, false) => ALPHA_FP_NMD,
                (KeywordGroup::Md, true) => ALPHA_FN_MD,
                (KeywordGroup::Nmd, true) => ALPHA_FN_NMD,
            };
            let threshold = (d_error_rate * n_per_cell as f64).round() as usize;
            if i < threshold {
                alpha.set(Subtask::D, alpha.get(Subtask::D).map(flip));
            }
            if i % 10 == 0 {
                alpha.set(Subtask::S4, alpha.get(Subtask::S4).map(flip));
            }
            if i % 25 == 0 {
                alpha.set(Subtask::S, alpha.get(Subtask::S).map(flip));
            }

            // Beta: group-independent error pattern.
            let mut beta = gold;
            if i % 3 == 0 {
                beta.set(Subtask::D, beta.get(Subtask::D).map(flip));
            }
            if i % 7 == 0 {
                beta.set(Subtask::S3, beta.get(Subtask::S3).map(flip));
            }

            let predicted = BTreeMap::from([
                (MODEL_ALPHA.to_string(), alpha),
                (MODEL_BETA.to_string(), beta),
            ]);
            samples.push(PlannedSample {
                id,
                text,
                gold,
                group,
                predicted,
            });
        }
    }
    Synthetic {
        samples,
        per_class_count: 2 * n_per_cell,
    }
}

/// An adherent diagnosis carrying exactly the given labels.
pub fn response_text(labels: &SubtaskLabelSet) -> String {
    let mut text = String::from("The post was reviewed against each checkpoint in order.\n");
    for subtask in Subtask::ALL {
        let value = match labels.get(subtask).expect("plan labels are complete") {
            LabelValue::Yes => "Yes",
            LabelValue::No => "No",
        };
        writeln!(text, "{}: {value}, based on the wording of the post.", subtask.name()).unwrap();
    }
    text.push_str("Each label was checked once more before finalizing this analysis.\n");
    text
}

pub fn write_corpus_csv(synthetic: &Synthetic, path: &Path) {
    let mut out = String::from("id,text,label,confidence,s,s1,s2,s3,s4,s5,s6,s7,s8,s9\n");
    for sample in &synthetic.samples {
        let label = if sample.gold.get(Subtask::D) == Some(LabelValue::Yes) {
            "severe"
        } else {
            "non-depressed"
        };
        let gold_cols: Vec<&str> = Subtask::ALL[..10]
            .iter()
            .map(|s| match sample.gold.get(*s).unwrap() {
                LabelValue::Yes => "yes",
                LabelValue::No => "no",
            })
            .collect();
        out.push_str(&format!(
            "{},\"{}\",{label},0.99,{}\n",
            sample.id,
            sample.text,
            gold_cols.join(",")
        ));
    }
    std::fs::write(path, out).unwrap();
}

/// Spawns a stub serving each planned sample's per-model response.
pub fn spawn_planned_stub(synthetic: &Synthetic) -> StubServer {
    let mut rules = Vec::new();
    for sample in &synthetic.samples {
        for (model, labels) in &sample.predicted {
            rules.push(StubRule {
                contains: sample.text.clone(),
                model: Some(model.clone()),
                response: response_text(labels),
            });
        }
    }
    StubServer::spawn(StubBehavior {
        rules,
        default_response: "no plan for this input".into(),
        ..StubBehavior::default()
    })
    .unwrap()
}

// Not every test binary touches every field; `server` in particular exists
// so the stub stays alive for the environment's lifetime.
#[allow(dead_code)]
pub struct TestEnv {
    pub dir: tempfile::TempDir,
    pub config_path: PathBuf,
    pub synthetic: Synthetic,
    pub server: StubServer,
}

/// Builds a ready-to-run environment: corpus CSV, stub server, and a config
/// file pointing at both, with the cache under `dir/cache`.
pub fn setup_env(n_per_cell: usize, seed: u64) -> TestEnv {
    let dir = tempfile::tempdir().unwrap();
    let synthetic = synthetic_corpus(n_per_cell);
    write_corpus_csv(&synthetic, &dir.path().join("corpus.csv"));
    let server = spawn_planned_stub(&synthetic);

    let config = format!(
        concat!(
            "[corpus]\n",
            "path = \"corpus.csv\"\n",
            "confidence_threshold = 0.95\n",
            "per_class_count = {per_class}\n",
            "seed = {seed}\n",
            "\n",
            "[run]\n",
            "cache_root = \"{cache}\"\n",
            "parallelism = 4\n",
            "retry_attempts = 3\n",
            "retry_backoff_ms = 1\n",
            "\n",
            "[eval]\n",
            "scheme = \"sr\"\n",
            "\n",
            "[[models]]\n",
            "name = \"{alpha}\"\n",
            "endpoint = \"{url}\"\n",
            "\n",
            "[[models]]\n",
            "name = \"{beta}\"\n",
            "endpoint = \"{url}\"\n",
            "\n",
            "[embedding]\n",
            "url = \"{url}\"\n",
            "model = \"stub-embed\"\n",
        ),
        per_class = synthetic.per_class_count,
        seed = seed,
        cache = dir.path().join("cache").display(),
        alpha = MODEL_ALPHA,
        beta = MODEL_BETA,
        url = server.base_url(),
    );
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, config).unwrap();

    TestEnv {
        dir,
        config_path,
        synthetic,
        server,
    }
}

pub fn run_cli(config: &Path, run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phqeval"))
        .arg("--config")
        .arg(config)
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn assert_success(output: &Output, context: &str) {
    assert!(
        output.status.success(),
        "{context} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Runs every pipeline stage in dependency order.
pub fn run_full_pipeline(config: &Path, run_dir: &Path) {
    for args in [
        vec!["ingest"],
        vec!["run"],
        vec!["parse"],
        vec!["eval"],
        vec!["partition"],
        vec!["emit", "sft"],
        vec!["emit", "dpo"],
        vec!["emit", "eval-split"],
        vec!["report"],
        vec!["outliers"],
    ] {
        let output = run_cli(config, run_dir, &args);
        assert_success(&output, &format!("stage {args:?}"));
    }
}
