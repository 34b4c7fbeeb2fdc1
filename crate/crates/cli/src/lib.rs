//! `obs-match` command-line runner.
//!
//! Exit codes: 0 success, 1 data or validation failure, 2 usage error,
//! 3 external-service failure.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use obsmatch::analysis::{self, Analyzer, EndpointConfig, PipelineInput, PromptSet, RemoteAnalyzer};
use obsmatch::corpus::{self, load_dictionary, load_label_set, load_queries, Dictionary, QueryAnalyses};
use obsmatch::embed::{ensure_coverage, import_embeddings, required_texts, EmbeddingStore};
use obsmatch::evalkit::{self, BertScoreFields, EvalReport};
use obsmatch::matcher::{self, DecipherRecord, MatchConfig, RadicalFallback};
use obsmatch::simscore::ScoreAggregate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EXTERNAL: i32 = 3;

const DEFAULT_DIM: usize = 32;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    External(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::External(_) => EXIT_EXTERNAL,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult = Result<i32, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "obs-match", version)]
#[command(about = "Radical-pictographic dual matching for oracle bone script decipherment")]
struct Cli {
    /// TOML file supplying defaults for any flag. Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dictionary file and print its violations.
    Ingest {
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Load (or mock) embeddings and check they cover the dictionary and queries.
    ImportEmbeddings {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        embed: EmbedArgs,
        /// Also write the loaded store as `.emb.jsonl`.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Decipher every query and write `decipher.result.jsonl`.
    Decipher {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        matching: MatchArgs,
        #[command(flatten)]
        remote: RemoteArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one match trace per query under `<out>/traces/`.
        #[arg(long)]
        trace: bool,
    },
    /// Score a result file against gold labels and write `evaluate.report.json`.
    Evaluate {
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long, value_delimiter = ',', default_values_t = evalkit::HEADLINE_KS)]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value_t = FieldsArg::All)]
        bertscore_fields: FieldsArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy sweeps over top-k or dictionary scale.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        matching: MatchArgs,
        /// k values for the sweep. Defaults: 1,5,10,50,100 (topk) or --k (scale).
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        /// Named label list, `NAME=PATH`, one label per line. Repeatable.
        #[arg(long = "scale")]
        scales: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Topk,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FallbackArg {
    Error,
    WholeDictionary,
    JointOnly,
}

impl From<FallbackArg> for RadicalFallback {
    fn from(f: FallbackArg) -> Self {
        match f {
            FallbackArg::Error => RadicalFallback::Error,
            FallbackArg::WholeDictionary => RadicalFallback::WholeDictionary,
            FallbackArg::JointOnly => RadicalFallback::JointOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FieldsArg {
    All,
    Radical,
    Pictographic,
    Joint,
}

impl From<FieldsArg> for BertScoreFields {
    fn from(f: FieldsArg) -> Self {
        match f {
            FieldsArg::All => BertScoreFields::All,
            FieldsArg::Radical => BertScoreFields::Radical,
            FieldsArg::Pictographic => BertScoreFields::Pictographic,
            FieldsArg::Joint => BertScoreFields::Joint,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Query fixture file (`.jsonl` of analyses).
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Embedding interchange file (`.emb.jsonl`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Build deterministic mock embeddings in-process instead of importing.
    #[arg(long)]
    mock_embed: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    fallback: Option<FallbackArg>,
    #[arg(long)]
    no_dedup: bool,
    /// Worker threads for scoring.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct RemoteArgs {
    /// Analysis service URL. Replaces --queries; inputs come from --requests.
    #[arg(long)]
    endpoint: Option<String>,
    /// `.jsonl` of `{query_id, image_ref?, radical_pred, gold_label?}` for --endpoint.
    #[arg(long)]
    requests: Option<PathBuf>,
}

/// Defaults read from `--config`. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dict: Option<PathBuf>,
    queries: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    mock_embed: Option<bool>,
    dim: Option<usize>,
    seed: Option<u64>,
    k: Option<usize>,
    fallback: Option<RadicalFallback>,
    dedup: Option<bool>,
    aggregate: Option<ScoreAggregate>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    endpoint: Option<String>,
    requests: Option<PathBuf>,
    token: Option<String>,
    max_retries: Option<usize>,
    timeout_secs: Option<u64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Settings that determine output content, echoed into every artifact.
#[derive(Debug, Clone, Serialize)]
struct EffectiveConfig {
    command: &'static str,
    dict: Option<PathBuf>,
    queries: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    endpoint: Option<String>,
    requests: Option<PathBuf>,
    provider: Option<String>,
    seed: u64,
    #[serde(rename = "match")]
    matching: Option<MatchConfig>,
}

impl EffectiveConfig {
    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable config")
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn read_dict(path: &Path) -> Result<Dictionary, Failure> {
    load_dictionary(path)
        .with_context(|| format!("loading dictionary {}", path.display()))
        .map_err(Failure::Data)
}

fn read_queries(path: &Path) -> Result<Vec<QueryAnalyses>, Failure> {
    load_queries(path)
        .with_context(|| format!("loading queries {}", path.display()))
        .map_err(Failure::Data)
}

struct EmbedChoice {
    path: Option<PathBuf>,
    dim: usize,
    seed: u64,
}

impl EmbedChoice {
    fn resolve(args: &EmbedArgs, cfg: &FileConfig) -> Result<Self, Failure> {
        let path = pick(args.embeddings.clone(), cfg.embeddings.clone());
        let mock = args.mock_embed || (args.embeddings.is_none() && cfg.mock_embed.unwrap_or(false));
        if mock && args.embeddings.is_some() {
            return Err(usage("--embeddings and --mock-embed are mutually exclusive"));
        }
        if !mock && path.is_none() {
            return Err(usage("one of --embeddings or --mock-embed is required"));
        }
        Ok(Self {
            path: if mock { None } else { path },
            dim: pick(args.dim, cfg.dim).unwrap_or(DEFAULT_DIM),
            seed: pick(args.seed, cfg.seed).unwrap_or(0),
        })
    }

    /// Load or build the store. Imported stores must cover every text.
    fn store(&self, dict: &Dictionary, queries: &[QueryAnalyses]) -> Result<EmbeddingStore, Failure> {
        match &self.path {
            None => {
                let texts = required_texts(dict, queries);
                EmbeddingStore::build_mock(texts.iter().map(String::as_str), self.dim, self.seed)
                    .context("building mock embeddings")
                    .map_err(Failure::Data)
            }
            Some(path) => {
                let store = import_embeddings(path)
                    .with_context(|| format!("importing {}", path.display()))?;
                let missing = ensure_coverage(&store, dict, queries);
                if !missing.is_empty() {
                    return Err(Failure::Data(anyhow!(
                        "{} texts lack embeddings (first: {}); run import-embeddings for the list",
                        missing.len(),
                        missing[0]
                    )));
                }
                Ok(store)
            }
        }
    }
}

fn match_config(args: &MatchArgs, cfg: &FileConfig) -> Result<MatchConfig, Failure> {
    let k = pick(args.k, cfg.k).unwrap_or(matcher::DEFAULT_K);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    Ok(MatchConfig {
        k,
        radical_fallback: args
            .fallback
            .map(RadicalFallback::from)
            .or(cfg.fallback)
            .unwrap_or_default(),
        dedup_labels: !args.no_dedup && cfg.dedup.unwrap_or(true),
        aggregate: cfg.aggregate.unwrap_or_default(),
    })
}

fn thread_pool(args: &MatchArgs, cfg: &FileConfig) -> Result<rayon::ThreadPool, Failure> {
    let jobs = pick(args.jobs, cfg.jobs).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} workers: {e}")))
}

fn out_dir(flag: Option<PathBuf>, cfg: &FileConfig) -> Result<PathBuf, Failure> {
    let dir = pick(flag, cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Data)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    evalkit::write_json(path, value)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Data)
}

fn cmd_ingest(dict: Option<PathBuf>, cfg: &FileConfig) -> CmdResult {
    let path = require(pick(dict, cfg.dict.clone()), "dict")?;
    let records = corpus::read_dictionary_records(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let d = Dictionary::from_entries(records.into_iter().map(|(_, e)| e).collect());
    let report = corpus::validate_dictionary(&d);
    for v in &report.violations {
        println!("{}: {}", v.entry_id, v.rule);
    }
    println!("{} entries, {} radicals", d.len(), d.radical_count());
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_DATA })
}

fn cmd_import_embeddings(data: DataArgs, embed: EmbedArgs, write: Option<PathBuf>, cfg: &FileConfig) -> CmdResult {
    let dict = read_dict(&require(pick(data.dict, cfg.dict.clone()), "dict")?)?;
    let queries = match pick(data.queries, cfg.queries.clone()) {
        Some(p) => read_queries(&p)?,
        None => Vec::new(),
    };
    let choice = EmbedChoice::resolve(&embed, cfg)?;
    let store = match &choice.path {
        Some(path) => import_embeddings(path).with_context(|| format!("importing {}", path.display()))?,
        None => choice.store(&dict, &queries)?,
    };
    if let Some(path) = write {
        store
            .write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let missing = ensure_coverage(&store, &dict, &queries);
    println!(
        "{} sequences, dim {}, provider {}",
        store.len(),
        store.dim(),
        store.provider_tag()
    );
    if missing.is_empty() {
        println!("coverage complete");
        Ok(EXIT_OK)
    } else {
        for k in &missing {
            println!("missing {k}");
        }
        println!("{} missing", missing.len());
        Ok(EXIT_DATA)
    }
}

fn load_pipeline_inputs(path: &Path) -> Result<Vec<PipelineInput>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}", path.display(), i + 1))
                .map_err(Failure::Data)
        })
        .collect()
}

fn remote_queries(endpoint: String, requests: PathBuf, jobs: usize, cfg: &FileConfig) -> Result<Vec<QueryAnalyses>, Failure> {
    let inputs = load_pipeline_inputs(&requests)?;
    let mut ep = EndpointConfig::new(endpoint);
    if let Some(t) = &cfg.token {
        ep.token = Some(t.clone());
    }
    if let Some(r) = cfg.max_retries {
        ep.retry.max_retries = r;
    }
    if let Some(s) = cfg.timeout_secs {
        ep.timeout = std::time::Duration::from_secs(s);
    }
    let analyzer = Analyzer::Staged(Box::new(RemoteAnalyzer::new(ep, PromptSet::default())));
    analysis::run_pipelines(&inputs, &analyzer, jobs.max(1)).map_err(|e| {
        if e.is_external() {
            Failure::External(e.into())
        } else {
            Failure::Data(e.into())
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_decipher(
    data: DataArgs,
    embed: EmbedArgs,
    matching: MatchArgs,
    remote: RemoteArgs,
    out: Option<PathBuf>,
    trace: bool,
    cfg: &FileConfig,
) -> CmdResult {
    let dict_path = require(pick(data.dict, cfg.dict.clone()), "dict")?;
    let queries_path = pick(data.queries, cfg.queries.clone());
    let endpoint = pick(remote.endpoint, cfg.endpoint.clone());
    let requests = pick(remote.requests, cfg.requests.clone());
    let mcfg = match_config(&matching, cfg)?;
    let choice = EmbedChoice::resolve(&embed, cfg)?;
    let pool = thread_pool(&matching, cfg)?;

    let dict = read_dict(&dict_path)?;
    let queries = match (&queries_path, endpoint.clone()) {
        (Some(_), Some(_)) => return Err(usage("--queries and --endpoint are mutually exclusive")),
        (None, None) => return Err(usage("one of --queries or --endpoint is required")),
        (Some(p), None) => read_queries(p)?,
        (None, Some(url)) => {
            let requests = require(requests.clone(), "requests")?;
            remote_queries(url, requests, pool.current_num_threads(), cfg)?
        }
    };
    let store = choice.store(&dict, &queries)?;
    let out = out_dir(out, cfg)?;

    let effective = EffectiveConfig {
        command: "decipher",
        dict: Some(dict_path),
        queries: queries_path,
        embeddings: choice.path.clone(),
        endpoint,
        requests,
        provider: Some(store.provider_tag().to_string()),
        seed: choice.seed,
        matching: Some(mcfg),
    };

    let outcomes = pool.install(|| {
        queries
            .iter()
            .map(|q| {
                matcher::decipher(q, &dict, &store, &mcfg)
                    .with_context(|| format!("query {}", q.query_id))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let records: Vec<DecipherRecord> = outcomes.iter().map(DecipherRecord::from).collect();
    let result_path = out.join("decipher.result.jsonl");
    matcher::write_results(&result_path, &records)
        .with_context(|| format!("writing {}", result_path.display()))?;
    write_json(&out.join("decipher.config.json"), &effective.to_value())?;
    if trace {
        let dir = out.join("traces");
        std::fs::create_dir_all(&dir).context("creating traces directory")?;
        for o in &outcomes {
            write_json(&dir.join(format!("{}.trace.json", o.trace.query_id)), &o.trace)?;
        }
    }

    for (q, r) in queries.iter().zip(&records) {
        let mut line = format!("{}\t{}", r.query_id, r.labels.join(" "));
        if let Some(g) = &q.gold_label {
            match evalkit::gold_rank(&r.labels, g) {
                Some(rank) => line.push_str(&format!("\tgold {g} @{rank}")),
                None => line.push_str(&format!("\tgold {g} miss")),
            }
        }
        if r.fallback_used {
            line.push_str("\tfallback");
        }
        println!("{line}");
    }
    println!("wrote {}", result_path.display());
    Ok(EXIT_OK)
}

fn gold_bearing(queries: &[QueryAnalyses]) -> Vec<QueryAnalyses> {
    queries.iter().filter(|q| q.gold_label.is_some()).cloned().collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    results: PathBuf,
    data: DataArgs,
    embed: EmbedArgs,
    ks: Vec<usize>,
    fields: FieldsArg,
    out: Option<PathBuf>,
    cfg: &FileConfig,
) -> CmdResult {
    let dict_path = require(pick(data.dict, cfg.dict.clone()), "dict")?;
    let queries_path = require(pick(data.queries, cfg.queries.clone()), "queries")?;
    let choice = EmbedChoice::resolve(&embed, cfg)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks must list positive integers"));
    }
    let dict = read_dict(&dict_path)?;
    let queries = read_queries(&queries_path)?;
    let store = choice.store(&dict, &queries)?;
    let records = matcher::read_results(&results)
        .with_context(|| format!("reading {}", results.display()))?;

    let labelled = gold_bearing(&queries);
    let gold: Vec<(String, String)> = labelled
        .iter()
        .map(|q| (q.query_id.clone(), q.gold_label.clone().expect("filtered")))
        .collect();
    let by_id: HashMap<String, Vec<String>> = records
        .into_iter()
        .map(|r| (r.query_id, r.labels))
        .collect();
    let outcome = evalkit::topk_accuracy(&by_id, &gold, &ks)?;
    let mean = evalkit::mean_analysis_bertscore(&labelled, &dict, &store, fields.into())?;

    let mut config = EffectiveConfig {
        command: "evaluate",
        dict: Some(dict_path),
        queries: Some(queries_path),
        embeddings: choice.path.clone(),
        endpoint: None,
        requests: None,
        provider: Some(store.provider_tag().to_string()),
        seed: choice.seed,
        matching: None,
    }
    .to_value();
    // A digest rather than the path keeps reports independent of where the
    // result file was written.
    let digest = Sha256::digest(std::fs::read(&results).context("hashing results")?);
    config["results_sha256"] = serde_json::json!(hex::encode(digest));
    config["bertscore_fields"] = serde_json::to_value(BertScoreFields::from(fields)).expect("enum");
    let report = EvalReport::new(outcome, mean, config);

    let out = out_dir(out, cfg)?;
    write_json(&out.join("evaluate.report.json"), &report)?;
    print!("{}", evalkit::render_accuracy_table(&report));
    Ok(EXIT_OK)
}

fn parse_scales(specs: &[String]) -> Result<Vec<(String, BTreeSet<String>)>, Failure> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--scale expects NAME=PATH, got {s:?}")))?;
            let labels = load_label_set(Path::new(path))
                .with_context(|| format!("reading label set {path}"))?;
            Ok((name.to_string(), labels))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    kind: SweepKind,
    data: DataArgs,
    embed: EmbedArgs,
    matching: MatchArgs,
    ks: Vec<usize>,
    scales: Vec<String>,
    out: Option<PathBuf>,
    cfg: &FileConfig,
) -> CmdResult {
    let dict_path = require(pick(data.dict, cfg.dict.clone()), "dict")?;
    let queries_path = require(pick(data.queries, cfg.queries.clone()), "queries")?;
    let choice = EmbedChoice::resolve(&embed, cfg)?;
    let mcfg = match_config(&matching, cfg)?;
    let pool = thread_pool(&matching, cfg)?;
    if kind == SweepKind::Scale && scales.is_empty() {
        return Err(usage("--kind scale needs at least one --scale NAME=PATH"));
    }
    let ks = if ks.is_empty() {
        match kind {
            SweepKind::Topk => evalkit::SWEEP_KS.to_vec(),
            SweepKind::Scale => vec![mcfg.k],
        }
    } else {
        ks
    };
    let label_sets = parse_scales(&scales)?;
    let dict = read_dict(&dict_path)?;
    let queries = gold_bearing(&read_queries(&queries_path)?);
    let store = choice.store(&dict, &queries)?;
    let out = out_dir(out, cfg)?;

    let config = EffectiveConfig {
        command: "sweep",
        dict: Some(dict_path),
        queries: Some(queries_path),
        embeddings: choice.path.clone(),
        endpoint: None,
        requests: None,
        provider: Some(store.provider_tag().to_string()),
        seed: choice.seed,
        matching: Some(mcfg),
    }
    .to_value();

    match kind {
        SweepKind::Topk => {
            let outcome = pool.install(|| evalkit::sweep_topk(&queries, &dict, &store, &mcfg, &ks))?;
            let report = serde_json::json!({
                "kind": "topk",
                "ks": outcome.ks,
                "accuracy": outcome.accuracy,
                "n_queries": outcome.per_query.len(),
                "per_query": outcome.per_query,
                "config": config,
            });
            write_json(&out.join("sweep_topk.report.json"), &report)?;
            print!("{}", evalkit::render_topk_grid(&outcome));
        }
        SweepKind::Scale => {
            let rows = pool.install(|| {
                evalkit::sweep_dictionary_scale(&queries, &dict, &store, &mcfg, &label_sets, &ks)
            })?;
            let report = serde_json::json!({
                "kind": "scale",
                "ks": ks,
                "rows": rows,
                "n_queries": queries.len(),
                "config": config,
            });
            write_json(&out.join("sweep_scale.report.json"), &report)?;
            print!("{}", evalkit::render_scale_grid(&rows));
        }
    }
    Ok(EXIT_OK)
}

impl From<evalkit::EvalError> for Failure {
    fn from(e: evalkit::EvalError) -> Self {
        Failure::Data(e.into())
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { dict } => cmd_ingest(dict, &cfg),
        Command::ImportEmbeddings { data, embed, write } => cmd_import_embeddings(data, embed, write, &cfg),
        Command::Decipher {
            data,
            embed,
            matching,
            remote,
            out,
            trace,
        } => cmd_decipher(data, embed, matching, remote, out, trace, &cfg),
        Command::Evaluate {
            results,
            data,
            embed,
            ks,
            bertscore_fields,
            out,
        } => cmd_evaluate(results, data, embed, ks, bertscore_fields, out, &cfg),
        Command::Sweep {
            kind,
            data,
            embed,
            matching,
            ks,
            scales,
            out,
        } => cmd_sweep(kind, data, embed, matching, ks, scales, out, &cfg),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Data(e) | Failure::External(e) => eprintln!("error: {e:#}"),
            }
            f.code()
        }
    }
}
