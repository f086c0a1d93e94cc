//! Command-line front end: dataset conversion, mixture materialization,
//! evaluation prompts, scoring runs, mock ablations and report tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cot4det::datasets::{load_coco_tagged, load_lvis_bands, load_refexp, CocoIndex, Granularity};
use cot4det::harness::client::{ClientConfig, DEFAULT_CONCURRENCY, DEFAULT_RETRIES, ENDPOINT_ENV};
use cot4det::harness::{
    run_eval, run_rec, Backend, ChatClient, EndpointBackend, EvalOptions, EvalRun, FaultProfile, HarnessError,
    MockBackend, PredictionsBackend, DEFAULT_CHUNK, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use cot4det::metrics::{align_table, pct, render_table, EvalReport};
use cot4det::mixture::{build_mixture, MixtureEntry, MixtureSpec};
use cot4det::parser::{Policy, DEFAULT_DUP_IOU};
use cot4det::prompt::{
    eval_spec, refexp_spec, render_answer, render_cot_answer, sample_categories, PromptError, PromptRecord, Setting,
    DEFAULT_MAX_CATEGORIES, DEFAULT_NEG_RATIO,
};

/// Sample weights of the reference training mixture, in percent. They sum
/// to 95.7, so use them with `--normalize`.
pub const REFERENCE_WEIGHTS: &str = include_str!("../presets/reference_weights.json");

#[derive(Debug, Parser)]
#[command(name = "cot4det", version, about = "Three-stage detection prompts, output parsing and scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn annotations into prompt/answer training records.
    Convert(ConvertArgs),
    /// Interleave several record files by sample weight.
    Mix(MixArgs),
    /// Write evaluation prompts with their reference answers.
    Prompts(PromptsArgs),
    /// Score model answers against annotations.
    Eval(EvalArgs),
    /// CoT on/off x lenient/repair grid against the mock model.
    Simulate(SimulateArgs),
    /// Combine stored report.json files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    /// Only the categories present in each image.
    Gt,
    /// The whole vocabulary.
    Full,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Setting {
        match s {
            SettingArg::Gt => Setting::GroundTruthCategories,
            SettingArg::Full => Setting::FullCategory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Lenient,
    Strict,
    Repair,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Lenient => Policy::Lenient,
            PolicyArg::Strict => Policy::Strict,
            PolicyArg::Repair => Policy::Repair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Word,
    Phrase,
    Sentence,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Granularity {
        match g {
            GranularityArg::Word => Granularity::Word,
            GranularityArg::Phrase => Granularity::Phrase,
            GranularityArg::Sentence => Granularity::Sentence,
        }
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Annotations {
    /// COCO-style detection annotations (JSON).
    #[arg(long)]
    pub coco: Option<PathBuf>,
    /// Referring expressions, one JSON record per line.
    #[arg(long)]
    pub refexp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub input: Annotations,
    /// Prompt granularity; COCO input is word level, expressions are
    /// filtered to the given level.
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    /// Negatives sampled per positive category.
    #[arg(long, default_value_t = DEFAULT_NEG_RATIO)]
    pub neg_ratio: f64,
    /// Upper bound on prompt categories.
    #[arg(long, default_value_t = DEFAULT_MAX_CATEGORIES)]
    pub max_categories: usize,
    /// Provenance tag stored on each record (defaults to the file stem).
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Weight file (JSON list of {tag, weight} or {tag: weight} map), or
    /// `reference` for the bundled reference weights.
    #[arg(long)]
    pub weights: String,
    /// Rescale weights to sum to one instead of requiring it.
    #[arg(long)]
    pub normalize: bool,
    /// Input corpus as TAG=PATH; repeat per corpus.
    #[arg(long = "corpus", value_name = "TAG=PATH", required = true)]
    pub corpora: Vec<String>,
    /// Number of records to draw.
    #[arg(long)]
    pub total: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// COCO-style detection annotations (JSON).
    #[arg(long)]
    pub coco: PathBuf,
    #[arg(long, value_enum, default_value_t = SettingArg::Full)]
    pub setting: SettingArg,
    /// Recorded on each prompt record.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct FaultArgs {
    /// Probability that a box is re-emitted.
    #[arg(long, default_value_t = 0.0)]
    pub dup_rate: f64,
    /// Maximum extra copies of a duplicated box.
    #[arg(long, default_value_t = 1)]
    pub dup_max: u32,
    /// Probability of a box per absent prompt category.
    #[arg(long, default_value_t = 0.0)]
    pub hallucination_rate: f64,
    /// Drop probability for objects under 32x32 px (a quarter of it otherwise).
    #[arg(long, default_value_t = 0.0)]
    pub small_miss: f64,
    /// Uniform coordinate noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Let the counting stage include injected faults.
    #[arg(long)]
    pub corrupt_counts: bool,
}

impl FaultArgs {
    fn profile(&self, seed: u64) -> anyhow::Result<FaultProfile> {
        let p = FaultProfile {
            dup_rate: self.dup_rate,
            dup_max: self.dup_max,
            hallucination_rate: self.hallucination_rate,
            small_miss: self.small_miss,
            jitter: self.jitter,
            seed,
            corrupt_counts: self.corrupt_counts,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: Annotations,
    /// LVIS category metadata for rare/common/frequent bands.
    #[arg(long)]
    pub lvis: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SettingArg::Full)]
    pub setting: SettingArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::Repair)]
    pub policy: PolicyArg,
    /// Stored model outputs, one {"image_id", "response"} record per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Use the built-in mock model.
    #[arg(long)]
    pub mock: bool,
    /// Mock emits a bare box list without classification/counting stages.
    #[arg(long)]
    pub no_cot: bool,
    /// Chat-completions URL.
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    pub model: String,
    #[arg(long, default_value_t = DEFAULT_RETRIES)]
    pub retries: u32,
    /// First backoff delay; doubles per retry.
    #[arg(long, default_value_t = 500)]
    pub retry_base_ms: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: u32,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Directory joined to annotation file names to form image references.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Same-label IoU at which boxes count as duplicates.
    #[arg(long, default_value_t = DEFAULT_DUP_IOU)]
    pub dup_iou: f64,
    /// Images per persisted batch.
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    pub chunk: usize,
    /// Concurrent requests / worker threads.
    #[arg(long, default_value_t = DEFAULT_CONCURRENCY)]
    pub jobs: usize,
    /// Mock seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub faults: FaultArgs,
    /// Output directory for ledgers and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// COCO-style detection annotations (JSON).
    #[arg(long)]
    pub coco: PathBuf,
    #[arg(long, value_enum, default_value_t = SettingArg::Full)]
    pub setting: SettingArg,
    #[arg(long, default_value_t = DEFAULT_DUP_IOU)]
    pub dup_iou: f64,
    #[arg(long, default_value_t = DEFAULT_CONCURRENCY)]
    pub jobs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub faults: FaultArgs,
    /// Directory for simulate.json and simulate.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status classes: 1 for evaluation-level failure, 2 for usage or input.
#[derive(Debug)]
pub enum Failure {
    Eval(anyhow::Error),
    Input(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Eval(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Eval(e) | Failure::Input(e)) = &f;
            eprintln!("error: {e:#}");
            f.code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Convert(a) => convert(&a),
        Command::Mix(a) => mix(&a),
        Command::Prompts(a) => prompts(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Report(a) => report(&a),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn load_coco_input(path: &Path) -> anyhow::Result<CocoIndex> {
    let index = load_coco_tagged(path, &stem(path))?;
    if index.dropped > 0 {
        log::info!("{}: dropped {} zero-area annotations", path.display(), index.dropped);
    }
    Ok(index)
}

fn convert(a: &ConvertArgs) -> Outcome {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    if let Some(path) = &a.input.coco {
        if a.granularity.is_some_and(|g| g != GranularityArg::Word) {
            return Err(anyhow!("COCO annotations carry category names; only --granularity word applies").into());
        }
        let index = load_coco_input(path)?;
        let source = a.source.clone().unwrap_or_else(|| stem(path));
        for ann in &index.images {
            match sample_categories(ann, &index.vocab, a.neg_ratio, a.max_categories, a.seed) {
                Ok(spec) => {
                    let answer = render_cot_answer(ann, &index.vocab, &spec);
                    records.push(PromptRecord::build(&spec, answer, a.seed, &source)?);
                }
                Err(PromptError::EmptyImage(_)) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    } else if let Some(path) = &a.input.refexp {
        if a.granularity == Some(GranularityArg::Word) {
            return Err(anyhow!("referring expressions are phrase or sentence level").into());
        }
        let source = a.source.clone().unwrap_or_else(|| stem(path));
        let wanted: Option<Granularity> = a.granularity.map(Into::into);
        for expr in load_refexp(path)? {
            if wanted.is_some_and(|g| g != expr.granularity) {
                skipped += 1;
                continue;
            }
            let (spec, truth) = refexp_spec(&expr);
            let answer = render_answer(&truth, &spec);
            records.push(PromptRecord::build(&spec, answer, a.seed, &source)?);
        }
    }
    write_records(&a.out, &records)?;
    let mut by_granularity: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *by_granularity.entry(r.granularity.as_str()).or_default() += 1;
    }
    println!("wrote {} records to {}", records.len(), a.out.display());
    for (g, n) in by_granularity {
        println!("  {g}: {n}");
    }
    if skipped > 0 {
        println!("  skipped: {skipped}");
    }
    Ok(())
}

/// Weight entries from a file or the bundled preset.
pub fn load_weights(source: &str) -> anyhow::Result<Vec<MixtureEntry>> {
    let text = if source == "reference" {
        REFERENCE_WEIGHTS.to_string()
    } else {
        fs::read_to_string(source).with_context(|| format!("reading {source}"))?
    };
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {source}"))?;
    match value {
        serde_json::Value::Object(map) => map
            .into_iter()
            .map(|(tag, w)| {
                let weight = w.as_f64().ok_or_else(|| anyhow!("weight for `{tag}` is not a number"))?;
                Ok(MixtureEntry { tag, weight })
            })
            .collect(),
        list => Ok(serde_json::from_value(list).with_context(|| format!("parsing {source}"))?),
    }
}

fn mix(a: &MixArgs) -> Outcome {
    let entries = load_weights(&a.weights)?;
    let spec = if a.normalize {
        MixtureSpec::normalized(entries)?
    } else {
        MixtureSpec::new(entries)?
    };
    let mut corpora: Vec<(String, Vec<String>)> = Vec::new();
    for c in &a.corpora {
        let (tag, path) = c
            .split_once('=')
            .ok_or_else(|| anyhow!("--corpus expects TAG=PATH, got `{c}`"))?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            serde_json::from_str::<serde::de::IgnoredAny>(line).with_context(|| format!("{path}:{}", i + 1))?;
            lines.push(line.to_string());
        }
        corpora.push((tag.to_string(), lines));
    }
    let sizes: Vec<(String, usize)> = corpora.iter().map(|(t, l)| (t.clone(), l.len())).collect();
    let stream = build_mixture(&sizes, &spec, a.total, a.seed)?;

    let by_tag: BTreeMap<&str, &Vec<String>> = corpora.iter().map(|(t, l)| (t.as_str(), l)).collect();
    let mut drawn: BTreeMap<String, usize> = BTreeMap::new();
    let mut w = create(&a.out)?;
    for (tag, idx) in stream {
        let line = &by_tag[tag.as_str()][idx];
        writeln!(w, "{{\"tag\":{},\"index\":{idx},\"record\":{line}}}", serde_json::to_string(&tag)?)?;
        *drawn.entry(tag).or_default() += 1;
    }
    w.flush().map_err(anyhow::Error::from)?;
    println!("wrote {} records to {}", a.total, a.out.display());
    for e in spec.entries() {
        let n = drawn.get(&e.tag).copied().unwrap_or(0);
        println!(
            "  {:<24} weight {:.4}  drawn {:>8}  ({:.4})",
            e.tag,
            e.weight,
            n,
            n as f64 / a.total.max(1) as f64
        );
    }
    Ok(())
}

fn log_category_lengths(range: Option<(usize, usize)>) {
    match range {
        Some((lo, hi)) if lo == hi => log::info!("prompt category list length {lo} for every image"),
        Some((lo, hi)) => log::info!("prompt category list length {lo}..={hi}"),
        None => {}
    }
}

fn prompts(a: &PromptsArgs) -> Outcome {
    let index = load_coco_input(&a.coco)?;
    let setting: Setting = a.setting.into();
    let source = stem(&a.coco);
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut lengths: Option<(usize, usize)> = None;
    for ann in &index.images {
        let spec = eval_spec(ann, &index.vocab, setting);
        if spec.categories.is_empty() {
            skipped += 1;
            continue;
        }
        let n = spec.categories.len();
        lengths = Some(lengths.map_or((n, n), |(lo, hi)| (lo.min(n), hi.max(n))));
        let answer = render_cot_answer(ann, &index.vocab, &spec);
        records.push(PromptRecord::build(&spec, answer, a.seed, &source)?);
    }
    log_category_lengths(lengths);
    write_records(&a.out, &records)?;
    println!("wrote {} {setting} prompts to {}", records.len(), a.out.display());
    if skipped > 0 {
        println!("  skipped (no categories): {skipped}");
    }
    Ok(())
}

fn backend_for(a: &EvalArgs) -> anyhow::Result<Box<dyn Backend>> {
    if let Some(p) = &a.predictions {
        return Ok(Box::new(PredictionsBackend::load(p)?));
    }
    if a.mock {
        return Ok(Box::new(MockBackend {
            profile: a.faults.profile(a.seed)?,
            cot: !a.no_cot,
        }));
    }
    if let Some(url) = &a.endpoint {
        let mut cfg = ClientConfig::new(url.clone(), a.model.clone());
        cfg.retries = a.retries;
        cfg.concurrency = a.jobs.max(1);
        cfg.base_delay = std::time::Duration::from_millis(a.retry_base_ms);
        return Ok(Box::new(EndpointBackend {
            client: ChatClient::new(cfg)?,
            max_tokens: a.max_tokens,
            temperature: a.temperature,
        }));
    }
    bail!("no backend: pass --predictions, --mock or --endpoint (or set {ENDPOINT_ENV})")
}

fn harness_outcome(result: Result<EvalRun, HarnessError>, out: &Path) -> Result<EvalRun, Failure> {
    match result {
        Ok(run) => Ok(run),
        Err(HarnessError::Aborted { failed, total, report }) => {
            print!("{}", report.table());
            Err(Failure::Eval(anyhow!(
                "{failed} of {total} queries failed; partial results in {}",
                out.display()
            )))
        }
        Err(e) => Err(Failure::Input(e.into())),
    }
}

fn eval(a: &EvalArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.dup_iou) {
        return Err(anyhow!("--dup-iou must lie in [0, 1]").into());
    }
    let backend = backend_for(a)?;
    let opts = EvalOptions {
        setting: a.setting.into(),
        policy: a.policy.into(),
        dup_iou: a.dup_iou,
        out_dir: Some(a.out.clone()),
        jobs: a.jobs.max(1),
        chunk: a.chunk.max(1),
        image_root: a.image_root.clone(),
    };
    log::info!("backend: {}", backend.name());
    let run = if let Some(path) = &a.input.coco {
        let mut index = load_coco_input(path)?;
        if let Some(lvis) = &a.lvis {
            index.vocab = load_lvis_bands(lvis, &index.vocab)?;
        }
        harness_outcome(run_eval(&index.images, &index.vocab, backend.as_ref(), &opts), &a.out)?
    } else {
        let exprs = load_refexp(a.input.refexp.as_ref().expect("group requires one input"))?;
        harness_outcome(run_rec(&exprs, backend.as_ref(), &opts), &a.out)?
    };
    log_category_lengths(run.prompt_categories);
    if run.resumed > 0 {
        log::info!("reused {} stored responses", run.resumed);
    }
    if !run.failures.is_empty() {
        log::warn!("{} queries failed; see failures.jsonl", run.failures.len());
    }
    print!("{}", run.report.table());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateRow {
    cot: bool,
    policy: String,
    report: EvalReport,
}

fn simulate_table(rows: &[SimulateRow]) -> String {
    let mut cells = vec![vec![
        "CoT".to_string(),
        "Policy".into(),
        "P@0.5".into(),
        "R@0.5".into(),
        "mAP".into(),
        "AP_small".into(),
    ]];
    for r in rows {
        cells.push(vec![
            if r.cot { "on" } else { "off" }.to_string(),
            r.policy.clone(),
            pct(Some(r.report.precision)),
            pct(Some(r.report.recall)),
            pct(r.report.map),
            pct(r.report.ap_small),
        ]);
    }
    align_table(&cells)
}

fn simulate(a: &SimulateArgs) -> Outcome {
    let index = load_coco_input(&a.coco)?;
    let profile = a.faults.profile(a.seed)?;
    let mut rows = Vec::new();
    for cot in [true, false] {
        let backend = MockBackend {
            profile: profile.clone(),
            cot,
        };
        for policy in [Policy::Lenient, Policy::Repair] {
            let opts = EvalOptions {
                setting: a.setting.into(),
                policy,
                dup_iou: a.dup_iou,
                out_dir: None,
                jobs: a.jobs.max(1),
                chunk: DEFAULT_CHUNK,
                image_root: None,
            };
            let run = harness_outcome(run_eval(&index.images, &index.vocab, &backend, &opts), Path::new("-"))?;
            rows.push(SimulateRow {
                cot,
                policy: policy.to_string(),
                report: run.report,
            });
        }
    }
    let table = simulate_table(&rows);
    print!("{table}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("simulate.txt"), &table)?;
        fs::write(dir.join("simulate.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Outcome {
    let mut reports = Vec::new();
    for p in &a.reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        reports.push(r);
    }
    let table = render_table(&reports);
    print!("{table}");
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        w.write_all(table.as_bytes())?;
        w.flush().map_err(anyhow::Error::from)?;
    }
    Ok(())
}
