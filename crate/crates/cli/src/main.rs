use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use city3dqa_core::dataset::{
    self, CityLists, GenerationConfig, HttpChatClient, LlmConfig, QaPair, SplitAssignment, DEFAULT_PROMPT,
    DEFAULT_RATIOS,
};
use city3dqa_core::eval::{self, PredictionSet};
use city3dqa_core::ingest::{self, PointFormat, SceneManifest};
use city3dqa_core::oracle::{Oracle, OracleParams};
use city3dqa_core::scene::SceneGraph;
use city3dqa_core::semantics::{build_scene_graph, EdgePolicy, Frame, GraphOptions, Lexicon, RegionMap};
use city3dqa_core::templates::{
    find_template, instantiate, load_registry, merge_user_templates, Binding, BindingOptions, InstanceRef,
    QuestionTemplate, SlotKind, SlotValue,
};

#[derive(Parser)]
#[command(name = "city3dqa", version, about = "City-scale 3D question answering: scene graphs, QA generation and scoring")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Labeled points (XYZCI text or C3PC binary) to an instance manifest.
    Ingest(IngestArgs),
    /// Instance manifest to a scene graph.
    Graph(GraphArgs),
    /// Scene graphs to QA pairs (JSON lines).
    Generate(GenerateArgs),
    /// QA pairs to a train/val/test split manifest.
    Split(SplitArgs),
    /// Score ranked predictions against a dataset.
    Eval(EvalArgs),
    /// Write predictions from a reference baseline.
    Baseline(BaselineArgs),
    /// Category, hop and question-length distribution of a dataset.
    Stats(StatsArgs),
    /// Answer one template instance against a scene graph.
    Query(QueryArgs),
    /// List the question templates.
    Templates(TemplatesArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Point file; `-` reads stdin.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    format: FormatArg,
    /// JSON object mapping class ids to class labels.
    #[arg(long)]
    class_map: PathBuf,
    /// Lexicon supplying each class's category label.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// JSON object mapping instance ids to category labels (wins over the lexicon).
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    city: String,
    #[arg(long)]
    scene_id: String,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Xyzci,
    C3pc,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Bearing in degrees (counterclockwise from +x) that counts as front.
    #[arg(long, default_value_t = 90.0)]
    front_bearing: f64,
    #[arg(long, value_enum, default_value_t = PolicyArg::AllPairs)]
    edge_policy: PolicyArg,
    /// Neighbours per instance for `k-nearest`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    AllPairs,
    KNearest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene graph files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    graphs: Vec<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bindings per template and scene (default depends on category).
    #[arg(long)]
    per_template_limit: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    synonym_prob: f64,
    #[arg(long, default_value_t = 100.0)]
    near_radius: f64,
    /// Extra templates (JSON array) appended to the built-in registry.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Also write the answer space here.
    #[arg(long)]
    answer_space: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct LlmArgs {
    /// Chat-completions endpoint; enables paraphrasing.
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    #[arg(long)]
    llm_temperature: Option<f64>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    llm_timeout: Option<u64>,
    /// JSON file with endpoint, model, temperature and timeout_secs.
    #[arg(long)]
    llm_config: Option<PathBuf>,
    /// Maximum requests in flight.
    #[arg(long, default_value_t = 4)]
    llm_concurrency: usize,
    /// Prompt file with [template], [answer] and [graph] slots.
    #[arg(long)]
    llm_prompt: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitModeArg::Sentence)]
    mode: SplitModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, val and test ratios.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    train_cities: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    val_cities: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    test_cities: Option<Vec<String>>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitModeArg {
    Sentence,
    City,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Restrict scoring to one part of this split manifest.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test, requires = "split")]
    part: Part,
    /// Report gold answers missing from the training answer space (needs --split).
    #[arg(long, requires = "split")]
    answer_space: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(value_enum)]
    kind: BaselineKind,
    #[arg(long)]
    dataset: PathBuf,
    /// Scene graphs (oracle baseline).
    #[arg(long, num_args = 1..)]
    graphs: Vec<PathBuf>,
    /// Split manifest (majority baseline trains on its train part).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    part: Part,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Oracle,
    Majority,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, required_unless_present = "repl")]
    template: Option<String>,
    /// Binding as a JSON object keyed by slot name.
    #[arg(long, conflicts_with = "slot")]
    binding: Option<String>,
    /// Slot value as name=value; instance slots take label or label@location.
    #[arg(long)]
    slot: Vec<String>,
    #[arg(long, default_value_t = 100.0)]
    near_radius: f64,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Read template ids and slot values interactively.
    #[arg(long)]
    repl: bool,
}

#[derive(Args)]
struct TemplatesArgs {
    #[arg(long)]
    templates: Option<PathBuf>,
}

/// Errors that should exit with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

enum Outcome {
    Done,
    Degraded,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Degraded) => ExitCode::from(3),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<io::Error>()
            .map(io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind));
        kind == Some(io::ErrorKind::BrokenPipe)
    })
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().ok();
    }
    let jobs = cli.jobs.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, jobs),
        Command::Graph(a) => cmd_graph(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Split(a) => cmd_split(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Query(a) => cmd_query(a),
        Command::Templates(a) => cmd_templates(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn registry(extra: Option<&Path>) -> Result<Vec<QuestionTemplate>> {
    let mut reg = load_registry();
    if let Some(p) = extra {
        let n = merge_user_templates(&mut reg, open(p)?).with_context(|| format!("templates in {}", p.display()))?;
        log::info!("loaded {n} extra template(s) from {}", p.display());
    }
    Ok(reg)
}

fn read_pairs(path: &Path) -> Result<Vec<QaPair>> {
    dataset::read_dataset(open(path)?).with_context(|| format!("dataset {}", path.display()))
}

/// Expands directories to the `.json` files inside them, sorted by name.
fn graph_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            out.extend(inner);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_graphs(paths: &[PathBuf]) -> Result<Vec<SceneGraph>> {
    graph_files(paths)?.iter().map(|p| read_json(p)).collect()
}

fn graphs_by_scene(graphs: Vec<SceneGraph>) -> HashMap<(String, String), SceneGraph> {
    graphs.into_iter().map(|g| ((g.city.clone(), g.scene_id.clone()), g)).collect()
}

fn cmd_ingest(a: IngestArgs, jobs: usize) -> Result<Outcome> {
    let class_map: BTreeMap<u32, String> = read_json(&a.class_map)?;
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::from_reader(open(p)?)?,
        None => Lexicon::default(),
    };
    let overrides: BTreeMap<u32, String> = match &a.categories {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let format = match a.format {
        FormatArg::Auto => None,
        FormatArg::Xyzci => Some(PointFormat::Xyzci),
        FormatArg::C3pc => Some(PointFormat::C3pc),
    };
    let stats = if a.input.as_os_str() == "-" {
        ingest::ingest_reader(io::stdin().lock(), format, jobs)?
    } else {
        ingest::ingest_reader(open(&a.input)?, format, jobs)?
    };
    let instances = ingest::finalize_instances(&stats, &class_map, |id, class| {
        overrides.get(&id).cloned().or_else(|| lexicon.category_of_class(class))
    })?;
    let manifest = SceneManifest {
        city: a.city,
        scene_id: a.scene_id,
        class_map,
        instances,
    };
    let mut w = create(&a.output)?;
    ingest::write_manifest(&manifest, &mut w)?;
    w.flush()?;
    eprintln!("{} instance(s) written to {}", manifest.instances.len(), a.output.display());
    Ok(Outcome::Done)
}

fn cmd_graph(a: GraphArgs) -> Result<Outcome> {
    let policy = match (a.edge_policy, a.k) {
        (PolicyArg::AllPairs, None) => EdgePolicy::AllPairs,
        (PolicyArg::AllPairs, Some(_)) => return Err(UsageError("--k only applies to --edge-policy k-nearest".into()).into()),
        (PolicyArg::KNearest, Some(k)) => EdgePolicy::KNearest { k },
        (PolicyArg::KNearest, None) => return Err(UsageError("--edge-policy k-nearest needs --k".into()).into()),
    };
    if !a.front_bearing.is_finite() {
        return Err(UsageError("--front-bearing must be finite".into()).into());
    }
    let manifest = ingest::read_manifest(open(&a.manifest)?).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::from_reader(open(p)?)?,
        None => Lexicon::default(),
    };
    let regions = match &a.regions {
        Some(p) => RegionMap::from_reader(open(p)?)?,
        None => RegionMap::default(),
    };
    let options = GraphOptions {
        policy,
        frame: Frame {
            front_bearing_deg: a.front_bearing,
        },
    };
    let built = build_scene_graph(&manifest, &lexicon, &regions, &options)?;
    if !built.skipped_pairs.is_empty() {
        log::warn!("{} ordered pair(s) share an xy centroid and have no direction", built.skipped_pairs.len());
    }
    write_json(&built.graph, &a.output)?;
    eprintln!(
        "{} instance(s), {} spatial edge(s), {} semantic triple(s)",
        built.graph.instances.len(),
        built.graph.spatial_edges.len(),
        built.graph.semantic_triples.len()
    );
    Ok(Outcome::Done)
}

fn llm_config(a: &LlmArgs) -> Result<Option<LlmConfig>> {
    let mut cfg = match &a.llm_config {
        Some(p) => LlmConfig::from_reader(open(p)?)?,
        None if a.llm_endpoint.is_none() => return Ok(None),
        None => LlmConfig::default(),
    };
    if let Some(e) = &a.llm_endpoint {
        cfg.endpoint = e.clone();
    }
    if let Some(m) = &a.llm_model {
        cfg.model = m.clone();
    }
    if let Some(t) = a.llm_temperature {
        cfg.temperature = t;
    }
    if let Some(t) = a.llm_timeout {
        cfg.timeout_secs = t;
    }
    Ok(Some(cfg))
}

fn cmd_generate(a: GenerateArgs) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&a.synonym_prob) {
        return Err(UsageError("--synonym-prob must be within [0, 1]".into()).into());
    }
    if !(a.near_radius > 0.0 && a.near_radius.is_finite()) {
        return Err(UsageError("--near-radius must be positive".into()).into());
    }
    let reg = registry(a.templates.as_deref())?;
    let graphs = load_graphs(&a.graphs)?;
    let config = GenerationConfig {
        seed: a.seed,
        per_template_limit: a.per_template_limit,
        oracle: OracleParams {
            near_radius: a.near_radius,
            ..OracleParams::default()
        },
        bindings: BindingOptions {
            synonym_probability: a.synonym_prob,
            ..BindingOptions::default()
        },
    };
    let generated = dataset::generate_dataset(&graphs, &reg, &config);
    if !generated.skipped.is_empty() {
        log::info!("{} binding(s) skipped as unanswerable", generated.skipped.len());
    }
    let mut pairs = dataset::dedup_pairs(generated.pairs);

    let mut outcome = Outcome::Done;
    if let Some(cfg) = llm_config(&a.llm)? {
        let prompt = match &a.llm.llm_prompt {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
            None => DEFAULT_PROMPT.to_string(),
        };
        let client = HttpChatClient::new(cfg)?;
        let synonyms = dataset::synonym_table(&graphs);
        let (out, fallbacks) =
            dataset::paraphrase_dataset(&pairs, &client, &prompt, &reg, &synonyms, a.llm.llm_concurrency);
        pairs = out;
        if fallbacks > 0 {
            eprintln!("warning: {fallbacks} of {} question(s) kept their template wording", pairs.len());
            outcome = Outcome::Degraded;
        }
    }

    let mut w = create(&a.output)?;
    dataset::write_dataset(&pairs, &mut w)?;
    w.flush()?;
    if let Some(p) = &a.answer_space {
        write_json(&dataset::build_answer_space(&pairs), p)?;
    }
    eprintln!("{} QA pair(s) from {} scene(s) written to {}", pairs.len(), graphs.len(), a.output.display());
    Ok(outcome)
}

fn cmd_split(a: SplitArgs) -> Result<Outcome> {
    let pairs = read_pairs(&a.dataset)?;
    let assignment = match a.mode {
        SplitModeArg::Sentence => {
            let ratios = match a.ratios.as_deref() {
                None => DEFAULT_RATIOS,
                Some([t, v, s]) => [*t, *v, *s],
                Some(_) => return Err(UsageError("--ratios takes three values".into()).into()),
            };
            dataset::split_sentence_wise(&pairs, ratios, a.seed)?
        }
        SplitModeArg::City => {
            let mut lists = CityLists::default();
            if let Some(c) = a.train_cities {
                lists.train = c;
            }
            if let Some(c) = a.val_cities {
                lists.val = c;
            }
            if let Some(c) = a.test_cities {
                lists.test = c;
            }
            dataset::split_city_wise(&pairs, &lists)?
        }
    };
    let mut w = create(&a.output)?;
    dataset::write_split_manifest(&assignment, &mut w)?;
    w.flush()?;
    let [t, v, s] = assignment.sizes();
    eprintln!("train {t}, val {v}, test {s}");
    Ok(Outcome::Done)
}

fn read_split(path: &Path) -> Result<SplitAssignment> {
    dataset::read_split_manifest(open(path)?).with_context(|| format!("split manifest {}", path.display()))
}

fn select(split: &SplitAssignment, part: Part, pairs: &[QaPair]) -> Vec<QaPair> {
    split
        .select(part.name(), pairs)
        .unwrap_or_default()
        .into_iter()
        .cloned()
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let pairs = read_pairs(&a.dataset)?;
    let preds = eval::load_predictions(open(&a.predictions)?).with_context(|| format!("predictions {}", a.predictions.display()))?;
    let (scored, space) = match &a.split {
        Some(p) => {
            let split = read_split(p)?;
            let space = a
                .answer_space
                .then(|| dataset::build_answer_space(&select(&split, Part::Train, &pairs)));
            (select(&split, a.part, &pairs), space)
        }
        None => (pairs, None),
    };
    let report = eval::evaluate(&scored, &preds, space.as_ref());
    match &a.output {
        Some(p) => write_json(&report, p)?,
        None => {
            serde_json::to_writer_pretty(io::stdout().lock(), &report)?;
            println!();
        }
    }
    eprintln!(
        "{} question(s): acc@1 {:.4}, acc@10 {:.4}",
        report.overall.count, report.overall.acc1, report.overall.acc10
    );
    Ok(Outcome::Done)
}

fn cmd_baseline(a: BaselineArgs) -> Result<Outcome> {
    let pairs = read_pairs(&a.dataset)?;
    let split = a.split.as_deref().map(read_split).transpose()?;
    let scored = match &split {
        Some(s) => select(s, a.part, &pairs),
        None => pairs.clone(),
    };
    let preds: PredictionSet = match a.kind {
        BaselineKind::Oracle => {
            if a.graphs.is_empty() {
                return Err(UsageError("the oracle baseline needs --graphs".into()).into());
            }
            let reg = registry(a.templates.as_deref())?;
            let graphs = graphs_by_scene(load_graphs(&a.graphs)?);
            eval::oracle_predictions(&scored, &graphs, &reg)?
        }
        BaselineKind::Majority => {
            let Some(s) = &split else {
                return Err(UsageError("the majority baseline needs --split".into()).into());
            };
            eval::majority_baseline(&select(s, Part::Train, &pairs), &scored)?
        }
    };
    let mut w = create(&a.output)?;
    eval::write_predictions(&preds, &mut w)?;
    w.flush()?;
    eprintln!("{} prediction(s) written to {}", preds.predictions.len(), a.output.display());
    Ok(Outcome::Done)
}

fn cmd_stats(a: StatsArgs) -> Result<Outcome> {
    let pairs = read_pairs(&a.dataset)?;
    serde_json::to_writer_pretty(io::stdout().lock(), &dataset::dataset_stats(&pairs))?;
    println!();
    Ok(Outcome::Done)
}

fn cmd_templates(a: TemplatesArgs) -> Result<Outcome> {
    let reg = registry(a.templates.as_deref())?;
    let mut out = io::stdout().lock();
    for t in &reg {
        writeln!(out, "{}\t{}\t{:?}\t{}", t.id, t.category.as_str(), t.hops, t.pattern)?;
    }
    Ok(Outcome::Done)
}

/// Whether `slot` of `t` takes an instance reference rather than plain text.
fn is_reference_slot(t: &QuestionTemplate, slot: SlotKind) -> bool {
    match slot {
        SlotKind::InstanceLabel => t.query.label_is_reference(),
        SlotKind::InstanceLabel1 | SlotKind::InstanceLabel2 => true,
        _ => false,
    }
}

fn slot_value(t: &QuestionTemplate, slot: SlotKind, raw: &str) -> SlotValue {
    let raw = raw.trim();
    if !is_reference_slot(t, slot) {
        return SlotValue::Text(raw.to_string());
    }
    let (label, location) = match raw.split_once('@') {
        Some((l, loc)) => (l.trim(), Some(loc.trim().to_string())),
        None => (raw, None),
    };
    SlotValue::Instance(InstanceRef {
        label: label.to_string(),
        location,
        id: None,
    })
}

fn binding_from_slots(t: &QuestionTemplate, slots: &[String]) -> Result<Binding> {
    let mut b = Binding::default();
    for s in slots {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--slot expects name=value, got {s:?}")))?;
        let kind = SlotKind::from_name(name.trim()).ok_or_else(|| UsageError(format!("unknown slot {name:?}")))?;
        b.values.insert(kind, slot_value(t, kind, value));
    }
    Ok(b)
}

fn cmd_query(a: QueryArgs) -> Result<Outcome> {
    let reg = registry(a.templates.as_deref())?;
    let graph: SceneGraph = read_json(&a.graph)?;
    let params = OracleParams {
        near_radius: a.near_radius,
        ..OracleParams::default()
    };
    let oracle = Oracle::new(&graph, params);
    if a.repl {
        return repl(&oracle, &reg);
    }
    let id = a.template.as_deref().unwrap_or_default();
    let t = find_template(&reg, id).ok_or_else(|| UsageError(format!("unknown template {id:?}")))?;
    let binding = match &a.binding {
        Some(json) => serde_json::from_str(json).map_err(|e| UsageError(format!("--binding: {e}")))?,
        None => binding_from_slots(t, &a.slot)?,
    };
    let question = instantiate(t, &binding)?;
    let answer = oracle.answer(t, &binding)?;
    println!("{question}");
    println!("{}", answer.value);
    Ok(Outcome::Done)
}

fn prompt_line(input: &mut impl BufRead, label: &str) -> Result<Option<String>> {
    eprint!("{label}> ");
    io::stderr().flush()?;
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

fn repl(oracle: &Oracle<'_>, reg: &[QuestionTemplate]) -> Result<Outcome> {
    eprintln!("template id, then one value per slot (instance slots: label or label@location); `list` or `quit`");
    let stdin = io::stdin();
    let mut input = stdin.lock();
    'outer: while let Some(id) = prompt_line(&mut input, "template")? {
        match id.as_str() {
            "" => continue,
            "quit" | "exit" => break,
            "list" => {
                for t in reg {
                    eprintln!("{}  {}", t.id, t.pattern);
                }
                continue;
            }
            _ => {}
        }
        let Some(t) = find_template(reg, &id) else {
            eprintln!("unknown template {id:?}");
            continue;
        };
        eprintln!("{}", t.pattern);
        let mut b = Binding::default();
        for &slot in &t.slots {
            if b.values.contains_key(&slot) {
                continue;
            }
            let Some(v) = prompt_line(&mut input, slot.name())? else { break 'outer };
            b.values.insert(slot, slot_value(t, slot, &v));
        }
        match instantiate(t, &b).map_err(anyhow::Error::from).and_then(|q| {
            let a = oracle.answer(t, &b).map_err(|e| anyhow!(e))?;
            Ok((q, a))
        }) {
            Ok((q, a)) => println!("{q}\n{}", a.value),
            Err(e) => eprintln!("error: {e}"),
        }
    }
    Ok(Outcome::Done)
}
