use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use facet_core::approx::k_sweep;
use facet_core::benchmark::{per_facet_report, write_merged_csv, BenchmarkSet, FacetReport};
use facet_core::config::ExperimentConfig;
use facet_core::harness::{
    build_general_store, build_prompted_store, build_store, cost_report, run_baseline, run_linear_approx,
    run_preprocessed_selected, run_prompted_gt, write_cost_csv, EvalMode, EvalOptions, RunManifest, RunOutput,
};
use facet_core::prompts::{
    generate_question, select_prompt, HttpTextGen, PromptRegistry, QuestionSource, Selector,
};
use facet_core::providers::{
    EmbedderProvider, FileProvider, HttpEmbedder, QueryRequest, SyntheticProvider, GENERAL_TAG, QUERIES_TAG,
};
use facet_core::synth::{generate_benchmark, generate_world, registry_for_world};
use facet_core::{EmbeddingStore, Error, Result};

#[derive(Parser)]
#[command(name = "facet", version, about = "Attribute-focused retrieval with promptable embeddings")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic world and benchmark generation.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
    /// Embedding stores.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Prompt question generation and selection.
    Prompt {
        #[command(subcommand)]
        action: PromptAction,
    },
    /// Evaluation runs.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Linear-approximation recall over sample sizes and seeds.
    Sweep(SweepArgs),
    /// Report utilities.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Subcommand)]
enum SynthAction {
    /// Writes config.toml, benchmark.jsonl and registry.json (and optionally stores/) to a directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the world and benchmark seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        images: Option<usize>,
        /// Cases per facet.
        #[arg(long)]
        cases: Option<usize>,
        /// Also export embedding stores for the file-backed provider.
        #[arg(long)]
        stores: bool,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    /// Embeds every benchmark image (or query) into one store file.
    Build {
        #[command(flatten)]
        provider: ProviderArgs,
        /// `general`, `queries`, or a prompt id from the registry.
        #[arg(long, default_value = GENERAL_TAG)]
        prompt: String,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptAction {
    /// Writes a question about an attribute.
    Gen {
        #[arg(long)]
        attribute: String,
        /// Comma-separated example answers.
        #[arg(long, value_delimiter = ',', required = true)]
        answers: Vec<String>,
        /// Use the text-generation service at FACET_LLM_URL.
        #[arg(long)]
        external: bool,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Picks the registry prompt for a query.
    Select {
        #[arg(long)]
        query: String,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[command(flatten)]
        selector: SelectorArgs,
    },
}

#[derive(Subcommand)]
enum EvalAction {
    /// Evaluates one mode and writes report.csv, report.json, cost.csv and manifest.json.
    Run(EvalRunArgs),
}

#[derive(Subcommand)]
enum ReportAction {
    /// Combines report.json files into one CSV.
    Merge {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Synthetic,
    Files,
    Http,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    provider: ProviderKind,
    /// Experiment config; defines the synthetic world.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Store directory for the file-backed provider.
    #[arg(long)]
    stores: Option<PathBuf>,
    /// Embedding dimension of the HTTP provider.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SelectorKind {
    Lexical,
    External,
}

#[derive(Args)]
struct SelectorArgs {
    #[arg(long, value_enum, default_value = "lexical")]
    selector: SelectorKind,
    /// Fall back to lexical selection when the external selector is unreachable.
    #[arg(long)]
    fallback: bool,
}

#[derive(Args)]
struct EvalRunArgs {
    #[arg(long)]
    mode: String,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k_sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds for linear approximation.
    #[arg(long)]
    seeds: Option<usize>,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    #[arg(long)]
    serial: bool,
    #[command(flatten)]
    selector: SelectorArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    provider: ProviderArgs,
    /// Defaults to a benchmark generated from the config.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    serial: bool,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

struct Setup {
    config: ExperimentConfig,
    provider: Box<dyn EmbedderProvider>,
    /// Registry derived from the synthetic world, when there is one.
    world_registry: Option<PromptRegistry>,
}

fn open_provider(args: &ProviderArgs) -> Result<Setup> {
    let config = load_config(args.config.as_deref())?;
    let (provider, world_registry): (Box<dyn EmbedderProvider>, _) = match args.provider {
        ProviderKind::Synthetic => {
            let world = generate_world(&config.world)?;
            let registry = registry_for_world(&world)?;
            (Box::new(SyntheticProvider::new(world)), Some(registry))
        }
        ProviderKind::Files => {
            let dir = args.stores.as_ref().ok_or_else(|| Error::InvalidArgument("--stores is required for files".into()))?;
            (Box::new(FileProvider::open(dir)?), None)
        }
        ProviderKind::Http => {
            let dim = args.dim.ok_or_else(|| Error::InvalidArgument("--dim is required for http".into()))?;
            (Box::new(HttpEmbedder::from_env(dim)?), None)
        }
    };
    Ok(Setup { config, provider, world_registry })
}

fn load_registry(path: Option<&Path>, fallback: Option<PromptRegistry>) -> Result<PromptRegistry> {
    match path {
        Some(p) => PromptRegistry::load(p),
        None => Ok(fallback.unwrap_or_else(PromptRegistry::gpt_default)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json(path: &Path, value: &std::collections::BTreeMap<String, f64>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn query_store(provider: &dyn EmbedderProvider, bench: &BenchmarkSet) -> Result<EmbeddingStore> {
    let ids: Vec<_> = bench.cases.iter().map(|c| c.case_id.clone()).collect();
    build_store(&ids, provider.dim(), QUERIES_TAG, true, |cid| {
        let c = bench.case(cid.as_str()).expect("case ids come from the benchmark");
        provider.embed_query(&QueryRequest { case_id: &c.case_id, text: &c.query_text, facet: &c.facet, value: None })
    })
}

fn synth_gen(out: &Path, config: Option<&Path>, seed: Option<u64>, images: Option<usize>, cases: Option<usize>, stores: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.world.seed = s;
        cfg.benchmark.seed = s;
    }
    if let Some(n) = images {
        cfg.world.n_images = n;
    }
    if let Some(c) = cases {
        cfg.benchmark.cases_default = c;
        cfg.benchmark.cases_per_facet.clear();
    }
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let bench = generate_benchmark(&world, &cfg.benchmark)?;
    let registry = registry_for_world(&world)?;
    create_dir(out)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    bench.save(out.join("benchmark.jsonl"))?;
    // generated files are always revalidated by a reload
    BenchmarkSet::load(out.join("benchmark.jsonl"))?;
    registry.save(out.join("registry.json"))?;
    if stores {
        let dir = out.join("stores");
        create_dir(&dir)?;
        let provider = SyntheticProvider::new(world);
        let ids = bench.image_ids();
        build_general_store(&provider, &ids, true)?.save(dir.join(format!("{GENERAL_TAG}.fcte")))?;
        for p in registry.prompts() {
            build_prompted_store(&provider, &ids, p, true)?.save(dir.join(format!("{}.fcte", p.prompt_id)))?;
        }
        query_store(&provider, &bench)?.save(dir.join(format!("{QUERIES_TAG}.fcte")))?;
    }
    println!("{} images, {} cases -> {}", cfg.world.n_images, bench.cases.len(), out.display());
    Ok(())
}

fn index_build(provider: &ProviderArgs, prompt: &str, benchmark: &Path, registry: Option<&Path>, out: &Path) -> Result<()> {
    let setup = open_provider(provider)?;
    let bench = BenchmarkSet::load(benchmark)?;
    let p = setup.provider.as_ref();
    let store = match prompt {
        GENERAL_TAG => build_general_store(p, &bench.image_ids(), true)?,
        QUERIES_TAG => query_store(p, &bench)?,
        id => {
            let registry = load_registry(registry, setup.world_registry)?;
            let spec = registry.get(id).ok_or_else(|| Error::MissingPrompt(id.to_string()))?;
            build_prompted_store(p, &bench.image_ids(), spec, true)?
        }
    };
    store.save(out)?;
    println!("{} rows of dim {} tagged `{}` -> {}", store.len(), store.dim(), store.tag(), out.display());
    Ok(())
}

fn text_client() -> Result<HttpTextGen> {
    HttpTextGen::from_env()
}

fn prompt_gen(attribute: &str, answers: &[String], external: bool, registry: Option<&Path>) -> Result<()> {
    let question = if external {
        let client = text_client()?;
        generate_question(attribute, answers, QuestionSource::External(&client))?
    } else {
        let reg = load_registry(registry, None)?;
        generate_question(attribute, answers, QuestionSource::Offline(&reg))?
    };
    println!("{question}");
    Ok(())
}

fn with_selector<T>(args: &SelectorArgs, f: impl FnOnce(&Selector<'_>) -> Result<T>) -> Result<T> {
    match args.selector {
        SelectorKind::Lexical => f(&Selector::Lexical),
        SelectorKind::External => match text_client() {
            Ok(client) => f(&Selector::External { client: &client, fallback_to_lexical: args.fallback }),
            Err(e) if args.fallback => {
                log::warn!("{e}; using lexical selection");
                f(&Selector::Lexical)
            }
            Err(e) => Err(Error::SelectorUnavailable(e.to_string())),
        },
    }
}

fn prompt_select(query: &str, registry: Option<&Path>, selector: &SelectorArgs) -> Result<()> {
    let reg = load_registry(registry, None)?;
    let outcome = with_selector(selector, |s| select_prompt(query, &reg, s))?;
    println!("{}\t{}", outcome.chosen, serde_json::to_value(outcome.method).expect("serializable").as_str().unwrap_or(""));
    Ok(())
}

fn eval_run(a: &EvalRunArgs) -> Result<()> {
    let mode: EvalMode = a.mode.parse()?;
    if a.k_sample == Some(0) {
        return Err(Error::InvalidArgument("--k-sample must be at least 1".into()));
    }
    if a.seeds == Some(0) {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Error::InvalidArgument("--ks must list positive cutoffs".into()));
    }
    let setup = open_provider(&a.provider)?;
    let bench = BenchmarkSet::load(&a.benchmark)?;
    let registry = load_registry(a.registry.as_deref(), setup.world_registry)?;
    let opts = EvalOptions {
        parallel: !a.serial,
        selector_concurrency: setup.config.eval.selector_concurrency,
        units: setup.config.costs,
    };
    let provider = setup.provider.as_ref();
    let k_sample = a.k_sample.unwrap_or(setup.config.eval.k_sample);
    let seed = a.seed.unwrap_or(setup.config.eval.seed);
    let n_seeds = if mode == EvalMode::LinearApprox { a.seeds.unwrap_or(1) } else { 1 };
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| seed + i).collect();

    let mut outputs: Vec<RunOutput> = Vec::new();
    match mode {
        EvalMode::Baseline => outputs.push(run_baseline(&bench, provider, &opts)?),
        EvalMode::PromptedGt => outputs.push(run_prompted_gt(&bench, provider, &registry, &opts)?),
        EvalMode::PreprocessedSelected => outputs.push(with_selector(&a.selector, |s| {
            run_preprocessed_selected(&bench, provider, &registry, s, &opts)
        })?),
        EvalMode::LinearApprox => {
            for &s in &seeds {
                outputs.push(run_linear_approx(&bench, provider, &registry, k_sample, s, &opts)?);
            }
        }
    }
    // records of all seeds pooled: each facet's recall is the seed average
    let records: Vec<_> = outputs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let report = per_facet_report(&records, &bench, &a.ks)?;
    create_dir(&a.out)?;
    let paths = ["report.csv", "report.json", "cost.csv", "manifest.json"].map(|f| a.out.join(f));
    report.write_csv(&paths[0])?;
    report.write_json(&paths[1])?;
    write_cost_csv(&cost_report(&outputs[0].ledger), &paths[2])?;
    let mut written = paths.to_vec();
    if let Some(acc) = &outputs[0].selection_accuracy {
        let p = a.out.join("selection.json");
        write_json(&p, acc)?;
        written.push(p);
    }
    let mut manifest = RunManifest::new(mode, provider.provider_id());
    manifest.benchmark = Some(a.benchmark.clone());
    manifest.registry = a.registry.clone();
    manifest.seed = seed;
    manifest.seeds = seeds;
    manifest.k_sample = (mode == EvalMode::LinearApprox).then_some(k_sample);
    manifest.ks = a.ks.clone();
    manifest.parallel = opts.parallel;
    manifest.units = opts.units;
    manifest.outputs = written;
    manifest.save(&paths[3])?;
    for k in &a.ks {
        if let Some(avg) = report.average(*k) {
            println!("{mode} recall@{k}: macro {:.4}, weighted {:.4}", avg.macro_recall, avg.weighted_recall);
        }
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let setup = open_provider(&a.provider)?;
    let bench = match (&a.benchmark, a.provider.provider) {
        (Some(p), _) => BenchmarkSet::load(p)?,
        (None, ProviderKind::Synthetic) => generate_benchmark(&generate_world(&setup.config.world)?, &setup.config.benchmark)?,
        (None, _) => return Err(Error::InvalidArgument("--benchmark is required for non-synthetic providers".into())),
    };
    let registry = load_registry(a.registry.as_deref(), setup.world_registry)?;
    let ks = a.ks.clone().unwrap_or_else(|| setup.config.eval.ks.clone());
    let n_seeds = a.seeds.unwrap_or(setup.config.eval.seeds);
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let first = a.seed.unwrap_or(setup.config.eval.seed);
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| first + i).collect();
    let provider = setup.provider.as_ref();
    let general = build_general_store(provider, &bench.image_ids(), !a.serial)?;
    let table = k_sweep(provider, &bench, &registry, &general, &ks, &seeds, !a.serial)?;
    create_dir(&a.out)?;
    table.write_csv(a.out.join("sweep.csv"))?;
    table.write_aggregate_csv(a.out.join("sweep_summary.csv"))?;
    let mut manifest = RunManifest::new(EvalMode::LinearApprox, provider.provider_id());
    manifest.benchmark = a.benchmark.clone();
    manifest.registry = a.registry.clone();
    manifest.seed = first;
    manifest.seeds = seeds;
    manifest.ks = ks;
    manifest.parallel = !a.serial;
    manifest.outputs = vec![a.out.join("sweep.csv"), a.out.join("sweep_summary.csv")];
    manifest.save(a.out.join("manifest.json"))?;
    for agg in table.aggregate() {
        println!(
            "{:<16} K={:<4} recall@5 {:.4} +/- {:.4}",
            agg.facet, agg.k_sample, agg.mean_recall_at_5, agg.stderr_recall_at_5
        );
    }
    Ok(())
}

fn report_merge(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let reports = inputs.iter().map(FacetReport::load_json).collect::<Result<Vec<_>>>()?;
    write_merged_csv(&reports, out)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot size worker pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { action: SynthAction::Gen { out, config, seed, images, cases, stores } } => {
            synth_gen(&out, config.as_deref(), seed, images, cases, stores)
        }
        Command::Index { action: IndexAction::Build { provider, prompt, benchmark, registry, out } } => {
            index_build(&provider, &prompt, &benchmark, registry.as_deref(), &out)
        }
        Command::Prompt { action: PromptAction::Gen { attribute, answers, external, registry } } => {
            prompt_gen(&attribute, &answers, external, registry.as_deref())
        }
        Command::Prompt { action: PromptAction::Select { query, registry, selector } } => {
            prompt_select(&query, registry.as_deref(), &selector)
        }
        Command::Eval { action: EvalAction::Run(args) } => eval_run(&args),
        Command::Sweep(args) => sweep(&args),
        Command::Report { action: ReportAction::Merge { out, inputs } } => report_merge(&out, &inputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_environmental() { 2 } else { 1 })
        }
    }
}
