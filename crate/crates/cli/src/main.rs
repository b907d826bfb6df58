//! `unir`: command-line front end. Each subcommand is a thin shell over the
//! `unir_core` modules.

mod error;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::filter::LevelFilter;

use unir_core::data::parse_corpus;
use unir_core::eval::{classify_errors, render_report, EvalRun, InstructionPolicy, MetricSpec, ReportFormat};
use unir_core::experiments::{
    evaluate_model, render_held_out_summary, render_summary, run_held_out, run_plan, write_held_out_dir,
    write_run_dir, EvalSettings, ExperimentPlan, IndexKind, IndexSettings,
};
use unir_core::index::{build_clustered, read_embeddings, write_embeddings};
use unir_core::model::{embed_pool, missing_features, FusionMode};
use unir_core::server::{serve_blocking, IndexBundle, SearchRequest, SearcherSpec, ServiceState};
use unir_core::synthgen::{generate, HeldOut, SynthConfig};
use unir_core::train::{train, Checkpoint, TrainConfig};

use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "unir", version, about = "Instruction-guided multimodal retrieval engine")]
struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (UNIR_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check a corpus.
    Validate {
        #[arg(long, value_parser = existing_file)]
        queries: PathBuf,
        #[arg(long, value_parser = existing_file)]
        candidates: PathBuf,
        /// Also check that every image reference has a raw feature.
        #[arg(long, value_parser = existing_file)]
        features: Option<PathBuf>,
    },
    /// Generate a synthetic corpus into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML synth config; defaults when absent.
        #[arg(long, value_parser = existing_file)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        /// TOML train config; flags below override it.
        #[arg(long, value_parser = existing_file)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// score or feature.
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        no_instructions: bool,
        /// JSON lines of per-batch loss reports.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Embed a candidate pool into an embedding file.
    Embed {
        #[arg(long, value_parser = existing_file)]
        candidates: PathBuf,
        #[arg(long, value_parser = existing_file)]
        features: PathBuf,
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a searchable index bundle over an embedding file.
    IndexBuild {
        #[arg(long, value_parser = existing_file)]
        store: PathBuf,
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        /// Raw image features used to encode image queries.
        #[arg(long, value_parser = existing_file)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        index: IndexArgs,
        #[arg(long, default_value_t = unir_core::index::DEFAULT_MAX_ITERS)]
        max_iters: usize,
    },
    /// Run one query against an index bundle.
    Search {
        #[arg(long, value_parser = existing_file)]
        index: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long)]
        n_probe: Option<usize>,
    },
    /// Serve an index bundle over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, value_parser = existing_file)]
        index: PathBuf,
        #[arg(long)]
        n_probe: Option<usize>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[arg(long)]
        no_instructions: bool,
        /// Score each dataset against its own pool instead of the global one.
        #[arg(long)]
        local: bool,
        /// TOML metric spec.
        #[arg(long, value_parser = existing_file)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        index: IndexArgs,
        #[arg(long, default_value_t = 0)]
        instruction_seed: u64,
        #[command(flatten)]
        output: OutputArgs,
        /// Save the full evaluation (for `errors` and `report`).
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Error taxonomy of a saved evaluation.
    Errors {
        #[arg(long, value_parser = existing_file)]
        queries: PathBuf,
        #[arg(long, value_parser = existing_file)]
        candidates: PathBuf,
        #[arg(long, value_parser = existing_file)]
        run: PathBuf,
        #[arg(long, value_parser = existing_file)]
        metrics: Option<PathBuf>,
    },
    /// Run a declarative experiment plan.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Render a saved evaluation, optionally against a baseline.
    Report {
        #[arg(long, value_parser = existing_file)]
        run: PathBuf,
        #[arg(long, value_parser = existing_file)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// Every condition on every seed, with delta tables.
    Run {
        #[arg(long, value_parser = existing_file)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on held-in datasets, evaluate on the held-out ones.
    HeldOut {
        #[arg(long, value_parser = existing_file)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated dataset or task names; overrides the plan.
        #[arg(long, conflicts_with = "random")]
        names: Option<String>,
        /// Hold out this many randomly chosen datasets.
        #[arg(long)]
        random: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long, value_parser = existing_file)]
    queries: PathBuf,
    #[arg(long, value_parser = existing_file)]
    candidates: PathBuf,
    /// Feature-mode embedding file of raw image features.
    #[arg(long, value_parser = existing_file)]
    features: PathBuf,
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// flat or clustered.
    #[arg(long, default_value = "flat", value_parser = parse_index_kind)]
    kind: IndexKind,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    n_lists: u32,
    #[arg(long)]
    n_probe: Option<usize>,
}

impl IndexArgs {
    fn settings(&self) -> IndexSettings {
        IndexSettings { kind: self.kind, n_lists: self.n_lists as usize, n_probe: self.n_probe }
    }
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    txt: Option<String>,
    #[arg(long)]
    img_id: Option<String>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// text, csv or json.
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: ReportFormat,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn parse_index_kind(s: &str) -> Result<IndexKind, String> {
    match s {
        "flat" => Ok(IndexKind::Flat),
        "clustered" | "ivf" => Ok(IndexKind::Clustered),
        _ => Err(format!("unknown index kind {s:?} (expected flat or clustered)")),
    }
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::from_str(s).map_err(|e| e.to_string())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_metrics(path: Option<&Path>) -> Result<MetricSpec, CliError> {
    let spec = match path {
        Some(p) => read_toml(p)?,
        None => MetricSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { queries, candidates, features } => {
            let corpus = parse_corpus(&queries, &candidates)?;
            if let Some(f) = features {
                let store = read_embeddings(&f)?;
                if let Some(first) = missing_features(&corpus, &store).first() {
                    return Err(CliError::data("MISSING_FEATURE", format!("no raw feature for image {first:?}")));
                }
            }
            for lint in corpus.lints() {
                eprintln!("warning: {lint}");
            }
            println!(
                "ok: {} queries, {} candidates, {} datasets",
                corpus.queries.len(),
                corpus.pool.len(),
                corpus.datasets().len()
            );
        }
        Command::Synth { out, config } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_toml(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let synth = generate(&cfg)?;
            fs::create_dir_all(&out)?;
            synth.write(&out)?;
            println!(
                "wrote {} queries and {} candidates to {}",
                synth.corpus.queries.len(),
                synth.corpus.pool.len(),
                out.display()
            );
        }
        Command::Train { corpus, out, config, epochs, batch_size, learning_rate, mode, no_instructions, loss_log } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_toml(&p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.use_instructions &= !no_instructions;
            let data = parse_corpus(&corpus.queries, &corpus.candidates)?;
            let features = read_embeddings(&corpus.features)?;
            let outcome = train(&data, &features, features.dim(), &cfg)?;
            outcome.checkpoint(&cfg).save(&out)?;
            if let Some(path) = loss_log {
                let mut text = String::new();
                for r in &outcome.loss_curve {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                fs::write(path, text)?;
            }
            match outcome.loss_curve.last() {
                Some(r) => println!("trained {} steps, final loss {:.6}", r.step, r.loss),
                None => println!("trained 0 steps"),
            }
        }
        Command::Embed { candidates, features, checkpoint, out } => {
            let pool = unir_core::data::parse_candidates(
                std::io::BufReader::new(fs::File::open(&candidates)?),
                &candidates.display().to_string(),
            )?;
            let features = read_embeddings(&features)?;
            let params = Checkpoint::load(&checkpoint)?.params;
            let store = embed_pool(&params, &pool, &features)?;
            write_embeddings(&store, &out)?;
            println!("embedded {} candidates into {}", store.len(), out.display());
        }
        Command::IndexBuild { store, checkpoint, features, out, index, max_iters } => {
            let params = Checkpoint::load(&checkpoint)?.params;
            let rows = read_embeddings(&store)?;
            read_embeddings(&features)?;
            let searcher = match index.kind {
                IndexKind::Flat => SearcherSpec::Flat,
                IndexKind::Clustered => {
                    let n_lists = index.n_lists as usize;
                    let built = build_clustered(Arc::new(rows), params.weights, n_lists, cli.seed.unwrap_or(0), max_iters)?;
                    let built = built.with_n_probe(index.n_probe.unwrap_or(n_lists))?;
                    SearcherSpec::Clustered(built.to_file())
                }
            };
            let bundle = IndexBundle {
                store: fs::canonicalize(&store)?,
                checkpoint: fs::canonicalize(&checkpoint)?,
                features: fs::canonicalize(&features)?,
                searcher,
            };
            bundle.open(None)?;
            bundle.save(&out)?;
            println!("wrote index bundle {}", out.display());
        }
        Command::Search { index, query, n_probe } => {
            let engine = IndexBundle::load(&index)?.open(n_probe)?;
            let req = SearchRequest { txt: query.txt, img_id: query.img_id, instruction: query.instruction, k: query.k };
            let hits = engine.search(&req)?;
            println!("{}", serde_json::to_string_pretty(&hits)?);
        }
        Command::Serve { addr, index, n_probe } => {
            let bundle = IndexBundle::load(&index)?;
            let listener = std::net::TcpListener::bind(&addr)?;
            println!("listening on {}", listener.local_addr()?);
            let state = Arc::new(ServiceState::new());
            let loader = Arc::clone(&state);
            std::thread::spawn(move || match bundle.open(n_probe) {
                Ok(engine) => {
                    tracing::info!(candidates = engine.len(), "index loaded");
                    loader.load(engine);
                }
                Err(e) => {
                    let e = CliError::from(e);
                    eprintln!("{e}");
                    std::process::exit(i32::from(e.exit));
                }
            });
            serve_blocking(listener, state)?;
        }
        Command::Eval {
            corpus,
            checkpoint,
            no_instructions,
            local,
            metrics,
            index,
            instruction_seed,
            output,
            save,
        } => {
            let data = parse_corpus(&corpus.queries, &corpus.candidates)?;
            let features = read_embeddings(&corpus.features)?;
            let params = Checkpoint::load(&checkpoint)?.params;
            let settings = EvalSettings {
                index: index.settings(),
                metrics: load_metrics(metrics.as_deref())?,
                policy: if no_instructions { InstructionPolicy::Without } else { InstructionPolicy::With },
                instruction_seed,
                local_pool: local,
            };
            let (global, local_run) = evaluate_model(&data, &params, &features, &settings, cli.seed.unwrap_or(0))?;
            let chosen = local_run.unwrap_or(global);
            if let Some(path) = save {
                chosen.save(&path)?;
            }
            let text = render_report(&chosen.report, &chosen.errors, None, output.format);
            emit(output.out.as_deref(), &text)?;
        }
        Command::Errors { queries, candidates, run, metrics } => {
            let corpus = parse_corpus(&queries, &candidates)?;
            let saved = EvalRun::load(&run)?;
            let e = classify_errors(&corpus, &saved.report, &load_metrics(metrics.as_deref())?);
            println!("failed          {}", e.failed);
            println!("wrong_modality  {:.4}", e.wrong_modality);
            println!("wrong_domain    {:.4}", e.wrong_domain);
            println!("other           {:.4}", e.other);
        }
        Command::Experiment(ExperimentCommand::Run { plan, out }) => {
            let mut p = ExperimentPlan::load(&plan)?;
            if let Some(seed) = cli.seed {
                p.seeds = vec![seed];
            }
            let report = run_plan(&p)?;
            print!("{}", render_summary(&report));
            if let (Some(b), Some(t)) = (p.baseline.as_deref(), p.treatment.as_deref()) {
                for run in &report.runs {
                    let (Some(bc), Some(tc)) = (run.condition(b), run.condition(t)) else { continue };
                    println!("\nseed {}: {t} vs {b}", run.seed);
                    let baseline = Some((&bc.global, &bc.global_errors));
                    print!("{}", render_report(&tc.global, &tc.global_errors, baseline, ReportFormat::Text));
                }
            }
            if let Some(dir) = out {
                write_run_dir(&dir, &p, &report)?;
                println!("\nwrote run directory {}", dir.display());
            }
        }
        Command::Experiment(ExperimentCommand::HeldOut { plan, out, names, random }) => {
            let mut p = ExperimentPlan::load(&plan)?;
            if let Some(seed) = cli.seed {
                p.seeds = vec![seed];
            }
            let held_out = match (names, random) {
                (Some(n), _) => HeldOut::Names(n.split(',').map(|s| s.trim().to_string()).collect()),
                (None, Some(r)) => HeldOut::Random(r),
                (None, None) => p
                    .held_out
                    .clone()
                    .ok_or_else(|| CliError::usage("no held-out set: pass --names or --random, or set held_out in the plan"))?,
            };
            let report = run_held_out(&p, &held_out)?;
            print!("{}", render_held_out_summary(&report));
            if let Some(dir) = out {
                write_held_out_dir(&dir, &p, &report)?;
                println!("\nwrote run directory {}", dir.display());
            }
        }
        Command::Report { run, baseline, output } => {
            let saved = EvalRun::load(&run)?;
            let base = baseline.map(|b| EvalRun::load(&b)).transpose()?;
            let text = render_report(
                &saved.report,
                &saved.errors,
                base.as_ref().map(|b| (&b.report, &b.errors)),
                output.format,
            );
            emit(output.out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn setup(cli: &Cli) -> Result<(), CliError> {
    let level = LevelFilter::from_str(&cli.log_level)
        .map_err(|_| CliError::usage(format!("invalid --log-level {:?}", cli.log_level)))?;
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    let threads = match std::env::var("UNIR_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| CliError::usage(format!("invalid UNIR_THREADS {v:?}")))?),
        Err(_) => cli.threads,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let msg = rendered.trim_start_matches("error: ").trim_end();
            eprintln!("error[USAGE]: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match setup(&cli).and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit)
        }
    }
}
