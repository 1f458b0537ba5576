use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use palm_core::evaluation::EditMetric;
use palm_core::pipeline::{self, AblationAxis, Pipeline, RunConfig, SelectionStrategy, PREDICTIONS_FILE, REPORT_FILE};
use palm_core::Error;

/// Long-term action anticipation with few-shot prompted language models.
#[derive(Debug, Parser)]
#[command(name = "palm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption the middle frame of every action segment.
    Caption(RunArgs),
    /// Select examples, build prompts and sample predictions.
    Predict(RunArgs),
    /// Score a prediction dump against the annotations.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Prediction dump; defaults to <output>/predictions.json.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Predict and evaluate over the cross-product of ablation axes.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// narrations | actions | selection | num-examples=0,4,8 (repeatable).
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Regress per-query edit distance on recognition accuracy.
    Regress {
        /// Report written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        /// Directory for regression.json; defaults to the report's directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectionArg {
    Mmr,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Levenshtein,
    Osa,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Annotations of the few-shot example pool.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    verbs: Option<PathBuf>,
    #[arg(long)]
    nouns: Option<PathBuf>,
    /// Recognized past actions used in prompts and for accuracy.
    #[arg(long)]
    recognized: Option<PathBuf>,
    #[arg(long)]
    embedding_cache: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Sampled predictions per query.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    no_narrations: bool,
    #[arg(long)]
    no_actions: bool,
    /// Query every anchor from the first one onwards, not just the first.
    #[arg(long)]
    all_anchors: bool,
    #[arg(long)]
    first_anchor: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Use deterministic in-process backends.
    #[arg(long)]
    mock_backends: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        config.backends.apply_env(|k| std::env::var(k).ok())?;
        let set = |slot: &mut PathBuf, value: &Option<PathBuf>| {
            if let Some(v) = value {
                *slot = v.clone();
            }
        };
        set(&mut config.annotations, &self.annotations);
        set(&mut config.verbs, &self.verbs);
        set(&mut config.nouns, &self.nouns);
        set(&mut config.output_dir, &self.output);
        if self.pool.is_some() {
            config.pool_annotations = self.pool.clone();
        }
        if self.recognized.is_some() {
            config.recognized = self.recognized.clone();
        }
        if self.embedding_cache.is_some() {
            config.embedding_cache = self.embedding_cache.clone();
        }
        if self.cache_dir.is_some() {
            config.cache_dir = self.cache_dir.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.sampling.seed = Some(seed);
        }
        if let Some(lambda) = self.lambda {
            config.lambda = lambda;
        }
        if let Some(k) = self.k {
            config.sampling.k = k;
        }
        if let Some(t) = self.temperature {
            config.sampling.temperature = t;
        }
        if let Some(n) = self.num_examples {
            config.prompt.num_examples = n;
        }
        if let Some(s) = self.selection {
            config.selection = match s {
                SelectionArg::Mmr => SelectionStrategy::Mmr,
                SelectionArg::Random => SelectionStrategy::Random,
            };
        }
        if self.no_narrations {
            config.prompt.include_narrations = false;
        }
        if self.no_actions {
            config.prompt.include_actions = false;
        }
        if self.all_anchors {
            config.anchors.sweep = true;
        }
        if let Some(first) = self.first_anchor {
            config.anchors.first = first;
        }
        if let Some(m) = self.metric {
            config.metric = match m {
                MetricArg::Levenshtein => EditMetric::Levenshtein,
                MetricArg::Osa => EditMetric::Osa,
            };
        }
        if self.mock_backends {
            config.backends.mock = true;
        }
        Ok(config)
    }
}

enum Status {
    Clean,
    Anomalies(usize),
}

fn run(cli: Cli) -> Result<Status, Error> {
    match cli.command {
        Command::Caption(args) => {
            let outcome = Pipeline::open(args.resolve()?)?.caption()?;
            println!(
                "wrote {} captions ({} backend calls) to {}",
                outcome.captions,
                outcome.backend_calls,
                outcome.path.display()
            );
            Ok(Status::Clean)
        }
        Command::Predict(args) => {
            let outcome = Pipeline::open(args.resolve()?)?.predict()?;
            println!("wrote {} predictions to {}", outcome.n_queries, outcome.path.display());
            Ok(anomalies(outcome.fallback_samples))
        }
        Command::Evaluate { run, predictions } => {
            let pipeline = Pipeline::open(run.resolve()?)?;
            let predictions = predictions.unwrap_or_else(|| pipeline.config.output_dir.join(PREDICTIONS_FILE));
            let file = pipeline.evaluate(&predictions)?;
            let r = &file.report;
            println!(
                "verb ED {:.4}  noun ED {:.4}  action ED {:.4}  over {} queries",
                r.verb_ed, r.noun_ed, r.action_ed, r.n_queries
            );
            println!("wrote {}", pipeline.config.output_dir.join(REPORT_FILE).display());
            Ok(anomalies(r.fallback_samples))
        }
        Command::Ablate { run, axes } => {
            let axes = axes
                .iter()
                .map(|a| a.parse())
                .collect::<Result<Vec<AblationAxis>, _>>()?;
            let pipeline = Pipeline::open(run.resolve()?)?;
            let file = pipeline::ablate(&pipeline, &axes)?;
            println!("narrations actions selection examples verb_ed noun_ed action_ed");
            for row in &file.rows {
                println!(
                    "{:<10} {:<7} {:<9} {:<8} {:.4}  {:.4}  {:.4}",
                    row.include_narrations,
                    row.include_actions,
                    format!("{:?}", row.selection).to_lowercase(),
                    row.num_examples,
                    row.verb_ed,
                    row.noun_ed,
                    row.action_ed
                );
            }
            Ok(Status::Clean)
        }
        Command::Regress { report, output } => {
            let dir = output.unwrap_or_else(|| report.parent().map(PathBuf::from).unwrap_or_default());
            let file = pipeline::regress(&report, &dir)?;
            for cell in &file.cells {
                println!(
                    "{:?} ~ {:?}: coefficient {:.4} (stderr {:.4}), n = {}",
                    cell.edit_distance, cell.accuracy, cell.result.coefficient, cell.result.stderr, cell.result.n
                );
            }
            Ok(Status::Clean)
        }
    }
}

fn anomalies(fallback_samples: usize) -> Status {
    if fallback_samples > 0 {
        Status::Anomalies(fallback_samples)
    } else {
        Status::Clean
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Anomalies(n)) => {
            eprintln!("warning: {n} sampled completions held no valid action and were filled with the fallback");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
