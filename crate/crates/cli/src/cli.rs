use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stemflow::checkpoint::CheckpointBundle;
use stemflow::codec::{normalize_mix, DEFAULT_MIX_DBFS};
use stemflow::corpus::{build_corpus, Dataset, StemType, MANIFEST_FILE};
use stemflow::eval::run_eval_suite;
use stemflow::io::write_wav;
use stemflow::sampler::{run_workflow, SharedConditions, StemRequest, WorkflowMode};
use stemflow::trainer::{train, Setting};

use crate::config::FileConfig;
use crate::service::{serve, DATA_DIR_ENV};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(name = "stemflow", version, about = "Toy multi-stem generation: corpus, training, sampling, evaluation, service")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Procedural corpus tools.
    Corpus {
        #[command(subcommand)]
        action: CorpusCommand,
    },
    /// Train one ablation setting.
    Train(TrainArgs),
    /// Generate stems with one of the workflows.
    Generate(GenerateArgs),
    /// Evaluate checkpoints and print the metric table.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Write the manifest and latent files.
    Build(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub compositions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_setting)]
    pub setting: Setting,
    /// Corpus directory; generated from the `[corpus]` config when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: WorkflowMode,
    /// Comma-separated stem types, e.g. drums,bass,keys.
    #[arg(long, value_delimiter = ',', value_parser = parse_stem_type, required = true)]
    pub stems: Vec<StemType>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub style: usize,
    #[arg(long, default_value_t = 120)]
    pub tempo: u32,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// SETTING=PATH, repeatable or comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_checkpoint_arg, required = true)]
    pub checkpoints: Vec<(Setting, PathBuf)>,
    /// Training corpus for the style classifier; generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print `-` for wall time so the table is byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Session storage; defaults to the environment variable STEMFLOW_DATA_DIR.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: stemflow::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<WorkflowMode, String> {
    s.parse().map_err(|e: stemflow::Error| e.to_string())
}

fn parse_stem_type(s: &str) -> Result<StemType, String> {
    s.parse().map_err(|e: stemflow::Error| e.to_string())
}

fn parse_checkpoint_arg(s: &str) -> Result<(Setting, PathBuf), String> {
    let (setting, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SETTING=PATH, got {s}"))?;
    Ok((parse_setting(setting)?, PathBuf::from(path)))
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Corpus {
            action: CorpusCommand::Build(args),
        } => corpus_build(config, args),
        Command::Train(args) => train_cmd(config, args),
        Command::Generate(args) => generate_cmd(config, args),
        Command::Eval(args) => eval_cmd(config, args),
        Command::Serve(args) => serve_cmd(config, args),
    }
}

fn load_or_generate(config: &FileConfig, dir: Option<&Path>) -> CliResult<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::load(d)?,
        None => Dataset::generate(&config.corpus)?,
    })
}

fn corpus_build(mut config: FileConfig, args: CorpusArgs) -> CliResult<()> {
    if let Some(n) = args.compositions {
        config.corpus.compositions = n;
    }
    if let Some(s) = args.seed {
        config.corpus.seed = s;
    }
    let (_, summary) = build_corpus(&config.corpus, &args.out)?;
    println!(
        "{} compositions, {} stems -> {}",
        summary.compositions,
        summary.stems,
        args.out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train_cmd(config: FileConfig, args: TrainArgs) -> CliResult<()> {
    let mut tc = config.train.clone();
    tc.set_setting(args.setting);
    if let Some(v) = args.steps {
        tc.steps = v;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch.batch_size = v;
    }
    if let Some(v) = args.hidden_width {
        tc.model.hidden_width = v;
    }
    if let Some(v) = args.learning_rate {
        tc.optimizer.learning_rate = v;
    }
    let dataset = load_or_generate(&config, args.corpus.as_deref())?;
    let outcome = train(&tc, &dataset, Some(&args.out))?;
    println!(
        "setting {} trained {} steps, final loss {:.5} -> {}",
        args.setting,
        outcome.bundle.step,
        outcome.state.losses.last().copied().unwrap_or(f64::NAN),
        args.out.join("final.sfck").display()
    );
    Ok(())
}

fn generate_cmd(config: FileConfig, args: GenerateArgs) -> CliResult<()> {
    let model = CheckpointBundle::load(&args.checkpoint)?.model()?;
    let mut sample = config.sample.clone();
    if let Some(v) = args.seed {
        sample.seed = v;
    }
    if let Some(v) = args.steps {
        sample.num_steps = v;
        sample.cfg_window = None;
    }
    if let Some(v) = args.cfg_scale {
        sample.cfg_scale = v;
    }
    let frames = args.frames.unwrap_or(config.corpus.clip_frames);
    let shared = SharedConditions::new(args.style, args.tempo, frames);
    let requests: Vec<StemRequest> = args.stems.iter().map(|&t| StemRequest::new(t)).collect();
    let out = run_workflow(&model, &requests, &shared, args.mode, &sample)?;
    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    for (i, (stem, req)) in out.stems.iter().zip(&requests).enumerate() {
        let name = format!("{i:02}_{}.wav", req.stem_type);
        write_wav(&args.out.join(&name), stem)?;
        files.push(name);
    }
    write_wav(&args.out.join("mix.wav"), &normalize_mix(&out.mix, DEFAULT_MIX_DBFS)?)?;
    let report = json!({
        "report": serde_json::from_str::<serde_json::Value>(&out.report.to_record())?,
        "stems": files,
        "mix": "mix.wav",
        "style_token": args.style,
        "tempo_bpm": args.tempo,
    });
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} stems ({}) in {:.1} ms -> {}",
        files.len(),
        args.mode,
        out.report.wall_time_ms,
        args.out.display()
    );
    Ok(())
}

fn eval_cmd(config: FileConfig, args: EvalArgs) -> CliResult<()> {
    let mut ec = config.eval.clone();
    ec.sample = config.sample.clone();
    if let Some(v) = args.requests {
        ec.requests = v;
    }
    if let Some(v) = args.seed {
        ec.sample.seed = v;
    }
    if args.no_timing {
        ec.include_timing = false;
    }
    let mut checkpoints = BTreeMap::new();
    for (setting, path) in &args.checkpoints {
        checkpoints.insert(*setting, CheckpointBundle::load(path)?);
    }
    let corpus = load_or_generate(&config, args.corpus.as_deref())?;
    let report = run_eval_suite(&checkpoints, &corpus, &ec)?;
    let table = report.to_table(ec.include_timing);
    if let Some(path) = &args.out {
        fs::write(path, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn serve_cmd(config: FileConfig, args: ServeArgs) -> CliResult<()> {
    let mut sc = config.serve.clone();
    if let Some(v) = args.port {
        sc.port = v;
    }
    if let Some(v) = args.checkpoint {
        sc.checkpoint = v;
    }
    if let Some(v) = args.data_dir {
        sc.data_dir = v;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(sc))
}
