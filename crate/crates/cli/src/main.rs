use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qnet::ablation::Scale;
use qnet_cli::commands::{cmd_ablate, cmd_eval, cmd_export_maps, cmd_gradcheck, cmd_train};
use qnet_cli::config::RunConfig;
use qnet_cli::{CliError, CliResult};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "qnet", version, about = "Train, evaluate and ablate quotient networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is the strict deterministic mode. Defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes the resolved config, history and checkpoints.
    Train(Common),
    /// Test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation suite (table4 .. table8).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
        #[arg(long, default_value = "smoke")]
        scale: String,
        /// Comma-separated seeds; overrides --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every primitive and block type.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Corrupt the backward rule of one component (verifies the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Export branch feature maps of the first blocks as P5 tile grids.
    ExportMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A 32x32 P6 pixmap or a CIFAR-style binary record file.
        #[arg(long)]
        image: PathBuf,
        /// Record index when --image is a record file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        blocks: Vec<usize>,
    },
}

impl Common {
    fn setup(&self) -> CliResult<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
        }
        Ok(())
    }

    fn run_config(&self) -> CliResult<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::defaults(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = io::stdout();
    let mut log = stdout.lock();
    match cli.command {
        Command::Train(common) => {
            common.setup()?;
            cmd_train(&common.run_config()?, &common.out, &mut log)?;
        }
        Command::Eval { common, checkpoint } => {
            common.setup()?;
            let cfg = common.config.is_some().then(|| common.run_config()).transpose()?;
            cmd_eval(&checkpoint, cfg.as_ref(), &mut log)?;
        }
        Command::Ablate { common, suite, scale, seeds } => {
            common.setup()?;
            let cfg = common.run_config()?;
            let scale: Scale = scale.parse()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            cmd_ablate(&suite, scale, &seeds, &cfg, &common.out, &mut log)?;
        }
        Command::Gradcheck { common, instances, inject_fault } => {
            common.setup()?;
            cmd_gradcheck(instances, inject_fault.as_deref(), &mut log)?;
        }
        Command::ExportMaps { common, checkpoint, image, index, blocks } => {
            common.setup()?;
            cmd_export_maps(&checkpoint, &image, index, &blocks, &common.out, &mut log)?;
        }
    }
    log.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation errors; help and version succeed.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
