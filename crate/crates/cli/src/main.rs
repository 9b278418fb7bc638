use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corrsparse::harness::{
    run_experiment, run_gen, run_single, summarize, ConfigFile, Experiment, HarnessError, HarnessResult,
};

#[derive(Parser, Debug)]
#[command(name = "corrsparse", version, about = "Correlation-aware sparse recovery: instances, solvers and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one instance and export it as an instance directory.
    Gen,
    /// Solve one instance (generated or loaded with --instance) with one algorithm.
    Solve {
        /// Instance directory (phi.csv, y.csv, meta.json, optional x_true.csv).
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Run an experiment protocol.
    Exp {
        /// Overrides the config file's experiment; --experiment works too.
        which: Option<ExpName>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExpName {
    Fig1,
    Fig2,
    Fig3,
    Sweep,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// fig1, fig2, fig3, sweep or single.
    #[arg(long, global = true)]
    experiment: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated algorithm ids.
    #[arg(long, global = true, value_delimiter = ',')]
    algos: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true, env = "CORR_SPARSE_THREADS")]
    threads: Option<usize>,
    /// Comma-separated window lengths for fig3.
    #[arg(long, global = true, value_delimiter = ',')]
    window_len: Option<Vec<usize>>,
}

fn config_error(msg: String) -> HarnessError {
    HarnessError::Config(corrsparse::Error::InvalidOption(msg))
}

fn build_config(cli: &Cli) -> HarnessResult<ConfigFile> {
    let c = &cli.common;
    let mut file = match &c.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(e) = &c.experiment {
        file.experiment = Some(Experiment::parse(e).ok_or_else(|| config_error(format!("unknown experiment {e:?}")))?);
    }
    if let Command::Exp { which: Some(w) } = &cli.command {
        file.experiment = Some(match w {
            ExpName::Fig1 => Experiment::Fig1,
            ExpName::Fig2 => Experiment::Fig2,
            ExpName::Fig3 => Experiment::Fig3,
            ExpName::Sweep => Experiment::Sweep,
        });
    }
    if let Some(t) = c.trials {
        file.trials = Some(t);
    }
    if let Some(s) = c.seed {
        file.master_seed = Some(s);
    }
    if let Some(a) = &c.algos {
        file.algos = Some(a.clone());
    }
    if let Some(o) = &c.out {
        file.out_dir = Some(o.clone());
    }
    if let Some(t) = c.threads {
        file.threads = Some(t);
    }
    if let Some(w) = &c.window_len {
        file.window_lens = Some(w.clone());
    }
    if let Command::Solve { instance: Some(dir) } = &cli.command {
        file.instance_dir = Some(dir.clone());
    }
    Ok(file)
}

fn run(cli: &Cli) -> HarnessResult<()> {
    match &cli.command {
        Command::Gen => {
            let mut file = build_config(cli)?;
            file.experiment.get_or_insert(Experiment::Single);
            let cfg = file.resolve()?;
            let inst = run_gen(&cfg)?;
            println!(
                "wrote {}x{} instance with L = {} to {}",
                inst.meta.n,
                inst.meta.m,
                inst.meta.l,
                cfg.out_dir.display()
            );
        }
        Command::Solve { .. } => {
            let mut file = build_config(cli)?;
            file.experiment = Some(Experiment::Single);
            let cfg = file.resolve()?;
            let res = run_single(&cfg)?;
            let s = &res.summary;
            println!(
                "{}: converged = {}, iterations = {}, |support| = {}{}",
                s.algo,
                s.converged,
                s.iterations,
                s.support.len(),
                s.nmse.map(|e| format!(", nmse = {e:.3e}")).unwrap_or_default()
            );
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Exp { .. } => {
            let file = build_config(cli)?;
            if file.experiment.is_none() {
                return Err(config_error("exp needs fig1, fig2, fig3 or sweep".into()));
            }
            let cfg = file.resolve()?;
            if cfg.experiment == Experiment::Single {
                return Err(config_error("use `solve` for single runs".into()));
            }
            log::info!("{} with {} trials, algos {:?}", cfg.experiment.id(), cfg.trials, cfg.algos);
            let summary = run_experiment(&cfg)?;
            for row in summarize(&summary.records()) {
                let point = match (row.beta, row.window_len) {
                    (Some(b), _) => format!("beta = {b}, L = {}", row.l),
                    (None, Some(w)) => format!("window = {w}"),
                    (None, None) => format!("L = {}", row.l),
                };
                println!(
                    "{:<20} {:<22} failure rate {:.3}  mean nmse {:.3e}",
                    row.algo, point, row.failure_rate, row.mean_nmse
                );
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
