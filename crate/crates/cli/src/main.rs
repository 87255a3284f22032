use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hysteg::cnn::Profile;
use hysteg::{Algorithm, MetricKind};
use hysteg_cli::corpus::{synthesize, SynthSpec};
use hysteg_cli::experiment::{ledger_in, run_experiment};
use hysteg_cli::{commands, CliError, ExperimentConfig, RunLedger};

#[derive(Parser)]
#[command(name = "hysteg", version, about = "Hybrid CNN / rich-model steganalysis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(clap::Args)]
struct SplitArgs {
    /// Corpus directory holding manifest.tsv.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "uniward")]
    algo: Algorithm,
    #[arg(long, default_value_t = 0.4)]
    payload: f64,
    #[arg(long, default_value_t = 101)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
}

impl SplitArgs {
    fn config(&self, out: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(&self.corpus, out);
        cfg.algorithm = self.algo;
        cfg.payload = self.payload;
        cfg.train_seeds = vec![self.seed];
        cfg.split_seed = self.split_seed;
        cfg.n_train = self.n_train;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cover corpus with stegos and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        embed_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "uniward")]
        algos: Vec<Algorithm>,
        #[arg(long, value_delimiter = ',', default_value = "0.4")]
        payloads: Vec<f64>,
    },
    /// Entropy and mean-cost table of the corpus covers, as CSV.
    Metrics {
        #[arg(long)]
        corpus: PathBuf,
        /// Payload used for the MiPOD costs.
        #[arg(long, default_value_t = 0.4)]
        payload: f64,
        #[arg(long, default_value_t = hysteg::costs::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = hysteg::costs::DEFAULT_HILL_CUTOFF)]
        hill_cutoff: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate embedding into one PGM cover.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        payload: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one CNN on one split.
    TrainCnn {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 50)]
        emax: usize,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one rich-model ensemble on one split.
    TrainEc {
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Run a configured multi-run experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild error curves of a ledger against a chosen metric.
    Curves {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value = "rho_bar_U")]
        metric: MetricKind,
        #[arg(long, default_value_t = 25)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tables over one or more ledgers (files or directories).
    Report {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, pairs, size, seed, embed_seed, algos, payloads } => {
            let m = synthesize(&out, &SynthSpec { pairs, size, seed, embed_seed, algorithms: algos, payloads })?;
            println!("wrote {} images under {}", m.entries().len(), out.display());
        }
        Command::Metrics { corpus, payload, sigma, hill_cutoff, out } => {
            let table = commands::metrics_table(&corpus, payload, sigma, hill_cutoff)?;
            emit(&table, out.as_deref())?;
        }
        Command::Embed { input, output, algo, payload, seed } => {
            let s = commands::embed_file(&input, &output, algo, payload, seed)?;
            println!(
                "lambda {} achieved {:.6} bpp, {} changes",
                s.lambda, s.achieved_payload, s.change_count
            );
        }
        Command::TrainCnn { split, emax, profile, out } => {
            let mut cfg = split.config(out);
            cfg.epochs = emax;
            cfg.profile = profile.into();
            cfg.validate()?;
            let (err, ckpt) = commands::train_cnn(&cfg)?;
            println!("test error {err:.4}, checkpoint {}", ckpt.display());
        }
        Command::TrainEc { split } => {
            let cfg = split.config(std::env::temp_dir());
            cfg.validate()?;
            let err = commands::train_ec(&cfg)?;
            println!("test error {err:.4}");
        }
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg)?;
            for w in &out.ledger.hybrid.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", std::fs::read_to_string(&out.hybrid_csv).unwrap_or_default().trim_end());
            println!("ledger {}", out.ledger_path.display());
        }
        Command::Curves { ledger, metric, bins, out } => {
            let l = RunLedger::load(&ledger)?;
            for p in commands::curves(&l, metric, bins, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Report { ledgers, out } => {
            let mut paths = Vec::new();
            for p in ledgers {
                if p.is_dir() {
                    paths.extend(ledger_in(&p)?);
                } else {
                    paths.push(p);
                }
            }
            let loaded = paths.iter().map(|p| RunLedger::load(p)).collect::<Result<Vec<_>, _>>()?;
            emit(&commands::report(&loaded)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn emit(text: &str, out: Option<&std::path::Path>) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
