use std::path::PathBuf;
use std::process::ExitCode;

use ccqfl::experiment::{self, parse_config};
use ccqfl::pauli::Basis;
use ccqfl::shadows::unpack_code;
use ccqfl::verify::{self, Suite};
use ccqfl::wire;
use ccqfl::{Error, Result};
use clap::{Parser, Subcommand};

/// Federated training of an observable-encoded quantum classifier.
#[derive(Parser)]
#[command(name = "ccqfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write history, manifest and heterogeneity report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a brute-force self-check suite.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the header and basis/outcome histograms of an encoded shadow set.
    InspectShadow {
        #[arg(long)]
        file: PathBuf,
    },
}

/// A run that completed but whose checks failed.
const CHECK_FAILED: u8 = 1;
/// Argument parsing errors, as clap reports them.
const BAD_ARGS: u8 = 2;

fn train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let mut cfg = parse_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let result = experiment::run(&cfg)?;
    experiment::write_outputs(&cfg.out_dir, &cfg, &result)?;
    if let Some(last) = result.history.last() {
        println!(
            "epoch {}: train_loss {:.4} train_acc {:.4} test_acc {:.4}",
            last.epoch, last.train_loss, last.train_accuracy, last.test_accuracy
        );
    }
    println!(
        "wrote {}",
        cfg.out_dir.join(experiment::HISTORY_FILE).display()
    );
    Ok(0)
}

fn run_verify(suite: &str, seed: u64) -> Result<u8> {
    let suite: Suite = suite.parse()?;
    let report = verify::run(suite, seed)?;
    print!("{report}");
    Ok(if report.passed() { 0 } else { CHECK_FAILED })
}

fn inspect(file: PathBuf) -> Result<u8> {
    let bytes = std::fs::read(&file)?;
    let set = wire::decode_shadow_set(&bytes)?;
    let n = set.n_qubits();
    println!("iteration  {}", set.iteration());
    println!("n_qubits   {n}");
    println!("p          {}", set.n_params());
    println!("M          {}", set.shots());
    println!("M2         {}", set.chunks());
    println!("entries    {}", set.entries().len());
    println!("bytes      {}", bytes.len());
    let mut hist = vec![[[0u64; 2]; 3]; n];
    for e in set.entries() {
        for (i, &c) in e.codes().iter().enumerate() {
            let (b, o) = unpack_code(c).expect("decoded codes are valid");
            hist[i % n][b.code() as usize][o as usize] += 1;
        }
    }
    println!("qubit  basis  outcome0  outcome1");
    for (q, h) in hist.iter().enumerate() {
        for b in Basis::ALL {
            let [zero, one] = h[b.code() as usize];
            println!("{q:>5}  {:>5}  {zero:>8}  {one:>8}", format!("{b:?}"));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { BAD_ARGS } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out } => train(config, seed, out),
        Command::Verify { suite, seed } => run_verify(&suite, seed),
        Command::InspectShadow { file } => inspect(file),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
