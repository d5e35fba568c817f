use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use compsparse::network::ExecMode;
use compsparse_cli::commands::{self, BenchArgs, GenArgs};
use compsparse_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "csnn", version, about = "Pack, run and benchmark complementary-sparse networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack masks and weights into a model container
    Pack {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run raw int8 frames through a model
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ExecMode>,
        /// MAC report CSV
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure throughput over a frame stream with replicated instances
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long)]
        out: PathBuf,
        /// Raw frames to cycle through; random frames when omitted
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ExecMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Memory-port estimate for a sparse-sparse layer
    Resources {
        #[arg(long)]
        c_in: u64,
        #[arg(long)]
        c_out: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        k: u64,
        #[arg(long, default_value_t = 8)]
        bw: u64,
        #[arg(long)]
        bid: Option<u64>,
    },
    /// Random model and frames from a plan
    GenSynthetic {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output prefix; writes .csnn, .json and .frames
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allocation: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        calibration_frames: usize,
    },
}

fn parse_mode(s: &str) -> Result<ExecMode, String> {
    s.parse().map_err(|e: compsparse::Error| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Pack { masks, weights, out: dst } => commands::pack(&masks, &weights, &dst, &mut out),
        Command::Infer {
            model,
            input,
            mode,
            report,
        } => commands::infer(&model, &input, mode, report.as_deref(), &mut out),
        Command::Bench {
            model,
            frames,
            instances,
            out: dst,
            input,
            mode,
            seed,
        } => commands::bench(
            &BenchArgs {
                model: &model,
                frames,
                instances,
                out: &dst,
                input: input.as_deref(),
                mode,
                seed,
            },
            &mut out,
        )
        .map(|_| ()),
        Command::Resources { c_in, c_out, n, k, bw, bid } => commands::resources(c_in, c_out, n, k, bw, bid, &mut out),
        Command::GenSynthetic {
            plan,
            seed,
            out: prefix,
            allocation,
            frames,
            calibration_frames,
        } => commands::gen_synthetic(
            &GenArgs {
                plan: &plan,
                allocation: allocation.as_deref(),
                seed,
                out_prefix: &prefix,
                frames,
                calibration_frames,
            },
            &mut out,
        )
        .map(|_| ()),
    }
}

fn report(err: &CliError) {
    let mut stderr = io::stderr().lock();
    let _ = writeln!(stderr, "error: {err}");
    if let CliError::Core(compsparse::Error::Collision(list)) = err {
        for c in list {
            let _ = writeln!(
                stderr,
                "  collision at position {} between kernels {} and {}",
                c.position, c.kernels.0, c.kernels.1
            );
        }
    }
}

fn main() -> ExitCode {
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
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
