use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semtrust::harness::{
    run_scenario, write_csv, write_outputs, HarnessError, MetricsRow, ScenarioConfig,
};
use semtrust::sim::{Policy, SimTrace};
use semtrust::DeviceId;

#[derive(Parser)]
#[command(name = "semtrust", about = "Semantic chain-of-trust simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its metrics, traces and stores.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several scenarios and print their mean metrics as CSV.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
    },
    /// Print the trace events that involve one device.
    Inspect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        device: String,
    },
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    policy: Option<String>,
    out: PathBuf,
) -> Result<(), HarnessError> {
    let mut cfg = ScenarioConfig::load(&config)?;
    if let Some(seed) = seed {
        cfg.sim.seed = seed;
    }
    if let Some(name) = policy {
        cfg.policy = name.parse::<Policy>().map_err(HarnessError::Config)?;
    }
    let result = run_scenario(&cfg)?;
    write_outputs(&result, &out)?;
    let mut rows = result.rows.clone();
    rows.push(result.mean.clone());
    write_csv(&rows, io::stdout().lock())?;
    eprintln!("wrote results to {}", out.display());
    Ok(())
}

fn compare(configs: Vec<PathBuf>) -> Result<(), HarnessError> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    for path in &configs {
        let cfg = ScenarioConfig::load(path)?;
        rows.push(run_scenario(&cfg)?.mean);
    }
    write_csv(&rows, io::stdout().lock())
}

fn inspect(trace: PathBuf, device: String) -> Result<(), HarnessError> {
    let device = DeviceId::new(device).map_err(|e| HarnessError::Config(e.to_string()))?;
    let trace = SimTrace::read_jsonl(BufReader::new(File::open(&trace)?))?;
    if !trace.meta.devices.contains(&device) {
        return Err(HarnessError::Config(format!(
            "device {device} is not in the trace"
        )));
    }
    let mut out = io::stdout().lock();
    for e in trace.for_device(&device) {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors; help and version are not errors
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            policy,
            out,
        } => run(config, seed, policy, out),
        Command::Compare { configs } => compare(configs),
        Command::Inspect { trace, device } => inspect(trace, device),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
