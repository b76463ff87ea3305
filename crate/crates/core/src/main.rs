use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ams::codec::{encode_delta, encode_uplink, golden_delta, golden_uplink};
use ams::harness::{
    build_checkpoints, compare_strategies, emit_metrics, run_experiment, sweep, ExperimentConfig,
    HarnessError, SweepAxis,
};
use ams::optimizer::Strategy;
use ams::server::Policy;

#[derive(Parser)]
#[command(name = "ams", version, about = "Adaptive model streaming simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded experiment and write metrics.csv and summary.json.
    Run(Overrides),
    /// Mean-mIoU deltas of coordinate-selection strategies against full-model training.
    CompareStrategies {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "gradient-guided,random,first,last,first-last")]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05,0.01")]
        fractions: Vec<f64>,
    },
    /// Mean mIoU and downlink bandwidth over values of T_horizon or T_update.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// t_horizon or t_update.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Write the codec golden fixtures.
    Golden {
        #[arg(long, default_value = "crates/core/tests/fixtures")]
        dir: PathBuf,
    },
    /// Regenerate the pretrained checkpoint fixture.
    Pretrain {
        #[arg(long, default_value = "crates/core/fixtures/pretrained.json")]
        out: PathBuf,
    },
}

/// Flags that override keys of the config file.
#[derive(Args)]
struct Overrides {
    /// TOML config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    stationary_sessions: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    t_update: Option<f64>,
    #[arg(long)]
    rotation_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    jumps: Option<Vec<u64>>,
    #[arg(long)]
    atr: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(seeds => seeds);
        set!(duration => duration);
        set!(policy => policy);
        set!(sessions => sessions);
        set!(stationary_sessions => stationary_sessions);
        set!(hidden => student.hidden);
        set!(strategy => training.strategy);
        set!(fraction => training.fraction);
        set!(iterations => training.iterations);
        set!(horizon => training.horizon);
        set!(t_update => atr.tau_min);
        set!(rotation_rate => workload.rotation_rate);
        set!(jumps => workload.jumps);
        set!(atr => atr.enabled);
        set!(out => output.dir);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn execute(command: Command) -> Result<(), (i32, anyhow::Error)> {
    let harness = |e: HarnessError| (e.exit_code(), anyhow::Error::new(e));
    let runtime = |e: anyhow::Error| (3, e);
    match command {
        Command::Run(o) => {
            let cfg = o.resolve().map_err(harness)?;
            let record = run_experiment(&cfg).map_err(harness)?;
            let (csv, json) = emit_metrics(&record, &cfg.output.dir).map_err(harness)?;
            let s = &record.summary.overall;
            println!(
                "policy={} seed={} mean_miou={:.6} uplink_kbps={:.3} downlink_kbps={:.3} deltas={} gpu_seconds={:.2}",
                cfg.policy.name(),
                cfg.seed,
                s.mean_miou,
                s.uplink_kbps,
                s.downlink_kbps,
                s.deltas,
                s.gpu_seconds
            );
            println!("wrote {} and {}", csv.display(), json.display());
        }
        Command::CompareStrategies { overrides, strategies, fractions } => {
            let cfg = overrides.resolve().map_err(harness)?;
            let rows = compare_strategies(&cfg, &strategies, &fractions).map_err(harness)?;
            println!("strategy,fraction,mean_miou,delta");
            for r in &rows {
                println!("{},{},{:.6},{:.6}", r.strategy.name(), r.fraction, r.mean_miou, r.delta);
            }
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
            write(&cfg.output.dir.join("strategies.json"), json.as_bytes()).map_err(runtime)?;
        }
        Command::Sweep { overrides, axis, values } => {
            let cfg = overrides.resolve().map_err(harness)?;
            let points = sweep(&cfg, axis, &values).map_err(harness)?;
            println!("value,mean_miou,downlink_kbps");
            for p in &points {
                println!("{},{:.6},{:.3}", p.value, p.mean_miou, p.downlink_kbps);
            }
            let json = serde_json::to_string_pretty(&points).expect("points serialize");
            write(&cfg.output.dir.join("sweep.json"), json.as_bytes()).map_err(runtime)?;
        }
        Command::Golden { dir } => {
            write(&dir.join("golden_delta.bin"), &encode_delta(&golden_delta())).map_err(runtime)?;
            let uplink = encode_uplink(&golden_uplink()).expect("golden batch is nonempty");
            write(&dir.join("golden_uplink.bin"), &uplink).map_err(runtime)?;
            println!("wrote golden fixtures to {}", dir.display());
        }
        Command::Pretrain { out } => {
            let json = serde_json::to_string(&build_checkpoints()).expect("checkpoints serialize");
            write(&out, json.as_bytes()).map_err(runtime)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
