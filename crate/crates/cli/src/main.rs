use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sstkv::harness::bench::{bench_csv, bench_sweep, BenchSpec};
use sstkv::harness::checks::{equiv_check, grad_check, EQUIV_TOL_F32, EQUIV_TOL_F64};
use sstkv::harness::data::{instance_set, SALT_EVAL};
use sstkv::harness::{eval_csv, evaluate, load_checkpoint, save_checkpoint, train, Policy, RunConfig};
use sstkv::tasks::to_jsonl;
use sstkv::Error;

#[derive(Parser)]
#[command(name = "sstkv", version, about = "Summary-token KV compression: train, evaluate, benchmark, self-check")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus a checkpoint.
    Train(RunArgs),
    /// Score a checkpoint across compression ratios.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated policies; defaults to the run's policy.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Evaluate only this ratio instead of `eval_ratios`.
        #[arg(long)]
        ratio: Option<usize>,
    },
    /// Analytic FLOPs and peak KV entries over sequence lengths.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1024, 2048, 4096, 8192, 16384])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["dense", "sst"])]
        policies: Vec<String>,
        #[arg(long, default_value_t = 8)]
        ratio: usize,
        /// Also time one forward pass per row.
        #[arg(long)]
        measure: bool,
    },
    /// Compare interval-wise full retention against one causal pass.
    EquivCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 2048)]
        max_len: usize,
    },
    /// Compare analytic gradients against central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write held-out task instances as JSON lines.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both the run seed and the task seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path override, e.g. `schedule.mode=fixed:8`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
            overrides.push(format!("task.seed={s}"));
        }
        let cfg = base.with_overrides(&overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Creates the output directory and writes the resolved-config snapshot.
    fn prepare(&self, cfg: &RunConfig) -> Result<(), Error> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.resolved.json"), cfg.to_json() + "\n")?;
        Ok(())
    }
}

fn parse_policies(names: &[String]) -> Result<Vec<Policy>, Error> {
    names.iter().map(|n| n.parse()).collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            args.prepare(&cfg)?;
            let mut metrics = fs::File::create(args.out.join("metrics.jsonl"))?;
            let model = train::<f32>(&cfg, &mut |m| {
                writeln!(metrics, "{}", m.to_json())?;
                println!("{}", m.to_json());
                Ok(())
            })?;
            save_checkpoint(&args.out.join("checkpoint.bin"), &model, &cfg)?;
            Ok(true)
        }
        Command::Eval { run, checkpoint, policies, ratio } => {
            let mut cfg = run.resolve()?;
            if let Some(r) = ratio {
                cfg.eval_ratios = vec![r];
            }
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            if model.cfg != cfg.model {
                return Err(Error::Config("checkpoint model config differs from the run's model config".into()));
            }
            let policies = if policies.is_empty() { vec![cfg.policy] } else { parse_policies(&policies)? };
            for &p in &policies {
                RunConfig { policy: p, ..cfg.clone() }.validate()?;
            }
            run.prepare(&cfg)?;
            let mut rows = Vec::new();
            for p in policies {
                rows.extend(evaluate(&model, &cfg, p, cfg.eval_instances)?);
            }
            let csv = eval_csv(&rows);
            write_file(&run.out.join("eval.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::Bench { run, lengths, policies, ratio, measure } => {
            let cfg = run.resolve()?;
            let spec = BenchSpec {
                lengths,
                policies: parse_policies(&policies)?,
                ratio,
                interval_len: cfg.interval_len,
                execution: cfg.execution,
                measure,
            };
            let rows = bench_sweep(&cfg.model, &spec)?;
            run.prepare(&cfg)?;
            let csv = bench_csv(&rows);
            write_file(&run.out.join("bench.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::EquivCheck { seed, count, max_len } => {
            let r = equiv_check(seed, count, max_len)?;
            println!(
                "cases={} max_dev_f32={:.3e} (tol {EQUIV_TOL_F32:e}) max_dev_f64={:.3e} (tol {EQUIV_TOL_F64:e}) pass={}",
                r.cases.len(),
                r.max_dev_f32,
                r.max_dev_f64,
                r.passed
            );
            Ok(r.passed)
        }
        Command::GradCheck { seed } => {
            let r = grad_check(seed)?;
            for t in &r.tensors {
                println!("{} checked={} max_rel_err={:.3e} pass={}", t.name, t.checked, t.max_rel_err, t.passed);
            }
            println!("pass={}", r.passed);
            Ok(r.passed)
        }
        Command::GenData { run, count } => {
            let cfg = run.resolve()?;
            run.prepare(&cfg)?;
            let instances = instance_set(&cfg.task, cfg.model.vocab_size, cfg.task.seed, SALT_EVAL, count)?;
            write_file(&run.out.join("data.jsonl"), &to_jsonl(&instances)?)?;
            println!("wrote {} instances to {}", instances.len(), run.out.join("data.jsonl").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            let config_error = matches!(e, Error::Config(_) | Error::VocabOverflow { .. });
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
