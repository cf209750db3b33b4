use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blocksparse::bench::{self, BenchConfig, BenchModel, BenchRow, ScenarioKind};
use blocksparse::graph::{collect_calibration, lower_to_int8, optimize, Graph};
use blocksparse::model_io::{self, encoder_inputs, generate_inputs, ToyEncoderSpec};
use blocksparse::pruner::PruneConfig;

#[derive(Parser)]
#[command(name = "blocksparse", version, about = "Block-sparse INT8 encoder toolchain and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random f32 toy encoder bundle.
    GenerateToy(GenerateArgs),
    /// Block-prune every InnerProduct weight of a bundle.
    Compress(CompressArgs),
    /// Calibrate, lower to INT8 and optimize a bundle.
    Quantize(QuantizeArgs),
    /// Run a benchmark scenario on one bundle.
    Bench(BenchArgs),
    /// Run a scenario on a dense and a sparse bundle and report the speedup.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    sparsity: f64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Calibration batches drawn from the input generator.
    #[arg(long, default_value_t = 8)]
    calib_batches: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the f32 weights that lowered nodes can revert to.
    #[arg(long)]
    keep_fallbacks: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    MaxTp,
    MinLatency,
    Production,
}

impl From<Scenario> for ScenarioKind {
    fn from(s: Scenario) -> Self {
        match s {
            Scenario::MaxTp => ScenarioKind::MaxTp,
            Scenario::MinLatency => ScenarioKind::MinLatency,
            Scenario::Production => ScenarioKind::Production,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "min-latency")]
    scenario: Scenario,
    /// Per-batch latency budget of the production scenario; `inf` disables it.
    #[arg(long, default_value_t = bench::DEFAULT_BUDGET_MS)]
    budget_ms: f64,
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    seq_len: Vec<usize>,
    /// Batch sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    batch: Vec<usize>,
    /// Instance counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    instances: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append JSON-lines rows to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> BenchConfig {
        let mut cfg = BenchConfig::new(self.scenario.into());
        if cfg.scenario == ScenarioKind::Production {
            cfg.budget_ms = self.budget_ms.is_finite().then_some(self.budget_ms);
        }
        if !self.seq_len.is_empty() {
            cfg.seq_lens = self.seq_len.clone();
        }
        if !self.batch.is_empty() {
            cfg.batches = self.batch.clone();
        }
        if !self.instances.is_empty() {
            cfg.instances = self.instances.clone();
        }
        cfg.warmup_iters = self.warmup;
        cfg.measure_iters = self.iters;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    dense: PathBuf,
    #[arg(long)]
    sparse: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

fn load(path: &Path) -> Result<Graph> {
    model_io::load_bundle(path).with_context(|| format!("loading {}", path.display()))
}

fn save(g: &Graph, path: &Path) -> Result<()> {
    model_io::save_bundle(g, path).with_context(|| format!("writing {}", path.display()))?;
    let bytes = std::fs::metadata(path)?.len();
    println!("wrote {} ({} nodes, {} weights, {bytes} bytes)", path.display(), g.nodes.len(), g.weights.len());
    Ok(())
}

fn open_report(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.as_ref()
        .map(|p| {
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .with_context(|| format!("opening report {}", p.display()))
        })
        .transpose()
}

fn print_row(row: &BenchRow) {
    let feasible = if row.feasible { "" } else { "  INFEASIBLE" };
    println!(
        "{:<12} seq {:>4}  batch {:>3}  instances {:>2}  {:>10.1} samples/s  {:>8.3} ms/sample  {:>8.3} ms/batch{feasible}",
        row.scenario.as_str(),
        row.seq_len,
        row.batch,
        row.instances,
        row.throughput_samples_per_s,
        row.mean_latency_ms_per_sample,
        row.mean_batch_latency_ms,
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateToy(a) => {
            let spec = ToyEncoderSpec {
                layers: a.layers,
                hidden: a.hidden,
                heads: a.heads,
                ..ToyEncoderSpec::default()
            };
            save(&model_io::generate_toy_encoder(&spec, a.seed)?, &a.out)
        }
        Command::Compress(a) => {
            let g = model_io::prune_gemm_weights(&load(&a.model)?, &PruneConfig::new(a.sparsity)?)?;
            save(&g, &a.out)
        }
        Command::Quantize(a) => {
            let g = load(&a.model)?;
            let hidden = g
                .inputs
                .first()
                .and_then(|i| i.shape.last().copied().flatten())
                .context("model has no input with a static last axis")?;
            let spec = ToyEncoderSpec {
                hidden,
                seq_len: a.seq_len,
                ..ToyEncoderSpec::default()
            };
            let batches = generate_inputs(&spec, a.batch, a.calib_batches, a.seed)?.map(encoder_inputs);
            let stats = collect_calibration(&g, batches)?;
            let mut q = optimize(&lower_to_int8(&g, &stats)?)?;
            if !a.keep_fallbacks {
                q.strip_fallbacks();
            }
            save(&q, &a.out)
        }
        Command::Bench(a) => {
            let cfg = a.run.config();
            let model = BenchModel::new(load(&a.model)?)?;
            let rows = bench::run_scenario(&model, &cfg)?;
            let mut report = open_report(&a.run.report)?;
            for row in &rows {
                print_row(row);
                if let Some(w) = report.as_mut() {
                    writeln!(w, "{}", row.to_json_line()?)?;
                }
            }
            if let Some(mut w) = report {
                w.flush()?;
            }
            Ok(())
        }
        Command::Compare(a) => {
            let cfg = a.run.config();
            let dense = BenchModel::new(load(&a.dense)?)?;
            let sparse = BenchModel::new(load(&a.sparse)?)?;
            let rows = bench::compare_dense_sparse(&dense, &sparse, &cfg)?;
            let mut report = open_report(&a.run.report)?;
            for r in &rows {
                println!(
                    "{:<12} seq {:>4}  dense {:>10.1}  sparse {:>10.1} samples/s  speedup {:.2}x",
                    r.scenario.as_str(),
                    r.seq_len,
                    r.dense_throughput,
                    r.sparse_throughput,
                    r.speedup
                );
                if let Some(w) = report.as_mut() {
                    writeln!(w, "{}", r.to_json_line()?)?;
                }
            }
            if let Some(mut w) = report {
                w.flush()?;
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
