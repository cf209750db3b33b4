//! Throughput and latency scenarios over inference sessions.
//!
//! Every report row embeds the raw start/end time of each measured batch,
//! so its throughput and latency can be recomputed with [`verify_row`].

use std::sync::{Arc, Barrier};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind};
use crate::model_io::{encoder_inputs, generate_inputs, ToyEncoderSpec};
use crate::runtime::{create_session, SharedWeights};

pub const DEFAULT_SEQ_LENS: [usize; 8] = [16, 32, 48, 64, 80, 96, 112, 128];
pub const DEFAULT_BATCHES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_BUDGET_MS: f64 = 10.0;
/// Relative tolerance of [`verify_row`].
pub const RECOMPUTE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    MaxTp,
    MinLatency,
    Production,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::MaxTp => "max-tp",
            ScenarioKind::MinLatency => "min-latency",
            ScenarioKind::Production => "production",
        }
    }
}

/// Scenario parameters; `batches` and `instances` define the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenario: ScenarioKind,
    /// Production only; `None` means unconstrained.
    pub budget_ms: Option<f64>,
    pub seq_lens: Vec<usize>,
    pub batches: Vec<usize>,
    pub instances: Vec<usize>,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub seed: u64,
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Divisors of `n` in ascending order.
pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

impl BenchConfig {
    pub fn new(scenario: ScenarioKind) -> Self {
        Self {
            scenario,
            budget_ms: (scenario == ScenarioKind::Production).then_some(DEFAULT_BUDGET_MS),
            seq_lens: DEFAULT_SEQ_LENS.to_vec(),
            batches: DEFAULT_BATCHES.to_vec(),
            instances: divisors(available_cores()),
            warmup_iters: 10,
            measure_iters: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.measure_iters == 0 {
            return Err(Error::Config("at least one measured iteration is required".into()));
        }
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        if self.batches.is_empty() || self.batches.contains(&0) || self.instances.is_empty() || self.instances.contains(&0) {
            return Err(Error::Config("batch sizes and instance counts must be positive".into()));
        }
        if let Some(b) = self.budget_ms {
            if !(b > 0.0) {
                return Err(Error::Config(format!("latency budget must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Raw timing of one measured batch, in ms since the run started.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub instance: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// One measured (batch, instances) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub batch: usize,
    pub instances: usize,
    pub timings: Vec<BatchTiming>,
    /// Multiply-accumulates of one batch, weight and activation GEMMs.
    pub macs_per_batch: u64,
}

impl Measurement {
    pub fn total_samples(&self) -> u64 {
        (self.timings.len() * self.batch) as u64
    }

    pub fn wall_ms(&self) -> f64 {
        let start = self.timings.iter().map(|t| t.start_ms).fold(f64::INFINITY, f64::min);
        let end = self.timings.iter().map(|t| t.end_ms).fold(f64::NEG_INFINITY, f64::max);
        end - start
    }

    pub fn throughput(&self) -> f64 {
        self.total_samples() as f64 / (self.wall_ms() / 1e3)
    }

    pub fn mean_batch_latency_ms(&self) -> f64 {
        self.timings.iter().map(|t| t.end_ms - t.start_ms).sum::<f64>() / self.timings.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub cores: usize,
    pub timestamp_unix_s: u64,
    pub os: String,
    pub arch: String,
}

impl EnvInfo {
    pub fn capture() -> Self {
        Self {
            cores: available_cores(),
            timestamp_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

/// One JSON-lines report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: ScenarioKind,
    pub seq_len: usize,
    pub batch: usize,
    pub instances: usize,
    pub throughput_samples_per_s: f64,
    pub mean_latency_ms_per_sample: f64,
    pub mean_batch_latency_ms: f64,
    /// How per-batch latencies are aggregated.
    pub latency_statistic: String,
    pub budget_ms: Option<f64>,
    /// False for a production row where no configuration met the budget;
    /// the row then describes the lowest-latency configuration.
    pub feasible: bool,
    pub total_samples: u64,
    pub wall_ms: f64,
    pub macs_per_batch: u64,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub warnings: Vec<String>,
    pub env: EnvInfo,
    pub timings: Vec<BatchTiming>,
}

impl BenchRow {
    pub fn from_measurement(cfg: &BenchConfig, seq_len: usize, m: &Measurement, feasible: bool) -> Self {
        let mut warnings = Vec::new();
        if cfg.warmup_iters == 0 {
            warnings.push("no warm-up iterations: timings include cold-start effects".to_string());
        }
        if !feasible {
            warnings.push("no configuration met the latency budget".to_string());
        }
        let mean_batch = m.mean_batch_latency_ms();
        Self {
            scenario: cfg.scenario,
            seq_len,
            batch: m.batch,
            instances: m.instances,
            throughput_samples_per_s: m.throughput(),
            mean_latency_ms_per_sample: mean_batch / m.batch as f64,
            mean_batch_latency_ms: mean_batch,
            latency_statistic: "mean".to_string(),
            budget_ms: cfg.budget_ms.filter(|_| cfg.scenario == ScenarioKind::Production),
            feasible,
            total_samples: m.total_samples(),
            wall_ms: m.wall_ms(),
            macs_per_batch: m.macs_per_batch,
            warmup_iters: cfg.warmup_iters,
            measure_iters: cfg.measure_iters,
            warnings,
            env: EnvInfo::capture(),
            timings: m.timings.clone(),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= RECOMPUTE_TOLERANCE * a.abs().max(b.abs())
}

/// Recomputes a row's aggregates from its raw timings and checks the
/// budget of feasible production rows.
pub fn verify_row(row: &BenchRow) -> Result<()> {
    let m = Measurement {
        batch: row.batch,
        instances: row.instances,
        timings: row.timings.clone(),
        macs_per_batch: row.macs_per_batch,
    };
    let fail = |what: &str, stored: f64, recomputed: f64| {
        Err(Error::Config(format!("{what}: stored {stored}, recomputed {recomputed}")))
    };
    if row.timings.is_empty() || row.batch == 0 {
        return Err(Error::Config("row carries no raw timings".into()));
    }
    if m.total_samples() != row.total_samples {
        return fail("total samples", row.total_samples as f64, m.total_samples() as f64);
    }
    if !close(m.throughput(), row.throughput_samples_per_s) {
        return fail("throughput", row.throughput_samples_per_s, m.throughput());
    }
    if !close(m.mean_batch_latency_ms(), row.mean_batch_latency_ms) {
        return fail("mean batch latency", row.mean_batch_latency_ms, m.mean_batch_latency_ms());
    }
    let per_sample = m.mean_batch_latency_ms() / row.batch as f64;
    if !close(per_sample, row.mean_latency_ms_per_sample) {
        return fail("mean latency per sample", row.mean_latency_ms_per_sample, per_sample);
    }
    if let (true, Some(budget)) = (row.feasible, row.budget_ms) {
        if m.mean_batch_latency_ms() > budget {
            return fail("budget", budget, m.mean_batch_latency_ms());
        }
    }
    Ok(())
}

/// Picks the highest-throughput measurement whose mean batch latency fits
/// the budget; ties go to the smaller batch, then fewer instances.
pub fn select_best(measurements: &[Measurement], budget_ms: Option<f64>) -> Option<&Measurement> {
    measurements
        .iter()
        .filter(|m| budget_ms.is_none_or(|b| m.mean_batch_latency_ms() <= b))
        .min_by(|a, b| {
            b.throughput()
                .total_cmp(&a.throughput())
                .then(a.batch.cmp(&b.batch))
                .then(a.instances.cmp(&b.instances))
        })
}

/// A model ready for benchmarking: graph plus shared weights.
#[derive(Debug, Clone)]
pub struct BenchModel {
    graph: Arc<Graph>,
    weights: SharedWeights,
    hidden: usize,
}

impl BenchModel {
    pub fn new(mut graph: Graph) -> Result<Self> {
        let hidden = match graph.inputs.as_slice() {
            [input] => input.shape.last().copied().flatten(),
            _ => None,
        }
        .ok_or_else(|| Error::Config("benchmarks need one input with a static last axis".into()))?;
        let weights = SharedWeights::take_from(&mut graph);
        Ok(Self {
            graph: Arc::new(graph),
            weights,
            hidden,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn weights(&self) -> &SharedWeights {
        &self.weights
    }

    /// Times `iters` batches on each of `instances` threads, each with its
    /// own session over the shared weights.
    pub fn measure(
        &self,
        seq_len: usize,
        batch: usize,
        instances: usize,
        warmup: usize,
        iters: usize,
        seed: u64,
    ) -> Result<Measurement> {
        if seq_len == 0 || batch == 0 || instances == 0 || iters == 0 {
            return Err(Error::Config("seq_len, batch, instances and iters must be positive".into()));
        }
        let spec = ToyEncoderSpec {
            hidden: self.hidden,
            seq_len,
            ..ToyEncoderSpec::default()
        };
        let barrier = Barrier::new(instances);
        let origin = Instant::now();
        let per_instance: Vec<Result<(Vec<BatchTiming>, u64)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..instances)
                .map(|instance| {
                    let barrier = &barrier;
                    let spec = &spec;
                    scope.spawn(move || {
                        let input = generate_inputs(spec, batch, 1, seed.wrapping_add(instance as u64))?
                            .next()
                            .map(encoder_inputs)
                            .unwrap();
                        let mut session = create_session(self.graph.clone(), &self.weights);
                        let warm = session.as_mut().map_err(|e| e.to_string()).and_then(|s| {
                            (0..warmup).try_for_each(|_| s.infer(&input).map(drop).map_err(|e| e.to_string()))
                        });
                        // every thread must reach the barrier, even on failure
                        barrier.wait();
                        warm.map_err(|e| Error::Config(format!("instance {instance}: {e}")))?;
                        let mut session = session?;
                        let mut timings = Vec::with_capacity(iters);
                        for _ in 0..iters {
                            let start = origin.elapsed();
                            session.infer(&input)?;
                            let end = origin.elapsed();
                            timings.push(BatchTiming {
                                instance,
                                start_ms: start.as_secs_f64() * 1e3,
                                end_ms: end.as_secs_f64() * 1e3,
                            });
                        }
                        let stats = session.last_stats();
                        Ok((timings, stats.weight_macs + stats.activation_macs))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        });
        let mut timings = Vec::with_capacity(instances * iters);
        let mut macs = 0;
        for r in per_instance {
            let (t, m) = r?;
            timings.extend(t);
            macs = m;
        }
        Ok(Measurement {
            batch,
            instances,
            timings,
            macs_per_batch: macs,
        })
    }

    fn sweep(&self, cfg: &BenchConfig, seq_len: usize) -> Result<Vec<Measurement>> {
        let mut out = Vec::new();
        for &instances in &cfg.instances {
            for &batch in &cfg.batches {
                out.push(self.measure(seq_len, batch, instances, cfg.warmup_iters, cfg.measure_iters, cfg.seed)?);
            }
        }
        Ok(out)
    }
}

/// Batch 1 on a single instance.
pub fn run_min_latency(model: &BenchModel, cfg: &BenchConfig, seq_len: usize) -> Result<BenchRow> {
    let m = model.measure(seq_len, 1, 1, cfg.warmup_iters, cfg.measure_iters, cfg.seed)?;
    Ok(BenchRow::from_measurement(cfg, seq_len, &m, true))
}

/// Best throughput over the (instances, batch) sweep.
pub fn run_max_throughput(model: &BenchModel, cfg: &BenchConfig, seq_len: usize) -> Result<BenchRow> {
    let all = model.sweep(cfg, seq_len)?;
    let best = select_best(&all, None).expect("sweep is non-empty");
    Ok(BenchRow::from_measurement(cfg, seq_len, best, true))
}

/// Builds the production row from already measured configurations.
pub fn production_row(cfg: &BenchConfig, seq_len: usize, all: &[Measurement]) -> BenchRow {
    match select_best(all, cfg.budget_ms) {
        Some(best) => BenchRow::from_measurement(cfg, seq_len, best, true),
        None => {
            let fastest = all
                .iter()
                .min_by(|a, b| a.mean_batch_latency_ms().total_cmp(&b.mean_batch_latency_ms()))
                .expect("sweep is non-empty");
            BenchRow::from_measurement(cfg, seq_len, fastest, false)
        }
    }
}

/// Best throughput among configurations whose mean batch latency fits the
/// budget, or an infeasible row.
pub fn run_production(model: &BenchModel, cfg: &BenchConfig, seq_len: usize) -> Result<BenchRow> {
    let all = model.sweep(cfg, seq_len)?;
    Ok(production_row(cfg, seq_len, &all))
}

/// Runs the configured scenario for every sequence length.
pub fn run_scenario(model: &BenchModel, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    cfg.seq_lens
        .iter()
        .map(|&s| match cfg.scenario {
            ScenarioKind::MinLatency => run_min_latency(model, cfg, s),
            ScenarioKind::MaxTp => run_max_throughput(model, cfg, s),
            ScenarioKind::Production => run_production(model, cfg, s),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub scenario: ScenarioKind,
    pub seq_len: usize,
    pub dense_throughput: f64,
    pub sparse_throughput: f64,
    pub speedup: f64,
    pub dense_macs_per_batch: u64,
    pub sparse_macs_per_batch: u64,
}

impl SpeedupRow {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

type Topology = Vec<(String, OpKind, Vec<String>, Vec<&'static str>)>;

fn topology(g: &Graph) -> Topology {
    g.nodes
        .iter()
        .map(|n| {
            let epi = n.op.epilogue().iter().map(|e| e.name()).collect();
            (n.id.clone(), n.kind(), n.inputs.clone(), epi)
        })
        .collect()
}

/// Ensures two graphs have the same nodes, wiring and fused epilogues.
pub fn check_same_topology(a: &Graph, b: &Graph) -> Result<()> {
    let (ta, tb) = (topology(a), topology(b));
    if ta.len() != tb.len() {
        return Err(Error::TopologyMismatch(format!("{} vs {} nodes", ta.len(), tb.len())));
    }
    if let Some((x, _)) = ta.iter().zip(&tb).find(|(x, y)| x != y) {
        return Err(Error::TopologyMismatch(format!("graphs diverge at node `{}`", x.0)));
    }
    if a.inputs != b.inputs || a.outputs != b.outputs {
        return Err(Error::TopologyMismatch("graph boundaries differ".into()));
    }
    Ok(())
}

/// Runs `cfg` on both models and reports sparse over dense throughput per
/// sequence length.
pub fn compare_dense_sparse(dense: &BenchModel, sparse: &BenchModel, cfg: &BenchConfig) -> Result<Vec<SpeedupRow>> {
    check_same_topology(dense.graph(), sparse.graph())?;
    let d = run_scenario(dense, cfg)?;
    let s = run_scenario(sparse, cfg)?;
    Ok(d.iter()
        .zip(&s)
        .map(|(d, s)| SpeedupRow {
            scenario: cfg.scenario,
            seq_len: d.seq_len,
            dense_throughput: d.throughput_samples_per_s,
            sparse_throughput: s.throughput_samples_per_s,
            speedup: s.throughput_samples_per_s / d.throughput_samples_per_s,
            dense_macs_per_batch: d.macs_per_batch,
            sparse_macs_per_batch: s.macs_per_batch,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(batch: usize, instances: usize, latency_ms: f64, n: usize) -> Measurement {
        let timings = (0..n)
            .map(|i| BatchTiming {
                instance: 0,
                start_ms: i as f64 * latency_ms,
                end_ms: (i + 1) as f64 * latency_ms,
            })
            .collect();
        Measurement {
            batch,
            instances,
            timings,
            macs_per_batch: 0,
        }
    }

    #[test]
    fn divisor_sets() {
        assert_eq!(divisors(1), vec![1]);
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
    }

    #[test]
    fn selection_tie_breaks() {
        // equal throughput: 2 samples per 2 ms and 4 per 4 ms
        let all = vec![synthetic(4, 1, 4.0, 10), synthetic(2, 2, 2.0, 10), synthetic(2, 1, 2.0, 10)];
        let best = select_best(&all, None).unwrap();
        assert_eq!((best.batch, best.instances), (2, 1));
        assert!(select_best(&all, Some(1.0)).is_none());
        assert_eq!(select_best(&all, Some(3.0)).unwrap().batch, 2);
    }

    #[test]
    fn row_recomputes() {
        let cfg = BenchConfig::new(ScenarioKind::Production);
        let m = synthetic(8, 1, 5.0, 20);
        let row = BenchRow::from_measurement(&cfg, 16, &m, true);
        verify_row(&row).unwrap();
        assert!((row.throughput_samples_per_s - 1600.0).abs() < 1e-9);
        let mut bad = row.clone();
        bad.throughput_samples_per_s *= 1.01;
        assert!(verify_row(&bad).is_err());
        let mut over = row;
        over.budget_ms = Some(4.0);
        assert!(verify_row(&over).is_err());
    }

    #[test]
    fn zero_warmup_is_flagged() {
        let mut cfg = BenchConfig::new(ScenarioKind::MinLatency);
        cfg.warmup_iters = 0;
        let row = BenchRow::from_measurement(&cfg, 16, &synthetic(1, 1, 1.0, 3), true);
        assert_eq!(row.warnings.len(), 1);
        assert_eq!(row.budget_ms, None);
    }
}
