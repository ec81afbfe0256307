//! Wall-clock timing of the routing operators.
//!
//! Each sample times one call on a prediction tensor generated from
//! `(seed, n, m, k)`, so every algorithm at a given size sees the same input.
//! Nothing but the routing call sits inside the timed region.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use capsroute_core::data::{random_predictions, rng};
use capsroute_core::routing::{
    dynamic_routing, fm_agreement, fm_agreement_bruteforce, DynamicRoutingConfig, PredictionTensor,
    RoutingError, RoutingResult,
};
use serde::Serialize;

pub const CSV_HEADER: &str = "algorithm,n,m,k,iters,repeats,median_ns,iqr_ns";
pub const MIN_REPEATS: usize = 10;
pub const MIN_WARMUP: usize = 3;
/// Samples must last at least this many timer ticks.
pub const RESOLUTION_FACTOR: f64 = 100.0;
pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fm,
    Dynamic,
    Brute,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Fm => "fm",
            Algorithm::Dynamic => "dynamic",
            Algorithm::Brute => "brute",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fm" => Ok(Algorithm::Fm),
            "dynamic" => Ok(Algorithm::Dynamic),
            "brute" => Ok(Algorithm::Brute),
            other => Err(format!("unknown algorithm {other:?} (fm, dynamic, brute)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("need at least {MIN_REPEATS} repeats, got {0}")]
    TooFewRepeats(usize),
    #[error("need at least {MIN_WARMUP} warmup runs, got {0}")]
    TooFewWarmup(usize),
    #[error("dynamic routing needs at least one iteration")]
    ZeroIterations,
    #[error(
        "median {median_ns} ns is under {RESOLUTION_FACTOR}x the timer resolution \
         ({resolution_ns} ns); use a larger n, m or k"
    )]
    TooFast { median_ns: u64, resolution_ns: u64 },
    #[error("bench output differs from a direct call (checksum {bench} vs {direct})")]
    Checksum { bench: f64, direct: f64 },
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub algorithm: Algorithm,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Routing iterations (1 for the non-iterative algorithms).
    pub iters: usize,
    pub repeats: usize,
    pub median_ns: u64,
    pub iqr_ns: u64,
    pub max_ns: u64,
    /// Batch-parallel mode (reported separately from single-threaded runs).
    pub parallel: bool,
    pub threads: usize,
    /// Instances routed per sample (1 unless in parallel mode).
    pub batch: usize,
    pub checksum: f64,
}

impl BenchRecord {
    /// `fm`, or `fm@4t` for a parallel run on four threads.
    pub fn label(&self) -> String {
        if self.parallel {
            format!("{}@{}t", self.algorithm, self.threads)
        } else {
            self.algorithm.to_string()
        }
    }

    pub fn csv_row(&self) -> String {
        let name = self.label();
        format!(
            "{name},{},{},{},{},{},{},{}",
            self.n, self.m, self.k, self.iters, self.repeats, self.median_ns, self.iqr_ns
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchCase {
    pub algorithm: Algorithm,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub iters: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(algorithm: Algorithm, n: usize, m: usize, k: usize, iters: usize) -> Self {
        BenchCase {
            algorithm,
            n,
            m,
            k,
            iters,
            repeats: 21,
            warmup: MIN_WARMUP,
            seed: DEFAULT_SEED,
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.repeats < MIN_REPEATS {
            return Err(BenchError::TooFewRepeats(self.repeats));
        }
        if self.warmup < MIN_WARMUP {
            return Err(BenchError::TooFewWarmup(self.warmup));
        }
        if self.algorithm == Algorithm::Dynamic && self.iters == 0 {
            return Err(BenchError::ZeroIterations);
        }
        Ok(())
    }

    fn effective_iters(&self) -> usize {
        match self.algorithm {
            Algorithm::Dynamic => self.iters,
            _ => 1,
        }
    }
}

/// The shared input for a given size: uniform entries from the seeded
/// generator, independent of the algorithm.
pub fn bench_input(
    seed: u64,
    n: usize,
    m: usize,
    k: usize,
) -> Result<PredictionTensor, RoutingError> {
    let mixed = seed ^ ((n as u64) << 40) ^ ((m as u64) << 20) ^ k as u64;
    random_predictions(&mut rng(mixed), n, m, k)
}

pub fn route(
    algorithm: Algorithm,
    iters: usize,
    u: &PredictionTensor,
) -> Result<RoutingResult, RoutingError> {
    match algorithm {
        Algorithm::Fm => fm_agreement(u),
        Algorithm::Brute => fm_agreement_bruteforce(u),
        Algorithm::Dynamic => dynamic_routing(u, DynamicRoutingConfig::new(iters)?),
    }
}

pub fn checksum(r: &RoutingResult) -> f64 {
    r.s_hat.iter().chain(&r.pose).chain(&r.activation).sum()
}

/// Smallest positive step observed between consecutive `Instant::now` calls.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median and interquartile range (linear interpolation between order
/// statistics).
pub fn median_iqr(samples: &mut [u64]) -> (u64, u64) {
    samples.sort_unstable();
    let q = |p: f64| -> f64 {
        let pos = p * (samples.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        samples[lo] as f64 * (1.0 - frac) + samples[hi] as f64 * frac
    };
    let median = q(0.5).round() as u64;
    let iqr = (q(0.75) - q(0.25)).round() as u64;
    (median, iqr)
}

/// Worker count from `CAPSROUTE_THREADS`, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("CAPSROUTE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
}

fn finish(
    case: &BenchCase,
    samples: &mut [u64],
    parallel: Option<usize>,
    batch: usize,
    sum: f64,
) -> Result<BenchRecord, BenchError> {
    let (median_ns, iqr_ns) = median_iqr(samples);
    let resolution_ns = timer_resolution().as_nanos() as u64;
    if (median_ns as f64) < RESOLUTION_FACTOR * resolution_ns as f64 {
        return Err(BenchError::TooFast {
            median_ns,
            resolution_ns,
        });
    }
    Ok(BenchRecord {
        algorithm: case.algorithm,
        n: case.n,
        m: case.m,
        k: case.k,
        iters: case.effective_iters(),
        repeats: case.repeats,
        median_ns,
        iqr_ns,
        max_ns: *samples.last().expect("repeats >= 10"),
        parallel: parallel.is_some(),
        threads: parallel.unwrap_or(1),
        batch,
        checksum: sum,
    })
}

/// Single-threaded timing of one routing call per sample.
pub fn run_bench(case: &BenchCase) -> Result<BenchRecord, BenchError> {
    case.validate()?;
    let iters = case.effective_iters();
    let u = bench_input(case.seed, case.n, case.m, case.k)?;
    let direct = checksum(&route(case.algorithm, iters, &u)?);

    for _ in 0..case.warmup {
        black_box(route(case.algorithm, iters, black_box(&u))?);
    }
    let mut samples = Vec::with_capacity(case.repeats);
    let mut last = None;
    for _ in 0..case.repeats {
        let start = Instant::now();
        let out = route(case.algorithm, iters, black_box(&u));
        let elapsed = start.elapsed();
        samples.push(elapsed.as_nanos() as u64);
        last = Some(black_box(out)?);
    }
    let bench = checksum(&last.expect("repeats >= 10"));
    if bench.to_bits() != direct.to_bits() {
        return Err(BenchError::Checksum { bench, direct });
    }
    finish(case, &mut samples, None, 1, bench)
}

/// Batch-parallel timing: each sample routes `batch` copies of the input
/// split across `threads` scoped workers. Reported separately from
/// [`run_bench`].
pub fn run_bench_parallel(
    case: &BenchCase,
    batch: usize,
    threads: usize,
) -> Result<BenchRecord, BenchError> {
    case.validate()?;
    let threads = threads.clamp(1, batch.max(1));
    let iters = case.effective_iters();
    let u = bench_input(case.seed, case.n, case.m, case.k)?;
    let direct = checksum(&route(case.algorithm, iters, &u)?);
    let per = batch.div_ceil(threads);

    let run = || -> Result<f64, BenchError> {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let count = per.min(batch.saturating_sub(t * per));
                    let u = &u;
                    s.spawn(move || -> Result<f64, RoutingError> {
                        let mut acc = 0.0;
                        for _ in 0..count {
                            acc += checksum(&route(case.algorithm, iters, black_box(u))?);
                        }
                        Ok(acc)
                    })
                })
                .collect();
            let mut total = 0.0;
            for h in handles {
                total += h.join().expect("bench worker panicked")?;
            }
            Ok(total)
        })
    };

    for _ in 0..case.warmup {
        black_box(run()?);
    }
    let mut samples = Vec::with_capacity(case.repeats);
    let mut total = 0.0;
    for _ in 0..case.repeats {
        let start = Instant::now();
        total = black_box(run()?);
        samples.push(start.elapsed().as_nanos() as u64);
    }
    let expected = direct * batch as f64;
    if (total - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
        return Err(BenchError::Checksum {
            bench: total,
            direct: expected,
        });
    }
    finish(case, &mut samples, Some(threads), batch, direct)
}

/// Default grid: n ∈ {64, 256, 1152}, m = 10, k = 16.
pub fn default_grid() -> Vec<(usize, usize, usize)> {
    [64, 256, 1152].iter().map(|&n| (n, 10, 16)).collect()
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub seed: u64,
    pub timer_resolution_ns: u64,
    pub records: Vec<BenchRecord>,
    /// For each algorithm, whether the median is non-decreasing in n (pairs
    /// whose IQR ranges overlap are exempt).
    pub monotone: Vec<(String, bool)>,
}

/// Checks that time grows with n per algorithm, exempting neighbours whose
/// `median ± iqr/2` bands overlap.
pub fn monotone_in_n(records: &[BenchRecord]) -> Vec<(String, bool)> {
    let mut names: Vec<String> = Vec::new();
    for r in records {
        let name = r.label();
        if !names.contains(&name) {
            names.push(name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut rows: Vec<&BenchRecord> =
                records.iter().filter(|r| r.label() == name).collect();
            rows.sort_by_key(|r| (r.m, r.k, r.iters, r.n));
            let ok = rows.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                if (a.m, a.k, a.iters) != (b.m, b.k, b.iters) || b.median_ns >= a.median_ns {
                    return true;
                }
                let a_lo = a.median_ns as f64 - a.iqr_ns as f64 / 2.0;
                let b_hi = b.median_ns as f64 + b.iqr_ns as f64 / 2.0;
                b_hi >= a_lo
            });
            (name, ok)
        })
        .collect()
}
