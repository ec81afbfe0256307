use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capsroute::bench::{self, Algorithm, BenchError, BenchRecord, BenchCase, BenchSummary};
use capsroute::core::capsnet::{LossMode, MarginLossParams, RoutingAlgorithm};
use capsroute::core::routing::DynamicRoutingConfig;
use capsroute::core::verify;
use capsroute::exit;
use capsroute::idx::{self, IdxError};
use capsroute::report;
use capsroute::train::{self, TrainConfig, TrainError};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "capsroute",
    version,
    about = "Capsule routing: verification, timing and desk-scale training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every property suite and print a JSON report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time routing operators; writes bench.csv and bench.json under --out.
    Bench {
        /// Repeat to time several algorithms; defaults to fm, dynamic, brute.
        #[arg(long, value_enum)]
        algo: Vec<AlgoArg>,
        /// Dynamic-routing iterations; repeat for several.
        #[arg(long, default_values_t = [3])]
        iters: Vec<usize>,
        /// Input capsule counts; defaults to 64, 256, 1152.
        #[arg(long)]
        n: Vec<usize>,
        #[arg(long, default_values_t = [10])]
        m: Vec<usize>,
        #[arg(long, default_values_t = [16])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DEFAULT_SEED)]
        seed: u64,
        /// Also time a batch-parallel run (threads capped by CAPSROUTE_THREADS).
        #[arg(long)]
        parallel: bool,
        /// Instances per sample in parallel mode.
        #[arg(long, default_value_t = 64)]
        parallel_batch: usize,
        #[arg(long, default_value = "out/bench")]
        out: PathBuf,
    },
    /// Train the desk-scale capsule classifier on MNIST.
    Train {
        /// Directory holding the four standard MNIST IDX files (plain or .gz).
        #[arg(long, default_value = "data/mnist")]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        #[arg(long, default_value_t = 1000)]
        test_size: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = TrainAlgo::Fm)]
        algo: TrainAlgo,
        /// Dynamic-routing iterations.
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = LossArg::Softmax)]
        loss: LossArg,
        #[arg(long, default_value_t = 32)]
        primary_caps: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = verify::GRAD_STEP)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AlgoArg {
    Fm,
    Dynamic,
    Brute,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Fm => Algorithm::Fm,
            AlgoArg::Dynamic => Algorithm::Dynamic,
            AlgoArg::Brute => Algorithm::Brute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TrainAlgo {
    Fm,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Softmax,
    Margin,
}

enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => exit::FAILURE,
            Failure::Usage(_) => exit::USAGE,
            Failure::Io(_) => exit::IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

fn print_config<T: Serialize>(command: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).expect("config serializes");
    eprintln!("capsroute {command} config: {json}");
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct VerifyConfig<'a> {
    seed: u64,
    out: Option<&'a Path>,
}

fn cmd_verify(seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    print_config("verify", &VerifyConfig { seed, out });
    let report = report::verify(seed);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        write_file(path, &json)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect();
        Err(Failure::Check(format!(
            "failed suites: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Serialize)]
struct BenchConfig<'a> {
    algo: &'a [AlgoArg],
    iters: &'a [usize],
    n: &'a [usize],
    m: &'a [usize],
    k: &'a [usize],
    repeats: usize,
    warmup: usize,
    seed: u64,
    parallel: bool,
    parallel_batch: usize,
    threads: usize,
    out: &'a Path,
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    algo: Vec<AlgoArg>,
    iters: Vec<usize>,
    n: Vec<usize>,
    m: Vec<usize>,
    k: Vec<usize>,
    repeats: usize,
    warmup: usize,
    seed: u64,
    parallel: bool,
    parallel_batch: usize,
    out: &Path,
) -> Result<(), Failure> {
    let algo = if algo.is_empty() {
        vec![AlgoArg::Fm, AlgoArg::Dynamic, AlgoArg::Brute]
    } else {
        algo
    };
    let n = if n.is_empty() {
        bench::default_grid()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect()
    } else {
        n
    };
    let threads = bench::thread_cap();
    print_config(
        "bench",
        &BenchConfig {
            algo: &algo,
            iters: &iters,
            n: &n,
            m: &m,
            k: &k,
            repeats,
            warmup,
            seed,
            parallel,
            parallel_batch,
            threads,
            out,
        },
    );
    if repeats < bench::MIN_REPEATS || warmup < bench::MIN_WARMUP {
        return Err(Failure::Usage(format!(
            "--repeats must be >= {} and --warmup >= {}",
            bench::MIN_REPEATS,
            bench::MIN_WARMUP
        )));
    }
    if iters.contains(&0) {
        return Err(Failure::Usage("--iters must be positive".into()));
    }
    create_dir(out)?;

    let mut records: Vec<BenchRecord> = Vec::new();
    for &k in &k {
        for &m in &m {
            for &n in &n {
                for &a in &algo {
                    let iter_list: &[usize] = if a == AlgoArg::Dynamic { &iters } else { &[1] };
                    for &it in iter_list {
                        let mut case = BenchCase::new(a.into(), n, m, k, it);
                        case.repeats = repeats;
                        case.warmup = warmup;
                        case.seed = seed;
                        let mut run = vec![bench::run_bench(&case)];
                        if parallel {
                            run.push(bench::run_bench_parallel(&case, parallel_batch, threads));
                        }
                        for r in run {
                            match r {
                                Ok(rec) => {
                                    eprintln!("{}", rec.csv_row());
                                    records.push(rec);
                                }
                                Err(e @ BenchError::TooFast { .. }) => {
                                    return Err(Failure::Usage(e.to_string()))
                                }
                                Err(e) => return Err(Failure::Check(e.to_string())),
                            }
                        }
                    }
                }
            }
        }
    }
    let summary = BenchSummary {
        seed,
        timer_resolution_ns: bench::timer_resolution().as_nanos() as u64,
        monotone: bench::monotone_in_n(&records),
        records,
    };
    write_file(&out.join("bench.csv"), &bench::to_csv(&summary.records))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("bench.json"), &json)?;
    print!("{}", bench::to_csv(&summary.records));
    Ok(())
}

struct MarginWrap(MarginLossParams);

impl Serialize for MarginWrap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.0.lambda, self.0.m_plus, self.0.m_minus).serialize(s)
    }
}

fn cmd_train(
    cfg: TrainConfig,
    data: &Path,
    algo: TrainAlgo,
    iters: usize,
    loss: LossArg,
    out: &Path,
) -> Result<(), Failure> {
    let margin = (loss == LossArg::Margin).then(MarginLossParams::default);
    #[derive(Serialize)]
    struct Shown<'a> {
        data: &'a Path,
        #[serde(flatten)]
        train: &'a TrainConfig,
        algo: TrainAlgo,
        iters: Option<usize>,
        loss: LossArg,
        margin_lambda_mplus_mminus: Option<MarginWrap>,
        threads: usize,
        out: &'a Path,
    }
    print_config(
        "train",
        &Shown {
            data,
            train: &cfg,
            algo,
            iters: (algo == TrainAlgo::Dynamic).then_some(iters),
            loss,
            margin_lambda_mplus_mminus: margin.map(MarginWrap),
            threads: 1,
            out,
        },
    );
    let algorithm = match algo {
        TrainAlgo::Fm => RoutingAlgorithm::Fm,
        TrainAlgo::Dynamic => RoutingAlgorithm::Dynamic(
            DynamicRoutingConfig::new(iters).map_err(|e| Failure::Usage(e.to_string()))?,
        ),
    };
    let loss_mode = margin.map_or(LossMode::Softmax, LossMode::Margin);

    let (train_all, test_all) = idx::load_mnist_dir(data).map_err(|e| match e {
        IdxError::Io { .. } => Failure::Io(e.to_string()),
        other => Failure::Io(format!("{}: {other}", data.display())),
    })?;
    if cfg.train_size > train_all.len() || cfg.test_size > test_all.len() {
        return Err(Failure::Usage(format!(
            "requested {}/{} examples but the data has {}/{}",
            cfg.train_size,
            cfg.test_size,
            train_all.len(),
            test_all.len()
        )));
    }
    let train_set = train_all.take(cfg.train_size);
    let test_set = test_all.take(cfg.test_size);

    create_dir(out)?;
    let metrics = out.join("metrics.csv");
    if metrics.exists() {
        fs::remove_file(&metrics)
            .map_err(|e| Failure::Io(format!("{}: {e}", metrics.display())))?;
    }
    let mut io_err = None;
    let result = train::train(&cfg, algorithm, loss_mode, &train_set, &test_set, |m| {
        println!("{}", m.csv_row());
        if io_err.is_none() {
            io_err = train::append_metrics(&metrics, m).err();
        }
    });
    if let Some(e) = io_err {
        return Err(Failure::Io(e.to_string()));
    }
    let outcome = result.map_err(|e| match e {
        TrainError::Diverged { .. } => Failure::Check(format!("aborting: {e}")),
        TrainError::BatchSize(_) => Failure::Usage(e.to_string()),
        TrainError::Io { .. } | TrainError::Checkpoint(_) => Failure::Io(e.to_string()),
        other => Failure::Check(other.to_string()),
    })?;
    let ckpt = out.join("model.caps");
    train::save_checkpoint(&outcome.model, &ckpt).map_err(|e| Failure::Io(e.to_string()))?;
    if let Some(last) = outcome.history.last() {
        eprintln!(
            "final test accuracy {:.4}; checkpoint {}",
            last.test_acc,
            ckpt.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckConfig {
    h: f64,
    seed: u64,
    seeds: u64,
    tolerance: f64,
}

fn cmd_gradcheck(h: f64, seed: u64, seeds: u64) -> Result<(), Failure> {
    print_config(
        "gradcheck",
        &GradcheckConfig {
            h,
            seed,
            seeds,
            tolerance: verify::GRAD_TOL,
        },
    );
    if !(h > 0.0 && h.is_finite()) || seeds == 0 {
        return Err(Failure::Usage(
            "--h must be positive and --seeds at least 1".into(),
        ));
    }
    let table = verify::gradient_table(seed..seed + seeds, h)
        .map_err(|e| Failure::Check(format!("gradient check failed to run: {e}")))?;
    println!("{:<28} {:>12} {:>8}  status", "op", "max_rel_err", "index");
    let mut failing = 0;
    for r in &table {
        let ok = r.passes(verify::GRAD_TOL);
        failing += usize::from(!ok);
        println!(
            "{:<28} {:>12.3e} {:>8}  {}",
            r.op,
            r.max_rel_err,
            r.worst_index.map_or("-".into(), |i| i.to_string()),
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!();
    println!("max |d a / d u| for n identical unit votes");
    println!("{:>4} {:>14} {:>14}", "n", "scaled (1/n)", "unscaled");
    for row in verify::gradient_explosion_rows(&[2, 8, 64]) {
        println!(
            "{:>4} {:>14.6} {:>14.6}",
            row.n, row.scaled_max, row.unscaled_max
        );
    }
    if failing > 0 {
        Err(Failure::Check(format!(
            "{failing} op(s) at or above relative error {}",
            verify::GRAD_TOL
        )))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Verify { seed, out } => cmd_verify(seed, out.as_deref()),
        Command::Bench {
            algo,
            iters,
            n,
            m,
            k,
            repeats,
            warmup,
            seed,
            parallel,
            parallel_batch,
            out,
        } => cmd_bench(
            algo,
            iters,
            n,
            m,
            k,
            repeats,
            warmup,
            seed,
            parallel,
            parallel_batch,
            &out,
        ),
        Command::Train {
            data,
            train_size,
            test_size,
            epochs,
            lr,
            batch,
            algo,
            iters,
            loss,
            primary_caps,
            k,
            seed,
            out,
        } => cmd_train(
            TrainConfig {
                train_size,
                test_size,
                epochs,
                learning_rate: lr,
                batch,
                primary_caps,
                k,
                seed,
            },
            &data,
            algo,
            iters,
            loss,
            &out,
        ),
        Command::Gradcheck { h, seed, seeds } => cmd_gradcheck(h, seed, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}
