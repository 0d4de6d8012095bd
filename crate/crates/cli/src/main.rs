//! `dicot` command-line tool: pretraining, embedding, evaluation and the
//! loss-scaling benchmark.

mod config;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dicot::bench::{run_scaling, Method, SweepConfig};
use dicot::data::{gen_synthetic, load_binary, load_ucr_tsv, save_binary, SyntheticSpec, TimeSeriesBatch, DATA_MAGIC};
use dicot::encoder::{load_model, save_model};
use dicot::eval::{
    ari, embed_windows, kmeans, knn1, linear_probe, nmi, standardize, subsample_fraction, subsample_per_class,
    EmbeddingMatrix, EvalReport, SeedTag, Standardizer,
};
use dicot::partition::plan_partition;
use dicot::trainer::pretrain;
use dicot::{Error, Result};

use config::{parse_seeds, RunConfig};

#[derive(Parser)]
#[command(
    name = "dicot",
    version,
    about = "Sub-block contrastive pretraining for time series",
    after_help = "Run `dicot --help config` for the configuration keys and their defaults."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Args)]
struct SeedArgs {
    /// Comma-separated evaluation seeds [default: eval.seeds, 1,2,3,4,5]
    #[arg(long)]
    seeds: Option<String>,
}

impl SeedArgs {
    fn resolve(&self, cfg: &RunConfig) -> Result<Vec<u64>> {
        match &self.seeds {
            Some(s) => parse_seeds(s),
            None => Ok(cfg.seeds.clone()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write the model file
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training windows (binary or UCR tsv) [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model output path [default: paths.out]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration log CSV [default: paths.log]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Shortcut for `--set optim.seed=N`
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed every window of a dataset with a trained model
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Embedding CSV [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 1-NN accuracy with a per-class labeled budget
    EvalKnn {
        /// Labeled embeddings the references are sampled from
        #[arg(long)]
        emb: PathBuf,
        /// Held-out embeddings; without it the unsampled rows of --emb are the test set
        #[arg(long)]
        test_emb: Option<PathBuf>,
        /// Reference windows per class
        #[arg(long, default_value_t = 10)]
        budget: usize,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report CSV [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe accuracy trained on all of --emb
    EvalLinear {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        test_emb: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-means on standardized embeddings, scored by NMI and ARI
    EvalCluster {
        #[arg(long)]
        emb: PathBuf,
        /// Number of clusters [default: number of classes]
        #[arg(long)]
        clusters: Option<usize>,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe accuracy from a small labeled fraction of --emb
    EvalLowlabel {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        test_emb: PathBuf,
        /// Labeled fraction, stratified by class
        #[arg(long, default_value_t = 0.01)]
        frac: f64,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain on a source dataset and probe on a target dataset
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_train: PathBuf,
        #[arg(long)]
        target_test: PathBuf,
        /// Source channels to keep, e.g. `0,2` [default: all]
        #[arg(long)]
        source_channels: Option<String>,
        /// Target channels to keep [default: all]
        #[arg(long)]
        target_channels: Option<String>,
        /// Pretraining seeds, one run each [default: eval.seeds, 1,2,3,4,5]
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sub-block loss against a per-timestep contrastive loss
    Bench {
        /// Timing CSV [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Window lengths
        #[arg(long, default_value = "64,128,256,512")]
        ts: String,
        /// Batch sizes
        #[arg(long, default_value = "8,16,32,64")]
        bs: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Memory budget of the per-timestep score matrix, MiB
        #[arg(long, default_value_t = 512)]
        budget_mib: usize,
    },
    /// Print the sub-block geometry for a window length
    Partition {
        #[arg(long = "T", value_name = "T")]
        t: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
    },
    /// Convert a UCR tsv file to the binary window format
    Convert {
        #[arg(long, default_value = "tsv")]
        from: String,
        #[arg(long, default_value = "bin")]
        to: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a labeled synthetic oscillation dataset
    GenSynth {
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        #[arg(long, default_value_t = 128)]
        t: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        cycles_base: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads a dataset, telling the binary format from UCR tsv by its magic.
fn load_dataset(path: &Path) -> Result<TimeSeriesBatch> {
    let mut head = [0u8; 8];
    let n = fs::File::open(path)?.read(&mut head)?;
    if n == head.len() && head == *DATA_MAGIC {
        load_binary(path)
    } else {
        load_ucr_tsv(path)
    }
}

fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_csv(&fs::read_to_string(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => Ok(fs::write(path, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_channels(spec: Option<&str>) -> Result<Option<Vec<usize>>> {
    spec.map(|s| {
        s.split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad channel index {c:?}")))
            })
            .collect()
    })
    .transpose()
}

fn parse_usizes(what: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

/// Rows of `0..n` not present in the sorted `picked`.
fn complement(n: usize, picked: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| picked.binary_search(i).is_err()).collect()
}

fn knn_accuracy(reference: &EmbeddingMatrix, test: &EmbeddingMatrix) -> Result<f64> {
    let (r, t, _) = standardize(reference, test)?;
    knn1(&r, &t)?
        .accuracy
        .ok_or_else(|| Error::Config("test embeddings carry no labels".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            cfg,
            data,
            out,
            log,
            seed,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(seed) = seed {
                cfg.optimizer.seed = seed;
            }
            let data = data
                .or_else(|| cfg.data.clone())
                .ok_or_else(|| Error::Config("no training data: pass --data or set paths.data".into()))?;
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Config("no model path: pass --out or set paths.out".into()))?;
            let log_path = log.or_else(|| cfg.log.clone());
            let dataset = load_dataset(&data)?;
            let (params, log) = pretrain(&dataset, &cfg.pretrain_config())?;
            save_model(&params, &out)?;
            if let Some(path) = log_path {
                fs::write(path, log.to_csv())?;
            }
            let first = log.records.first().map_or(f64::NAN, |r| r.loss);
            let last = log.records.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "iters={} first_loss={first:.6} last_loss={last:.6} resampled_k={}",
                log.records.len(),
                log.resampled_k
            );
            eprintln!("wall_clock_seconds={:.3}", log.wall_clock.as_secs_f64());
        }
        Command::Embed { model, data, out } => {
            let params = load_model(&model)?;
            let dataset = load_dataset(&data)?;
            emit(out.as_deref(), &embed_windows(&dataset, &params)?.to_csv())?;
        }
        Command::EvalKnn {
            emb,
            test_emb,
            budget,
            seeds,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let seeds = seeds.resolve(&cfg)?;
            let pool = load_embeddings(&emb)?;
            let held_out = test_emb.as_deref().map(load_embeddings).transpose()?;
            let labels = pool.labels()?.to_vec();
            let mut report = EvalReport::default();
            for &seed in &seeds {
                let picked = subsample_per_class(&labels, budget, seed)?;
                let reference = pool.select(&picked);
                let acc = match &held_out {
                    Some(test) => knn_accuracy(&reference, test)?,
                    None => {
                        let rest = complement(pool.rows, &picked);
                        if rest.is_empty() {
                            return Err(Error::Config("budget leaves no rows to test; pass --test-emb".into()));
                        }
                        knn_accuracy(&reference, &pool.select(&rest))?
                    }
                };
                report.push("knn", "accuracy", acc, SeedTag::Seed(seed));
            }
            report.push_means();
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::EvalLinear {
            emb,
            test_emb,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let acc = linear_probe(&load_embeddings(&emb)?, &load_embeddings(&test_emb)?, &cfg.probe)?;
            let mut report = EvalReport::default();
            report.push("linear", "accuracy", acc, SeedTag::Fixed);
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::EvalCluster {
            emb,
            clusters,
            seeds,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let seeds = seeds.resolve(&cfg)?;
            let raw = load_embeddings(&emb)?;
            let labels = raw.labels()?.to_vec();
            let z = Standardizer::fit(&raw).apply(&raw)?;
            let n_clusters = clusters.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            let mut report = EvalReport::default();
            for &seed in &seeds {
                let fit = kmeans(&z, n_clusters, seed, cfg.kmeans_max_iter)?;
                report.push("cluster", "nmi", nmi(&labels, &fit.assignments)?, SeedTag::Seed(seed));
                report.push("cluster", "ari", ari(&labels, &fit.assignments)?, SeedTag::Seed(seed));
            }
            report.push_means();
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::EvalLowlabel {
            emb,
            test_emb,
            frac,
            seeds,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let seeds = seeds.resolve(&cfg)?;
            let pool = load_embeddings(&emb)?;
            let test = load_embeddings(&test_emb)?;
            let labels = pool.labels()?.to_vec();
            let mut report = EvalReport::default();
            for &seed in &seeds {
                let picked = subsample_fraction(&labels, frac, seed)?;
                let acc = linear_probe(&pool.select(&picked), &test, &cfg.probe)?;
                report.push("lowlabel", "accuracy", acc, SeedTag::Seed(seed));
            }
            report.push_means();
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Transfer {
            cfg,
            source,
            target_train,
            target_test,
            source_channels,
            target_channels,
            seeds,
            out,
        } => {
            let cfg = cfg.load()?;
            let seeds = seeds.resolve(&cfg)?;
            let pick = |batch: TimeSeriesBatch, spec: Option<&str>| -> Result<TimeSeriesBatch> {
                match parse_channels(spec)? {
                    Some(ch) => batch.select_channels(&ch),
                    None => Ok(batch),
                }
            };
            let src = pick(load_dataset(&source)?, source_channels.as_deref())?;
            let tr = pick(load_dataset(&target_train)?, target_channels.as_deref())?;
            let te = pick(load_dataset(&target_test)?, target_channels.as_deref())?;
            if src.channels() != tr.channels() || tr.channels() != te.channels() {
                return Err(Error::Config(format!(
                    "channel counts differ: source {}, target train {}, target test {}",
                    src.channels(),
                    tr.channels(),
                    te.channels()
                )));
            }
            let mut report = EvalReport::default();
            for &seed in &seeds {
                let mut run = cfg.pretrain_config();
                run.optimizer.seed = seed;
                let (params, _) = pretrain(&src, &run)?;
                let train_emb = embed_windows(&tr, &params)?;
                let test_emb = embed_windows(&te, &params)?;
                let lin = linear_probe(&train_emb, &test_emb, &cfg.probe)?;
                let knn = knn_accuracy(&train_emb, &test_emb)?;
                report.push("transfer", "linear_accuracy", lin, SeedTag::Seed(seed));
                report.push("transfer", "knn_accuracy", knn, SeedTag::Seed(seed));
            }
            report.push_means();
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Bench {
            out,
            ts,
            bs,
            k,
            budget_mib,
        } => {
            let sweep = SweepConfig {
                ts: parse_usizes("T", &ts)?,
                bs: parse_usizes("B", &bs)?,
                k,
                budget_bytes: budget_mib << 20,
                ..SweepConfig::default()
            };
            let report = run_scaling(&sweep)?;
            emit(out.as_deref(), &report.to_csv())?;
            let fmt = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            for &b in &sweep.bs {
                eprintln!(
                    "B={b}: slope vs T  dicot={} timestep={}",
                    fmt(report.slope_vs_t(Method::Dicot, b)),
                    fmt(report.slope_vs_t(Method::Timestep, b))
                );
            }
            for &t in &sweep.ts {
                eprintln!(
                    "T={t}: slope vs B  dicot={} timestep={}",
                    fmt(report.slope_vs_b(Method::Dicot, t)),
                    fmt(report.slope_vs_b(Method::Timestep, t))
                );
            }
        }
        Command::Partition { t, k, rho } => {
            let plan = plan_partition(t, k, rho)?;
            println!("L={} s={} k_eff={}", plan.len, plan.stride, plan.k);
            for j in 0..plan.k {
                let (a, b) = plan.block_range(j);
                println!("block {j}: [{a}, {b})");
            }
        }
        Command::Convert {
            from,
            to,
            input,
            output,
        } => {
            if from != "tsv" || to != "bin" {
                return Err(Error::Config(format!(
                    "unsupported conversion {from} -> {to}; only tsv -> bin"
                )));
            }
            let batch = load_ucr_tsv(&input)?;
            save_binary(&batch, &output)?;
            println!("windows={} T={} D={}", batch.len(), batch.window_len(), batch.channels());
        }
        Command::GenSynth {
            n_per_class,
            t,
            d,
            classes,
            sigma,
            cycles_base,
            seed,
            out,
        } => {
            let batch = gen_synthetic(&SyntheticSpec {
                n_per_class,
                t,
                d,
                n_classes: classes,
                noise_sigma: sigma,
                cycles_base,
                seed,
            })?;
            save_binary(&batch, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.windows(2).any(|w| (w[0] == "--help" || w[0] == "help") && w[1] == "config") {
        print!("{}", config::help_text());
        return ExitCode::SUCCESS;
    }
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
