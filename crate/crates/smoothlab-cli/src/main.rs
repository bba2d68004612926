//! Command-line front door: deep-net training with bound reports, XOR
//! experiments and dimension sweeps, standalone bound evaluation, and the
//! built-in property suite.
//!
//! Exit codes: 0 success, 1 config error, 2 numerical divergence, 3 I/O.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smoothlab::config::ConfigFile;
use smoothlab::data::{
    binarize_normalize, load_idx, read_metrics_csv, synth_ntk_separable, write_metrics_csv, Dataset,
};
use smoothlab::net::{lipschitz_at_init, write_checkpoint, NetworkParams};
use smoothlab::ntk::{
    corollary1_construct, estimate_margin, ntk_features, output_bound, stability_bounds,
    BoundReport, DEFAULT_FEATURE_BUDGET,
};
use smoothlab::numerics::RngStream;
use smoothlab::objective::{estimate_constants, ProbeOpts};
use smoothlab::trainer::{train_gd, width_condition_check};
use smoothlab::xor::{run_theorem4, sweep, write_sweep_csv, SweepCell, XorConfig};
use smoothlab::Error;

// Dedicated stream ids for data plumbing; model layers use streams 0..=L.
const STREAM_SPLIT: u64 = 900;
const STREAM_SUBSAMPLE_TRAIN: u64 = 901;
const STREAM_SUBSAMPLE_TEST: u64 = 902;

#[derive(Parser)]
#[command(name = "smoothlab", version, about = "Training laboratory for smooth neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-batch GD training run with metrics CSV, checkpoint, and bound report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repeatable key=value config override.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Single XOR experiment with per-step accuracy CSV.
    Xor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// XOR dimension sweep over (d, replicate) cells.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Parallel jobs for the sweep cells.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the stability bounds from a metrics CSV; JSON to stdout.
    Bounds {
        #[arg(long)]
        metrics: PathBuf,
        /// Training-set size n behind the logged run.
        #[arg(long)]
        n: usize,
        /// Lipschitz parameter at initialization (default 0).
        #[arg(long)]
        g0: Option<f64>,
        /// Radius for the rho-based bound (default: final dist_from_init).
        #[arg(long)]
        rho: Option<f64>,
        /// Step size (default: the eta column of the CSV).
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Run the built-in oracle/invariant suite.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, set, seed } => cmd_train(&config, &out, &set, seed),
        Command::Xor { config, out, set, seed } => cmd_xor(&config, &out, &set, seed),
        Command::Sweep { config, out, set, jobs, seed } => cmd_sweep(&config, &out, &set, jobs, seed),
        Command::Bounds { metrics, n, g0, rho, eta } => cmd_bounds(&metrics, n, g0, rho, eta),
        Command::Check => cmd_check(),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::EmptyDataset | Error::Dataset(_) | Error::ZeroVector => 1,
        Error::Io { .. }
        | Error::IdxMagic { .. }
        | Error::IdxTruncated(_)
        | Error::IdxCountMismatch { .. }
        | Error::Csv(_) => 3,
    }
}

/// Resolve a data path, falling back to $GBL_DATA_DIR as the dataset root.
fn resolve_data_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.exists() {
        return p;
    }
    if let Ok(root) = std::env::var("GBL_DATA_DIR") {
        let joined = Path::new(&root).join(raw);
        if joined.exists() {
            return joined;
        }
    }
    p
}

fn load_config(path: &Path, set: &[String], seed: Option<u64>) -> Result<ConfigFile, Error> {
    let mut cfg = ConfigFile::load(path, set)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out_dir(out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Assemble train/test datasets per the config: IDX files when given,
/// synthetic clusters otherwise.
fn load_datasets(cfg: &ConfigFile) -> Result<(Dataset, Dataset), Error> {
    let (mut train, mut test) = match (&cfg.data_images, &cfg.data_labels) {
        (Some(imgs), Some(lbls)) => {
            let raw = load_idx(&resolve_data_path(imgs), &resolve_data_path(lbls))?;
            let train = binarize_normalize(&raw, cfg.label_rule()?)?;
            let test = match (&cfg.test_images, &cfg.test_labels) {
                (Some(ti), Some(tl)) => {
                    let raw = load_idx(&resolve_data_path(ti), &resolve_data_path(tl))?;
                    binarize_normalize(&raw, cfg.label_rule()?)?
                }
                (None, None) => {
                    let mut rng = RngStream::new(cfg.seed, STREAM_SPLIT);
                    let (tr, te) = train.split(&mut rng, cfg.test_fraction)?;
                    return subsample_pair(cfg, tr, te);
                }
                _ => {
                    return Err(Error::Config(
                        "test_images and test_labels must be given together".into(),
                    ))
                }
            };
            (train, test)
        }
        (None, None) => {
            let d = cfg.synth_dim.unwrap_or(20);
            let all = synth_ntk_separable(cfg.seed, d, cfg.synth_n, cfg.synth_margin)?;
            let mut rng = RngStream::new(cfg.seed, STREAM_SPLIT);
            let (tr, te) = all.split(&mut rng, cfg.test_fraction)?;
            (tr, te)
        }
        _ => {
            return Err(Error::Config("data_images and data_labels must be given together".into()))
        }
    };
    (train, test) = subsample_pair(cfg, train, test)?;
    Ok((train, test))
}

fn subsample_pair(cfg: &ConfigFile, train: Dataset, test: Dataset) -> Result<(Dataset, Dataset), Error> {
    let train = match cfg.n_train {
        Some(n) => {
            let mut rng = RngStream::new(cfg.seed, STREAM_SUBSAMPLE_TRAIN);
            train.subsample(&mut rng, n)?
        }
        None => train,
    };
    let test = match cfg.n_test {
        Some(n) => {
            let mut rng = RngStream::new(cfg.seed, STREAM_SUBSAMPLE_TEST);
            test.subsample(&mut rng, n)?
        }
        None => test,
    };
    Ok((train, test))
}

fn cmd_train(config: &Path, out: &Path, set: &[String], seed: Option<u64>) -> Result<ExitCode, Error> {
    let cfg = load_config(config, set, seed)?;
    ensure_out_dir(out)?;
    let (train, test) = load_datasets(&cfg)?;
    let net = cfg.net_config(train.input_dim())?;
    let tcfg = cfg.train_config()?;
    let kind = cfg.loss_kind()?;
    let w0 = NetworkParams::init_gaussian(&net, cfg.seed);

    println!(
        "train: n={} test={} d={} L={} m={} p={} activation={}",
        train.len(),
        test.len(),
        train.input_dim(),
        net.hidden_layers,
        net.width,
        net.param_count(),
        net.activation.name()
    );

    let outcome = train_gd(&net, w0.flat(), &train, Some(&test), kind, &tcfg)?;
    write_metrics_csv(&outcome.metrics, &out.join("metrics.csv"))?;

    let final_params = NetworkParams::from_flat(&net, outcome.weights.clone())?;
    write_checkpoint(&out.join("final.snet"), &net, &final_params)?;

    if let Some(iter) = outcome.diverged {
        eprintln!("run diverged at iteration {iter}; metrics and checkpoint written");
        return Ok(ExitCode::from(2));
    }

    // Bound report from the logged run plus initialization geometry.
    let lip = lipschitz_at_init(&net, &w0, train.inputs());
    let final_rec = outcome.metrics.final_record().expect("non-empty metrics");
    let rho_final = final_rec.dist_from_init;
    let mut report: BoundReport =
        stability_bounds(&outcome.metrics, lip.g0, rho_final, outcome.eta, train.len())?;

    let consts =
        estimate_constants(&net, w0.flat(), &outcome.weights, train.inputs(), ProbeOpts::default());
    let width = width_condition_check(net.hidden_layers, net.width, rho_final, consts.beta_hat, Some(train.len()));

    // NTK margin quantities only when the feature matrix fits the budget;
    // streamed margin descent over a large run would dwarf training itself.
    if cfg.margin_iters > 0 && train.len().saturating_mul(net.param_count()) <= DEFAULT_FEATURE_BUDGET
    {
        let feats = ntk_features(&net, w0.flat(), &train, DEFAULT_FEATURE_BUDGET)?;
        let margin = estimate_margin(&feats, cfg.margin_iters);
        let b_hat = output_bound(&net, w0.flat(), &train)?;
        report.gamma_hat = Some(margin.gamma_hat);
        report.b_hat = Some(b_hat);
        if margin.separated {
            let t_count = outcome.metrics.records.len().saturating_sub(1).max(1);
            let epsilon = cfg.corollary_epsilon.unwrap_or(1.0 / t_count as f64);
            let cor = corollary1_construct(
                w0.flat(),
                &margin.direction,
                margin.gamma_hat,
                b_hat,
                epsilon,
                consts.beta_hat,
                net.hidden_layers,
                net.width,
            )?;
            report.corollary_rho = Some(cor.rho);
            report.corollary_required_m = Some(cor.required_m);
            let lipf = (lip.g0 + 0.25) * (lip.g0 + 0.25);
            report.bound_eq9_corollary = Some(9.0 * cor.rho * cor.rho * lipf / train.len() as f64);
        } else {
            println!("ntk margin: not separated at initialization");
        }
    }

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let bounds_path = out.join("bounds.json");
    std::fs::File::create(&bounds_path)
        .and_then(|mut f| f.write_all(json.as_bytes()))
        .map_err(|e| Error::io(&bounds_path, e))?;

    println!(
        "done: T={} train_loss={:.6} rho(T)={:.4} G0={:.4} (ceiling {:.4}) eta={:.3e}",
        final_rec.iter, final_rec.train_loss, rho_final, lip.g0, lip.ceiling, outcome.eta
    );
    println!(
        "bounds: eq12={:.6} eq9={:.6} eq8={:.6} width_ok={} required_m={}",
        report.bound_eq12, report.bound_eq9, report.bound_eq8, width.satisfied, width.required_m
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_xor(config: &Path, out: &Path, set: &[String], seed: Option<u64>) -> Result<ExitCode, Error> {
    let cfg = load_config(config, set, seed)?;
    ensure_out_dir(out)?;
    let xcfg: XorConfig = cfg.xor_config()?;
    println!(
        "xor: d={} m={} n={} eta={} T={}",
        xcfg.dim,
        xcfg.width,
        xcfg.batch_size,
        xcfg.resolved_eta(),
        xcfg.resolved_steps()
    );
    let run = run_theorem4(&xcfg)?;
    let cell = SweepCell { dim: xcfg.dim, replicate: 0, run };
    write_sweep_csv(std::slice::from_ref(&cell), &out.join("xor.csv"))?;
    println!("final mc accuracy: {:.4}", cell.run.final_accuracy());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    config: &Path,
    out: &Path,
    set: &[String],
    jobs: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode, Error> {
    let cfg = load_config(config, set, seed)?;
    ensure_out_dir(out)?;
    if let Some(jobs) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the job pool: {e}")))?;
    }
    let dims = cfg.sweep_dims.clone();
    let multiplier = cfg.sweep_batch_multiplier;
    let base = cfg.clone();
    let cells = sweep(
        &dims,
        cfg.sweep_replicates,
        |d| multiplier * d,
        move |d, n, seed| {
            let mut xc = XorConfig::new(d, 20, n, seed);
            xc.eta = base.eta;
            xc.steps = base.steps;
            xc.mc_samples = base.mc_samples;
            xc
        },
        cfg.seed,
    )?;
    write_sweep_csv(&cells, &out.join("sweep.csv"))?;

    // Aggregate steps-to-threshold per dimension; a never-crossing run is
    // penalized as T+1.
    let agg_path = out.join("aggregate.csv");
    let mut agg = String::from("d,n,m,eta,T,replicates,mean_steps_to_err_below_0.01,mean_final_accuracy\n");
    for &d in &dims {
        let runs: Vec<&SweepCell> = cells.iter().filter(|c| c.dim == d).collect();
        let t = runs[0].run.config.resolved_steps();
        let mean_steps: f64 = runs
            .iter()
            .map(|c| c.run.steps_to_error_below(0.01).unwrap_or(t + 1) as f64)
            .sum::<f64>()
            / runs.len() as f64;
        let mean_acc: f64 =
            runs.iter().map(|c| c.run.final_accuracy()).sum::<f64>() / runs.len() as f64;
        agg.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.6}\n",
            d,
            multiplier * d,
            runs[0].run.config.width,
            runs[0].run.config.resolved_eta(),
            t,
            runs.len(),
            mean_steps,
            mean_acc
        ));
        println!("d={d}: mean steps to error<0.01 = {mean_steps:.2}, mean final accuracy = {mean_acc:.4}");
    }
    std::fs::File::create(&agg_path)
        .and_then(|mut f| f.write_all(agg.as_bytes()))
        .map_err(|e| Error::io(&agg_path, e))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bounds(
    metrics_path: &Path,
    n: usize,
    g0: Option<f64>,
    rho: Option<f64>,
    eta: Option<f64>,
) -> Result<ExitCode, Error> {
    let metrics = read_metrics_csv(metrics_path)?;
    let final_rec = metrics
        .final_record()
        .ok_or_else(|| Error::Csv("metrics file has no records".into()))?;
    let g0 = g0.unwrap_or(0.0);
    let rho = rho.unwrap_or(final_rec.dist_from_init);
    let eta = eta.unwrap_or(final_rec.eta);
    let report = stability_bounds(&metrics, g0, rho, eta, n)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(ExitCode::SUCCESS)
}

fn cmd_check() -> Result<ExitCode, Error> {
    let outcomes = smoothlab::selfcheck::run_all();
    let mut failures = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} - {}", o.name, o.detail);
        if !o.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} checks passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failures} of {} checks failed", outcomes.len());
        Ok(ExitCode::FAILURE)
    }
}
