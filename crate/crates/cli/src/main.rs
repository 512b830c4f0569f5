//! `slicewise` command-line tool.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 failed assertion
//! (cost bounds or gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slicewise::cost::{self, FeatureShape};
use slicewise::data::{self, GeneratorParams, VolumeSample};
use slicewise::gradcheck::{run_target, GradTarget, SUITE_TOLERANCE};
use slicewise::metrics::{render_table, MetricsReport};
use slicewise::network::{AttentionKind, Network, Placement};
use slicewise::train::{self, RunConfig};
use slicewise::{Error, Result};

#[derive(Parser)]
#[command(
    name = "slicewise",
    version,
    about = "Slice-wise attention for volumetric lesion segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion-phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 43)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extents D,H,W.
        #[arg(long, default_value = "64,64,32", value_parser = parse_triple)]
        dims: [usize; 3],
        /// Target lesion voxel fraction.
        #[arg(long, default_value_t = data::DEFAULT_LESION_RATE)]
        rate: f64,
        #[arg(long, default_value_t = data::DEFAULT_CHANNELS)]
        channels: usize,
    },
    /// Train a network on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = BlockArg::Rsa)]
        block: BlockArg,
        /// Attention placement: 000, 010, 101 or 111. Defaults to 010, or
        /// 000 with `--block none`.
        #[arg(long)]
        placement: Option<String>,
        /// JSON run configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for initialization, data order and crops.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Run split seeds 0..N and report mean metrics.
        #[arg(long, default_value_t = 1)]
        splits: u64,
        /// Parent directory of run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one side of a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 20)]
        n_train: usize,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Output directory; defaults to the checkpoint's parent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the labels against themselves instead of running the network.
        #[arg(long)]
        ground_truth_as_prediction: bool,
    },
    /// Attention-map memory and FLOP accounting.
    Cost {
        /// Feature shape C,D,H,W.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[u64; 4]>,
        /// Check the ratio bounds over the built-in shape grid.
        #[arg(long)]
        sweep: bool,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        element_bytes: u64,
    },
    /// Finite-difference gradient checks (64-bit).
    Gradcheck {
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    None,
    Ncl,
    Rsa,
}

impl From<BlockArg> for AttentionKind {
    fn from(b: BlockArg) -> Self {
        match b {
            BlockArg::None => AttentionKind::None,
            BlockArg::Ncl => AttentionKind::NonLocal,
            BlockArg::Rsa => AttentionKind::Rsa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Sa,
    Rsa,
    Ncl,
    Loss,
    Unet,
    All,
}

fn parse_list<T: std::str::FromStr, const N: usize>(
    s: &str,
) -> std::result::Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| format!("invalid number {p:?}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {s:?}"))
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_shape(s: &str) -> std::result::Result<[u64; 4], String> {
    parse_list(s)
}

/// Error of a command: validation problems exit 1, failed checks exit 2.
enum Failure {
    Invalid(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            dims,
            rate,
            channels,
        } => gen_data(&out, n, seed, dims, rate, channels),
        Command::Train {
            data,
            block,
            placement,
            config,
            seed,
            iterations,
            splits,
            out,
        } => cmd_train(
            &data,
            block,
            placement,
            config.as_deref(),
            seed,
            iterations,
            splits,
            &out,
        ),
        Command::Eval {
            checkpoint,
            data,
            split_seed,
            n_train,
            subset,
            out,
            ground_truth_as_prediction,
        } => cmd_eval(
            &checkpoint,
            &data,
            split_seed,
            n_train,
            subset,
            out.as_deref(),
            ground_truth_as_prediction,
        ),
        Command::Cost {
            shape,
            sweep,
            csv,
            element_bytes,
        } => cmd_cost(shape, sweep, csv.as_deref(), element_bytes),
        Command::Gradcheck { target, seed } => cmd_gradcheck(target, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(
    out: &Path,
    n: usize,
    seed: u64,
    dims: [usize; 3],
    rate: f64,
    channels: usize,
) -> CmdResult {
    let params = GeneratorParams {
        seed,
        n,
        lesion_rate: rate,
        channels,
    };
    let samples = data::generate_dataset(&params, dims)?;
    let manifest = data::write_dataset(out, &samples, dims, &params)?;
    for s in &samples {
        println!("{} lesion fraction {:.3e}", s.id, s.lesion_fraction());
    }
    println!("wrote {} samples to {}", manifest.ids.len(), out.display());
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_dir: &Path,
    block: BlockArg,
    placement: Option<String>,
    config: Option<&Path>,
    seed: Option<u64>,
    iterations: Option<usize>,
    splits: u64,
    out: &Path,
) -> CmdResult {
    let mut run = load_run_config(config)?;
    let kind = AttentionKind::from(block);
    let placement: Placement = match (kind, placement) {
        // A backbone without blocks has nothing to place.
        (AttentionKind::None, _) => Placement::none(),
        (_, Some(p)) => p.parse()?,
        (_, None) => "010".parse()?,
    };
    run.network.block_kind = kind;
    run.network.placement = placement;
    if let Some(s) = seed {
        run.network.seed = s;
        run.train.seed = s;
    }
    if let Some(n) = iterations {
        run.train.iterations = n;
    }
    if splits == 0 {
        return Err(Error::InvalidConfig("--splits must be at least 1".into()).into());
    }
    run.network.validate()?;

    let (_, samples) = data::load_dataset(data_dir)?;
    let run_dir = out.join(run.run_name());
    let progress = |split: u64| {
        move |it: usize, loss: f64| {
            if it.is_multiple_of(50) {
                eprintln!("split {split} iteration {it:>5} loss {loss:.6}");
            }
        }
    };
    if splits == 1 {
        let outcome = train::run_training(&samples, &run, &run_dir, progress(run.split_seed))?;
        print_outcome(&outcome.train_report, &outcome.test_report);
        println!("artifacts in {}", outcome.dir.display());
        return Ok(());
    }

    let mut test_reports = Vec::new();
    for split in 0..splits {
        let mut cfg = run.clone();
        cfg.split_seed = split;
        let outcome = train::run_training(
            &samples,
            &cfg,
            &run_dir.join(format!("split{split}")),
            progress(split),
        )?;
        print_outcome(&outcome.train_report, &outcome.test_report);
        test_reports.push(outcome.test_report);
    }
    let mean = mean_report(&test_reports);
    write(
        &run_dir.join("summary.json"),
        &serde_json::to_string_pretty(&mean).map_err(Error::from)?,
    )?;
    write(
        &run_dir.join(train::CONFIG_FILE),
        &serde_json::to_string_pretty(&run).map_err(Error::from)?,
    )?;
    println!("mean over {splits} splits:");
    println!("{}", render_table(&[("test (mean)", &mean)]));
    Ok(())
}

fn print_outcome(train_report: &MetricsReport, test_report: &MetricsReport) {
    println!(
        "{}",
        render_table(&[("train", train_report), ("test", test_report)])
    );
}

/// Field-wise mean of the four headline metrics; per-sample rows are
/// concatenated.
fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        tag: "test-mean".into(),
        sample_avg_dice: mean(|r| r.sample_avg_dice),
        voxel_avg_dice: mean(|r| r.voxel_avg_dice),
        sample_avg_iou: mean(|r| r.sample_avg_iou),
        voxel_avg_iou: mean(|r| r.voxel_avg_iou),
        pooled: reports
            .iter()
            .fold(Default::default(), |acc, r| acc + r.pooled),
        per_sample: reports.iter().flat_map(|r| r.per_sample.clone()).collect(),
        empty_convention_count: reports.iter().map(|r| r.empty_convention_count).sum(),
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split_seed: u64,
    n_train: usize,
    subset: Subset,
    out: Option<&Path>,
    ground_truth_as_prediction: bool,
) -> CmdResult {
    let net = Network::<f32>::load_checkpoint(checkpoint)?;
    let (_, samples) = data::load_dataset(data_dir)?;
    let selected: Vec<VolumeSample> = if subset == Subset::All {
        samples
    } else {
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (train_ids, test_ids) = data::split_dataset(&ids, n_train, split_seed)?;
        let wanted = if subset == Subset::Train {
            train_ids
        } else {
            test_ids
        };
        samples
            .into_iter()
            .filter(|s| wanted.contains(&s.id))
            .collect()
    };
    let tag = match subset {
        Subset::Train => "train",
        Subset::Test => "test",
        Subset::All => "all",
    };
    let report = if ground_truth_as_prediction {
        let items: Vec<_> = selected
            .iter()
            .map(|s| (s.id.clone(), s.label.clone(), s.label.clone()))
            .collect();
        train::score_predictions(&items)?
    } else {
        train::evaluate(&net, &selected)?
    }
    .with_tag(tag);
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
        path: out_dir.clone(),
        source,
    })?;
    train::write_report(&out_dir, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_cost(
    shape: Option<[u64; 4]>,
    sweep: bool,
    csv: Option<&Path>,
    element_bytes: u64,
) -> CmdResult {
    if shape.is_none() && !sweep {
        return Err(Error::InvalidConfig("pass --shape C,D,H,W and/or --sweep".into()).into());
    }
    let mut csv_out = String::new();
    if let Some([c, d, h, w]) = shape {
        let fs = FeatureShape::new(c, d, h, w);
        let reports = cost::all_block_costs(fs, element_bytes)?;
        let ratio = cost::cost_ratio(fs)?;
        println!("shape C={c} D={d} H={h} W={w}");
        print!("{}", cost::render_table(&reports));
        println!("memory ratio (non-local / RSA): {:.2}", ratio.memory);
        println!("FLOP ratio (non-local / RSA):   {:.2}", ratio.flops);
        csv_out.push_str(cost::CostReport::CSV_HEADER);
        csv_out.push('\n');
        for r in &reports {
            csv_out.push_str(&r.csv_row());
            csv_out.push('\n');
        }
    }
    let mut failures = Vec::new();
    if sweep {
        let rows = cost::sweep();
        if !csv_out.is_empty() {
            csv_out.push('\n');
        }
        csv_out.push_str("C,D,H,W,memory_ratio,flop_ratio,checked,passed\n");
        for r in &rows {
            let s = r.shape;
            csv_out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{}\n",
                s.c, s.d, s.h, s.w, r.ratio.memory, r.ratio.flops, r.checked, r.passed
            ));
            if !r.passed {
                failures.push(format!("{}x{}x{}x{}", s.c, s.d, s.h, s.w));
            }
        }
        let checked = rows.iter().filter(|r| r.checked).count();
        println!(
            "sweep: {} shapes, {checked} checked against memory ratio >= {} and FLOP ratio >= {}, {} failed",
            rows.len(),
            cost::MIN_MEMORY_RATIO,
            cost::MIN_FLOP_RATIO,
            failures.len()
        );
    }
    if let Some(path) = csv {
        write(path, &csv_out)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "bounds violated at {}",
            failures.join(", ")
        )))
    }
}

fn cmd_gradcheck(target: TargetArg, seed: u64) -> CmdResult {
    let targets: Vec<GradTarget> = match target {
        TargetArg::Sa => vec![GradTarget::Sa],
        TargetArg::Rsa => vec![GradTarget::Rsa],
        TargetArg::Ncl => vec![GradTarget::NonLocal],
        TargetArg::Loss => vec![GradTarget::Loss],
        TargetArg::Unet => vec![GradTarget::UNet],
        TargetArg::All => GradTarget::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for t in targets {
        let report = run_target(t, seed)?;
        let pass = report.max_rel_error < SUITE_TOLERANCE;
        println!(
            "{:<5} max relative error {:.3e} over {} coordinates (analytic {:.6e}, numeric {:.6e}) {}",
            t.name(),
            report.max_rel_error,
            report.coordinates,
            report.analytic,
            report.numeric,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(t.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "relative error >= {SUITE_TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}
