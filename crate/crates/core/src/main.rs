use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bmn::checkpoint::Checkpoint;
use bmn::data::{generate_synthetic, Dataset, SyntheticSpec};
use bmn::eval::{self, diagnose_sweep, evaluate, generate_eval_pairs, read_pairs, verify_items, write_pairs};
use bmn::run::{train_run, RunConfig};
use bmn::target::PairLabel;
use bmn::{plot, Result};

#[derive(Parser)]
#[command(name = "bmn", version, about = "Pair verification with a Gaussian-shaped latent metric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic identity-cluster dataset, optionally split with eval pairs.
    Generate(GenerateArgs),
    /// Write a balanced eval pairs file for a dataset.
    Pairs {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a pairs file and write report CSVs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report directory [default: `eval` next to the checkpoint]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decide one pair. Exit 0 matching, 1 non-matching, 2 error.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
    },
    /// Retrain per non-matching target mean and write sweep.csv.
    Diagnose(DiagnoseArgs),
    /// Render SVG charts for the CSVs in a report directory.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma_w: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_b: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Hold out this many identities as train.bmnds / test.bmnds.
    #[arg(long)]
    held_out: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Also write pairs.txt with this many pairs per class (from the test split if any).
    #[arg(long)]
    pairs_per_class: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,5,20,40,90,120")]
    w_grid: Vec<f64>,
    /// Override the per-point iteration budget.
    #[arg(long)]
    iterations: Option<u64>,
    /// Identities held out from the config dataset for evaluation.
    #[arg(long, default_value_t = 10)]
    held_out: usize,
    #[arg(long, default_value_t = 500)]
    pairs_per_class: usize,
    /// Sweep CSV path [default: sweep.csv in the config's output directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_identities: args.identities,
        images_per_identity: args.images,
        input_dim: args.dim,
        sigma_w: args.sigma_w,
        sigma_b: args.sigma_b,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| bmn::Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    let eval_set = match args.held_out {
        Some(n) => {
            let (train, test) = dataset.split_identities(n, args.split_seed)?;
            train.write(&args.out_dir.join("train.bmnds"))?;
            test.write(&args.out_dir.join("test.bmnds"))?;
            println!("train: {} items, test: {} items", train.len(), test.len());
            test
        }
        None => {
            dataset.write(&args.out_dir.join("dataset.bmnds"))?;
            println!("dataset: {} items", dataset.len());
            dataset
        }
    };
    if let Some(per_class) = args.pairs_per_class {
        let pairs = generate_eval_pairs(&eval_set, per_class, args.seed)?;
        write_pairs(&args.out_dir.join("pairs.txt"), &pairs)?;
        println!("pairs: {}", pairs.len());
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, pairs: &Path, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let dataset = Dataset::read(dataset)?;
    let pairs = read_pairs(pairs)?;
    let report = evaluate(&ck.params, &ck.target, &dataset, &pairs)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval"));
    report.write_csvs(&dir)?;
    println!("accuracy: {:.4}", report.accuracy);
    for (far, gar) in &report.gar_at_far {
        println!("GAR@FAR={far:e}: {gar:.4}");
    }
    println!("report: {}", dir.display());
    Ok(())
}

fn verify_cmd(ckpt: &Path, dataset: &Path, a: usize, b: usize) -> Result<PairLabel> {
    let ck = Checkpoint::load(ckpt)?;
    let dataset = Dataset::read(dataset)?;
    let v = verify_items(&ck.params, &ck.target, &dataset, a, b)?;
    let label = if v.label.is_matching() { "matching" } else { "non-matching" };
    println!("label: {label}");
    println!("margin: {}", v.margin);
    let components: Vec<String> = v.aggregated.z_bar.iter().map(f64::to_string).collect();
    println!("z_bar: {}", components.join(" "));
    Ok(v.label)
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let dataset = Dataset::read(&cfg.dataset)?;
    let (train_set, test_set) = dataset.split_identities(args.held_out, cfg.train.seed)?;
    let pairs = generate_eval_pairs(&test_set, args.pairs_per_class, cfg.train.seed)?;
    let mut train = cfg.train.clone();
    if let Some(n) = args.iterations {
        train.max_iterations = n;
    }
    let rows = diagnose_sweep(&train_set, &test_set, &pairs, &cfg.model, &cfg.target, &train, &args.w_grid)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.join("sweep.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| bmn::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(&out, eval::sweep_csv(&rows)).map_err(|e| bmn::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    for r in &rows {
        match (&r.accuracy, &r.error) {
            (Some(acc), _) => println!("w = {}: accuracy {acc:.4}", r.w),
            (_, Some(err)) => println!("w = {}: failed ({err})", r.w),
            _ => {}
        }
    }
    println!("sweep: {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => generate(&args)?,
        Command::Pairs {
            dataset,
            per_class,
            seed,
            out,
        } => {
            let pairs = generate_eval_pairs(&Dataset::read(&dataset)?, per_class, seed)?;
            write_pairs(&out, &pairs)?;
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train_run(&cfg, resume.as_deref())?;
            println!("steps: {}", outcome.summary.steps);
            println!("checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            ckpt,
            pairs,
            dataset,
            out,
        } => eval_cmd(&ckpt, &pairs, &dataset, out.as_deref())?,
        Command::Verify { ckpt, dataset, a, b } => {
            let label = verify_cmd(&ckpt, &dataset, a, b)?;
            return Ok(ExitCode::from(if label.is_matching() { 0 } else { 1 }));
        }
        Command::Diagnose(args) => diagnose(&args)?,
        Command::Plot { report } => {
            for path in plot::render_report(&report)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BMN_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
