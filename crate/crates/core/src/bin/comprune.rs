use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};

use comprune::gates::Granularity;
use comprune::metrics::{count_flops, count_params, CompressionReport};
use comprune::pipeline::{self, ExperimentConfig};
use comprune::spec::shortcuts::{insert_shortcuts_with_report, MismatchPolicy};
use comprune::spec::{catalog, validate, ModelSpec};
use comprune::Error;

#[derive(Parser)]
#[command(name = "comprune", version, about = "Online pruning with learnable gates at filter, layer, branch and block granularity")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a spec (catalog name or JSON file) and print its shape table.
    ValidateSpec {
        spec: String,
        /// Also insert shortcuts for these structural granularities.
        #[arg(long, value_parser = parse_granularities)]
        granularities: Option<BTreeSet<Granularity>>,
        #[arg(long, value_enum, default_value = "skip")]
        policy: Policy,
    },
    /// Sparsity-train a gated network and save `gated.ckpt`.
    Train(RunArgs),
    /// Full protocol: train, threshold search, binarize, cut, fine-tune, report.
    Prune(RunArgs),
    /// Print a stored report as a table, CSV row or JSON.
    Report {
        /// Run directory or report.json.
        path: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Run `prune` once per granularity subset and seed, in parallel processes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Semicolon-separated granularity sets, or "all" for the 15 combinations.
        #[arg(long, default_value = "all")]
        subsets: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of filter,layer,branch,block.
    #[arg(long, value_parser = parse_granularities)]
    granularities: Option<BTreeSet<Granularity>>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    keep_scaffold: Option<bool>,
    #[arg(long)]
    subset_per_class: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Skip,
    Adapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn parse_granularities(s: &str) -> Result<BTreeSet<Granularity>, String> {
    Granularity::parse_set(s).map_err(|e| e.to_string())
}

impl RunArgs {
    fn config(&self) -> comprune::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(g) = &self.granularities {
            cfg.granularities = g.clone();
        }
        if let Some(k) = self.keep_scaffold {
            cfg.keep_scaffold = k;
        }
        if let Some(n) = self.subset_per_class {
            cfg.dataset.subset_per_class = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_spec(name: &str) -> comprune::Result<ModelSpec> {
    if Path::new(name).exists() {
        ModelSpec::load(name)
    } else {
        catalog::builtin(name)
    }
}

fn validate_spec(name: &str, granularities: Option<BTreeSet<Granularity>>, policy: Policy) -> comprune::Result<()> {
    let mut spec = load_spec(name)?;
    let policy = match policy {
        Policy::Skip => MismatchPolicy::Skip,
        Policy::Adapt => MismatchPolicy::Adapt,
    };
    for g in granularities.unwrap_or_default().into_iter().filter(|g| g.is_structural()) {
        let (next, report) = insert_shortcuts_with_report(&spec, g, policy)?;
        println!(
            "{g} shortcuts: {} inserted, {} reused, {} skipped, {} adapter nodes",
            report.inserted.len(),
            report.reused.len(),
            report.skipped.len(),
            report.adapters.len()
        );
        for s in &report.skipped {
            println!("  skipped {s}");
        }
        spec = next;
    }
    let table = validate(&spec)?;
    print!("{}", table.render(&spec));
    println!("params {}  flops {}", count_params(&spec)?, count_flops(&spec)?);
    Ok(())
}

fn sweep(run: &RunArgs, subsets: &str, seeds: &[u64], jobs: usize) -> comprune::Result<()> {
    let cfg = run.config()?;
    let out = cfg.out_dir.clone().ok_or_else(|| Error::Config("sweep needs --out or out_dir".into()))?;
    fs::create_dir_all(&out)?;
    let sets = if subsets == "all" {
        Granularity::all_subsets()
    } else {
        subsets.split(';').map(Granularity::parse_set).collect::<comprune::Result<Vec<_>>>()?
    };
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let mut runs = Vec::new();
    for set in &sets {
        for &seed in &seeds {
            let label = Granularity::join(set).replace(',', "+");
            runs.push((set.clone(), seed, out.join(format!("{label}_seed{seed}"))));
        }
    }
    let exe = std::env::current_exe()?;
    let mut failures = Vec::new();
    for batch in runs.chunks(jobs.max(1)) {
        let children: Vec<_> = batch
            .iter()
            .map(|(set, seed, dir)| {
                let mut cmd = Command::new(&exe);
                cmd.arg("prune").arg("--config").arg(&run.config).arg("--seed").arg(seed.to_string()).arg("--out").arg(dir);
                cmd.arg("--granularities").arg(Granularity::join(set));
                if let Some(k) = run.keep_scaffold {
                    cmd.arg("--keep-scaffold").arg(k.to_string());
                }
                if let Some(n) = run.subset_per_class {
                    cmd.arg("--subset-per-class").arg(n.to_string());
                }
                cmd.spawn().map(|c| (dir.clone(), c))
            })
            .collect::<std::io::Result<_>>()?;
        for (dir, mut child) in children {
            if !child.wait()?.success() {
                failures.push(dir.display().to_string());
            }
        }
    }
    let mut csv = format!("{},seed\n", CompressionReport::CSV_HEADER);
    for (_, seed, dir) in &runs {
        if let Ok(report) = pipeline::load_report(dir) {
            csv.push_str(&format!("{},{seed}\n", report.csv_row()));
        }
    }
    fs::write(out.join("sweep.csv"), csv)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} of {} runs failed: {}", failures.len(), runs.len(), failures.join(", "))))
    }
}

fn run(cli: Cli) -> comprune::Result<()> {
    match cli.command {
        Cmd::ValidateSpec { spec, granularities, policy } => validate_spec(&spec, granularities, policy),
        Cmd::Train(args) => {
            let ckpt = pipeline::train_gated(&args.config()?)?;
            if let Some(last) = ckpt.history.last() {
                println!("epoch {}: loss {:.4}, eval accuracy {}", last.epoch, last.loss, last.eval_accuracy.map_or("-".into(), |a| format!("{a:.4}")));
            }
            Ok(())
        }
        Cmd::Prune(args) => {
            let outcome = pipeline::prune_pipeline(&args.config()?)?;
            print!("{}", outcome.report.table());
            Ok(())
        }
        Cmd::Report { path, format } => {
            let report = pipeline::load_report(&path)?;
            match format {
                Format::Table => print!("{}", report.table()),
                Format::Csv => println!("{}\n{}", CompressionReport::CSV_HEADER, report.csv_row()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(())
        }
        Cmd::Sweep { run, subsets, seeds, jobs } => sweep(&run, &subsets, &seeds, jobs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
