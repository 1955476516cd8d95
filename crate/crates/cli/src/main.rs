use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use robkmr::config::load_config;
use robkmr::inference::{composite_score_test, overall_score_test};
use robkmr::kernels::GramMatrix;
use robkmr::loss::LossKind;
use robkmr::mixed_model::{assemble_components, reml_fit, ComponentSet};
use robkmr::robust_center::kirwls_weights;
use robkmr::scan::{load_bundle, run_scan, save_bundle, toy_bundle, BundlePaths, RunConfig, TripletStatus};
use robkmr::sim::{run_study, write_study, StudyConfig};

mod tsv;

/// Environment variable that overrides the worker thread count.
const THREADS_ENV: &str = "ROBKMR_THREADS";

#[derive(Parser)]
#[command(name = "robkmr", version, about = "Robust kernel machine regression")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads; overrides ROBKMR_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestKindArg {
    Overall,
    Composite,
}

#[derive(Subcommand)]
enum Command {
    /// Robust-center a Gram matrix.
    Center {
        /// Gram matrix TSV (numeric, tab-delimited, no header).
        #[arg(long)]
        gram: PathBuf,
        /// Run config; its [loss] and [kirwls] sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Loss kind, overriding the config.
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the kernel mixed model by ReML.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance-component score test.
    Test {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "overall")]
        kind: TestKindArg,
        /// Scale the composite statistic by the null residual variance as well.
        #[arg(long)]
        legacy_prefactor: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power and ROC simulation study.
    Simulate {
        /// Study config (JSON or TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replicates per setting, overriding the config.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Triplet scan over three omics views.
    Scan {
        /// Three view TSVs (features x samples), comma separated.
        #[arg(long, value_delimiter = ',')]
        views: Vec<PathBuf>,
        /// Three feature-to-gene maps, comma separated.
        #[arg(long, value_delimiter = ',')]
        genemap: Vec<PathBuf>,
        #[arg(long)]
        pheno: PathBuf,
        #[arg(long)]
        covar: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted scan in the same output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write a small random bundle for trying out `scan`.
    ToyBundle {
        #[arg(long, default_value_t = 40)]
        n: usize,
        /// Genes per view, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [5, 4, 3])]
        genes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        features_per_gene: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Outcome, one value per line.
    #[arg(long)]
    y: PathBuf,
    /// Fixed-effect design (n x q TSV, used as given). Defaults to an intercept.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Component Gram matrices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    kernels: Vec<PathBuf>,
    /// Expand three view kernels into the seven main and product components.
    #[arg(long)]
    assemble: bool,
    /// Run config; its [reml] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn run_config(path: Option<&Path>) -> AnyResult<RunConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    })
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> AnyResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

struct Model {
    y: DVector<f64>,
    x: DMatrix<f64>,
    comps: ComponentSet,
    cfg: RunConfig,
}

fn load_model(args: &ModelArgs) -> AnyResult<Model> {
    let y = tsv::read_vector(&args.y)?;
    let x = match &args.x {
        Some(p) => tsv::read_matrix(p)?,
        None => DMatrix::from_element(y.len(), 1, 1.0),
    };
    let kernels = args.kernels.iter().map(|p| Ok(GramMatrix::new(tsv::read_matrix(p)?)?)).collect::<AnyResult<Vec<_>>>()?;
    let comps = if args.assemble {
        let [k1, k2, k3] = kernels.as_slice() else {
            return Err("--assemble needs exactly three kernels".into());
        };
        assemble_components(k1, k2, k3)?
    } else {
        ComponentSet::from_kernels(kernels)?
    };
    Ok(Model { y, x, comps, cfg: run_config(args.config.as_deref())? })
}

fn center(gram: &Path, config: Option<&Path>, loss: Option<LossKind>, out: &Path) -> AnyResult<()> {
    let mut cfg = run_config(config)?;
    if let Some(kind) = loss {
        cfg.loss = robkmr::pipeline::LossConfig::of_kind(kind);
    }
    let k = GramMatrix::new(tsv::read_matrix(gram)?)?;
    let res = kirwls_weights(&k, &cfg.loss.build()?, &cfg.kirwls)?;
    std::fs::create_dir_all(out)?;
    tsv::write_vector(&out.join("weights.tsv"), &res.weights)?;
    tsv::write_matrix(&out.join("centered.tsv"), res.centered.matrix())?;
    let report = json!({
        "iterations": res.iterations,
        "converged": res.converged,
        "threshold": res.threshold,
        "objective_trace": res.objective_trace,
        "loss": res.loss,
    });
    emit(&report, Some(&out.join("report.json")))
}

fn fit(args: &ModelArgs, out: Option<&Path>) -> AnyResult<()> {
    let m = load_model(args)?;
    let f = reml_fit(&m.y, &m.x, &m.comps, &[], &m.cfg.reml)?;
    let report = json!({
        "beta": f.beta.as_slice(),
        "sigma2": f.sigma2,
        "tau": f.tau,
        "labels": f.labels,
        "reml_loglik": f.reml_loglik,
        "converged": f.converged,
        "iterations": f.n_iter,
        "score": f.score.as_slice(),
        "start_index": f.start_index,
    });
    emit(&report, out)
}

fn test(args: &ModelArgs, kind: TestKindArg, legacy_prefactor: bool, out: Option<&Path>) -> AnyResult<()> {
    let m = load_model(args)?;
    let result = match kind {
        TestKindArg::Overall => overall_score_test(&m.y, &m.x, &m.comps)?,
        TestKindArg::Composite => {
            if m.comps.len() < 2 {
                return Err("the composite test needs at least two components".into());
            }
            let null = m.comps.without(m.comps.len() - 1)?;
            let null_fit = reml_fit(&m.y, &m.x, &null, &[], &m.cfg.reml)?;
            let mut opts = m.cfg.test;
            opts.legacy_prefactor |= legacy_prefactor;
            composite_score_test(&m.y, &m.x, &m.comps, &null_fit, &opts)?
        }
    };
    emit(&serde_json::to_value(&result)?, out)
}

fn simulate(config: Option<&Path>, reps: Option<usize>, out: &Path) -> AnyResult<()> {
    let mut study: StudyConfig = match config {
        Some(p) => load_config(p)?,
        None => StudyConfig::default(),
    };
    if let Some(r) = reps {
        study.sim.reps = r;
        if let Some(roc) = study.roc.as_mut() {
            roc.reps = r;
        }
    }
    let result = run_study(&study)?;
    let manifest = write_study(&study, &result, out)?;
    for row in &result.power {
        println!("alphas {:?}: rejection rate {:.4} (se {:.4}, {} reps)", row.alphas, row.rejection_rate, row.standard_error, row.reps);
    }
    if let Some(roc) = &result.roc {
        println!("ROC AUC {:.4} ({} positives, {} negatives)", roc.auc, roc.positives, roc.negatives);
    }
    println!("wrote {} files to {}", manifest.files.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn scan(
    views: &[PathBuf],
    genemap: &[PathBuf],
    pheno: &Path,
    covar: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    resume: bool,
) -> AnyResult<bool> {
    if views.len() != 3 || genemap.len() != 3 {
        return Err("--views and --genemap each take exactly three comma-separated paths".into());
    }
    let cfg = run_config(config)?;
    let paths = BundlePaths {
        views: [views[0].clone(), views[1].clone(), views[2].clone()],
        gene_maps: [genemap[0].clone(), genemap[1].clone(), genemap[2].clone()],
        pheno: pheno.to_path_buf(),
        covar: covar.map(Path::to_path_buf),
    };
    let bundle = load_bundle(&paths, cfg.scan.view_kinds, cfg.scan.na_policy)?;
    let manifest = run_scan(&bundle, &cfg, out, resume)?;
    println!(
        "{} triplets over {} samples, {} failed; results in {}",
        manifest.records,
        manifest.samples,
        manifest.failures,
        out.display()
    );
    Ok(manifest.failures == 0)
}

fn thread_count(flag: Option<usize>) -> AnyResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?)),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> AnyResult<ExitCode> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err("thread count must be positive".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Center { gram, config, loss, out } => center(&gram, config.as_deref(), loss, &out)?,
        Command::Fit { model, out } => fit(&model, out.as_deref())?,
        Command::Test { model, kind, legacy_prefactor, out } => test(&model, kind, legacy_prefactor, out.as_deref())?,
        Command::Simulate { config, reps, out } => simulate(config.as_deref(), reps, &out)?,
        Command::Scan { views, genemap, pheno, covar, config, out, resume } => {
            let complete = scan(&views, &genemap, &pheno, covar.as_deref(), config.as_deref(), &out, resume)?;
            if !complete {
                log::warn!("some triplets failed; see the status column ({} marks success)", TripletStatus::Ok.as_str());
                return Ok(ExitCode::from(2));
            }
        }
        Command::ToyBundle { n, genes, features_per_gene, seed, out } => {
            let [g1, g2, g3] = genes[..] else {
                return Err("--genes takes exactly three counts".into());
            };
            let bundle = toy_bundle(n, [g1, g2, g3], features_per_gene, seed)?;
            save_bundle(&bundle, &out)?;
            println!("wrote a {n}-sample bundle with {genes:?} genes to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // usage errors are fatal (1); exit code 2 is reserved for partial scans
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
