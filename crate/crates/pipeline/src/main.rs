use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cosmosseg::config::PipelineConfig;
use cosmosseg::dataset::write_phantom_dataset;
use cosmosseg::workflow::{parse_stages, resolve_work_root, run_pipeline, Stage};
use cosmosseg::PipelineError;
use cosmosseg_core::dataio::{load_annotations, load_labels, SparseAnnotationSet};
use cosmosseg_core::labelcraft::interpolate_labels;
use cosmosseg_core::metrics::{aggregate, evaluate_case, render_table, write_scores_csv, EvalScope};
use cosmosseg_core::phantom::PhantomConfig;
use cosmosseg_core::{Shape3, SideSplitPlane};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cosmosseg", version, about = "Carotid vessel-wall segmentation from sparse slice annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a 4-fold catalog.
    Phantom {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Phantom generator settings (TOML); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Volume extent as Z,Y,X, overriding the config.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<Shape3>,
    },
    /// Run pipeline stages for a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stages, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
        /// Work root; defaults to the config's work_dir, then COSMOSSEG_WORKDIR.
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score predicted label files against truth.
    Evaluate {
        /// Directory of predicted `<case>.nii.gz` label maps.
        #[arg(long)]
        pred: PathBuf,
        /// Dense `<case>.nii.gz` labels (full) or `<case>.json` annotations (annotated).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = Scope::Full)]
        scope: Scope,
        #[arg(long, default_value = "prediction")]
        model: String,
        /// Scores CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Annotated,
    Full,
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [z, y, x] if z * y * x > 0 => Ok(Shape3::new(z, y, x)),
        _ => Err("expected three positive extents Z,Y,X".into()),
    }
}

fn label_files(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")) {
            out.push((id.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate(pred: &Path, truth: &Path, scope: Scope, model: &str, out: Option<&Path>) -> anyhow::Result<()> {
    let mut scores = Vec::new();
    for (id, path) in label_files(pred)? {
        let (p, _) = load_labels(&path)?;
        let (t, sc) = match scope {
            Scope::Full => {
                let tp = [truth.join(format!("{id}.nii.gz")), truth.join(format!("{id}.nii"))]
                    .into_iter()
                    .find(|p| p.exists())
                    .with_context(|| format!("no truth labels for case {id} in {}", truth.display()))?;
                (load_labels(&tp)?.0, EvalScope::Full)
            }
            Scope::Annotated => {
                let ann: SparseAnnotationSet = load_annotations(truth.join(format!("{id}.json")))?;
                let plane = SideSplitPlane::midline(p.shape().x)?;
                (interpolate_labels(&ann, p.shape(), plane)?, EvalScope::Annotated(plane))
            }
        };
        scores.push(evaluate_case(&id, &p, &t, sc)?);
    }
    anyhow::ensure!(!scores.is_empty(), "no label files in {}", pred.display());
    print!("{}", render_table(&[aggregate(model, &scores)]));
    if let Some(out) = out {
        let rows: Vec<_> = scores.into_iter().map(|s| (model.to_string(), s)).collect();
        write_scores_csv(out, &rows)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom { n, seed, out, config, shape } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<PhantomConfig>(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
                }
                None => PhantomConfig::default(),
            };
            if let Some(s) = shape {
                cfg.shape = s;
            }
            let catalog = write_phantom_dataset(&out, n, seed, &cfg, 4)?;
            println!("wrote {} cases to {}", catalog.len(), out.display());
        }
        Command::Run { config, stages, work, quiet } => {
            let cfg = PipelineConfig::load(&config)?;
            let stages: Vec<Stage> = parse_stages(&stages)?;
            let root = resolve_work_root(work, &cfg)?;
            let mut log = |m: &str| {
                if !quiet {
                    eprintln!("{m}");
                }
            };
            let summary = run_pipeline(&cfg, &root, &stages, &mut log)?;
            println!("{}", summary.dir.display());
        }
        Command::Evaluate {
            pred,
            truth,
            scope,
            model,
            out,
        } => evaluate(&pred, &truth, scope, &model, out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
