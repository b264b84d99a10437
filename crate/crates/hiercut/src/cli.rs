use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use hiercut_core::synth::AppearanceSpec;
use hiercut_core::{ClassTree, LabelSet, LossKind};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_dataset, load_dataset, GenerateRequest, SplitName};
use crate::error::{write, Error, Result};
use crate::evaluate::{evaluate_checkpoint, report_csv};
use crate::experiment::{arm_mean, compared_arms, run_experiment, ExperimentConfig, Kind};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::hierarchy_io::{bundled_tree, load_hierarchy};
use crate::schedule::{load_schedule, run_schedule, CHECKPOINT_FILE, METRICS_FILE};

#[derive(Debug, Parser)]
#[command(name = "hiercut", version, about = "Train one segmentation network across datasets labelled at different cuts of a class tree")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset labelled at a cut.
    GenData {
        /// Hierarchy file; the bundled nucleus tree if omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Comma-separated cut member names.
        #[arg(long, value_delimiter = ',', required = true)]
        cut: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset name recorded in the manifest; the output directory name by default.
        #[arg(long)]
        name: Option<String>,
        /// Colour offset "r,g,b" added to every pixel.
        #[arg(long, value_delimiter = ',', num_args = 3, allow_negative_numbers = true)]
        shift: Option<Vec<f64>>,
    },
    /// Run a training schedule.
    Train {
        #[arg(long)]
        schedule: PathBuf,
        /// Continue from this checkpoint instead of a fresh network.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file or dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// ce, mce, ft, mft or all.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-3)]
        net_tolerance: f64,
        /// Hierarchy file; the bundled nucleus tree if omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Run the pretrain/finetune or the generalization comparison.
    Experiment {
        #[arg(long)]
        kind: Kind,
        /// Experiment config; the bundled desk-scale config if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn tree_from(path: &Option<PathBuf>) -> Result<ClassTree> {
    match path {
        Some(p) => load_hierarchy(p),
        None => Ok(bundled_tree()),
    }
}

fn fmt_pq(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn gen_data(
    tree: &Option<PathBuf>,
    cut: &[String],
    seed: u64,
    images: usize,
    size: usize,
    out: &Path,
    name: &Option<String>,
    shift: &Option<Vec<f64>>,
) -> Result<String> {
    let tree = tree_from(tree)?;
    let cut = LabelSet::new(&tree, cut).map_err(|e| Error::data(format!("invalid --cut: {e}")))?;
    if size == 0 || size % 4 != 0 {
        return Err(Error::data(format!("--size {size} must be a positive multiple of 4")));
    }
    let mut look = AppearanceSpec::for_tree(&tree);
    if let Some(s) = shift {
        look = look.with_shift([s[0], s[1], s[2]]);
    }
    let default_name = out.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    let name = name.clone().unwrap_or(default_name);
    let req = GenerateRequest { name: &name, tree: &tree, cut: &cut, appearance: &look, seed, images, patch_size: size };
    let m = generate_dataset(&req, out)?;
    Ok(format!(
        "wrote {} images ({}x{}) for cut [{}] to {} (appearance {})",
        m.image_count,
        size,
        size,
        m.cut.join(", "),
        out.display(),
        m.appearance_hash
    ))
}

fn train(schedule: &Path, resume: &Option<PathBuf>, out: &Path) -> Result<String> {
    let config = load_schedule(schedule)?;
    let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = schedule.parent().unwrap_or(Path::new("."));
    let outcome = run_schedule(&config, base, resume, out)?;
    let mut lines = vec![format!(
        "trained {} episodes, {} steps; wrote {} and {}",
        config.episodes.len(),
        outcome.checkpoint.header.step,
        out.join(CHECKPOINT_FILE).display(),
        out.join(METRICS_FILE).display()
    )];
    for e in &outcome.evaluations {
        lines.push(format!("  {} test mean PQ {}", e.dataset, fmt_pq(e.mean_pq())));
    }
    Ok(lines.join("\n"))
}

fn eval(checkpoint: &Path, data: &Path, split: SplitName, report: &Path) -> Result<String> {
    let dataset = load_dataset(data)?;
    let ck = Checkpoint::load(checkpoint)?;
    let eval = evaluate_checkpoint(&ck, &dataset, split)?;
    write(report, report_csv(&eval).as_bytes())?;
    Ok(format!("{} {:?}: mean PQ {} over {} images; report {}", eval.dataset, split, fmt_pq(eval.mean_pq()), eval.images.len(), report.display()))
}

fn parse_losses(s: &str) -> Result<(Vec<LossKind>, bool)> {
    let all = vec![LossKind::Ce, LossKind::Mce, LossKind::Ft, LossKind::Mft];
    Ok(match s {
        "all" => (all, true),
        "ce" => (vec![LossKind::Ce], false),
        "mce" => (vec![LossKind::Mce], false),
        "ft" => (vec![LossKind::Ft], false),
        "mft" => (vec![LossKind::Mft], false),
        _ => return Err(Error::Usage(format!("unknown --loss {s:?} (expected ce, mce, ft, mft or all)"))),
    })
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(h: f64, loss: &str, batches: usize, seed: u64, tolerance: f64, net_tolerance: f64, tree: &Option<PathBuf>) -> Result<String> {
    let (losses, network) = parse_losses(loss)?;
    let tree = tree_from(tree)?;
    let opts = GradcheckOptions {
        h,
        batches,
        losses,
        loss_tolerance: tolerance,
        network_tolerance: net_tolerance,
        network_params: network.then_some(50),
        seed,
        ..GradcheckOptions::default()
    };
    let start = Instant::now();
    let report = run_gradcheck(&tree, &opts)?;
    let mut lines = Vec::new();
    for (kind, err) in &report.losses {
        lines.push(format!("{:<8} max relative error {err:.3e} (tolerance {tolerance:.0e})", kind.name()));
    }
    if let Some(err) = report.network {
        lines.push(format!("{:<8} max relative error {err:.3e} (tolerance {net_tolerance:.0e})", "network"));
    }
    lines.push(format!("h = {h:e}, {batches} batches, {:.1}s", start.elapsed().as_secs_f64()));
    let text = lines.join("\n");
    if report.passed(&opts) {
        Ok(text)
    } else {
        Err(Error::Runtime(format!("{text}\ngradient check exceeded tolerance")))
    }
}

fn experiment(kind: Kind, config: &Option<PathBuf>, seeds: u64, out: &Path) -> Result<String> {
    let (config, tree) = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::desk_default(), bundled_tree()),
    };
    let rows = run_experiment(kind, &config, &tree, seeds, out).map_err(|e| match e {
        Error::Usage(m) => Error::Usage(m),
        other => Error::Runtime(other.to_string()),
    })?;
    let (challenger, baseline, dataset) = compared_arms(kind);
    let mut lines = vec![format!("{:<10} {:>4} {:<14} {:>8}", "arm", "seed", "test_dataset", "mean_pq")];
    for r in &rows {
        lines.push(format!("{:<10} {:>4} {:<14} {:>8}", r.arm, r.seed, r.test_dataset, fmt_pq(r.mean_pq)));
    }
    let (a, b) = (arm_mean(&rows, challenger, dataset), arm_mean(&rows, baseline, dataset));
    let verdict = match (a, b) {
        (Some(a), Some(b)) if a >= b => "holds",
        (Some(_), Some(_)) => "does not hold",
        _ => "undetermined",
    };
    lines.push(format!("mean PQ on {dataset}: {challenger} {} vs {baseline} {}; direction {verdict}", fmt_pq(a), fmt_pq(b)));
    Ok(lines.join("\n"))
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData { tree, cut, seed, images, size, out, name, shift } => gen_data(tree, cut, *seed, *images, *size, out, name, shift),
        Command::Train { schedule, resume, out } => train(schedule, resume, out),
        Command::Eval { checkpoint, data, split, report } => eval(checkpoint, data, *split, report),
        Command::Gradcheck { h, loss, batches, seed, tolerance, net_tolerance, tree } => {
            gradcheck(*h, loss, *batches, *seed, *tolerance, *net_tolerance, tree)
        }
        Command::Experiment { kind, config, seeds, out } => experiment(*kind, config, *seeds, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
