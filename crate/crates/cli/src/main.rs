//! `dsg`: train, evaluate and inspect dynamic scene graph models.
//!
//! Every failure prints a single `error: ...` line on stderr and exits with status 1;
//! argument errors print clap's usage text and exit with status 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dsg_core::clustering::pool_graph;
use dsg_core::gradcheck::{run_gradcheck, DEFAULT_SEEDS};
use dsg_core::graph::{dynamic_graph_dot, DynamicGraphJson};
use dsg_core::io::{generate_synthetic, load_dataset, read_annotations, save_dataset, RunConfig, Split, SyntheticSpec, SyntheticTask};
use dsg_core::pipeline::{dataset_prototypes, evaluate_records, evaluate_split, load_model, prepare_records, record_graph, train_dataset};
use dsg_core::training::metrics_csv;

#[derive(Parser)]
#[command(name = "dsg", version, about = "Dynamic scene graphs from patch features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Planted,
    Marker,
    Temporal,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset; writes metrics.csv, best.dsgw, last.dsgw and config.toml.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split; prints metrics as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label clusters with few-shot prototypes and write per-patch segmentation maps.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file; defaults to the one named in the manifest.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Clip id to segment.
        #[arg(long)]
        clip: String,
        /// Output directory for `<clip>.pgm` and `<clip>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a clip's patch graph, or with a checkpoint its pooled scene graph.
    ExportGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: String,
        /// Window size: the clip's last `ws` frames.
        #[arg(long)]
        ws: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Include pooled features in scene-graph JSON.
        #[arg(long)]
        features: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        /// First of five consecutive seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic dataset with planted ground truth.
    Synth {
        /// Generator spec (TOML); task presets apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "planted")]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(epochs) = epochs {
        config.epochs = epochs;
    }
    let dataset = load_dataset(data)?;
    let started = Instant::now();
    let (_, report) = train_dataset(&dataset, &config)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("metrics.csv"), &metrics_csv(&report.history))?;
    write(&out.join("config.toml"), &config.to_toml())?;
    report.best.save(&out.join("best.dsgw"))?;
    report.last.save(&out.join("last.dsgw"))?;
    let best = &report.history[report.best_epoch.saturating_sub(1).min(report.history.len() - 1)];
    println!(
        "trained {} epochs in {:.1}s; best epoch {} (val_acc={:.4} val_f1={:.4}); wrote {}",
        report.history.len(),
        started.elapsed().as_secs_f64(),
        report.best_epoch,
        best.val_acc,
        best.val_f1,
        out.display()
    );
    Ok(())
}

fn eval_cmd(data: &Path, config: Option<&Path>, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let dataset = load_dataset(data)?;
    let model = load_model(&dataset, &config, checkpoint)?;
    let (evaluation, _) = evaluate_split(&model, &dataset, &config, split)?;
    let text = json(&evaluation)?;
    if let Some(out) = out {
        write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn segment_cmd(data: &Path, config: Option<&Path>, checkpoint: &Path, annotations: Option<&Path>, clip: &str, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let mut dataset = load_dataset(data)?;
    if let Some(path) = annotations {
        dataset.annotations = read_annotations(path)?;
    }
    if dataset.annotations.is_empty() {
        bail!("no annotations: pass --annotations or name a file in the manifest");
    }
    let bank = dataset_prototypes(&dataset, &config)?;
    let model = load_model(&dataset, &config, checkpoint)?;
    let record = dataset.find(clip).ok_or_else(|| anyhow!("no clip {clip} in the dataset"))?;
    let prepared = prepare_records(&[record], &dataset, &config, &model)?;
    let (_, outputs) = evaluate_records(&model, &dataset, &[record], &prepared, Some(&bank))?;
    let output = outputs.into_iter().next().ok_or_else(|| anyhow!("no output for clip {clip}"))?;
    let map = output.segmentation.ok_or_else(|| anyhow!("segmentation was not produced"))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(format!("{clip}.pgm")), &map.to_pgm())?;
    let summary = serde_json::json!({
        "clip": clip,
        "cluster_labels": output.cluster_classes,
        "excluded_classes": bank.excluded,
        "grid": map.grid,
        "frames": map.frames,
    });
    write(&out.join(format!("{clip}.json")), &json(&summary)?)?;
    println!("segmented {clip}: {} frames -> {}", map.frames.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn export_cmd(
    data: &Path,
    clip: &str,
    ws: Option<usize>,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    format: Format,
    features: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut config = load_config(config)?;
    if ws.is_some() {
        config.window_size = ws;
    }
    let dataset = load_dataset(data)?;
    let record = dataset.find(clip).ok_or_else(|| anyhow!("no clip {clip} in the dataset"))?;
    let g = record_graph(record, &dataset, &config)?;
    let text = match checkpoint {
        None => match format {
            Format::Json => json(&DynamicGraphJson::from(&g))?,
            Format::Dot => dynamic_graph_dot(&g, None),
        },
        Some(checkpoint) => {
            let model = load_model(&dataset, &config, checkpoint)?;
            let prepared = prepare_records(&[record], &dataset, &config, &model)?;
            let bank = if dataset.annotations.is_empty() { None } else { Some(dataset_prototypes(&dataset, &config)?) };
            let (_, outputs) = evaluate_records(&model, &dataset, &[record], &prepared, bank.as_ref())?;
            let output = outputs.into_iter().next().ok_or_else(|| anyhow!("no output for clip {clip}"))?;
            let base = &prepared[0].inputs.base_features;
            let mut scene = pool_graph(&output.inference.assignment, &g, &model.config.clustering, Some(base))?;
            scene.w_pool = output.inference.scene.w_pool.clone();
            scene.cluster_labels = output.cluster_classes.clone();
            match format {
                Format::Json => json(&scene.to_json(features))?,
                Format::Dot => {
                    let names = (!dataset.manifest.class_names.is_empty()).then_some(dataset.manifest.class_names.as_slice());
                    scene.to_dot(names)
                }
            }
        }
    };
    match out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gradcheck_cmd(seed: Option<u64>) -> Result<()> {
    let seeds: Vec<u64> = match seed {
        Some(s) => (0..DEFAULT_SEEDS.len() as u64).map(|i| s.wrapping_add(i)).collect(),
        None => DEFAULT_SEEDS.to_vec(),
    };
    let started = Instant::now();
    let report = run_gradcheck(&seeds)?;
    for line in report.lines() {
        println!("{line}");
    }
    println!("{} checks, tolerance {:.0e}, {:.2}s", report.checks.len(), report.tolerance, started.elapsed().as_secs_f64());
    if let Some(first) = report.failures().next() {
        bail!("gradcheck failed: {} has relative error {:.3e}", first.name, first.max_rel_error);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth_cmd(
    spec: Option<&Path>,
    task: TaskArg,
    out: &Path,
    seed: Option<u64>,
    train: Option<usize>,
    val: Option<usize>,
    test: Option<usize>,
    window: Option<usize>,
) -> Result<()> {
    let mut spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| anyhow!("{}: {}", path.display(), e.message().replace('\n', " ")))?
        }
        None => match task {
            TaskArg::Planted => SyntheticSpec::default(),
            TaskArg::Marker => SyntheticSpec::with_task(SyntheticTask::marker()),
            TaskArg::Temporal => SyntheticSpec::with_task(SyntheticTask::temporal()),
        },
    };
    if let Some(v) = seed {
        spec.seed = v;
    }
    if let Some(v) = train {
        spec.train = v;
    }
    if let Some(v) = val {
        spec.val = v;
    }
    if let Some(v) = test {
        spec.test = v;
    }
    if let Some(v) = window {
        spec.window = v;
    }
    let dataset = generate_synthetic(&spec)?;
    save_dataset(out, &dataset)?;
    println!("{} -> {}", dataset.summary(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, config, out, seed, epochs } => train_cmd(&data, config.as_deref(), &out, seed, epochs),
        Command::Eval { data, config, checkpoint, split, out } => eval_cmd(&data, config.as_deref(), &checkpoint, split.into(), out.as_deref()),
        Command::Segment { data, config, checkpoint, annotations, clip, out } => {
            segment_cmd(&data, config.as_deref(), &checkpoint, annotations.as_deref(), &clip, &out)
        }
        Command::ExportGraph { data, clip, ws, config, checkpoint, format, features, out } => {
            export_cmd(&data, &clip, ws, config.as_deref(), checkpoint.as_deref(), format, features, out.as_deref())
        }
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
        Command::Synth { spec, task, out, seed, train, val, test, window } => {
            synth_cmd(spec.as_deref(), task, &out, seed, train, val, test, window)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
