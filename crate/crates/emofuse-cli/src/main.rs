//! Command-line driver: dataset preparation, single runs, experiment
//! matrices, and report regeneration.
//!
//! Exit codes: 0 success, 1 cell or validation failure, 2 usage error.
//! `EMOFUSE_RUNS_DIR` overrides the default output root (`runs/`).

mod planfile;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use emofuse::data::{
    load_dataset, load_label_map, make_synthetic, save_dataset, save_label_map, split_indices,
    SynthSpec,
};
use emofuse::experiments::{run_matrix, ResultRecord};
use emofuse::heads::TaskKind;
use emofuse::report::{parse_csv, render_csv, render_markdown, table_from_records};

use planfile::{apply_overrides, MatrixFile};

#[derive(Parser)]
#[command(name = "emofuse", version, about = "Emotion-aware health mention classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora or split manifests for an input dataset.
    Prepare(PrepareArgs),
    /// Run a single (plan, seed) cell from a plan file.
    Train(TrainArgs),
    /// Run every cell of an experiment matrix and emit a report.
    Experiment(ExperimentArgs),
    /// Regenerate report tables from stored result.json files.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate the synthetic paired corpora; accepts key=value settings:
    /// n, rho, seed, data_seed, labels, themes, theme_noise, emotion_words.
    #[arg(long)]
    synthetic: bool,
    /// key=value settings for --synthetic.
    #[arg(trailing_var_arg = true)]
    settings: Vec<String>,
    /// Validate an existing JSONL dataset and write its split manifest.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Task kind of --input: single | multi.
    #[arg(long)]
    task: Option<String>,
    /// Optional fixed label map (JSON object name → id) for --input.
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// Seed of the 80/10/10 split manifest.
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    /// Output directory.
    #[arg(long, default_value = "prepared")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment plan file (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Which plan row to run (defaults to the first).
    #[arg(long)]
    plan_id: Option<String>,
    /// Seed for the run (defaults to the plan's first seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path overrides into the plan file, e.g.
    /// plans.0.train.lr=1e-4.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root for checkpoints and result.json (omit to skip writing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment matrix file (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Replace every plan's seed list, e.g. --seeds 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Parallel cell workers (0 = default pool).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Dotted-path overrides into the plan file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (default: $EMOFUSE_RUNS_DIR or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Runs directory containing <plan-id>/<seed>/result.json trees.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Rebuild the markdown table from a previously emitted CSV instead.
    #[arg(long, conflicts_with = "runs")]
    from_csv: Option<PathBuf>,
    /// Baseline row id for significance stars.
    #[arg(long)]
    baseline: Option<String>,
    /// Output format: md | csv.
    #[arg(long, default_value = "md")]
    format: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn runs_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("EMOFUSE_RUNS_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_synth_settings(settings: &[String]) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for setting in settings {
        let (key, value) = setting
            .split_once('=')
            .with_context(|| format!("setting '{setting}' is not key=value"))?;
        match key {
            "n" => spec.n = value.parse().context("n")?,
            "rho" | "correlation" => spec.correlation = value.parse().context("rho")?,
            "seed" => spec.seed = value.parse().context("seed")?,
            "data_seed" => spec.data_seed = Some(value.parse().context("data_seed")?),
            "labels" => spec.num_hmc_labels = value.parse().context("labels")?,
            "themes" => spec.theme_words_per_label = value.parse().context("themes")?,
            "theme_noise" => spec.theme_noise = value.parse().context("theme_noise")?,
            "emotion_words" => {
                spec.emotion_words_per_label = value.parse().context("emotion_words")?
            }
            other => bail!("unknown synthetic setting '{other}'"),
        }
    }
    Ok(spec)
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if args.synthetic {
        let spec = parse_synth_settings(&args.settings)?;
        let pair = make_synthetic(&spec)?;
        let hmc_path = args.out.join("synthetic-hmc.jsonl");
        let emotion_path = args.out.join("synthetic-emotion.jsonl");
        save_dataset(&pair.hmc, &hmc_path)?;
        save_dataset(&pair.emotion, &emotion_path)?;
        save_label_map(&pair.hmc, &args.out.join("synthetic-hmc.labels.json"))?;
        save_label_map(
            &pair.emotion,
            &args.out.join("synthetic-emotion.labels.json"),
        )?;
        let manifest = serde_json::json!({
            "spec": spec,
            "files": {
                "hmc": "synthetic-hmc.jsonl",
                "emotion": "synthetic-emotion.jsonl",
            },
            "examples": { "hmc": pair.hmc.len(), "emotion": pair.emotion.len() },
        });
        std::fs::write(
            args.out.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        println!(
            "wrote {} and {} ({} examples each)",
            hmc_path.display(),
            emotion_path.display(),
            pair.hmc.len()
        );
        return Ok(());
    }

    let input = args
        .input
        .context("prepare needs either --synthetic or --input")?;
    let task = match args.task.as_deref() {
        Some("single") => TaskKind::Single,
        Some("multi") => TaskKind::Multi,
        Some(other) => bail!("unknown task '{other}' (expected single or multi)"),
        None => bail!("--input requires --task"),
    };
    let label_map = args
        .label_map
        .as_deref()
        .map(load_label_map)
        .transpose()?;
    let ds = load_dataset(&input, task, label_map.as_ref())?;
    let manifest = split_indices(ds.len(), args.split_seed)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let manifest_path = args.out.join(format!("{stem}-split.json"));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    save_label_map(&ds, &args.out.join(format!("{stem}.labels.json")))?;
    println!(
        "validated {} examples / {} labels; split manifest at {}",
        ds.len(),
        ds.num_labels(),
        manifest_path.display()
    );
    Ok(())
}

fn load_matrix(path: &Path, overrides: &[String]) -> Result<MatrixFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading plan file {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    apply_overrides(&mut value, overrides)?;
    let file: MatrixFile = serde_json::from_value(value).context("plan file schema")?;
    Ok(file)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let matrix = load_matrix(&args.plan, &args.overrides)?;
    let base_dir = args.plan.parent().unwrap_or(Path::new("."));
    let plan = match &args.plan_id {
        Some(id) => matrix
            .plans
            .iter()
            .find(|p| &p.id == id)
            .with_context(|| format!("plan '{id}' not found"))?,
        None => matrix.plans.first().context("plan file has no plans")?,
    };
    let bundle = matrix.resolve_bundle(plan, base_dir)?;
    let seed = args
        .seed
        .or_else(|| plan.seeds.first().copied())
        .context("no seed given and the plan lists none")?;
    let out = args.out.map(|p| runs_root(Some(p)));
    let run = emofuse::experiments::run_cell(plan, &bundle, seed, out.as_deref())?;
    println!(
        "plan {} seed {}: macro-F1 {:.4} (config {})",
        plan.id, seed, run.macro_f1, run.config_hash
    );
    for class in &run.per_class {
        println!(
            "  {:<20} P {:.4}  R {:.4}  F1 {:.4}",
            class.label, class.precision, class.recall, class.f1
        );
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<ExitCode> {
    let mut matrix = load_matrix(&args.plan, &args.overrides)?;
    if !args.seeds.is_empty() {
        for plan in &mut matrix.plans {
            plan.seeds = args.seeds.clone();
        }
    }
    if matrix.plans.iter().any(|p| p.seeds.len() < 2) {
        eprintln!("warning: fewer than two seeds; significance testing is skipped");
    }
    let base_dir = args.plan.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_root = runs_root(args.out);
    std::fs::create_dir_all(&out_root)?;

    let cells = matrix.build_cells(&base_dir)?;
    let report = run_matrix(
        &cells,
        matrix.baseline.as_deref(),
        Some(&out_root),
        args.jobs,
    )?;

    for row in &report.rows {
        for cell in &row.cells {
            match (&cell.macro_f1, &cell.error) {
                (Some(f1), _) => println!("{} seed {}: macro-F1 {f1:.4}", row.plan_id, cell.seed),
                (None, Some(e)) => println!("{} seed {}: FAILED ({e})", row.plan_id, cell.seed),
                _ => {}
            }
        }
    }

    // The canonical report regenerates from the result.json files alone.
    let records = collect_records(&out_root)?;
    if !records.is_empty() {
        let table = table_from_records(&records, matrix.baseline.as_deref())?;
        let markdown = render_markdown(&table);
        std::fs::write(out_root.join("report.md"), &markdown)?;
        std::fs::write(out_root.join("report.csv"), render_csv(&table))?;
        println!("\n{markdown}");
    }

    if report.all_succeeded() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("one or more cells failed; partial report retained");
        Ok(ExitCode::from(1))
    }
}

fn collect_records(root: &Path) -> Result<Vec<ResultRecord>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    if root.is_dir() {
        for plan_entry in std::fs::read_dir(root)? {
            let plan_dir = plan_entry?.path();
            if !plan_dir.is_dir() {
                continue;
            }
            for seed_entry in std::fs::read_dir(&plan_dir)? {
                let candidate = seed_entry?.path().join("result.json");
                if candidate.is_file() {
                    paths.push(candidate);
                }
            }
        }
    }
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path)?;
        let record: ResultRecord = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        records.push(record);
    }
    Ok(records)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let table = if let Some(csv_path) = &args.from_csv {
        parse_csv(&std::fs::read_to_string(csv_path)?)?
    } else {
        let root = runs_root(args.runs);
        let records = collect_records(&root)?;
        if records.is_empty() {
            bail!("no result.json files under {}", root.display());
        }
        if records
            .iter()
            .map(|r| (&r.plan_id, r.seed))
            .collect::<std::collections::HashSet<_>>()
            .len()
            < 2
        {
            eprintln!("warning: fewer than two cells; significance needs at least two seeds");
        }
        table_from_records(&records, args.baseline.as_deref())?
    };
    let rendered = match args.format.as_str() {
        "md" => render_markdown(&table),
        "csv" => render_csv(&table),
        other => bail!("unknown format '{other}' (expected md or csv)"),
    };
    match args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare(args) => cmd_prepare(args).map(|()| ExitCode::SUCCESS),
        Command::Train(args) => cmd_train(args).map(|()| ExitCode::SUCCESS),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Report(args) => cmd_report(args).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
