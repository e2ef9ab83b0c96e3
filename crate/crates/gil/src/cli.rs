//! The `gil` command line.
//!
//! Layout under `--out`:
//!
//! ```text
//! data/{pretrain.gilf, finetune.gilf, embeddings.gile, config.json}
//! <mode>/config.json, results.json, results.csv, aggregate.*, summary.md, curve.csv
//! <mode>/seed-<n>/{state.gilb, state.gilm, manifest.json, result.json, stages.csv, config.json}
//! ablations/<name>/{report.csv, report.md, report.json, config.json}
//! ablations/<name>/cells/<row>-<label>/seed-<n>/result.json
//! ```
//!
//! A seed or cell whose `result.json` already exists with the current config
//! digest is not run again, so an interrupted command picks up where it
//! stopped.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use gil_core::config::RunConfig;
use gil_core::data::{ClassId, Dataset};
use gil_core::eval::{
    aggregate_runs, assemble_report, evaluate, generate_benchmark, gzsl_metrics, partition, run_experiment,
    zsl_metrics, AblationName, AblationSpec, Benchmark, FoundationCache, Partition, RunResult,
};
use gil_core::gan::synthesize;
use gil_core::pipeline::{target_record, RunMode};
use gil_core::rng;

use crate::checkpoint::{self, read_json, to_json};
use crate::error::{CliError, Result};
use crate::formats;
use crate::report::{self, ScatterPoint};
use crate::workers;

pub const PRETRAIN_FILE: &str = "pretrain.gilf";
pub const FINETUNE_FILE: &str = "finetune.gilf";
pub const EMBEDDINGS_FILE: &str = "embeddings.gile";
pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Parser, Debug)]
#[command(name = "gil", version, about = "Generative incremental zero-shot learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON config; keys it leaves out come from the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Default,
    Desk,
    Large,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Gil,
    Baseline,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Zsl,
    Gzsl,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Unseen,
    Seen,
    Pretrain,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic benchmark into `<out>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Data seed (overrides `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score one mode for every configured seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Data directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint.
    Eval {
        /// A `seed-<n>` directory written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        setting: Setting,
        /// Test classes for the zsl setting.
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Data directory (default `<checkpoint>/../../data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the metrics and config echo here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation grid over paired seeds.
    Ablate {
        /// One of memory-variant, sampling-percent, synth-percent, data-mix,
        /// generator-freeze, embedding-source.
        name: String,
        #[command(flatten)]
        common: Common,
        /// First seed; the grid uses as many consecutive seeds as the config
        /// lists.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tables, the stage curve and the PCA scatter of a run directory.
    Report {
        /// A `<out>/<mode>` directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Seed whose checkpoint the scatter is drawn from (default: the
        /// first).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The preset with the file's keys laid over it. Unknown keys are errors.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let preset = match common.preset {
        Preset::Default => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
        Preset::Large => RunConfig::large(),
    };
    let mut value = serde_json::to_value(&preset).expect("config serializes");
    if let Some(path) = &common.config {
        // An unreadable config is the invocation's fault, not the run's.
        let over: Value = read_json(path).map_err(|e| match e {
            CliError::Io { path, source } => CliError::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        if !over.is_object() {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, over);
    }
    let mut config: RunConfig = serde_json::from_value(value).map_err(|e| {
        let at = common.config.as_deref().map_or("config".into(), |p| p.display().to_string());
        CliError::Config(format!("{at}: {e}"))
    })?;
    if let Some(out) = &common.out {
        config.output_dir = out.to_string_lossy().into_owned();
    }
    Ok(config)
}

fn validated(config: RunConfig) -> Result<RunConfig> {
    config.validate().map_err(|e| CliError::Config(e.to_string().trim_start_matches("config error: ").to_string()))?;
    Ok(config)
}

fn echo(dir: &Path, config: &RunConfig) -> Result<()> {
    formats::write(&dir.join(CONFIG_FILE), &to_json(config))
}

fn data_dir(config: &RunConfig, data: Option<&Path>) -> PathBuf {
    data.map_or_else(|| Path::new(&config.output_dir).join("data"), Path::to_path_buf)
}

pub fn cmd_gen_data(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(s) = seed {
        config.data.seed = s;
    }
    let config = validated(config)?;
    let bench = generate_benchmark(&config.data)?;
    let dir = data_dir(&config, None);
    formats::save_features(&bench.pretrain, &dir.join(PRETRAIN_FILE))?;
    formats::save_features(&bench.finetune, &dir.join(FINETUNE_FILE))?;
    formats::save_embeddings(&bench.embeddings, &dir.join(EMBEDDINGS_FILE))?;
    echo(&dir, &config)?;
    println!(
        "pretrain: {} classes, {} instances\nfinetune: {} classes, {} instances\nembeddings: {} classes, dimension {}\nfeature dimension {}\nwritten to {}",
        bench.pretrain.class_count(),
        bench.pretrain.len(),
        bench.finetune.class_count(),
        bench.finetune.len(),
        bench.embeddings.len(),
        bench.embeddings.dim(),
        bench.pretrain.dim(),
        dir.display()
    );
    Ok(())
}

/// Load a data directory and check it against the config.
pub fn load_benchmark(dir: &Path, config: &RunConfig) -> Result<Benchmark> {
    let bench = Benchmark {
        pretrain: formats::load_features(&dir.join(PRETRAIN_FILE))?,
        finetune: formats::load_features(&dir.join(FINETUNE_FILE))?,
        embeddings: formats::load_embeddings(&dir.join(EMBEDDINGS_FILE))?,
    };
    let d = &config.data;
    let mismatch = |what: &str, file: usize, want: usize| {
        CliError::Config(format!("{}: {what} is {file} but the config says {want}", dir.display()))
    };
    if bench.pretrain.dim() != d.feature_dim || bench.finetune.dim() != d.feature_dim {
        return Err(mismatch("feature dimension", bench.pretrain.dim(), d.feature_dim));
    }
    if bench.embeddings.dim() != d.semantic_dim {
        return Err(mismatch("embedding dimension", bench.embeddings.dim(), d.semantic_dim));
    }
    if bench.pretrain.class_count() != d.pretrain_classes {
        return Err(mismatch("pretraining class count", bench.pretrain.class_count(), d.pretrain_classes));
    }
    if bench.finetune.class_count() != d.finetune_classes {
        return Err(mismatch("fine-tuning class count", bench.finetune.class_count(), d.finetune_classes));
    }
    let missing = bench.pretrain.classes().into_iter().chain(bench.finetune.classes()).find(|&c| !bench.embeddings.contains(c));
    if let Some(c) = missing {
        return Err(CliError::Config(format!("{}: class {c} has no embedding", dir.display())));
    }
    Ok(bench)
}

fn finished(dir: &Path, digest: &str) -> Option<RunResult> {
    let r: RunResult = read_json(&dir.join(RESULT_FILE)).ok()?;
    (r.config_digest == digest).then_some(r)
}

fn run_mode(mode: Mode) -> RunMode {
    match mode {
        Mode::Gil => RunMode::Gil,
        Mode::Baseline => RunMode::Baseline,
    }
}

fn mode_name(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Gil => "gil",
        RunMode::Baseline => "baseline",
    }
}

/// Train, checkpoint, reload and score one seed.
pub fn run_seed(
    bench: &Benchmark,
    config: &RunConfig,
    mode: RunMode,
    seed: u64,
    dir: &Path,
    cache: &mut FoundationCache,
) -> Result<RunResult> {
    let mut config = config.clone();
    config.seeds = vec![seed];
    if let Some(r) = finished(dir, &config.digest()).filter(|_| dir.join(checkpoint::MANIFEST_FILE).exists()) {
        log::info!("{} seed {seed}: already done", mode_name(mode));
        return Ok(r);
    }
    log::info!("{} seed {seed}: training", mode_name(mode));
    let (state, _) = run_experiment(bench, &config, mode, seed, cache)?;
    checkpoint::save(&state, &config, dir)?;
    let (loaded, _) = checkpoint::load(dir)?;
    let part = partition(bench, &config.data, seed)?;
    let result = evaluate(&loaded, &part, &config, seed)?;
    report::stages_csv(&state.log, &dir.join("stages.csv"))?;
    echo(dir, &config)?;
    formats::write(&dir.join(RESULT_FILE), &to_json(&result))?;
    log::info!("{} seed {seed}: retention {:.3}, zsl {:.3}", mode_name(mode), result.pretrain_retention, result.zsl_top1);
    Ok(result)
}

/// Per-seed results, then the seed-level summaries. Completed seeds are kept
/// even when another seed fails.
pub fn write_summaries(dir: &Path, results: &[RunResult]) -> Result<()> {
    formats::write(&dir.join("results.json"), &to_json(&results))?;
    report::results_csv(results, &dir.join("results.csv"))?;
    if results.len() >= 2 {
        let agg = aggregate_runs(results)?;
        formats::write(&dir.join("aggregate.json"), &to_json(&agg))?;
        report::aggregate_csv(&agg, &dir.join("aggregate.csv"))?;
        let title = dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
        report::write_text(&dir.join("summary.md"), &report::aggregate_markdown(&title, &agg))?;
        report::curve_csv(&agg, &dir.join("curve.csv"))?;
    }
    Ok(())
}

fn first_error<T>(results: Vec<Result<T>>) -> (Vec<T>, Option<CliError>) {
    let mut ok = Vec::new();
    let mut err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::error!("{e}");
                err.get_or_insert(e);
            }
        }
    }
    (ok, err)
}

pub fn cmd_run(common: &Common, mode: Mode, seed: Option<u64>, data: Option<&Path>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    let config = validated(config)?;
    let workers = workers::worker_count()?;
    let bench = load_benchmark(&data_dir(&config, data), &config)?;
    let mode = run_mode(mode);
    let root = Path::new(&config.output_dir).join(mode_name(mode));
    echo(&root, &config)?;
    let outcomes = workers::fan_out(&config.seeds, workers, FoundationCache::new, |cache, &seed| {
        run_seed(&bench, &config, mode, seed, &root.join(format!("seed-{seed}")), cache)
    });
    let (results, err) = first_error(outcomes);
    write_summaries(&root, &results)?;
    for r in &results {
        println!(
            "seed {}: retention {:.4}, zsl top-1 {:.4}, top-5 {:.4}{}",
            r.seed,
            r.pretrain_retention,
            r.zsl_top1,
            r.zsl_top5,
            r.gzsl.map_or(String::new(), |g| format!(", gzsl u {:.4} s {:.4} H {:.4}", g.u, g.s, g.h))
        );
    }
    err.map_or(Ok(()), Err)
}

/// Classes the checkpoint was fine-tuned on.
fn trained_seen(manifest: &checkpoint::Manifest) -> Vec<ClassId> {
    let mut seen: Vec<ClassId> = match manifest.mode {
        RunMode::Gil => manifest.schedule.batches.iter().flatten().copied().collect(),
        RunMode::Baseline => manifest.classes.clone(),
    };
    seen.sort_unstable();
    seen
}

fn eval_partition(checkpoint: &Path, data: Option<&Path>) -> Result<(gil_core::pipeline::ExperimentState, checkpoint::Manifest, Partition)> {
    let (state, manifest) = checkpoint::load(checkpoint)?;
    let config = &manifest.config;
    let dir = data.map_or_else(|| checkpoint.join("..").join("..").join("data"), Path::to_path_buf);
    let bench = load_benchmark(&dir, config)?;
    let part = partition(&bench, &config.data, manifest.seed)?;
    if trained_seen(&manifest) != part.split.seen {
        return Err(CliError::Config(format!(
            "{}: the seen classes of this data split differ from the ones the checkpoint was trained on",
            dir.display()
        )));
    }
    Ok((state, manifest, part))
}

pub fn cmd_eval(checkpoint: &Path, setting: Setting, split: Option<Split>, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if setting == Setting::Gzsl && split.is_some() {
        return Err(CliError::Usage("--split applies to the zsl setting only; gzsl always scores seen and unseen".into()));
    }
    let (state, manifest, part) = eval_partition(checkpoint, data)?;
    let config = &manifest.config;
    let seed = manifest.seed;
    let metrics = match setting {
        Setting::Zsl => {
            let (classes, test) = match split.unwrap_or(Split::Unseen) {
                Split::Unseen => (part.split.unseen.clone(), &part.unseen_test),
                Split::Seen => (part.split.seen.clone(), &part.seen_test),
                Split::Pretrain => (part.pretrain_classes(), &part.pretrain_test),
            };
            let (top1, topk) = zsl_metrics(&state, &part, config, &classes, test, rng::derive(seed, "zsl"))?;
            let mut m = Map::new();
            m.insert("top1".into(), top1.into());
            m.insert(format!("top{}", config.eval.top_k), topk.into());
            m
        }
        Setting::Gzsl => {
            let g = gzsl_metrics(&state, &part, config, rng::derive(seed, "gzsl"))?;
            let mut m = Map::new();
            m.insert("u".into(), g.u.into());
            m.insert("s".into(), g.s.into());
            m.insert("H".into(), g.h.into());
            m
        }
    };
    let json = to_json(&Value::Object(metrics));
    print!("{}", String::from_utf8_lossy(&json));
    if let Some(dir) = out {
        formats::write(&dir.join("metrics.json"), &json)?;
        echo(dir, config)?;
    }
    Ok(())
}

fn slug(label: &str) -> String {
    let s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' }).collect();
    s.trim_matches('-').to_string()
}

pub fn cmd_ablate(name: &str, common: &Common, seed: Option<u64>, data: Option<&Path>) -> Result<()> {
    let Some(ablation) = AblationName::parse(name) else {
        let valid: Vec<&str> = AblationName::ALL.iter().map(|a| a.as_str()).collect();
        return Err(CliError::Usage(format!("unknown ablation {name:?}; valid names: {}", valid.join(", "))));
    };
    let mut config = load_config(common)?;
    if let Some(s) = seed {
        let n = config.seeds.len() as u64;
        config.seeds = (s..s + n).collect();
    }
    let config = validated(config)?;
    let spec = AblationSpec::standard(ablation, config.seeds.clone());
    let cells = gil_core::eval::ablation_cells(&spec, &config).map_err(|e| match e {
        gil_core::GilError::Config(m) => CliError::Config(m),
        other => other.into(),
    })?;
    let workers = workers::worker_count()?;
    let bench = load_benchmark(&data_dir(&config, data), &config)?;
    let root = Path::new(&config.output_dir).join("ablations").join(ablation.as_str());
    echo(&root, &config)?;

    // One job per seed: a worker runs every row of its seed, so the rows
    // share that seed's foundation.
    let outcomes = workers::fan_out(&spec.seeds, workers, FoundationCache::new, |cache, &seed| {
        cells
            .iter()
            .filter(|c| c.seed == seed)
            .map(|c| {
                let dir = root.join("cells").join(format!("{}-{}", c.row, slug(&c.label))).join(format!("seed-{seed}"));
                if let Some(r) = finished(&dir, &c.config.digest()) {
                    return Ok(r);
                }
                log::info!("{} = {}, seed {seed}", ablation.as_str(), c.label);
                let (_, result) = run_experiment(&bench, &c.config, RunMode::Gil, seed, cache)?;
                echo(&dir, &c.config)?;
                formats::write(&dir.join(RESULT_FILE), &to_json(&result))?;
                Ok(result)
            })
            .collect::<Result<Vec<_>>>()
    });
    let (per_seed, err) = first_error(outcomes);
    if let Some(e) = err {
        return Err(e);
    }
    // Back to row-major cell order.
    let rows = spec.values.len();
    let results: Vec<RunResult> =
        (0..rows).flat_map(|row| per_seed.iter().map(move |seed_results| seed_results[row].clone())).collect();
    let report = assemble_report(&spec, &results)?;
    report::ablation_csv(&report, &root.join("report.csv"))?;
    report::write_text(&root.join("report.md"), &report::ablation_markdown(&report))?;
    formats::write(&root.join("report.json"), &to_json(&report))?;
    print!("{}", report::ablation_markdown(&report));
    Ok(())
}

fn seed_dirs(run: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(run).map_err(|e| CliError::io(run, e))? {
        let entry = entry.map_err(|e| CliError::io(run, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
            out.push((seed, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_report(run: &Path, seed: Option<u64>, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let dirs = seed_dirs(run)?;
    if dirs.is_empty() {
        return Err(CliError::Config(format!("{}: no seed-<n> directories", run.display())));
    }
    let results = dirs.iter().map(|(_, d)| read_json::<RunResult>(&d.join(RESULT_FILE))).collect::<Result<Vec<_>>>()?;
    let out = out.unwrap_or(run);
    write_summaries(out, &results)?;

    let (seed, dir) = match seed {
        Some(s) => dirs
            .iter()
            .find(|d| d.0 == s)
            .cloned()
            .ok_or_else(|| CliError::Config(format!("{}: no checkpoint for seed {s}", run.display())))?,
        None => dirs[0].clone(),
    };
    let data = data.map_or_else(|| run.join("..").join("data"), Path::to_path_buf);
    let (state, manifest, part) = eval_partition(&dir, Some(&data))?;
    let points = scatter(&state, &part, rng::derive(seed, "scatter"))?;
    report::scatter_csv(&points, &out.join(format!("scatter-seed-{seed}.csv")))?;
    report::stages_csv(&manifest.log, &out.join(format!("stages-seed-{seed}.csv")))?;
    if results.len() >= 2 {
        print!("{}", report::aggregate_markdown(&run.display().to_string(), &aggregate_runs(&results)?));
    }
    println!("report written to {}", out.display());
    Ok(())
}

/// Real unseen-class features next to features synthesized for the same
/// classes from their embeddings, projected together.
pub fn scatter(state: &gil_core::pipeline::ExperimentState, part: &Partition, seed: u64) -> Result<Vec<ScatterPoint>> {
    let real: &Dataset = &part.unseen_test;
    let mut rows: Vec<Vec<f64>> = (0..real.len()).map(|i| real.feature_f64(i)).collect();
    let mut meta: Vec<(u32, ClassId, bool)> = (0..real.len()).map(|i| (real.instance_id(i), real.class_of(i), false)).collect();
    let mut next = 0u32;
    for &c in &part.split.unseen {
        let Some(rec) = target_record(state, c, &part.embeddings)? else { continue };
        for x in synthesize(&state.gan, &rec, state.test_synth_count, rng::derive_indexed(seed, "class", c as u64))? {
            rows.push(x);
            meta.push((next, c, true));
            next += 1;
        }
    }
    let pcs = report::pca2(&rows);
    Ok(meta
        .into_iter()
        .zip(pcs)
        .map(|((instance_id, class_id, synthetic), [pc1, pc2])| ScatterPoint { instance_id, class_id, pc1, pc2, synthetic })
        .collect())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => cmd_gen_data(&common, seed),
        Command::Run { common, mode, seed, data } => cmd_run(&common, mode, seed, data.as_deref()),
        Command::Eval { checkpoint, setting, split, data, out } => {
            cmd_eval(&checkpoint, setting, split, data.as_deref(), out.as_deref())
        }
        Command::Ablate { name, common, seed, data } => cmd_ablate(&name, &common, seed, data.as_deref()),
        Command::Report { run, seed, data, out } => cmd_report(&run, seed, data.as_deref(), out.as_deref()),
    }
}
