//! Command-line front end: `synth`, `train`, `eval`, `ablate`, `gradcheck`
//! and `weights-pca`. Every command writes a `run.json` record of its own
//! flags next to its outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_manifest, normalize, read_volume, synthesize, ContentClass, Provenance, SynthConfig, PROVENANCE_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    cluster_separation, evaluate_manifest, pca_project, weight_rows, write_cloud_csv, ManifestEvaluation,
};
use crate::gradcheck::run_suite;
use crate::model::{Model, ModelConfig, PredictorMode};
use crate::parallel::with_threads;
use crate::tensor::DType;
use crate::train::{train, Checkpoint, TrainConfig, TrainReport};

pub const RUN_FILE: &str = "run.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "hysnet", version, about = "Blind quality assessment of 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a phantom dataset with a manifest and provenance file.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus an epoch log.
    Train(TrainArgs),
    /// Score every volume of a manifest and report SROCC/PLCC.
    Eval(EvalArgs),
    /// Train hyper and fixed modes with shared seeds and compare them.
    Ablate(AblateArgs),
    /// Check every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Project generated predictor weights to 2D and measure class separation.
    WeightsPca(WeightsPcaArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, value_delimiter = ',', default_value = "blobs,lattice")]
    pub classes: Vec<ContentClass>,
    /// Noise level range `LO:HI`.
    #[arg(long, default_value = "0.05:0.4", value_parser = parse_range)]
    pub sigma_range: (f64, f64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cubic volume extent.
    #[arg(long, default_value_t = 32)]
    pub extent: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file `{"model": ..., "train": ...}`; missing sections use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<PredictorMode>,
    /// Overrides both the training seed and the initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strict_deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub patch: usize,
    #[arg(long)]
    pub stride: usize,
    /// Per-volume CSV; metrics go to `<out stem>.metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strict_deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strict_deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report of every op.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct WeightsPcaArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `label,pc1,pc2` CSV; stats go to `<out stem>.stats.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict rows to one predictor layer (0, 1 or 2).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Defaults to the checkpoint's training patch extent.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Defaults to the checkpoint's grid stride.
    #[arg(long)]
    pub stride: Option<usize>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn with_overrides(mut self, mode: Option<PredictorMode>, seed: Option<u64>, strict: bool) -> Self {
        if let Some(m) = mode {
            self.train.mode = m;
        }
        if let Some(s) = seed {
            self.train.seed = s;
            self.model.init_seed = s;
        }
        self.train.strict_deterministic |= strict;
        self
    }
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    version: &'static str,
    command: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_run(path: &Path, command: &Command, config: Option<&RunConfig>) -> Result<()> {
    let record = RunRecord { version: env!("CARGO_PKG_VERSION"), command, config };
    write_json(path, &record)
}

/// `dir/name.json` style sibling of a file output: `out.csv` -> `out.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn typed_model(ckpt: &Checkpoint) -> AnyModel {
    match ckpt.model.config.dtype {
        DType::F32 => AnyModel::F32(ckpt.model.clone()),
        DType::F64 => AnyModel::F64(ckpt.model.cast()),
    }
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn evaluate(manifest: &Path, ckpt: &Checkpoint, patch: usize, stride: usize) -> Result<ManifestEvaluation> {
    ckpt.model.config.feature_extent(patch)?;
    crate::data::grid_offsets(patch, patch, stride)?;
    match typed_model(ckpt) {
        AnyModel::F32(m) => evaluate_manifest(manifest, &m, patch, stride),
        AnyModel::F64(m) => evaluate_manifest(manifest, &m, patch, stride),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(command, a),
        Command::Train(a) => cmd_train(command, a),
        Command::Eval(a) => cmd_eval(command, a),
        Command::Ablate(a) => cmd_ablate(command, a),
        Command::Gradcheck(a) => cmd_gradcheck(command, a),
        Command::WeightsPca(a) => cmd_weights_pca(command, a),
    }
}

fn cmd_synth(command: &Command, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: a.count,
        classes: a.classes.clone(),
        sigma_lo: a.sigma_range.0,
        sigma_hi: a.sigma_range.1,
        seed: a.seed,
        extent: a.extent,
        ..SynthConfig::default()
    };
    let prov = synthesize(&a.out, &cfg)?;
    write_run(&a.out.join(RUN_FILE), command, None)?;
    println!("wrote {} volumes to {}", prov.phantoms.len(), a.out.display());
    Ok(())
}

fn train_run(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    require_file(manifest)?;
    let report = train(manifest, &cfg.model, &cfg.train, out)?;
    println!(
        "{}: {} epochs in {:.1}s, train L1 {:.4} -> {:.4}",
        cfg.train.mode.as_str(),
        report.log.len(),
        report.seconds,
        report.initial_train_l1,
        report.final_train_l1()
    );
    Ok(report)
}

fn cmd_train(command: &Command, a: &TrainArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let cfg = RunConfig::load(a.config.as_deref())?.with_overrides(a.mode, a.seed, a.strict_deterministic);
    train_run(&a.manifest, &cfg, &a.out)?;
    write_run(&a.out.join(RUN_FILE), command, Some(&cfg))
}

fn cmd_eval(command: &Command, a: &EvalArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let threads = a.strict_deterministic.then_some(1);
    let result = with_threads(threads, || evaluate(&a.manifest, &ckpt, a.patch, a.stride))??;
    create_parent(&a.out)?;
    result.write_csv(&a.out)?;
    result.report.write_csv(&sibling(&a.out, "metrics.csv"))?;
    write_run(&sibling(&a.out, RUN_FILE), command, None)?;
    println!(
        "n={} srocc={:.4} plcc={:.4}",
        result.report.n, result.report.srocc, result.report.plcc
    );
    Ok(())
}

/// One mode's outcome in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: PredictorMode,
    pub srocc: f64,
    pub plcc: f64,
    pub initial_train_l1: f64,
    pub final_train_l1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Hyper minus fixed held-out SROCC.
    pub srocc_delta: f64,
}

impl AblationSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn cmd_ablate(command: &Command, a: &AblateArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let base = RunConfig::load(a.config.as_deref())?.with_overrides(None, a.seed, a.strict_deterministic);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = Vec::new();
    for mode in [PredictorMode::Hyper, PredictorMode::Fixed] {
        let cfg = base.clone().with_overrides(Some(mode), None, false);
        let dir = a.out.join(mode.as_str());
        let report = train_run(&a.manifest, &cfg, &dir)?;
        let threads = cfg.train.strict_deterministic.then_some(1);
        let held_out = dir.join("val_manifest.csv");
        let result = with_threads(threads, || {
            evaluate(&held_out, &report.final_checkpoint, cfg.train.patch, cfg.train.stride)
        })??;
        result.write_csv(&dir.join("val_predictions.csv"))?;
        rows.push(AblationRow {
            mode,
            srocc: result.report.srocc,
            plcc: result.report.plcc,
            initial_train_l1: report.initial_train_l1,
            final_train_l1: report.final_train_l1(),
            seconds: report.seconds,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let path = a.out.join(ABLATION_FILE);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["mode", "srocc", "plcc"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([r.mode.as_str(), &r.srocc.to_string(), &r.plcc.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let summary = AblationSummary { srocc_delta: rows[0].srocc - rows[1].srocc, rows };
    write_json(&a.out.join(ABLATION_SUMMARY_FILE), &summary)?;
    write_run(&a.out.join(RUN_FILE), command, Some(&base))?;
    for r in &summary.rows {
        println!("{}: srocc={:.4} plcc={:.4}", r.mode.as_str(), r.srocc, r.plcc);
    }
    Ok(())
}

fn cmd_gradcheck(command: &Command, a: &GradcheckArgs) -> Result<()> {
    let results = run_suite(a.seed)?;
    for r in &results {
        println!(
            "{} {:<28} max_rel_error={:.3e} worst_index={} analytic={:.6e} numeric={:.6e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.worst_index,
            r.worst_analytic,
            r.worst_numeric
        );
    }
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(out, &results)?;
        write_run(&sibling(out, RUN_FILE), command, None)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} ops pass", results.len());
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Content class of every manifest volume, read from the `phantoms.json`
/// next to each volume.
pub fn phantom_labels(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut by_dir: HashMap<PathBuf, HashMap<String, String>> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let dir = p.parent().unwrap_or(Path::new(".")).to_path_buf();
            if !by_dir.contains_key(&dir) {
                let prov = Provenance::load(&dir.join(PROVENANCE_FILE))?;
                let map = prov
                    .phantoms
                    .into_iter()
                    .map(|r| (r.file, r.spec.class.as_str().to_string()))
                    .collect();
                by_dir.insert(dir.clone(), map);
            }
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            by_dir[&dir].get(&name).cloned().ok_or_else(|| {
                Error::Data(format!("{} is not listed in {}", p.display(), dir.join(PROVENANCE_FILE).display()))
            })
        })
        .collect()
}

/// Separation statistics written by `weights-pca`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub n: usize,
    pub dims: usize,
    pub explained_ratio: Vec<f64>,
    pub within: f64,
    pub between: f64,
}

impl WeightStats {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn cmd_weights_pca(command: &Command, a: &WeightsPcaArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.mode() != PredictorMode::Hyper {
        return Err(Error::Config(format!(
            "{} is a fixed-mode checkpoint; it has no generated weights",
            a.checkpoint.display()
        )));
    }
    let patch = a.patch.unwrap_or(ckpt.train.patch);
    let stride = a.stride.unwrap_or(ckpt.train.stride);
    ckpt.model.config.feature_extent(patch)?;
    let m = load_manifest(&a.manifest)?;
    let paths: Vec<PathBuf> = m.records.iter().map(|r| r.path.clone()).collect();
    let labels = phantom_labels(&paths)?;
    let volumes = paths
        .iter()
        .map(|p| normalize(&read_volume(p)?))
        .collect::<Result<Vec<_>>>()?;
    let rows = match typed_model(&ckpt) {
        AnyModel::F32(model) => weight_rows(&model, &volumes, patch, stride, a.layer)?,
        AnyModel::F64(model) => weight_rows(&model, &volumes, patch, stride, a.layer)?,
    };
    let pca = pca_project(&rows, 2.min(rows[0].len()))?;
    create_parent(&a.out)?;
    write_cloud_csv(&a.out, &labels, &pca.projection)?;
    write_run(&sibling(&a.out, RUN_FILE), command, None)?;
    let sep = cluster_separation(&rows, &labels)?;
    let stats = WeightStats {
        n: rows.len(),
        dims: rows[0].len(),
        explained_ratio: pca.explained_ratio.clone(),
        within: sep.within,
        between: sep.between,
    };
    write_json(&sibling(&a.out, "stats.json"), &stats)?;
    println!(
        "separation: n={} dims={} within={:.6} between={:.6} ratio={:.3}",
        stats.n,
        stats.dims,
        stats.within,
        stats.between,
        stats.between / stats.within
    );
    Ok(())
}
