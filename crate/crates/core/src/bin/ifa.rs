use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use ifa_core::archive::{validate_archive, ArchiveReader, DatasetSplit, HeadKind, Selector};
use ifa_core::campipe::{self, CamOptions, ScaleMode};
use ifa_core::distribution::{collect_stats, DistributionStats, StatsMode, StatsOptions, DEFAULT_PERCENTILES};
use ifa_core::eval::{self, MaskRowPolicy};
use ifa_core::importance::{self, FeatureMask, ImportanceMatrix, MaskRule};
use ifa_core::refnet::{self, GradClasses, TrainConfig};
use ifa_core::render;
use ifa_core::schemes::{ClassSelection, Scheme};
use ifa_core::{fsutil, ErrorKind, IfaError, Result};

/// Integrated feature analysis for class activation maps.
#[derive(Parser, Debug)]
#[command(name = "ifa", version)]
struct Cli {
    /// Worker threads for per-sample processing (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML file whose keys mirror flags; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check an archive and report findings.
    Validate(ValidateArgs),
    /// Dataset-level statistics of raw CAM values.
    Stats(StatsArgs),
    /// Importance matrix and, optionally, a feature mask derived from it.
    Im(ImArgs),
    /// Class activation maps.
    Cam(CamArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Reference network: data, training, archive dump.
    #[command(subcommand)]
    Refnet(RefnetCommand),
    /// PNG rendering of a CAM directory.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct ValidateArgs {
    archive: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, default_value = "grad-cam")]
    scheme: Scheme,
    /// Class id, or `true` for each sample's true class.
    #[arg(long)]
    class: ClassSelection,
    #[arg(long, default_value = "exact")]
    mode: StatsMode,
    /// Comma-separated percentiles; P10 and P90 are always included.
    #[arg(long, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImArgs {
    #[arg(long, required_unless_present = "from")]
    archive: Option<PathBuf>,
    #[arg(long, default_value = "grad-cam")]
    scheme: Scheme,
    /// One pass over labeled samples, each with its true-class gradients.
    #[arg(long, conflicts_with_all = ["class", "from"])]
    unified: bool,
    /// Per-class columns to compute (comma-separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "from")]
    class: Vec<i32>,
    /// Threshold an existing `im.csv` instead of computing one.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Where to write `im.csv` (and its `.meta.json` sidecar).
    #[arg(long, required_unless_present = "from")]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "bottom_pct", requires = "mask_out")]
    top_pct: Option<f64>,
    #[arg(long, requires = "mask_out")]
    bottom_pct: Option<f64>,
    /// Mask file for `--top-pct` / `--bottom-pct`.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CamArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, default_value = "grad-cam")]
    scheme: Scheme,
    /// Class id, or `true` for each sample's true class.
    #[arg(long)]
    class: ClassSelection,
    #[arg(long, default_value = "individual")]
    scale: ScaleMode,
    /// Statistics from `ifa stats`; required for `--scale common`.
    #[arg(long, required_if_eq("scale", "common"))]
    stats: Option<PathBuf>,
    /// Feature mask from `ifa im --mask-out` (FS- maps).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output size `HxW`; default keeps the feature resolution.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Correlation of CAM sums with the selected logit.
    Consistency(ConsistencyArgs),
    /// Accuracy with all, principal and non-principal features.
    MaskAcc(MaskAccArgs),
    /// Average increase / drop through the masked-input job protocol.
    #[command(subcommand)]
    Incdrop(IncdropCommand),
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[arg(long)]
    archive: PathBuf,
    /// CAM directory written by `ifa cam`.
    #[arg(long)]
    cams: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scatter data, `sample_id,cam_sum,logit`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskAccArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, conflicts_with_all = ["im", "top_pct"])]
    mask: Option<PathBuf>,
    /// Importance matrix to threshold with `--top-pct`.
    #[arg(long, requires = "top_pct")]
    im: Option<PathBuf>,
    #[arg(long, requires = "im")]
    top_pct: Option<f64>,
    /// Mask row per sample: predicted, true or union.
    #[arg(long, default_value = "predicted")]
    rows: MaskRowPolicy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum IncdropCommand {
    /// Write input-sized masks and `manifest.json` for the model owner.
    Emit(EmitArgs),
    /// Summarize `results.json`.
    Collect(CollectArgs),
}

#[derive(Args, Debug)]
struct EmitArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    cams: PathBuf,
    #[arg(long)]
    jobs: PathBuf,
    /// Zero mask values below this level after normalization.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct CollectArgs {
    #[arg(long)]
    results: PathBuf,
    /// Job directory; when given, every result id must belong to a job.
    #[arg(long)]
    jobs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum RefnetCommand {
    /// Generate the synthetic shapes dataset.
    Gen(GenArgs),
    /// Train the reference network.
    Train(TrainArgs),
    /// Run the network over a dataset and write an archive.
    Dump(DumpArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gap_linear", value_parser = parse_head)]
    head: HeadKind,
    /// Default depends on the head (20 for gap_linear, 10 for flatten_linear).
    #[arg(long)]
    epochs: Option<usize>,
    /// Default depends on the head (0.5 for gap_linear, 0.05 for flatten_linear).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Linear step-size decay: `on` or `off` (default depends on the head).
    #[arg(long)]
    lr_decay: Option<Toggle>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `all` or `true` (true class only).
    #[arg(long, default_value = "all")]
    grads: GradClasses,
    #[arg(long, default_value = "train")]
    split: DatasetSplit,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// CAM directory written by `ifa cam`.
    #[arg(long)]
    cams: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend over the archived inputs instead of rendering the bare map.
    #[arg(long, requires = "archive")]
    overlay: bool,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 224x224")?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    match s {
        "gap_linear" | "gap-linear" => Ok(HeadKind::GapLinear),
        "flatten_linear" | "flatten-linear" => Ok(HeadKind::FlattenLinear),
        _ => Err(format!("unknown head {s:?}; use gap_linear or flatten_linear")),
    }
}

// ---------------------------------------------------------------------------
// Config file

fn config_value_args(key: &str, value: &toml::Value) -> std::result::Result<Vec<OsString>, String> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        _ => Err(format!("config key {key:?}: unsupported value {v}")),
    };
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag.into()],
        toml::Value::Boolean(false) => vec![],
        toml::Value::Array(items) => {
            let joined = items
                .iter()
                .map(scalar)
                .collect::<std::result::Result<Vec<_>, _>>()?
                .join(",");
            vec![flag.into(), joined.into()]
        }
        v => vec![flag.into(), scalar(v)?.into()],
    })
}

/// Subcommand names in `args`, skipping global options.
fn subcommand_path(args: &[OsString]) -> Vec<String> {
    let root = Cli::command();
    let mut cur = &root;
    let mut path = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--workers" || a == "--config" {
            i += 2;
            continue;
        }
        if a.starts_with('-') {
            i += 1;
            continue;
        }
        match cur.find_subcommand(a.as_ref()) {
            Some(sc) => {
                path.push(a.into_owned());
                cur = sc;
                i += 1;
            }
            None => break,
        }
    }
    path
}

fn flag_names(path: &[String]) -> Vec<String> {
    let root = Cli::command();
    let mut cur = &root;
    for name in path {
        match cur.find_subcommand(name) {
            Some(sc) => cur = sc,
            None => return Vec::new(),
        }
    }
    cur.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["workers".to_string()])
        .collect()
}

/// Appends `--key value` for config keys that the selected subcommand accepts
/// and that are not already on the command line. Top-level keys apply where
/// accepted; a table named after the subcommand path (e.g. `[eval.mask-acc]`)
/// applies to that subcommand and must only hold keys it accepts.
fn apply_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or("--config needs a file")?
        .to_string_lossy()
        .into_owned();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{path}: {e}"))?;
    let sub = subcommand_path(&args);
    let accepted = flag_names(&sub);
    let present = |key: &str| {
        let flag = format!("--{}", key.replace('_', "-"));
        args.iter().any(|a| {
            let a = a.to_string_lossy();
            a == flag || a.starts_with(&format!("{flag}="))
        })
    };
    let mut extra = Vec::new();
    let mut section = Some(&table);
    for name in &sub {
        section = section.and_then(|t| t.get(name)).and_then(toml::Value::as_table);
    }
    for (key, value) in &table {
        if value.is_table() || !accepted.contains(&key.replace('_', "-")) || present(key) {
            continue;
        }
        extra.extend(config_value_args(key, value)?);
    }
    if let Some(section) = section.filter(|_| !sub.is_empty()) {
        for (key, value) in section {
            if value.is_table() {
                continue;
            }
            if !accepted.contains(&key.replace('_', "-")) {
                return Err(format!("{path}: `{}` does not accept {key:?}", sub.join(" ")));
            }
            if !present(key) {
                extra.extend(config_value_args(key, value)?);
            }
        }
    }
    let mut out = args;
    out.extend(extra);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Commands

fn open(path: &Path) -> Result<ArchiveReader> {
    ArchiveReader::open(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(a) => validate(a),
        Command::Stats(a) => stats(a),
        Command::Im(a) => im(a),
        Command::Cam(a) => cam(a),
        Command::Eval(EvalCommand::Consistency(a)) => consistency(a),
        Command::Eval(EvalCommand::MaskAcc(a)) => mask_acc(a),
        Command::Eval(EvalCommand::Incdrop(IncdropCommand::Emit(a))) => emit(a),
        Command::Eval(EvalCommand::Incdrop(IncdropCommand::Collect(a))) => collect(a),
        Command::Refnet(RefnetCommand::Gen(a)) => gen(a),
        Command::Refnet(RefnetCommand::Train(a)) => train(a),
        Command::Refnet(RefnetCommand::Dump(a)) => dump(a),
        Command::Render(a) => render_cmd(a),
    }
}

fn validate(a: ValidateArgs) -> Result<()> {
    let report = validate_archive(&a.archive);
    if let Some(path) = &a.json {
        fsutil::write_json_atomic(path, &report)?;
    }
    println!(
        "{} samples, gradient coverage {:.3}, {} findings",
        report.samples,
        report.grads_coverage,
        report.findings.len()
    );
    for f in &report.findings {
        let id = f.sample_id.map_or("-".to_string(), |i| i.to_string());
        println!("  sample {id} {} {:?}: {}", f.tensor, f.kind, f.detail);
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(IfaError::Invariant(format!("{} findings", report.findings.len())))
    }
}

fn stats(a: StatsArgs) -> Result<()> {
    let reader = open(&a.archive)?;
    let mut opts = StatsOptions::new(a.mode);
    opts.percentiles = a.percentiles.unwrap_or_else(|| DEFAULT_PERCENTILES.to_vec());
    let stats = collect_stats(&reader, a.scheme, a.class, &opts)?;
    stats.save(&a.out)?;
    println!(
        "{} values from {} samples: P10 {} P90 {}",
        stats.count,
        stats.samples,
        stats.percentile(10.0).unwrap_or(f64::NAN),
        stats.percentile(90.0).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn im(a: ImArgs) -> Result<()> {
    let matrix: ImportanceMatrix = match &a.from {
        Some(path) => importance::read_im_csv(path)?,
        None => {
            let archive = a.archive.as_ref().expect("clap requires --archive");
            let reader = open(archive)?;
            let all = Selector::all();
            let m = if a.unified {
                importance::build_im_unified(&reader, &all, a.scheme)?
            } else {
                let classes: Vec<i32> = if a.class.is_empty() {
                    (0..reader.manifest().num_classes as i32).collect()
                } else {
                    a.class.clone()
                };
                importance::build_im_per_class_matrix(&reader, &all, a.scheme, &classes)?
            };
            importance::write_im_csv(a.out.as_ref().expect("clap requires --out"), &m)?;
            m
        }
    };
    let rule = match (a.top_pct, a.bottom_pct) {
        (Some(k), _) => Some(MaskRule::TopPct { k }),
        (_, Some(k)) => Some(MaskRule::BottomPct { k }),
        _ => None,
    };
    if let (Some(rule), Some(path)) = (rule, &a.mask_out) {
        let mask = importance::threshold_im(&matrix, &rule)?;
        importance::write_mask_json(path, &mask)?;
        println!("mask {} written to {}", mask.describe(), path.display());
    } else if a.mask_out.is_some() {
        return Err(IfaError::InvalidArgument(
            "--mask-out needs --top-pct or --bottom-pct".into(),
        ));
    }
    Ok(())
}

fn cam(a: CamArgs) -> Result<()> {
    let reader = open(&a.archive)?;
    let mask: Option<FeatureMask> = a.mask.as_deref().map(importance::read_mask_json).transpose()?;
    let mut opts = CamOptions::new(a.scheme, a.class, a.scale);
    opts.mask = mask.as_ref();
    opts.target = a.size;
    if a.scale == ScaleMode::Common {
        let path = a.stats.as_ref().expect("clap requires --stats");
        opts = opts.with_stats(&DistributionStats::load(path)?)?;
    }
    let cams = campipe::generate(&reader, &Selector::all(), &opts)?;
    let index = campipe::write_cam_dir(&a.out, &cams, &opts)?;
    println!(
        "{} {} maps written to {}",
        index.entries.len(),
        index.name,
        a.out.display()
    );
    Ok(())
}

fn consistency(a: ConsistencyArgs) -> Result<()> {
    let reader = open(&a.archive)?;
    let (_, cams) = campipe::read_cam_dir(&a.cams)?;
    let report = eval::consistency_report(&reader, &cams)?;
    fsutil::write_json_atomic(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        fsutil::write_atomic(csv, eval::consistency_csv(&report).as_bytes())?;
    }
    let c = &report.correlation;
    println!(
        "{}: n {} pearson {:.6} spearman {:.6} (selected {:?})",
        report.cam_name, c.n, c.pearson, c.spearman, c.selected_coefficient
    );
    Ok(())
}

fn mask_acc(a: MaskAccArgs) -> Result<()> {
    let reader = open(&a.archive)?;
    let mask = match (&a.mask, &a.im, a.top_pct) {
        (Some(path), _, _) => importance::read_mask_json(path)?,
        (None, Some(im), Some(k)) => importance::threshold_im(&importance::read_im_csv(im)?, &MaskRule::TopPct { k })?,
        _ => return Err(IfaError::InvalidArgument("give --mask, or --im with --top-pct".into())),
    };
    let report = eval::masked_accuracy(&reader, &Selector::all(), &mask, a.rows)?;
    fsutil::write_json_atomic(&a.out, &report)?;
    println!(
        "n {}: all {:.4} principal {:.4} non-principal {:.4}",
        report.n, report.accuracy_all, report.accuracy_principal, report.accuracy_nonprincipal
    );
    Ok(())
}

fn emit(a: EmitArgs) -> Result<()> {
    let reader = open(&a.archive)?;
    let (_, cams) = campipe::read_cam_dir(&a.cams)?;
    let manifest = eval::emit_mask_jobs(&reader, &cams, &a.jobs, a.threshold)?;
    println!("{} jobs written to {}", manifest.jobs.len(), a.jobs.display());
    Ok(())
}

fn collect(a: CollectArgs) -> Result<()> {
    let manifest: Option<eval::JobManifest> = a
        .jobs
        .as_ref()
        .map(|d| fsutil::read_json(&d.join("manifest.json")))
        .transpose()?;
    let results = eval::read_results(&a.results, manifest.as_ref())?;
    let report = eval::collect_inc_drop(&results)?;
    fsutil::write_json_atomic(&a.out, &report)?;
    println!(
        "n {}: average increase {:.4} average drop {:.4}",
        report.n, report.average_increase, report.average_drop
    );
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let ds = refnet::gen_dataset(a.seed, a.n)?;
    refnet::save_dataset(&a.out, &ds)?;
    println!("{} samples written to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = refnet::load_dataset(&a.data)?;
    let mut cfg = TrainConfig::for_head(a.head);
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(t) = a.lr_decay {
        cfg.lr_decay = matches!(t, Toggle::On);
    }
    let (model, report) = refnet::train(&ds, a.head, &cfg)?;
    refnet::save_model(&a.out, &model)?;
    println!(
        "trained {} epochs, final loss {:.4}, training accuracy {:.4}",
        cfg.epochs,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy
    );
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let model = refnet::load_model(&a.model)?;
    let ds = refnet::load_dataset(&a.data)?;
    let reader = refnet::dump_archive(&model, &ds, &a.out, a.grads, a.split)?;
    println!("{} samples written to {}", reader.sample_ids().len(), a.out.display());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let (index, cams) = campipe::read_cam_dir(&a.cams)?;
    let reader = a.archive.as_deref().map(open).transpose()?;
    for cam in &cams {
        let bytes = match (&reader, a.overlay) {
            (Some(r), true) => {
                let rec = r.read_sample(cam.sample_id)?;
                let input = rec.input.as_ref().ok_or_else(|| {
                    IfaError::Unsupported(format!("sample {} has no stored input to overlay", cam.sample_id))
                })?;
                render::overlay(cam, input, a.alpha, None)?
            }
            _ => render::render_cam(cam, None)?,
        };
        let name = render::png_file_name(cam.sample_id, cam.class_id, index.scheme, cam.scale_mode);
        fsutil::write_atomic(&a.out.join(name), &bytes)?;
    }
    println!("{} images written to {}", cams.len(), a.out.display());
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let args = match apply_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
