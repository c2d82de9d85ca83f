//! `trisect`: extract descriptors, train, reconstruct, edit, probe, sweep
//! and serve from one binary.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use trisect_core::descriptors::preview::{edge_preview, histogram_preview, segmentation_preview};
use trisect_core::descriptors::vsd::{read_bundle, write_bundle};
use trisect_core::descriptors::{apply_edits, extract_bundle, parse_script, EditOp};
use trisect_core::evaluation::{
    probe, sweep_clusters, write_sweep_csv, LabelledImages, MetricReport, ProbeMode, Representation, SweepRecipe,
};
use trisect_core::losses::Objective;
use trisect_core::training::{list_images, load_image, Dataset, TrainState};
use trisect_core::RgbImage;
use trisect_service::ServiceConfig;

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "trisect", version, about = "Descriptor-conditioned image autoencoder")]
struct Cli {
    /// TOML file with [train], [probe], [sweep] and [serve] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, extraction and probing [config: train.seed, train.descriptor.seed, probe.seed]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Images to .vsd bundles plus edge, segmentation and histogram previews.
    Extract(ExtractArgs),
    /// Train from a folder of images.
    Train(TrainArgs),
    /// Checkpoint + bundle (or image) to a PNG and a metric report.
    Reconstruct(ReconstructArgs),
    /// Apply recolour and histogram-shift edits to a bundle.
    Edit(EditArgs),
    /// Linear or finetune probe on a labelled folder.
    Probe(ProbeArgs),
    /// Pretrain and probe once per cluster count; writes a CSV.
    Sweep(SweepArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Output bundle; only with a single input.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Directory for `<stem>.vsd` and previews (default: next to each input).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Resize and centre-crop to this square size first [config: train.image_size]
    #[arg(long)]
    size: Option<usize>,
    /// Colour clusters K [config: train.descriptor.clusters]
    #[arg(long)]
    clusters: Option<usize>,
    /// Histogram bins [config: train.descriptor.num_bins]
    #[arg(long)]
    bins: Option<usize>,
    /// Skip the preview PNGs.
    #[arg(long)]
    no_previews: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Image folder [config: train.dataset_root]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint and metrics folder [config: train.output_dir]
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// [config: train.total_steps]
    #[arg(long)]
    steps: Option<usize>,
    /// [config: train.warmup_steps]
    #[arg(long)]
    warmup: Option<usize>,
    /// [config: train.batch_size]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [config: train.base_lr]
    #[arg(long)]
    lr: Option<f64>,
    /// [config: train.image_size]
    #[arg(long)]
    image_size: Option<usize>,
    /// [config: train.checkpoint_every]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// [config: train.descriptor.clusters]
    #[arg(long)]
    clusters: Option<usize>,
    /// Largest per-step L jitter [config: train.augment.brightness]
    #[arg(long)]
    brightness: Option<f64>,
    /// Continue from a checkpoint; its stored config is used, except --steps.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    checkpoint: PathBuf,
    /// A .vsd bundle or an image.
    input: PathBuf,
    /// Output PNG (default: `<input stem>-recon.png`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Image to score against when the input is a bundle.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Where to write the metric report (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EditArgs {
    bundle: PathBuf,
    /// `K:A,B`: set centroid K to (A, B). Repeatable.
    #[arg(long, value_parser = parse_recolour)]
    recolour: Vec<EditOp>,
    /// Shift the histogram by this many L units, e.g. +15 or -10. Repeatable.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_shift)]
    shift_hist: Vec<EditOp>,
    /// JSON list of {op, args}; applied before the flag edits.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Linear,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReprArg {
    Global,
    MeanLocal,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    checkpoint: PathBuf,
    /// One sub-folder per class.
    data: PathBuf,
    /// [config: probe.mode]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// [config: probe.representation]
    #[arg(long, value_enum)]
    representation: Option<ReprArg>,
    /// [config: probe.epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// Head learning rate [config: probe.lr]
    #[arg(long)]
    lr: Option<f64>,
    /// [config: probe.weight_decay]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [config: probe.train_fraction]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Defaults to the checkpoint's training size [config: train.image_size]
    #[arg(long)]
    image_size: Option<usize>,
    /// Report path (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// [config: sweep.pretrain_root]
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// [config: sweep.labelled_root]
    #[arg(long)]
    labelled: Option<PathBuf>,
    /// Comma-separated cluster counts [config: sweep.ks]
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Training steps per K [config: train.total_steps]
    #[arg(long)]
    steps: Option<usize>,
    /// [config: train.image_size]
    #[arg(long)]
    image_size: Option<usize>,
    /// CSV path [config: sweep.output]
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Also TRISECT_BIND [config: serve.bind]
    #[arg(long)]
    bind: Option<String>,
    /// Also TRISECT_CHECKPOINT [config: serve.checkpoint]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Idle seconds before a session is dropped; also TRISECT_SESSION_TTL [config: serve.session_ttl]
    #[arg(long)]
    session_ttl: Option<u64>,
    /// Upload limit in bytes [config: serve.max_upload]
    #[arg(long)]
    max_upload: Option<usize>,
    /// Longer sides are downscaled to this [config: serve.max_side]
    #[arg(long)]
    max_side: Option<u32>,
}

fn parse_recolour(s: &str) -> Result<EditOp, String> {
    let (k, ab) = s.split_once(':').ok_or("expected K:A,B")?;
    let (a, b) = ab.split_once(',').ok_or("expected K:A,B")?;
    let cluster = k.trim().parse().map_err(|e| format!("cluster {k:?}: {e}"))?;
    let a: f64 = a.trim().parse().map_err(|e| format!("a {a:?}: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("b {b:?}: {e}"))?;
    Ok(EditOp::Recolour { cluster, ab: [a, b] })
}

fn parse_shift(s: &str) -> Result<EditOp, String> {
    let delta_l: f64 = s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    if !delta_l.is_finite() {
        return Err(format!("{s:?} is not finite"));
    }
    Ok(EditOp::ShiftHist { delta_l })
}

/// Runtime failures; exit code 2.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<trisect_core::Error> for Failure {
    fn from(e: trisect_core::Error) -> Self {
        Self { kind: "runtime", message: e.to_string() }
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure { kind, message: message.into() }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    fail("io", format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => return usage_exit(e),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return usage_exit(e),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if cli.json {
                eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(2)
        }
    }
}

fn usage_exit(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    let _ = e.print();
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
        _ => ExitCode::from(1),
    }
}

fn run(cli: &Cli, matches: &ArgMatches) -> Outcome {
    let mut file = FileConfig::load(cli.config.as_deref()).map_err(|m| fail("config", m))?;
    if let Some(seed) = cli.seed {
        file.train.seed = seed;
        file.train.descriptor.seed = seed;
        file.probe.seed = seed;
    }
    match &cli.command {
        Command::Extract(a) => extract(a, file),
        Command::Train(a) => train(a, file),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Edit(a) => {
            let sub = matches.subcommand_matches("edit").expect("edit subcommand");
            edit(a, sub)
        }
        Command::Probe(a) => probe_cmd(a, file),
        Command::Sweep(a) => sweep(a, file),
        Command::Serve(a) => serve(a, file),
    }
}

fn load_input(path: &Path, size: Option<usize>) -> Result<RgbImage, Failure> {
    match size {
        Some(s) => Ok(load_image(path, s)?),
        None => {
            let img = image::open(path).map_err(|e| fail("image", format!("{}: {e}", path.display())))?;
            Ok(RgbImage::from_rgb8(&img.to_rgb8(), candle_core::DType::F32)?)
        }
    }
}

fn extract(a: &ExtractArgs, mut file: FileConfig) -> Outcome {
    if a.output.is_some() && a.images.len() > 1 {
        return Err(fail("usage", "--output needs a single input; use --out-dir"));
    }
    let cfg = &mut file.train.descriptor;
    if let Some(k) = a.clusters {
        cfg.clusters = k;
    }
    if let Some(n) = a.bins {
        cfg.num_bins = n;
    }
    cfg.validate()?;
    for path in &a.images {
        let img = load_input(path, a.size)?;
        let bundle = extract_bundle(&img, cfg)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let dir = a.out_dir.clone().unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
        }
        let out = a.output.clone().unwrap_or_else(|| dir.join(format!("{stem}.vsd")));
        write_bundle(&out, &bundle)?;
        if !a.no_previews {
            let base = out.with_extension("");
            let base = base.to_string_lossy();
            edge_preview(&bundle)?.save(format!("{base}-edges.png")).map_err(trisect_core::Error::from)?;
            segmentation_preview(&bundle)?.save(format!("{base}-segments.png")).map_err(trisect_core::Error::from)?;
            histogram_preview(&bundle, 64)?.save(format!("{base}-histogram.png")).map_err(trisect_core::Error::from)?;
        }
        println!("{}", out.display());
    }
    Ok(())
}

fn train(a: &TrainArgs, file: FileConfig) -> Outcome {
    let mut state = match &a.resume {
        Some(path) => TrainState::load(path)?,
        None => {
            let mut c = file.train;
            macro_rules! set {
                ($field:expr, $v:expr) => {
                    if let Some(v) = $v.clone() {
                        $field = v;
                    }
                };
            }
            set!(c.dataset_root, a.data);
            set!(c.output_dir, a.output);
            set!(c.warmup_steps, a.warmup);
            set!(c.batch_size, a.batch_size);
            set!(c.base_lr, a.lr);
            set!(c.image_size, a.image_size);
            set!(c.checkpoint_every, a.checkpoint_every);
            set!(c.descriptor.clusters, a.clusters);
            set!(c.augment.brightness, a.brightness);
            set!(c.total_steps, a.steps);
            TrainState::new(&c)?
        }
    };
    if a.resume.is_some() {
        if let Some(s) = a.steps {
            state.config.total_steps = s;
        }
        if let Some(o) = &a.output {
            state.config.output_dir = o.clone();
        }
        state.config.validate()?;
    }
    let data = Dataset::load(&state.config)?;
    let objective = Objective::new(&state.config.loss)?;
    let dir = state.config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
    let log_path = dir.join("metrics.jsonl");
    let log = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_fail(&log_path, e))?;
    let mut log = BufWriter::new(log);
    let records = state.run(&data, &objective, Some(&mut log), |_, _| false, true)?;
    log.flush().map_err(|e| io_fail(&log_path, e))?;
    let summary = json!({
        "step": state.step,
        "steps_run": records.len(),
        "final_loss": records.last().map(|r| r.loss.total),
        "checkpoint": dir.join("final.vsck"),
        "metrics": log_path,
    });
    println!("{summary}");
    Ok(())
}

fn write_report(report: &impl serde::Serialize, path: Option<&Path>) -> Outcome {
    let text = serde_json::to_string_pretty(report).map_err(|e| fail("runtime", e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_fail(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn is_bundle(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("vsd"))
}

fn reconstruct(a: &ReconstructArgs) -> Outcome {
    let state = TrainState::load(&a.checkpoint)?;
    let (bundle, original) = if is_bundle(&a.input) {
        let bundle = read_bundle(&a.input)?;
        let reference = match &a.reference {
            Some(p) => Some(load_input(p, None)?),
            None => None,
        };
        (bundle, reference)
    } else {
        let img = load_input(&a.input, Some(state.config.image_size))?;
        (extract_bundle(&img, &state.config.descriptor)?, Some(img))
    };
    let recon = state.model.reconstruct(&bundle)?;
    let out = a.output.clone().unwrap_or_else(|| {
        let stem = a.input.file_stem().unwrap_or_default().to_string_lossy();
        a.input.with_file_name(format!("{stem}-recon.png"))
    });
    recon.to_rgb8()?.save(&out).map_err(trisect_core::Error::from)?;
    let report = match &original {
        Some(img) => MetricReport::reconstruction(img, &recon)?,
        None => MetricReport::default(),
    };
    write_report(&report, a.report.as_deref())
}

/// Flag edits in command-line order.
fn ordered_flag_edits(a: &EditArgs, m: &ArgMatches) -> Vec<EditOp> {
    let mut tagged: Vec<(usize, EditOp)> = Vec::new();
    for (id, ops) in [("recolour", &a.recolour), ("shift_hist", &a.shift_hist)] {
        if let Some(idx) = m.indices_of(id) {
            tagged.extend(idx.zip(ops.iter().cloned()));
        }
    }
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, op)| op).collect()
}

fn edit(a: &EditArgs, m: &ArgMatches) -> Outcome {
    let mut ops = match &a.script {
        Some(p) => parse_script(&std::fs::read_to_string(p).map_err(|e| io_fail(p, e))?)?,
        None => Vec::new(),
    };
    ops.extend(ordered_flag_edits(a, m));
    if ops.is_empty() {
        return Err(fail("usage", "no edits given"));
    }
    let bundle = read_bundle(&a.bundle)?;
    write_bundle(&a.output, &apply_edits(&bundle, &ops)?)?;
    println!("{}", a.output.display());
    Ok(())
}

fn probe_cmd(a: &ProbeArgs, file: FileConfig) -> Outcome {
    let state = TrainState::load(&a.checkpoint)?;
    let mut cfg = file.probe;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Linear => ProbeMode::Linear,
            ModeArg::Finetune => ProbeMode::Finetune,
        };
    }
    if let Some(r) = a.representation {
        cfg.representation = match r {
            ReprArg::Global => Representation::Global,
            ReprArg::MeanLocal => Representation::MeanLocal,
        };
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.train_fraction {
        cfg.train_fraction = v;
    }
    let size = a.image_size.unwrap_or(state.config.image_size);
    let data = LabelledImages::load(&a.data, size)?.extract(&state.config.descriptor)?;
    let report = probe(&state.model, &data, &cfg)?;
    write_report(&report, a.output.as_deref())
}

fn sweep(a: &SweepArgs, file: FileConfig) -> Outcome {
    let FileConfig { mut train, probe, sweep, .. } = file;
    if let Some(s) = a.steps {
        train.total_steps = s;
    }
    if let Some(s) = a.image_size {
        train.image_size = s;
    }
    let pretrain_root = a.pretrain.clone().or(sweep.pretrain_root).ok_or_else(|| fail("usage", "missing --pretrain"))?;
    let labelled_root = a.labelled.clone().or(sweep.labelled_root).ok_or_else(|| fail("usage", "missing --labelled"))?;
    let ks = a.ks.clone().unwrap_or(sweep.ks);
    let output = a.output.clone().unwrap_or(sweep.output);
    let pretrain = list_images(&pretrain_root)?
        .iter()
        .map(|p| load_image(p, train.image_size))
        .collect::<trisect_core::Result<Vec<_>>>()?;
    let labelled = LabelledImages::load(&labelled_root, train.image_size)?;
    let rows = sweep_clusters(&ks, &pretrain, &labelled, &SweepRecipe { train, probe })?;
    let f = File::create(&output).map_err(|e| io_fail(&output, e))?;
    write_sweep_csv(&rows, BufWriter::new(f))?;
    println!("{}", output.display());
    Ok(())
}

fn serve(a: &ServeArgs, file: FileConfig) -> Outcome {
    let mut c = ServiceConfig::from_env().map_err(|m| fail("config", m))?;
    let s = file.serve;
    if let Some(b) = a.bind.clone().or(s.bind) {
        c.bind = b.parse().map_err(|e| fail("config", format!("bind {b}: {e}")))?;
    }
    if let Some(p) = a.checkpoint.clone().or(s.checkpoint) {
        c.checkpoint = Some(p);
    }
    if let Some(t) = a.session_ttl.or(s.session_ttl) {
        c.session_ttl = Duration::from_secs(t);
    }
    if let Some(v) = a.max_upload.or(s.max_upload) {
        c.max_upload = v;
    }
    if let Some(v) = a.max_side.or(s.max_side) {
        c.max_side = v;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| fail("runtime", e.to_string()))?;
    rt.block_on(trisect_service::serve(c)).map_err(|e| fail("service", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_recolour("2:0,60").unwrap(), EditOp::Recolour { cluster: 2, ab: [0.0, 60.0] });
        assert_eq!(parse_recolour("1:-5.5, 3").unwrap(), EditOp::Recolour { cluster: 1, ab: [-5.5, 3.0] });
        assert!(parse_recolour("2:0").is_err() && parse_recolour("x:0,0").is_err());
        assert_eq!(parse_shift("+15").unwrap(), EditOp::ShiftHist { delta_l: 15.0 });
        assert_eq!(parse_shift("-7").unwrap(), EditOp::ShiftHist { delta_l: -7.0 });
        assert!(parse_shift("inf").is_err());
    }

    #[test]
    fn edit_flags_keep_their_order() {
        let argv = ["trisect", "edit", "a.vsd", "--shift-hist", "-5", "--recolour", "1:2,3", "--shift-hist", "+4", "-o", "b.vsd"];
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let Command::Edit(a) = &cli.command else { panic!("not edit") };
        let ops = ordered_flag_edits(a, m.subcommand_matches("edit").unwrap());
        assert_eq!(
            ops,
            vec![
                EditOp::ShiftHist { delta_l: -5.0 },
                EditOp::Recolour { cluster: 1, ab: [2.0, 3.0] },
                EditOp::ShiftHist { delta_l: 4.0 },
            ]
        );
    }

    #[test]
    fn help_names_config_paths() {
        let mut cmd = Cli::command();
        for sub in ["extract", "train", "probe", "sweep", "serve"] {
            let help = cmd.find_subcommand_mut(sub).unwrap().render_help().to_string();
            assert!(help.contains("[config: "), "{sub}");
        }
        Cli::command().debug_assert();
    }
}
