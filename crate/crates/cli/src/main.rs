//! `spagan`: synthesize data, train, run inference, score predictions and
//! export attention heatmaps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use spagan_core::attention_net::{AttentionMap, Generator, ParamTree};
use spagan_core::data::{self, load_rice_layout, write_synthetic_dataset, ImageU8};
use spagan_core::export::render_heatmap;
use spagan_core::losses::AttentionNorm;
use spagan_core::metrics::{EvalReport, SsimMode};
use spagan_core::numerics::NumericMode;
use spagan_core::trainer::{load_checkpoint, run_training, RunOptions, TrainConfig, Trainer};
use spagan_core::Error;

#[derive(Parser, Debug)]
#[command(name = "spagan", version, about = "Thin-cloud removal with a spatial-attention GAN")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Also log per-step details.
    #[arg(short, long, global = true, conflicts_with = "quiet")]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset in the RICE layout.
    Synth(SynthArgs),
    /// Train on a RICE-layout dataset.
    Train(TrainArgs),
    /// Remove clouds from PNG images with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions against ground truth (PSNR / SSIM).
    Eval(EvalArgs),
    /// Export only the four attention heatmaps per image.
    Attention(AttentionArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SsimArg {
    Windowed,
    Global,
}

impl From<SsimArg> for SsimMode {
    fn from(a: SsimArg) -> Self {
        match a {
            SsimArg::Windowed => SsimMode::Windowed,
            SsimArg::Global => SsimMode::Global,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttNormArg {
    /// Mean squared error averaged over all four maps.
    Mean,
    /// Squared Frobenius norm of the last map only.
    Last,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root with cloud/ and label/ (and optionally mask/).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Start from the desk-scale preset (crop 64, widths 8/8).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    w_adv: Option<f64>,
    #[arg(long)]
    w_l1: Option<f64>,
    #[arg(long)]
    w_att: Option<f64>,
    /// Generator base width.
    #[arg(long)]
    width: Option<usize>,
    /// Discriminator base width.
    #[arg(long)]
    disc_width: Option<usize>,
    #[arg(long, value_enum)]
    attention_norm: Option<AttNormArg>,
    #[arg(long, value_enum)]
    ssim: Option<SsimArg>,
    /// Also evaluate every N steps (0: epoch ends only).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Number of training pairs; the rest form the test split. Defaults to
    /// four fifths of the dataset.
    #[arg(long)]
    train_count: Option<usize>,
    /// Shuffle ids with this seed before splitting instead of taking them in
    /// sorted order.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Stop (and checkpoint) once this many steps have been taken in total.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from <out>/ckpt_last.
    #[arg(long)]
    resume: bool,
    /// Parallel kernels; results are bit-identical to the default.
    #[arg(long)]
    fast: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<name>_att1.png` .. `<name>_att4.png` heatmaps here.
    #[arg(long)]
    attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "windowed")]
    ssim: SsimArg,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .init();

    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Attention(a) => attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    info!("synth out={} count={} size={} seed={}", a.out.display(), a.count, a.size, a.seed);
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    write_synthetic_dataset(&a.out, a.count, a.size, a.seed)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> TrainConfig {
    let mut c = if a.desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.minibatch {
        c.minibatch = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.crop {
        c.crop = v;
    }
    if let Some(v) = a.w_adv {
        c.weights.adv = v;
    }
    if let Some(v) = a.w_l1 {
        c.weights.l1 = v;
    }
    if let Some(v) = a.w_att {
        c.weights.att = v;
    }
    if let Some(v) = a.width {
        c.gen_width = v;
    }
    if let Some(v) = a.disc_width {
        c.disc_width = v;
    }
    if let Some(v) = a.attention_norm {
        c.attention_norm = match v {
            AttNormArg::Mean => AttentionNorm::MeanOverMaps,
            AttNormArg::Last => AttentionNorm::LastMapFrobenius,
        };
    }
    if let Some(v) = a.ssim {
        c.ssim_mode = v.into();
    }
    if let Some(v) = a.eval_every {
        c.eval_every = v;
    }
    if a.fast {
        c.mode = NumericMode::Fast;
    }
    c
}

fn train(a: TrainArgs) -> CliResult<()> {
    let index = load_rice_layout(&a.data)?;
    let n_train = a.train_count.unwrap_or_else(|| data::default_train_count(index.len()));
    let split = match a.split_seed {
        Some(s) => index.shuffled_split(n_train, s)?,
        None => index.split(n_train)?,
    };
    info!(
        "data {}: {} pairs, {} train / {} test",
        a.data.display(),
        index.len(),
        split.train.len(),
        split.test.len()
    );

    let opts = RunOptions {
        out_dir: a.out.clone(),
        max_steps: a.max_steps,
    };
    let mut trainer = if a.resume {
        let ckpt = load_checkpoint(&opts.last_checkpoint())?;
        let stored = ckpt.config.clone();
        let mut t = Trainer::from_checkpoint(ckpt)?;
        let overridden = a.lr.is_some()
            || a.minibatch.is_some()
            || a.seed.is_some()
            || a.crop.is_some()
            || a.w_adv.is_some()
            || a.w_l1.is_some()
            || a.w_att.is_some()
            || a.width.is_some()
            || a.disc_width.is_some()
            || a.attention_norm.is_some()
            || a.desk;
        if overridden {
            warn!("resuming keeps the checkpoint configuration; only --epochs and --eval-every apply");
        }
        t.set_schedule(
            a.epochs.unwrap_or(stored.epochs),
            a.eval_every.unwrap_or(stored.eval_every),
        )?;
        info!("resuming from step {}", t.state().step);
        t
    } else {
        let cfg = resolve_config(&a);
        cfg.validate()?;
        Trainer::new(cfg)?
    };
    info!("resolved config: {}", trainer.config().banner());

    let train_src = index.source(split.train);
    let test_src = index.source(split.test);
    let summary = run_training(&mut trainer, &train_src, &test_src, &opts, &mut |e| {
        let eval = match e.eval {
            Some((p, s)) => format!(" test psnr {p} ssim {s:.6}"),
            None => String::new(),
        };
        println!(
            "epoch {} step {}: adv_g {:.6} adv_d {:.6} l1 {:.6} att {:.6} total_g {:.6}{eval}",
            e.epoch, e.step, e.mean.adv_g, e.mean.adv_d, e.mean.l1, e.mean.att, e.mean.total_g
        );
    })?;
    let best = summary
        .best_psnr
        .map_or("n/a".to_string(), |b| format!("{b:.6}"));
    println!(
        "{} after {} steps; best test psnr {best}",
        if summary.stopped_early { "stopped" } else { "finished" },
        summary.steps
    );
    Ok(())
}

fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_dir() {
        let files = png_files(path)?;
        if files.is_empty() {
            return Err(Failure::Data(format!("no PNG files in {}", path.display())));
        }
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Failure::Data(format!("{} does not exist", path.display())))
    }
}

fn load_model(ckpt: &Path) -> CliResult<(Generator, ParamTree)> {
    let c = load_checkpoint(ckpt)?;
    info!("checkpoint {} at step {}: {}", ckpt.display(), c.state.step, c.config.banner());
    let gen = Generator::new(c.config.generator_config())?;
    Ok((gen, c.state.generator))
}

/// Build a directory in a temporary sibling and rename it into place, so a
/// failure never leaves a half-written `out`.
fn staged<F>(out: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    if out.exists() {
        return Err(Failure::Data(format!("{} already exists", out.display())));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::Builder::new().prefix(".spagan-").tempdir_in(&parent)?;
    fill(tmp.path())?;
    let kept = tmp.keep();
    fs::rename(&kept, out).inspect_err(|_| {
        let _ = fs::remove_dir_all(&kept);
    })?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn write_heatmaps(dir: &Path, name: &str, maps: &[AttentionMap]) -> CliResult<()> {
    for (k, m) in maps.iter().enumerate() {
        render_heatmap(m).save_png(&dir.join(format!("{name}_att{}.png", k + 1)))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> CliResult<()> {
    info!(
        "infer ckpt={} in={} out={} attention={}",
        a.ckpt.display(),
        a.input.display(),
        a.out.display(),
        a.attention.as_ref().map_or("none".into(), |p| p.display().to_string())
    );
    let (gen, params) = load_model(&a.ckpt)?;
    let files = inputs(&a.input)?;
    if a.attention.as_ref().is_some_and(|p| p.exists()) {
        return Err(Failure::Data("attention directory already exists".into()));
    }
    let mut all_maps = Vec::with_capacity(files.len());
    staged(&a.out, |tmp| {
        for f in &files {
            let img = ImageU8::load_png(f)?;
            let (out, maps) = gen.infer(&params, &data::to_tensor(&img), NumericMode::Fast)?;
            let name = f.file_name().expect("listed files have names");
            data::from_tensor(&out)?.save_png(&tmp.join(name))?;
            all_maps.push(maps);
            info!("{} done", f.display());
        }
        Ok(())
    })?;
    if let Some(att) = &a.attention {
        staged(att, |tmp| {
            for (f, maps) in files.iter().zip(&all_maps) {
                write_heatmaps(tmp, &stem(f), maps)?;
            }
            Ok(())
        })?;
    }
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn attention(a: AttentionArgs) -> CliResult<()> {
    info!(
        "attention ckpt={} in={} out={}",
        a.ckpt.display(),
        a.input.display(),
        a.out.display()
    );
    let (gen, params) = load_model(&a.ckpt)?;
    let files = inputs(&a.input)?;
    staged(&a.out, |tmp| {
        for f in &files {
            let img = ImageU8::load_png(f)?;
            let (_, maps) = gen.infer(&params, &data::to_tensor(&img), NumericMode::Fast)?;
            write_heatmaps(tmp, &stem(f), &maps)?;
        }
        Ok(())
    })?;
    println!("wrote {} heatmaps to {}", 4 * files.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mode: SsimMode = a.ssim.into();
    info!(
        "eval pred={} gt={} csv={} ssim={mode}",
        a.pred.display(),
        a.gt.display(),
        a.csv.as_ref().map_or("none".into(), |p| p.display().to_string())
    );
    let names = |dir: &Path| -> CliResult<BTreeSet<String>> {
        Ok(png_files(dir)?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let (pred, gt) = (names(&a.pred)?, names(&a.gt)?);
    if let Some(odd) = pred.symmetric_difference(&gt).next() {
        let side = if pred.contains(odd) { "ground truth" } else { "predictions" };
        return Err(Failure::Data(format!("{odd} has no counterpart in the {side}")));
    }
    if pred.is_empty() {
        return Err(Failure::Data("no PNG files to evaluate".into()));
    }
    let mut triples = Vec::with_capacity(pred.len());
    for name in &pred {
        let p = ImageU8::load_png(&a.pred.join(name))?;
        let g = ImageU8::load_png(&a.gt.join(name))?;
        if !p.same_size(&g) {
            return Err(Failure::Data(format!("{name}: prediction and ground truth sizes differ")));
        }
        triples.push((stem(Path::new(name)), p, g));
    }
    let report = EvalReport::compute(&triples, mode)?;
    print!("{}", report.to_text());
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    Ok(())
}
