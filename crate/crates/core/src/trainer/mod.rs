//! Alternating discriminator/generator optimization, evaluation and the
//! epoch loop with checkpointing.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    load_checkpoint, load_generator_params, save_checkpoint, Checkpoint, FORMAT_VERSION,
};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention_net::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamTree,
    MIN_GENERATOR_SIZE,
};
use crate::data::{self, random_crop, Sample, SampleSource};
use crate::losses::{self, AttentionNorm, LossBreakdown, LossWeights};
use crate::metrics::{EvalReport, Psnr, SsimMode};
use crate::numerics::{Graph, NumericMode, Tensor};
use crate::{Error, Result};

/// Stream of the training RNG used for crop offsets.
const CROP_STREAM: u64 = 1;
/// Epoch `e` shuffles with stream `ORDER_STREAM + e`.
const ORDER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub crop: usize,
    pub weights: LossWeights,
    pub attention_norm: AttentionNorm,
    pub mask_threshold: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates at epoch ends only.
    pub eval_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gen_width: usize,
    pub disc_width: usize,
    pub mode: NumericMode,
    pub ssim_mode: SsimMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0004,
            minibatch: 1,
            epochs: 200,
            crop: 256,
            weights: LossWeights::default(),
            attention_norm: AttentionNorm::default(),
            mask_threshold: data::DEFAULT_MASK_THRESHOLD,
            seed: 0,
            eval_every: 0,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            gen_width: GeneratorConfig::default().base_width,
            disc_width: DiscriminatorConfig::default().base_width(),
            mode: NumericMode::Exact,
            ssim_mode: SsimMode::default(),
        }
    }
}

fn mode_name(m: NumericMode) -> &'static str {
    match m {
        NumericMode::Exact => "exact",
        NumericMode::Fast => "fast",
    }
}

fn norm_name(n: AttentionNorm) -> &'static str {
    match n {
        AttentionNorm::MeanOverMaps => "mean_over_maps",
        AttentionNorm::LastMapFrobenius => "last_map_frobenius",
    }
}

impl TrainConfig {
    /// Small crops and narrow networks for single-CPU runs.
    pub fn desk() -> Self {
        TrainConfig {
            crop: 64,
            gen_width: 8,
            disc_width: 8,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::with_width(self.gen_width)
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::with_base_width(self.disc_width)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.minibatch == 0 {
            return Err(Error::InvalidArgument("minibatch must be >= 1".into()));
        }
        if self.crop < MIN_GENERATOR_SIZE {
            return Err(Error::InvalidArgument(format!(
                "crop must be >= {MIN_GENERATOR_SIZE}, got {}",
                self.crop
            )));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::InvalidArgument("mask threshold must lie in (0, 1)".into()));
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()
    }

    /// `key=value` pairs as echoed in logs and checkpoint manifests.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("minibatch", self.minibatch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("crop", self.crop.to_string()),
            ("w_adv", w.adv.to_string()),
            ("w_l1", w.l1.to_string()),
            ("w_att", w.att.to_string()),
            (
                "w_channel",
                format!("{},{},{}", w.channel[0], w.channel[1], w.channel[2]),
            ),
            ("attention_norm", norm_name(self.attention_norm).into()),
            ("mask_threshold", self.mask_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("gen_width", self.gen_width.to_string()),
            ("disc_width", self.disc_width.to_string()),
            ("mode", mode_name(self.mode).into()),
            ("ssim_mode", self.ssim_mode.to_string()),
        ]
    }

    /// Inverse of [`TrainConfig::to_pairs`]; absent keys keep defaults.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("bad config value {k}={v}")))
        }
        let mut c = TrainConfig::default();
        for (k, v) in pairs {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "learning_rate" => c.learning_rate = num(k, v)?,
                "minibatch" => c.minibatch = num(k, v)?,
                "epochs" => c.epochs = num(k, v)?,
                "crop" => c.crop = num(k, v)?,
                "w_adv" => c.weights.adv = num(k, v)?,
                "w_l1" => c.weights.l1 = num(k, v)?,
                "w_att" => c.weights.att = num(k, v)?,
                "w_channel" => {
                    let parts = v
                        .split(',')
                        .map(|p| num(k, p))
                        .collect::<Result<Vec<f64>>>()?;
                    c.weights.channel = parts
                        .try_into()
                        .map_err(|_| Error::Checkpoint(format!("bad config value {k}={v}")))?;
                }
                "attention_norm" => {
                    c.attention_norm = match v {
                        "mean_over_maps" => AttentionNorm::MeanOverMaps,
                        "last_map_frobenius" => AttentionNorm::LastMapFrobenius,
                        _ => return Err(Error::Checkpoint(format!("bad config value {k}={v}"))),
                    }
                }
                "mask_threshold" => c.mask_threshold = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "eval_every" => c.eval_every = num(k, v)?,
                "beta1" => c.beta1 = num(k, v)?,
                "beta2" => c.beta2 = num(k, v)?,
                "eps" => c.eps = num(k, v)?,
                "gen_width" => c.gen_width = num(k, v)?,
                "disc_width" => c.disc_width = num(k, v)?,
                "mode" => {
                    c.mode = match v {
                        "exact" => NumericMode::Exact,
                        "fast" => NumericMode::Fast,
                        _ => return Err(Error::Checkpoint(format!("bad config value {k}={v}"))),
                    }
                }
                "ssim_mode" => {
                    c.ssim_mode = match v {
                        "global" => SsimMode::Global,
                        "windowed" => SsimMode::Windowed,
                        _ => return Err(Error::Checkpoint(format!("bad config value {k}={v}"))),
                    }
                }
                other => return Err(Error::Checkpoint(format!("unknown config key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// One-line `key=value ...` banner.
    pub fn banner(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// All mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: ParamTree,
    pub discriminator: ParamTree,
    pub opt_g: OptimizerState,
    pub opt_d: OptimizerState,
    /// Completed optimization steps.
    pub step: u64,
    /// Crop offsets are drawn from this stream.
    pub rng: ChaCha8Rng,
    pub best_psnr: Option<f64>,
}

impl TrainState {
    /// Fresh parameters and optimizer state from `config.seed`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config())?.init_params(config.seed);
        let discriminator =
            Discriminator::new(config.discriminator_config())?.init_params(config.seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(CROP_STREAM);
        Ok(TrainState {
            opt_g: OptimizerState::new(&generator),
            opt_d: OptimizerState::new(&discriminator),
            generator,
            discriminator,
            step: 0,
            rng,
            best_psnr: None,
        })
    }
}

/// Network-ready tensors of one sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Cloudy image, `(3, H, W)` in `[0, 1]`.
    pub input: Tensor,
    /// Cloudless image, `(3, H, W)`.
    pub target: Tensor,
    /// Cloud mask, `(1, H, W)` of zeros and ones.
    pub mask: Tensor,
}

impl Prepared {
    pub fn from_sample(sample: &Sample, mask_threshold: f64) -> Result<Self> {
        Ok(Prepared {
            input: data::to_tensor(&sample.cloudy),
            target: data::to_tensor(&sample.cloudless),
            mask: sample.mask_or_computed(mask_threshold)?.to_tensor(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub elapsed: Duration,
}

fn non_finite(tensor: impl Into<String>) -> Error {
    Error::NonFinite {
        tensor: tensor.into(),
    }
}

fn check_value(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(non_finite(name))
    }
}

fn check_tree(kind: &str, tree: &ParamTree) -> Result<()> {
    match tree.first_non_finite() {
        Some(name) => Err(non_finite(format!("{kind} {name}"))),
        None => Ok(()),
    }
}

fn accumulate(acc: &mut Option<ParamTree>, g: ParamTree) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (name, t) in a.iter_mut() {
                let other = g.get(name).expect("gradient trees share names");
                for (x, y) in t.data_mut().iter_mut().zip(other.data()) {
                    *x += y;
                }
            }
        }
    }
}

fn averaged(acc: Option<ParamTree>, n: usize) -> ParamTree {
    let mut tree = acc.expect("batch is non-empty");
    if n > 1 {
        let k = 1.0 / n as f64;
        for (_, t) in tree.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    tree
}

/// Generator pass kept alive between the two updates.
struct Forward {
    graph: Graph,
    params: crate::numerics::BoundParams,
    input: crate::numerics::Var,
    target: crate::numerics::Var,
    mask: crate::numerics::Var,
    out: crate::attention_net::GeneratorOutput,
}

/// Owns the networks, configuration and state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let state = TrainState::init(&config)?;
        Self::with_state(config, state)
    }

    pub fn with_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config())?;
        let discriminator = Discriminator::new(config.discriminator_config())?;
        generator.init_params(0).check_mirrors(&state.generator)?;
        discriminator.init_params(0).check_mirrors(&state.discriminator)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Self::with_state(ckpt.config, ckpt.state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Replace run-length settings (epochs, evaluation cadence) on resume.
    pub fn set_schedule(&mut self, epochs: usize, eval_every: u64) -> Result<()> {
        if epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        self.config.epochs = epochs;
        self.config.eval_every = eval_every;
        Ok(())
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.state)
    }

    /// Random crop (from the training stream) and tensor conversion.
    pub fn prepare(&mut self, sample: &Sample) -> Result<Prepared> {
        let side = sample.cloudy.width().min(sample.cloudy.height());
        let crop = self.config.crop.min(side);
        let cropped = random_crop(sample, crop, &mut self.state.rng)?;
        Prepared::from_sample(&cropped, self.config.mask_threshold)
    }

    fn forward(&self, p: &Prepared) -> Result<Forward> {
        let mut graph = Graph::with_mode(self.config.mode);
        let params = graph.bind(&self.state.generator, true);
        let input = graph.constant(p.input.clone());
        let target = graph.constant(p.target.clone());
        let mask = graph.constant(p.mask.clone());
        let out = self.generator.forward(&mut graph, &params, &input)?;
        if !out.output.value().is_finite() {
            return Err(non_finite("generator output"));
        }
        Ok(Forward {
            graph,
            params,
            input,
            target,
            mask,
            out,
        })
    }

    /// Update the discriminator on real and detached fake pairs.
    fn discriminator_update(&mut self, fwd: &[Forward]) -> Result<f64> {
        let mut acc = None;
        let mut loss_sum = 0.0;
        for f in fwd {
            let mut g = Graph::with_mode(self.config.mode);
            let dp = g.bind(&self.state.discriminator, true);
            let x = g.constant(f.input.value().clone());
            let y = g.constant(f.target.value().clone());
            let fake = g.constant(f.out.output.value().clone());
            let real_logits = self.discriminator.forward(&mut g, &dp, &x, &y)?;
            let fake_logits = self.discriminator.forward(&mut g, &dp, &x, &fake)?;
            let loss = losses::discriminator_loss(&mut g, &real_logits, &fake_logits)?;
            loss_sum += check_value("adv_d loss", loss.item()?)?;
            accumulate(&mut acc, g.backward(&loss)?.collect(&dp));
        }
        let grads = averaged(acc, fwd.len());
        check_tree("gradient of", &grads)?;
        adam_step(
            &mut self.state.discriminator,
            &grads,
            &mut self.state.opt_d,
            &self.config.adam(),
        )?;
        check_tree("parameter", &self.state.discriminator)?;
        Ok(loss_sum / fwd.len() as f64)
    }

    /// Update the generator against the (already updated) discriminator.
    fn generator_update(&mut self, fwd: Vec<Forward>) -> Result<LossBreakdown> {
        let n = fwd.len();
        let mut acc = None;
        let mut sums = LossBreakdown::default();
        let w = self.config.weights.clone();
        for mut f in fwd {
            let g = &mut f.graph;
            let dp = g.bind(&self.state.discriminator, false);
            let logits = self.discriminator.forward(g, &dp, &f.input, &f.out.output)?;
            let adv = losses::generator_adversarial_loss(g, &logits);
            let l1 = losses::l1_loss(g, &f.out.output, &f.target, &w.channel)?;
            let att = losses::attention_loss(g, &f.out.maps, &f.mask, self.config.attention_norm)?;
            let total = losses::weighted_total(g, &adv, &l1, &att, &w)?;
            sums.adv_g += check_value("adv_g loss", adv.item()?)?;
            sums.l1 += check_value("l1 loss", l1.item()?)?;
            sums.att += check_value("attention loss", att.item()?)?;
            sums.total_g += check_value("total_g loss", total.item()?)?;
            accumulate(&mut acc, g.backward(&total)?.collect(&f.params));
        }
        let grads = averaged(acc, n);
        check_tree("gradient of", &grads)?;
        adam_step(
            &mut self.state.generator,
            &grads,
            &mut self.state.opt_g,
            &self.config.adam(),
        )?;
        check_tree("parameter", &self.state.generator)?;
        let k = n as f64;
        Ok(LossBreakdown {
            adv_g: sums.adv_g / k,
            adv_d: 0.0,
            l1: sums.l1 / k,
            att: sums.att / k,
            total_g: sums.total_g / k,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[Prepared]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let start = Instant::now();
        let fwd = batch
            .iter()
            .map(|p| self.forward(p))
            .collect::<Result<Vec<_>>>()?;
        let adv_d = self.discriminator_update(&fwd)?;
        let mut losses = self.generator_update(fwd)?;
        losses.adv_d = adv_d;
        self.state.step += 1;
        Ok(StepReport {
            losses,
            elapsed: start.elapsed(),
        })
    }

    /// Full-resolution scores of the current generator.
    pub fn evaluate(&self, source: &dyn SampleSource) -> Result<EvalReport> {
        evaluate(
            &self.generator,
            &self.state.generator,
            source,
            self.config.mode,
            self.config.ssim_mode,
        )
    }
}

/// Run `params` over every sample at full size and score against ground
/// truth.
pub fn evaluate(
    generator: &Generator,
    params: &ParamTree,
    source: &dyn SampleSource,
    mode: NumericMode,
    ssim_mode: SsimMode,
) -> Result<EvalReport> {
    if source.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut triples = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let s = source.get(i)?;
        let (out, _) = generator.infer(params, &data::to_tensor(&s.cloudy), mode)?;
        triples.push((s.id, data::from_tensor(&out)?, s.cloudless));
    }
    EvalReport::compute(&triples, ssim_mode)
}

/// Output locations and early stop for [`run_training`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stop once this many total steps have completed.
    pub max_steps: Option<u64>,
}

impl RunOptions {
    pub fn last_checkpoint(&self) -> PathBuf {
        self.out_dir.join("ckpt_last")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join("ckpt_best")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn eval_log(&self) -> PathBuf {
        self.out_dir.join("eval.csv")
    }
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    /// 1-based epoch number.
    pub epoch: u64,
    pub step: u64,
    /// Mean losses over the steps of this epoch run in this process.
    pub mean: LossBreakdown,
    pub eval: Option<(Psnr, f64)>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
    pub best_psnr: Option<f64>,
    pub stopped_early: bool,
}

pub const METRICS_HEADER: &str = "step,adv_g,adv_d,l1,att,total_g";

/// Deterministic visiting order of the training set in `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORDER_STREAM.wrapping_add(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Keep the header and rows up to `step`, so a resumed run does not
/// duplicate rows written after its checkpoint.
fn trim_log(path: &Path, header: &str, step: u64) -> Result<fs::File> {
    let mut keep = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if row_step.is_some_and(|s| s <= step) {
                keep += line;
                keep.push('\n');
            }
        }
    }
    fs::write(path, keep)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Train for `config.epochs` epochs over `train`, evaluating on `test`.
///
/// Writes `metrics.csv`, `eval.csv`, `ckpt_last` (each epoch end and on an
/// early stop) and `ckpt_best` (best mean test PSNR) under `opts.out_dir`.
/// Resuming is a matter of building the trainer from `ckpt_last`.
pub fn run_training(
    trainer: &mut Trainer,
    train: &dyn SampleSource,
    test: &dyn SampleSource,
    opts: &RunOptions,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<RunSummary> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let cfg = trainer.config().clone();
    let n = train.len();
    let b = cfg.minibatch.min(n);
    let steps_per_epoch = n.div_ceil(b) as u64;
    let total = cfg.epochs as u64 * steps_per_epoch;
    log::info!("config {}", cfg.banner());
    log::info!("{n} training samples, {steps_per_epoch} steps per epoch, {total} steps");

    let start_step = trainer.state().step;
    let mut metrics = trim_log(&opts.metrics_log(), METRICS_HEADER, start_step)?;
    let mut eval_log = trim_log(&opts.eval_log(), "step,psnr_db,ssim", start_step)?;
    let mut summary = RunSummary {
        steps: start_step,
        epochs: Vec::new(),
        best_psnr: trainer.state().best_psnr,
        stopped_early: false,
    };
    let mut epoch_sum = LossBreakdown::default();
    let mut epoch_steps = 0u64;

    let evaluate_now = |trainer: &mut Trainer, eval_log: &mut fs::File| -> Result<Option<(Psnr, f64)>> {
        if test.is_empty() {
            return Ok(None);
        }
        let report = trainer.evaluate(test)?;
        let (psnr, ssim) = (report.mean_psnr(), report.mean_ssim());
        let step = trainer.state().step;
        writeln!(eval_log, "{step},{psnr},{ssim:.6}")?;
        let better = trainer.state().best_psnr.is_none_or(|b| psnr.value() > b);
        if better {
            trainer.state_mut().best_psnr = Some(psnr.value());
            trainer.save(&opts.best_checkpoint())?;
        }
        Ok(Some((psnr, ssim)))
    };

    while trainer.state().step < total {
        if opts.max_steps.is_some_and(|m| trainer.state().step >= m) {
            trainer.save(&opts.last_checkpoint())?;
            summary.stopped_early = true;
            break;
        }
        let step = trainer.state().step;
        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        let order = epoch_order(cfg.seed, epoch, n);
        let ids = &order[pos * b..((pos + 1) * b).min(n)];
        let mut batch = Vec::with_capacity(ids.len());
        for &i in ids {
            let sample = train.get(i)?;
            batch.push(trainer.prepare(&sample)?);
        }
        let report = trainer.train_step(&batch)?;
        let l = report.losses;
        let step = trainer.state().step;
        writeln!(
            metrics,
            "{step},{},{},{},{},{}",
            l.adv_g, l.adv_d, l.l1, l.att, l.total_g
        )?;
        log::debug!("step {step}: {l:?} in {:?}", report.elapsed);
        epoch_sum.adv_g += l.adv_g;
        epoch_sum.adv_d += l.adv_d;
        epoch_sum.l1 += l.l1;
        epoch_sum.att += l.att;
        epoch_sum.total_g += l.total_g;
        epoch_steps += 1;

        let epoch_end = step.is_multiple_of(steps_per_epoch);
        let mut eval = None;
        if epoch_end || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every)) {
            eval = evaluate_now(trainer, &mut eval_log)?;
        }
        if epoch_end {
            trainer.save(&opts.last_checkpoint())?;
            let k = epoch_steps.max(1) as f64;
            let es = EpochSummary {
                epoch: step / steps_per_epoch,
                step,
                mean: LossBreakdown {
                    adv_g: epoch_sum.adv_g / k,
                    adv_d: epoch_sum.adv_d / k,
                    l1: epoch_sum.l1 / k,
                    att: epoch_sum.att / k,
                    total_g: epoch_sum.total_g / k,
                },
                eval,
            };
            log::info!("epoch {} done at step {step}", es.epoch);
            on_epoch(&es);
            summary.epochs.push(es);
            epoch_sum = LossBreakdown::default();
            epoch_steps = 0;
        }
    }
    metrics.flush()?;
    summary.steps = trainer.state().step;
    summary.best_psnr = trainer.state().best_psnr;
    Ok(summary)
}
