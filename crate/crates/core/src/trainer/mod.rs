//! Alternating training of the VAE `(θ, φ)` and the kernel generator `γ`.
//!
//! Each batch runs one ELBO step on the VAE, then one kernel-fit step on the
//! generator against the same (pre-update, detached) reconstructions. During
//! warm-up the proposed loss is the plain Gaussian `½‖x − x̂‖²`, executed by the
//! same code as the L2 baseline so the two runs agree bit for bit.

pub mod adam;
pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use config::{BatchNormSetting, DataSource, GeneratorInput, LogDetMode, LossKind, TrainConfig, KEYS};

use crate::data_io::{self, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{BlurKernel, KernelNormalization};
use crate::kernel_estimator::{
    distribution_second_moment, fit_kernel_least_squares, kernel_fit_loss, kernels_from_tensor, to_distribution,
    KernelGenerator, DEFAULT_RIDGE,
};
use crate::metrics::{self, SIGNED_RANGE};
use crate::tensor::checkpoint;
use crate::tensor::{BatchNormMode, ParamSet, Tape, Tensor, Var};
use crate::vae::{Vae, VaeConfig};
use crate::wiener_loss::{
    assemble_elbo, assemble_elbo_tape, baseline_loss, build_weight, kl_standard_normal, weighted_recon_loss,
    BaselineKind, ElboBreakdown, WienerWeight,
};

/// Checkpoint record holding the generator's output normalization (0 softmax, 1 raw).
pub const KERNEL_MODE_RECORD: &str = "meta.kernel_mode";
/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 100;
/// Spectral frequencies above this fraction of the image height form the "high" band.
pub const HIGH_BAND_FRACTION: f64 = 0.125;

// independent random streams derived from the run seed
const STREAM_INIT_VAE: u64 = 0;
const STREAM_INIT_G: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SAMPLES: u64 = 4;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// The trained networks: the VAE and the kernel generator fed by its latents.
#[derive(Clone, Debug)]
pub struct Model {
    pub vae: Vae,
    pub generator: KernelGenerator,
}

impl Model {
    pub fn new(cfg: &TrainConfig, in_channels: usize) -> Result<Self> {
        let vc = VaeConfig {
            image_size: cfg.image_size,
            in_channels,
            channels: cfg.channels.clone(),
            latent_dim: cfg.latent_dim,
            hidden: cfg.hidden,
            batchnorm: cfg.batchnorm_enabled(),
        };
        let vae = Vae::new(vc, &mut rng_stream(cfg.seed, STREAM_INIT_VAE))?;
        let generator = KernelGenerator::new(
            &mut rng_stream(cfg.seed, STREAM_INIT_G),
            cfg.latent_dim,
            cfg.kernel_size,
            cfg.g_hidden,
            cfg.kernel_mode,
        )?;
        Ok(Self { vae, generator })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mode = Tensor::scalar(match self.generator.mode() {
            KernelNormalization::Simplex => 0.0,
            KernelNormalization::Raw => 1.0,
        });
        let mut records: Vec<(&str, &Tensor)> = self.vae.named_tensors().collect();
        records.extend(self.generator.params.iter().map(|p| (p.name.as_str(), &p.value)));
        records.push((KERNEL_MODE_RECORD, &mode));
        checkpoint::save(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = checkpoint::load(path)?;
        let mut vae_entries = Vec::new();
        let mut g = ParamSet::new();
        // written last, so its absence also flags a file cut at a record boundary
        let mut mode = None;
        for r in records {
            if r.name == KERNEL_MODE_RECORD {
                if r.tensor.numel() != 1 {
                    return Err(Error::invalid("kernel mode record must be a scalar"));
                }
                mode = Some(if r.tensor.item() == 0.0 {
                    KernelNormalization::Simplex
                } else {
                    KernelNormalization::Raw
                });
            } else if r.name.starts_with("g.") {
                g.push(r.name, r.tensor, true);
            } else {
                vae_entries.push((r.name, r.tensor));
            }
        }
        let mode = mode.ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("no {KERNEL_MODE_RECORD} record; checkpoint incomplete"),
        })?;
        let vae = Vae::from_params(vae_entries)?;
        let generator = KernelGenerator::from_params(g, mode)?;
        if generator.latent_dim() != vae.config().latent_dim {
            return Err(Error::invalid("generator and VAE latent sizes differ"));
        }
        Ok(Self { vae, generator })
    }

    /// Generator kernels at the posterior means of `x`, as distributions.
    pub fn estimated_kernels(&mut self, x: &Tensor) -> Result<Vec<BlurKernel>> {
        let mu = self.vae.posterior_mean(x)?;
        let ks = self.generator.generate(&mu)?;
        match self.generator.mode() {
            KernelNormalization::Simplex => Ok(ks),
            KernelNormalization::Raw => ks.iter().map(to_distribution).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Wiener,
    Baseline,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Warmup => "warmup",
            Self::Wiener => "wiener",
            Self::Baseline => "baseline",
        })
    }
}

/// One row of `metrics.csv`. Loss columns are sample-weighted means over the
/// epoch's training batches; the last three are measured on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub recon: f64,
    pub logdet: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub g_loss: f64,
    pub mean_kernel_m2: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,recon,logdet,kl,beta,total,g_loss,mean_kernel_m2,psnr,ssim";

impl EpochMetrics {
    /// Shortest round-trip float formatting, so equal values print identically.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.recon,
            self.logdet,
            self.kl,
            self.beta,
            self.total,
            self.g_loss,
            self.mean_kernel_m2,
            self.psnr,
            self.ssim
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Scalar values of one ELBO step.
#[derive(Clone, Copy, Debug, Default)]
struct StepValues {
    recon: f64,
    logdet: f64,
    kl: f64,
    total: f64,
    g_loss: f64,
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence(m) => Error::Divergence(format!("epoch {epoch} step {step}: {m}")),
        other => other,
    }
}

pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Shapes { n, preset } => {
            data_io::gen_shapes(*n, cfg.image_size, cfg.image_size, cfg.data_seed, *preset)
        }
        DataSource::Idx { images, labels } => {
            data_io::read_idx(images, labels.as_deref(), cfg.image_size, cfg.data_seed)
        }
    }
}

/// Tape handles of one ELBO evaluation.
#[derive(Clone, Debug)]
pub struct ElboGraph {
    pub vae_vars: Vec<Var>,
    /// Generator leaves, present only when the exact log-det differentiates into them.
    pub gen_vars: Option<Vec<Var>>,
    pub z: Var,
    pub xhat: Var,
    pub recon: Var,
    pub logdet: Option<Var>,
    pub kl: Var,
    pub total: Var,
    /// Per-sample Wiener weights used by the reconstruction term (empty outside the Wiener phase).
    pub weights: Vec<WienerWeight>,
}

impl ElboGraph {
    pub fn breakdown(&self, tape: &Tape, beta: f64) -> ElboBreakdown {
        assemble_elbo(
            tape.value(self.recon).item(),
            self.logdet.map_or(0.0, |l| tape.value(l).item()),
            tape.value(self.kl).item(),
            beta,
        )
    }
}

/// Records the VAE objective for batch `x` with reparameterization noise `eps`.
///
/// In the Wiener phase the weights come from the generator's kernel values
/// (never differentiated) unless `weights` supplies them; only the exact
/// log-det carries gradient through the kernels.
pub fn elbo_graph(
    tape: &mut Tape,
    model: &mut Model,
    cfg: &TrainConfig,
    x: &Tensor,
    eps: &Tensor,
    wiener: bool,
    weights: Option<Vec<WienerWeight>>,
) -> Result<ElboGraph> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("batch must be [B, C, H, W], got {s:?}")));
    }
    let (b, channels, h, w) = (s[0], s[1], s[2], s[3]);
    let vae_vars = model.vae.params.register(tape);
    let xv = tape.constant(x.clone());
    let (mu, logvar) = model.vae.encode_moments(tape, &vae_vars, xv, BatchNormMode::Train)?;
    let z = Vae::reparameterize(tape, mu, logvar, eps)?;
    let xhat = model.vae.decode(tape, &vae_vars, z, BatchNormMode::Train)?;

    let mut gen_vars = None;
    let mut used = Vec::new();
    let (recon, logdet) = match (cfg.loss, wiener) {
        (LossKind::Proposed, true) => {
            let exact = cfg.logdet == LogDetMode::Exact;
            let gin = match cfg.g_input {
                GeneratorInput::Posterior => z,
                GeneratorInput::Prior => tape.constant(eps.clone()),
            };
            let gin = if exact { gin } else { tape.detach(gin) };
            let gv = if exact {
                model.generator.params.register(tape)
            } else {
                model.generator.params.register_frozen(tape)
            };
            let size = model.generator.size();
            let k = model.generator.forward(tape, &gv, gin)?;
            used = match weights {
                Some(ws) => ws,
                None => kernels_from_tensor(tape.value(k), size, model.generator.mode())?
                    .iter()
                    .map(|k| build_weight(k, cfg.c, h, w))
                    .collect::<Result<Vec<_>>>()?,
            };
            let wr = weighted_recon_loss(tape, xv, xhat, &used)?;
            let recon = tape.mul_scalar(wr, 0.5)?;
            let logdet = if exact {
                let ld = tape.bccb_logdet(k, size, h, w, cfg.epsilon)?;
                gen_vars = Some(gv);
                // one determinant per channel plane, batch-averaged like the other terms
                Some(tape.mul_scalar(ld, channels as f64 / b as f64)?)
            } else {
                None
            };
            (recon, logdet)
        }
        (LossKind::Proposed, false) | (LossKind::Baseline(BaselineKind::L2), _) => {
            let l = baseline_loss(tape, BaselineKind::L2, xv, xhat)?;
            (tape.mul_scalar(l, 0.5)?, None)
        }
        (LossKind::Baseline(kind), _) => (baseline_loss(tape, kind, xv, xhat)?, None),
    };
    let kl = kl_standard_normal(tape, mu, logvar)?;
    let total = assemble_elbo_tape(tape, recon, logdet, kl, cfg.beta)?;
    Ok(ElboGraph {
        vae_vars,
        gen_vars,
        z,
        xhat,
        recon,
        logdet,
        kl,
        total,
        weights: used,
    })
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: Model,
    vae_opt: Adam,
    g_opt: Adam,
    noise_rng: ChaCha8Rng,
}

impl Trainer<'_> {
    /// One `(θ, φ)` step followed by one `γ` step on the batch `x`.
    fn step(&mut self, x: &Tensor, wiener: bool) -> Result<StepValues> {
        let cfg = self.cfg;
        let eps = self.model.vae.sample_noise(&mut self.noise_rng, x.shape()[0]);
        let mut tape = Tape::new();
        let g = elbo_graph(&mut tape, &mut self.model, cfg, x, &eps, wiener, None)?;
        let parts = g.breakdown(&tape, cfg.beta);
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {parts:?}")));
        }
        tape.backward(g.total)?;
        self.model.vae.params.collect_grads(&tape, &g.vae_vars);
        self.vae_opt.step(&mut self.model.vae.params, cfg.grad_clip);
        if let Some(gv) = &g.gen_vars {
            // consumed by the generator step below
            self.model.generator.params.collect_grads(&tape, gv);
        }
        let z = g.z;
        let xhat = g.xhat;

        let zval = match cfg.g_input {
            GeneratorInput::Posterior => tape.value(z).clone(),
            GeneratorInput::Prior => eps,
        };
        let xhat_val = tape.value(xhat).clone();
        drop(tape);
        let g_loss = self.generator_step(x, xhat_val, zval)?;
        Ok(StepValues {
            recon: parts.recon,
            logdet: parts.logdet,
            kl: parts.kl,
            total: parts.total,
            g_loss,
        })
    }

    /// Fits `x ⊛ G(z) ≈ x̂` with the VAE held fixed.
    fn generator_step(&mut self, x: &Tensor, xhat: Tensor, z: Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let gvars = self.model.generator.params.register(&mut tape);
        let zv = tape.constant(z);
        let k = self.model.generator.forward(&mut tape, &gvars, zv)?;
        let xv = tape.constant(x.clone());
        let xh = tape.constant(xhat);
        let loss = kernel_fit_loss(&mut tape, xv, xh, k, self.model.generator.size())?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence("non-finite kernel-fit loss".into()));
        }
        tape.backward(loss)?;
        self.model.generator.params.collect_grads(&tape, &gvars);
        self.g_opt.step(&mut self.model.generator.params, self.cfg.grad_clip);
        Ok(value)
    }
}

/// Test-split summaries used for the per-epoch metrics row.
#[derive(Clone, Copy, Debug)]
pub struct SplitSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub kernel_m2: f64,
}

fn reconstruct_chunked(model: &mut Model, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(x.numel());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = x.slice_outer(start, (start + EVAL_CHUNK).min(n))?;
        data.extend_from_slice(model.vae.reconstruct(&chunk)?.data());
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn kernels_chunked(model: &mut Model, x: &Tensor) -> Result<Vec<BlurKernel>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = x.slice_outer(start, (start + EVAL_CHUNK).min(n))?;
        out.extend(model.estimated_kernels(&chunk)?);
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize_split(model: &mut Model, x: &Tensor) -> Result<SplitSummary> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let recon = reconstruct_chunked(model, x)?;
    let (xs, rs) = (metrics::planes(x)?, metrics::planes(&recon)?);
    let psnr = mean(
        xs.iter()
            .zip(&rs)
            .map(|(a, b)| metrics::psnr(a, b, SIGNED_RANGE))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    let ssim = mean(
        xs.iter()
            .zip(&rs)
            .map(|(a, b)| metrics::ssim(a, b, h, w))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    let m2 = mean(
        kernels_chunked(model, x)?
            .iter()
            .map(|k| k.second_moment())
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    Ok(SplitSummary {
        psnr,
        ssim,
        kernel_m2: m2,
    })
}

pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, data, out_dir, |_| {})
}

/// [`train`] with a callback after every epoch (used for progress output).
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (h, w) = data.dims();
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w} but image_size = {}",
            cfg.image_size
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config("dataset needs nonempty train and test splits".into()));
    }
    if let LossKind::Baseline(BaselineKind::Ce) = cfg.loss {
        // decoder output is tanh, so only the data can leave [-1, 1]
        let all = data.images.data();
        if all.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Domain("cross-entropy needs data in [-1, 1]".into()));
        }
    }
    let model = Model::new(cfg, data.channels())?;
    let mut t = Trainer {
        cfg,
        vae_opt: Adam::new(cfg.lr, &model.vae.params),
        g_opt: Adam::new(cfg.g_lr(), &model.generator.params),
        model,
        noise_rng: rng_stream(cfg.seed, STREAM_NOISE),
    };
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);
    let test_x = data.test_images()?;
    let bn = cfg.batchnorm_enabled();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("samples"))?;
    }

    for epoch in 1..=cfg.epochs {
        let wiener = cfg.loss == LossKind::Proposed && epoch > cfg.warmup_epochs;
        let phase = match (cfg.loss, wiener) {
            (LossKind::Proposed, false) => Phase::Warmup,
            (LossKind::Proposed, true) => Phase::Wiener,
            _ => Phase::Baseline,
        };
        let mut order = data.train.clone();
        order.shuffle(&mut shuffle_rng);
        let mut acc = StepValues::default();
        let mut seen = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            // batch statistics of a single sample are degenerate
            if bn && idx.len() < 2 {
                continue;
            }
            let x = data.batch(idx)?;
            let v = t.step(&x, wiener).map_err(|e| with_context(e, epoch, step + 1))?;
            let n = idx.len() as f64;
            acc.recon += v.recon * n;
            acc.logdet += v.logdet * n;
            acc.kl += v.kl * n;
            acc.total += v.total * n;
            acc.g_loss += v.g_loss * n;
            seen += idx.len();
        }
        let n = seen.max(1) as f64;
        let summary = summarize_split(&mut t.model, &test_x).map_err(|e| with_context(e, epoch, 0))?;
        let row = EpochMetrics {
            epoch,
            phase,
            recon: acc.recon / n,
            logdet: acc.logdet / n,
            kl: acc.kl / n,
            beta: cfg.beta,
            total: acc.total / n,
            g_loss: acc.g_loss / n,
            mean_kernel_m2: summary.kernel_m2,
            psnr: summary.psnr,
            ssim: summary.ssim,
        };
        on_epoch(&row);
        history.push(row);

        if let Some(dir) = out_dir {
            fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
            let due = (cfg.ckpt_every > 0 && epoch % cfg.ckpt_every == 0)
                || epoch == cfg.warmup_epochs
                || epoch == cfg.epochs;
            if due {
                let path = dir.join(format!("ckpt_epoch{epoch}.dbve"));
                t.model.save(&path)?;
                checkpoints.push(path);
            }
            if cfg.samples > 0 {
                write_samples(&mut t.model, &test_x, cfg, &dir.join("samples"), epoch)?;
            }
        }
    }
    Ok(TrainOutcome {
        model: t.model,
        history,
        checkpoints,
    })
}

/// Prior samples (the same latents every epoch) and a test-set
/// original/reconstruction pair grid.
fn write_samples(model: &mut Model, test_x: &Tensor, cfg: &TrainConfig, dir: &Path, epoch: usize) -> Result<()> {
    let (h, w) = (test_x.shape()[2], test_x.shape()[3]);
    let n = cfg.samples;
    let cols = (n as f64).sqrt().ceil() as usize;
    let gen = model.vae.generate(n, &mut rng_stream(cfg.seed, STREAM_SAMPLES))?;
    let gp = metrics::planes(&gen)?;
    data_io::pgm_write_grid(&dir.join(format!("epoch{epoch:03}_generated.pgm")), &gp, h, w, cols)?;
    let m = n.min(test_x.shape()[0]);
    let originals = test_x.slice_outer(0, m)?;
    let recon = model.vae.reconstruct(&originals)?;
    let mut pair: Vec<&[f64]> = metrics::planes(&originals)?;
    pair.extend(metrics::planes(&recon)?);
    data_io::pgm_write_grid(&dir.join(format!("epoch{epoch:03}_recon.pgm")), &pair, h, w, m.max(1))?;
    Ok(())
}

/// Per-image test-split evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Second moment of the generator's kernel at the posterior mean.
    pub kernel_m2: f64,
    /// Second moment of the least-squares kernel mapping `x` to `x̂`,
    /// projected to a distribution; `NaN` when the fit is singular.
    pub fitted_m2: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub psnr: f64,
    pub ssim: f64,
    pub kernel_m2: f64,
    pub fitted_m2: f64,
    /// Mean absolute gap of `log(1 + |F|)` between reconstructions and originals.
    pub spectrum_gap: f64,
    /// The same gap over frequencies with radius above an eighth of the height.
    pub spectrum_gap_high: f64,
    pub reconstructions: Tensor,
}

pub const EVAL_HEADER: &str = "index,psnr,ssim,kernel_m2,fitted_m2";

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.index, r.psnr, r.ssim, r.kernel_m2, r.fitted_m2
            ));
        }
        s
    }
}

pub fn evaluate(model: &mut Model, data: &Dataset) -> Result<EvalReport> {
    let (h, w) = data.dims();
    let vc = model.vae.config();
    if h != vc.image_size || w != vc.image_size || data.channels() != vc.in_channels {
        return Err(Error::shape(
            &[data.channels(), h, w],
            &[vc.in_channels, vc.image_size, vc.image_size],
        ));
    }
    if data.test.is_empty() {
        return Err(Error::invalid("dataset has an empty test split"));
    }
    let x = data.test_images()?;
    let recon = reconstruct_chunked(model, &x)?;
    let kernels = kernels_chunked(model, &x)?;
    let (xs, rs) = (metrics::planes(&x)?, metrics::planes(&recon)?);
    let per_image = xs.len() / data.test.len();
    let size = model.generator.size();
    let mut rows = Vec::with_capacity(data.test.len());
    for (i, &index) in data.test.iter().enumerate() {
        let (mut psnr, mut ssim, mut fitted, mut fitted_n) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..per_image {
            let (a, b) = (xs[i * per_image + c], rs[i * per_image + c]);
            psnr += metrics::psnr(a, b, SIGNED_RANGE)?;
            ssim += metrics::ssim(a, b, h, w)?;
            match fit_kernel_least_squares(a, b, h, w, size, DEFAULT_RIDGE) {
                Ok(k) => {
                    // a fit with no positive tap has no distribution view
                    if let Some(m2) = distribution_second_moment(&k)? {
                        fitted += m2;
                        fitted_n += 1;
                    }
                }
                Err(Error::Singular(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let c = per_image as f64;
        rows.push(EvalRow {
            index,
            psnr: psnr / c,
            ssim: ssim / c,
            kernel_m2: kernels[i].second_moment()?,
            fitted_m2: if fitted_n > 0 {
                fitted / fitted_n as f64
            } else {
                f64::NAN
            },
        });
    }
    let spectrum_gap = metrics::spectrum_gap(&rs, &xs, h, w)?;
    let spectrum_gap_high = metrics::spectrum_gap_band(&rs, &xs, h, w, Some(h as f64 * HIGH_BAND_FRACTION))?;
    Ok(EvalReport {
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        kernel_m2: mean(rows.iter().map(|r| r.kernel_m2)),
        fitted_m2: mean(rows.iter().map(|r| r.fitted_m2).filter(|v| v.is_finite())),
        rows,
        spectrum_gap,
        spectrum_gap_high,
        reconstructions: recon,
    })
}
