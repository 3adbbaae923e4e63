//! The `deblur` command line: training, ablation grids and artifact emission.
//!
//! Every command writes a `manifest.cfg` into its output directory recording
//! the fully resolved inputs; `train` manifests are themselves valid configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::data_io::{self, Dataset, ShapePreset};
use crate::error::{Error, Result};
use crate::kernel::BlurKernel;
use crate::kernel_estimator::{distribution_second_moment, fit_kernel_least_squares, DEFAULT_RIDGE};
use crate::metrics;
use crate::trainer::{self, Model, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;
/// Upper bound on the number of runs in one ablation grid.
pub const MAX_GRID: usize = 64;
pub const SEED_ENV: &str = "DEBLUR_SEED";

#[derive(Parser, Debug)]
#[command(name = "deblur", version, about = "Blur-aware VAE training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model; trailing `--key=value` pairs override the config file.
    Train(TrainArgs),
    /// Train one model per point of a parameter grid and rank them.
    Ablate(AblateArgs),
    /// Original/reconstruction grids and per-image metrics.
    Reconstruct(DataArgs),
    /// Decode prior samples.
    Generate(GenerateArgs),
    /// Least-squares and generator kernels for test images.
    EstimateKernel(DataArgs),
    /// Mean log-spectra and their gap to the data.
    Spectrum(SpectrumArgs),
    /// Test-split metrics summary.
    Evaluate(DataArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `--key=value` or `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key=v1,v2;key2=v3`; empty means one run of the base config.
    #[arg(long, default_value = "")]
    pub grid: String,
    /// Concurrent runs; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `shapes[:n[:seed[:preset]]]` or the path of an IDX image file.
    #[arg(long, default_value = "shapes")]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Images shown in grids.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Falls back to the environment seed, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    /// Without a checkpoint the data is compared with itself.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "shapes")]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) | Error::Singular(_) => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::EstimateKernel(a) => cmd_estimate_kernel(&a),
        Command::Spectrum(a) => cmd_spectrum(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

/// Splits `--key=value` / `--key value` tokens into pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(t) = it.next() {
        let Some(body) = t.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key=value, got {t:?}")));
        };
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

/// Defaults, then the file, then command-line pairs; the environment seed
/// applies only when neither source sets `seed`.
pub fn resolve_config(path: &Path, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    resolve_config_text(&text, overrides, std::env::var(SEED_ENV).ok().as_deref())
}

pub fn resolve_config_text(text: &str, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut set = cfg.apply_text(text)?;
    set.extend(cfg.apply_pairs(overrides)?);
    if !set.iter().any(|k| k == "seed") {
        if let Some(s) = env_seed {
            cfg.set("seed", s)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn version_string() -> String {
    format!(
        "deblur {}{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("DEBLUR_GIT_DESCRIBE")
            .map(|g| format!("-{g}"))
            .unwrap_or_default()
    )
}

/// Metadata lines are comments, so a train manifest parses as a config.
fn manifest_text(command: &str, body: &str, started: u64, finished: Option<u64>) -> String {
    let mut s = format!(
        "# command = {command}\n# version = {}\n# started = {started}\n",
        version_string()
    );
    if let Some(f) = finished {
        s.push_str(&format!("# finished = {f}\n"));
    }
    s.push_str(body);
    s
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, &parse_overrides(&a.overrides)?)?;
    train_into(&cfg, &a.out, true).map(|_| ())
}

/// Trains `cfg` into `out` and evaluates on the test split.
fn train_into(cfg: &TrainConfig, out: &Path, verbose: bool) -> Result<trainer::EvalReport> {
    create_out(out)?;
    let started = unix_now();
    let body = cfg.to_cfg_string();
    fs::write(out.join("manifest.cfg"), manifest_text("train", &body, started, None))?;
    let data = trainer::build_dataset(cfg)?;
    let tag = out.display().to_string();
    let mut outcome = trainer::train_with(cfg, &data, Some(out), |m| {
        if verbose {
            eprintln!(
                "[{tag}] epoch {} {} total {:.4} psnr {:.2} ssim {:.3} m2 {:.4}",
                m.epoch, m.phase, m.total, m.psnr, m.ssim, m.mean_kernel_m2
            );
        }
    })?;
    let report = trainer::evaluate(&mut outcome.model, &data)?;
    fs::write(
        out.join("manifest.cfg"),
        manifest_text("train", &body, started, Some(unix_now())),
    )?;
    Ok(report)
}

/// `C=0.005,0.025;beta=1` into `(key, values)` axes.
pub fn parse_grid(spec: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {part:?} lacks '='")))?;
        let key = match k.trim() {
            "C" => "c".to_string(),
            other => other.to_string(),
        };
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if key.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Config(format!("malformed grid axis {part:?}")));
        }
        if axes.iter().any(|(k, _): &(String, Vec<String>)| *k == key) {
            return Err(Error::Config(format!("grid repeats key {key}")));
        }
        axes.push((key, values));
    }
    Ok(axes)
}

/// Cartesian product, first axis slowest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Result<Vec<Vec<(String, String)>>> {
    let total = axes.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len()));
    match total {
        Some(n) if n <= MAX_GRID => {}
        _ => return Err(Error::Config(format!("grid exceeds {MAX_GRID} points"))),
    }
    let mut points = vec![Vec::new()];
    for (k, vs) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vs.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

#[derive(Clone, Debug)]
struct AblationResult {
    name: String,
    point: Vec<(String, String)>,
    report: std::result::Result<trainer::EvalReport, String>,
    final_total: f64,
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base_pairs = parse_overrides(&a.overrides)?;
    let axes = parse_grid(&a.grid)?;
    let points = grid_points(&axes)?;
    let configs = points
        .iter()
        .map(|p| {
            let mut pairs = base_pairs.clone();
            pairs.extend(p.iter().cloned());
            resolve_config(&a.config, &pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.out)?;
    let started = unix_now();
    let manifest_body = format!(
        "grid = {}\njobs = {}\nbase =\n{}",
        a.grid,
        a.jobs,
        TrainConfig::default()
            .to_cfg_string()
            .lines()
            .zip(configs[0].to_cfg_string().lines())
            .filter(|(d, c)| d != c)
            .map(|(_, c)| format!("#   {c}\n"))
            .collect::<String>()
    );
    fs::write(
        a.out.join("manifest.cfg"),
        manifest_text("ablate", &manifest_body, started, None),
    )?;

    let names: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tail: String = p.iter().map(|(k, v)| format!("_{k}={v}")).collect();
            format!("run{i:02}{tail}")
        })
        .collect();
    let results: Mutex<Vec<Option<AblationResult>>> = Mutex::new(vec![None; points.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= points.len() {
            break;
        }
        let dir = a.out.join(&names[i]);
        let outcome = train_into(&configs[i], &dir, a.jobs <= 1);
        let final_total = fs::read_to_string(dir.join("metrics.csv"))
            .ok()
            .and_then(|s| {
                s.lines()
                    .last()
                    .and_then(|l| l.split(',').nth(6))
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(f64::NAN);
        let r = AblationResult {
            name: names[i].clone(),
            point: points[i].clone(),
            report: outcome.map_err(|e| e.to_string()),
            final_total,
        };
        results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.max(1) {
            s.spawn(worker);
        }
    });
    let results: Vec<AblationResult> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every grid point ran"))
        .collect();
    fs::write(a.out.join("summary.csv"), ablation_summary(&axes, &results))?;
    fs::write(
        a.out.join("manifest.cfg"),
        manifest_text("ablate", &manifest_body, started, Some(unix_now())),
    )?;
    let failed: Vec<&AblationResult> = results.iter().filter(|r| r.report.is_err()).collect();
    if let Some(f) = failed.first() {
        let msg = f.report.as_ref().err().cloned().unwrap_or_default();
        return Err(Error::Divergence(format!(
            "{} of {} runs failed; {}: {msg}",
            failed.len(),
            results.len(),
            f.name
        )));
    }
    Ok(())
}

/// Ranked by spectrum gap (ascending), ties broken by PSNR (descending);
/// failed runs sort last.
fn ablation_summary(axes: &[(String, Vec<String>)], results: &[AblationResult]) -> String {
    let mut order: Vec<usize> = (0..results.len()).collect();
    let key = |r: &AblationResult| match &r.report {
        Ok(rep) => (0, rep.spectrum_gap, -rep.psnr),
        Err(_) => (1, f64::INFINITY, f64::INFINITY),
    };
    order.sort_by(|&i, &j| {
        let (a, b) = (key(&results[i]), key(&results[j]));
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(i.cmp(&j))
    });
    let mut s = String::from("rank,run");
    for (k, _) in axes {
        s.push_str(&format!(",{k}"));
    }
    s.push_str(",status,final_total,psnr,ssim,spectrum_gap,spectrum_gap_high,kernel_m2\n");
    for (rank, &i) in order.iter().enumerate() {
        let r = &results[i];
        s.push_str(&format!("{},{}", rank + 1, r.name));
        for (_, v) in &r.point {
            s.push_str(&format!(",{v}"));
        }
        match &r.report {
            Ok(rep) => s.push_str(&format!(
                ",ok,{},{},{},{},{},{}\n",
                r.final_total, rep.psnr, rep.ssim, rep.spectrum_gap, rep.spectrum_gap_high, rep.kernel_m2
            )),
            Err(_) => s.push_str(",failed,NaN,NaN,NaN,NaN,NaN,NaN\n"),
        }
    }
    s
}

/// `shapes[:n[:seed[:preset]]]` or an IDX image path.
pub fn load_data(spec: &str, image_size: usize) -> Result<Dataset> {
    if spec == "shapes" || spec.starts_with("shapes:") {
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |i: usize, d: u64| -> Result<u64> {
            parts.get(i).map_or(Ok(d), |s| {
                s.parse().map_err(|_| Error::Config(format!("bad data spec {spec:?}")))
            })
        };
        let n = num(1, 2000)? as usize;
        let seed = num(2, 0)?;
        let preset: ShapePreset = parts.get(3).map_or(Ok(ShapePreset::Edges), |p| p.parse())?;
        if parts.len() > 4 {
            return Err(Error::Config(format!("bad data spec {spec:?}")));
        }
        return data_io::gen_shapes(n, image_size, image_size, seed, preset);
    }
    data_io::read_idx(Path::new(spec), None, image_size, 0)
}

fn load_model_and_data(a: &DataArgs) -> Result<(Model, Dataset)> {
    let model = Model::load(&a.ckpt)?;
    let data = load_data(&a.data, model.vae.config().image_size)?;
    Ok((model, data))
}

fn data_manifest(command: &str, a: &DataArgs) -> String {
    manifest_text(
        command,
        &format!("ckpt = {}\ndata = {}\nn = {}\n", a.ckpt.display(), a.data, a.n),
        unix_now(),
        None,
    )
}

fn cmd_reconstruct(a: &DataArgs) -> Result<()> {
    let (mut model, data) = load_model_and_data(a)?;
    create_out(&a.out)?;
    fs::write(a.out.join("manifest.cfg"), data_manifest("reconstruct", a))?;
    let report = trainer::evaluate(&mut model, &data)?;
    let (h, w) = data.dims();
    let m = a.n.min(data.test.len());
    let x = data.test_images()?;
    let mut tiles: Vec<&[f64]> = metrics::planes(&x)?[..m].to_vec();
    tiles.extend_from_slice(&metrics::planes(&report.reconstructions)?[..m]);
    fs::create_dir_all(a.out.join("samples"))?;
    data_io::pgm_write_grid(&a.out.join("samples/reconstruct.pgm"), &tiles, h, w, m.max(1))?;
    fs::write(a.out.join("reconstruct.csv"), report.csv())?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => std::env::var(SEED_ENV)
            .ok()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} is not an integer")))
            })
            .transpose()?
            .unwrap_or(0),
    };
    let mut model = Model::load(&a.ckpt)?;
    create_out(&a.out)?;
    fs::write(
        a.out.join("manifest.cfg"),
        manifest_text(
            "generate",
            &format!("ckpt = {}\nn = {}\nseed = {seed}\n", a.ckpt.display(), a.n),
            unix_now(),
            None,
        ),
    )?;
    let mut rng = trainer::rng_stream(seed, 0);
    let imgs = model.vae.generate(a.n, &mut rng)?;
    let s = model.vae.config().image_size;
    let tiles = metrics::planes(&imgs)?;
    let cols = (a.n as f64).sqrt().ceil().max(1.0) as usize;
    fs::create_dir_all(a.out.join("samples"))?;
    data_io::pgm_write_grid(&a.out.join("samples/generated.pgm"), &tiles, s, s, cols)?;
    Ok(())
}

fn kernel_csv_row(index: usize, source: &str, k: &BlurKernel, m2: f64) -> String {
    let w: Vec<String> = k.weights().iter().map(|v| v.to_string()).collect();
    format!("{index},{source},{m2},{}\n", w.join(","))
}

fn cmd_estimate_kernel(a: &DataArgs) -> Result<()> {
    let (mut model, data) = load_model_and_data(a)?;
    create_out(&a.out)?;
    fs::write(a.out.join("manifest.cfg"), data_manifest("estimate-kernel", a))?;
    let kdir = a.out.join("kernels");
    fs::create_dir_all(&kdir)?;
    let report = trainer::evaluate(&mut model, &data)?;
    let x = data.test_images()?;
    let generated = model.estimated_kernels(&x)?;
    let (h, w) = data.dims();
    let size = model.generator.size();
    let xs = metrics::planes(&x)?;
    let rs = metrics::planes(&report.reconstructions)?;
    let mut csv = String::from("index,source,m2,weights...\n");
    let shown = a.n.min(data.test.len());
    let (mut fitted_tiles, mut gen_tiles) = (Vec::new(), Vec::new());
    for (i, &index) in data.test.iter().enumerate().take(shown) {
        let g = &generated[i];
        csv.push_str(&kernel_csv_row(index, "generated", g, g.second_moment()?));
        gen_tiles.push(data_io::rescale_signed(g.weights()));
        match fit_kernel_least_squares(xs[i], rs[i], h, w, size, DEFAULT_RIDGE) {
            Ok(raw) => {
                let m2 = distribution_second_moment(&raw)?.unwrap_or(f64::NAN);
                csv.push_str(&kernel_csv_row(index, "fitted", &raw, m2));
                fitted_tiles.push(data_io::rescale_signed(raw.weights()));
            }
            Err(Error::Singular(_)) => fitted_tiles.push(vec![-1.0; size * size]),
            Err(e) => return Err(e),
        }
    }
    fs::write(kdir.join("kernels.csv"), csv)?;
    let cols = shown.max(1);
    let gen_refs: Vec<&[f64]> = gen_tiles.iter().map(Vec::as_slice).collect();
    let fit_refs: Vec<&[f64]> = fitted_tiles.iter().map(Vec::as_slice).collect();
    data_io::pgm_write_grid(&kdir.join("generated.pgm"), &gen_refs, size, size, cols)?;
    data_io::pgm_write_grid(&kdir.join("fitted.pgm"), &fit_refs, size, size, cols)?;
    fs::write(
        kdir.join("summary.csv"),
        format!(
            "images,mean_generated_m2,mean_fitted_m2\n{},{},{}\n",
            data.test.len(),
            report.kernel_m2,
            report.fitted_m2
        ),
    )?;
    Ok(())
}

/// Moves the zero frequency to the center of the grid for display.
fn fft_shift(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = v[i * w + j];
        }
    }
    out
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<()> {
    let mut model = a.ckpt.as_deref().map(Model::load).transpose()?;
    let size = model
        .as_ref()
        .map_or(data_io::CANONICAL_SIZE, |m| m.vae.config().image_size);
    let data = load_data(&a.data, size)?;
    create_out(&a.out)?;
    let ckpt = a.ckpt.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    fs::write(
        a.out.join("manifest.cfg"),
        manifest_text(
            "spectrum",
            &format!("ckpt = {ckpt}\ndata = {}\n", a.data),
            unix_now(),
            None,
        ),
    )?;
    let sdir = a.out.join("spectra");
    fs::create_dir_all(&sdir)?;
    let (h, w) = data.dims();
    let x = data.test_images()?;
    let other = match model.as_mut() {
        Some(m) => trainer::evaluate(m, &data)?.reconstructions,
        None => x.clone(),
    };
    let (xs, os) = (metrics::planes(&x)?, metrics::planes(&other)?);
    let ld = metrics::mean_log_spectrum(&xs, h, w)?;
    let lo = metrics::mean_log_spectrum(&os, h, w)?;
    let (lo_min, hi_max) = ld
        .iter()
        .chain(&lo)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi_max - lo_min).max(f64::MIN_POSITIVE);
    // a shared scale keeps the two images comparable
    let to_signed = |v: &[f64]| {
        fft_shift(
            &v.iter().map(|s| 2.0 * (s - lo_min) / span - 1.0).collect::<Vec<_>>(),
            h,
            w,
        )
    };
    data_io::pgm_write(&sdir.join("data.pgm"), &to_signed(&ld), h, w)?;
    data_io::pgm_write(&sdir.join("reconstruction.pgm"), &to_signed(&lo), h, w)?;
    let pd = metrics::mean_radial_power_spectrum(&xs, h, w)?;
    let po = metrics::mean_radial_power_spectrum(&os, h, w)?;
    let mut radial = String::from("radius,data_power,reconstruction_power\n");
    for (bd, bo) in pd.bins.iter().zip(&po.bins) {
        radial.push_str(&format!("{},{},{}\n", bd.radius, bd.mean_power, bo.mean_power));
    }
    fs::write(sdir.join("radial.csv"), radial)?;
    let gap = metrics::spectrum_gap(&os, &xs, h, w)?;
    let high = metrics::spectrum_gap_band(&os, &xs, h, w, Some(h as f64 * trainer::HIGH_BAND_FRACTION))?;
    fs::write(
        sdir.join("gap.csv"),
        format!(
            "spectrum_gap,spectrum_gap_high,alpha_data,alpha_reconstruction\n{gap},{high},{},{}\n",
            pd.alpha.unwrap_or(f64::NAN),
            po.alpha.unwrap_or(f64::NAN)
        ),
    )?;
    Ok(())
}

fn cmd_evaluate(a: &DataArgs) -> Result<()> {
    let (mut model, data) = load_model_and_data(a)?;
    create_out(&a.out)?;
    fs::write(a.out.join("manifest.cfg"), data_manifest("evaluate", a))?;
    let r = trainer::evaluate(&mut model, &data)?;
    fs::write(a.out.join("evaluate.csv"), r.csv())?;
    fs::write(
        a.out.join("summary.csv"),
        format!(
            "images,psnr,ssim,kernel_m2,fitted_m2,spectrum_gap,spectrum_gap_high\n{},{},{},{},{},{},{}\n",
            r.rows.len(),
            r.psnr,
            r.ssim,
            r.kernel_m2,
            r.fitted_m2,
            r.spectrum_gap,
            r.spectrum_gap_high
        ),
    )?;
    Ok(())
}
