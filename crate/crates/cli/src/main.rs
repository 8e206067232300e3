use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jr2net::dataset::{self, SceneConfig};
use jr2net::gradcheck::{self, Preset};
use jr2net::metrics;
use jr2net::sensing::{add_noise, empirical_snr_db};
use jr2net::substrate::checkpoint::{read_checkpoint, write_checkpoint};
use jr2net::training::{self, write_history_csv};
use jr2net::{load_cube, normalize, save_cube, CodedAperture, Measurement, SensingOperator, SpectralCube, UnrolledModel};

mod config;
mod render;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "jr2net", version, about = "Compressive spectral imaging with unrolled ADMM and learned representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random draw; a fresh one is drawn and printed if omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic spectral scenes and a manifest.
    GenData {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
    },
    /// Simulate a coded snapshot of a cube; writes `<stem>.aperture.csi` and `<stem>.measurement.csi`.
    Simulate {
        #[arg(long)]
        cube: PathBuf,
        /// Aperture transmittance.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        transmittance: f64,
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Train a model from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Force the identity-representation baseline.
        #[arg(long)]
        admmnet: bool,
    },
    /// Reconstruct a cube from a measurement with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        aperture: PathBuf,
        /// Also write the output of every stage.
        #[arg(long)]
        trace: bool,
    },
    /// Compare a reconstruction with its ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
    /// Write one band, or a false-colour composite, as PNG.
    Render {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long, conflicts_with = "rgb")]
        band: Option<usize>,
        #[arg(long)]
        rgb: bool,
        /// Band weights for the composite as `r0,r1,..;g0,..;b0,..`.
        #[arg(long, requires = "rgb")]
        weights: Option<String>,
    },
}

fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = jr2net::seeds::fresh();
        println!("seed: {s}");
        s
    })
}

fn required_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!(jr2net::Error::Argument("--out is required".into())))
}

fn gen_data(common: &Common, count: usize, height: usize, width: usize, bands: usize) -> Result<()> {
    let out = required_out(common)?;
    let seed = seed_or_draw(common.seed);
    fs::create_dir_all(out)?;
    let cfg = SceneConfig::new(height, width, bands);
    let mut manifest = fs::File::create(out.join("manifest.txt"))?;
    writeln!(manifest, "# file seed index split")?;
    for i in 0..count {
        let cube = dataset::scene(&cfg, seed, i)?;
        let range_ok = cube.as_slice().iter().all(|v| (0.0..=1.0).contains(v));
        if !range_ok || normalize(&cube)? != cube {
            return Err(jr2net::Error::Data(format!("generated scene {i} is not normalized")).into());
        }
        let name = format!("scene_{i:04}.csi");
        save_cube(&cube, out.join(&name))?;
        let split = if dataset::is_validation_index(i) { "validation" } else { "train" };
        writeln!(manifest, "{name} {seed} {i} {split}")?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn simulate(common: &Common, cube: &Path, transmittance: f64, snr_db: Option<f64>) -> Result<()> {
    let out = required_out(common)?;
    let seed = seed_or_draw(common.seed);
    let x = load_cube(cube)?;
    let (h, w, c) = x.dims();
    let aperture = CodedAperture::random(h, w, c, transmittance, seed)?;
    let op = SensingOperator::new(aperture.clone(), h, w, c)?;
    let clean = op.forward(&x)?;
    let y = match snr_db {
        Some(snr) => {
            let noisy = add_noise(&clean, snr, jr2net::seeds::derive(seed, &[1]))?;
            println!("snr_db: {:.4}", empirical_snr_db(&clean, &noisy));
            noisy
        }
        None => clean,
    };
    fs::create_dir_all(out)?;
    let stem = cube.file_stem().and_then(|s| s.to_str()).unwrap_or("cube");
    save_cube(&aperture.to_cube(), out.join(format!("{stem}.aperture.csi")))?;
    save_cube(&y.to_cube(), out.join(format!("{stem}.measurement.csi")))?;
    println!("measurement {h}x{w} from {h}x{w}x{c}, transmittance {:.4}", aperture.fill_fraction());
    Ok(())
}

fn load_training_cubes(dir: &Path) -> Result<Vec<SpectralCube>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading dataset_dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csi"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(jr2net::Error::Argument(format!("no .csi cubes in {}", dir.display())));
    }
    paths.iter().map(|p| load_cube(p).with_context(|| p.display().to_string())).collect()
}

fn config_error(errors: Vec<String>) -> anyhow::Error {
    anyhow!(jr2net::Error::Argument(format!("invalid config: {}", errors.join("; "))))
}

fn train(common: &Common, config: &Path, admmnet: bool) -> Result<()> {
    let mut run = RunConfig::load(config).map_err(config_error)?;
    if admmnet {
        run.model.admmnet = true;
        run.model.features = run.model.bands;
    }
    let errors = run.violations();
    if !errors.is_empty() {
        return Err(config_error(errors));
    }
    let seed = match common.seed.or(run.seed) {
        Some(s) => s,
        None => seed_or_draw(None),
    };
    run.train.seed = seed;
    let out = common.out.clone().unwrap_or_else(|| run.output_dir.clone());
    run.train.checkpoint_dir = Some(run.checkpoint_dir.clone().unwrap_or_else(|| out.join("checkpoints")));

    let cubes = load_training_cubes(&run.dataset_dir)?;
    let mut problems = Vec::new();
    for (i, c) in cubes.iter().enumerate() {
        if c.bands() != run.model.bands {
            problems.push(format!("cube {i} has {} bands, config says {}", c.bands(), run.model.bands));
        }
        if c.height() < run.train.patch_size || c.width() < run.train.patch_size {
            problems.push(format!("cube {i} is {}x{}, smaller than patch_size {}", c.height(), c.width(), run.train.patch_size));
        }
    }
    if !problems.is_empty() {
        return Err(config_error(problems));
    }
    let data = dataset::split(cubes);

    fs::create_dir_all(&out)?;
    let mut model = UnrolledModel::new(run.model, jr2net::seeds::derive(seed, &[0x30DE1]))?;
    let outcome = training::train(&mut model, &data, &run.train)?;
    write_history_csv(&outcome.history, out.join("history.csv"))?;
    write_checkpoint(&model, out.join("model.jr2w"))?;
    match outcome.final_validation {
        Some(r) => {
            let line = format!("psnr={:.4} ssim={:.4} sam={:.4} psnr_band_mean={:.4}", r.psnr, r.ssim, r.sam, r.psnr_band_mean);
            fs::write(out.join("validation.txt"), format!("{line}\n"))?;
            println!("validation {line}");
        }
        None => println!("no validation scenes"),
    }
    println!("wrote {}", out.join("model.jr2w").display());
    Ok(())
}

fn reconstruct(common: &Common, checkpoint: &Path, measurement: &Path, aperture: &Path, trace: bool) -> Result<()> {
    let out = required_out(common)?;
    let model = UnrolledModel::from_blocks(&read_checkpoint(checkpoint)?)?;
    let y = Measurement::from_cube(load_cube(measurement)?)?;
    let aperture = CodedAperture::from_cube(&load_cube(aperture)?)?;
    let (h, w) = (y.height(), y.width());
    if aperture.cols() != w || aperture.rows() < h {
        bail!(jr2net::Error::Argument(format!(
            "aperture {}x{} does not fit a {h}x{w} measurement",
            aperture.rows(),
            aperture.cols()
        )));
    }
    let bands = aperture.rows() - h + 1;
    if bands != model.bands() {
        bail!(jr2net::Error::Argument(format!(
            "checkpoint expects {h}x{w}x{} (aperture {}x{w}), found aperture {}x{} implying {bands} bands",
            model.bands(),
            h + model.bands() - 1,
            aperture.rows(),
            aperture.cols()
        )));
    }
    let op = SensingOperator::new(aperture, h, w, bands)?;
    let (xhat, stages) = model.reconstruct(&y, &op, trace)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_cube(&xhat, out)?;
    if let Some(stages) = stages {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("recon");
        for (k, s) in stages.stages.iter().enumerate() {
            save_cube(&s.reconstruction, out.with_file_name(format!("{stem}_stage{}.csi", k + 1)))?;
        }
        println!("wrote {} stage cubes", stages.stages.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(common: &Common, recon: &Path, truth: &Path) -> Result<()> {
    let r = metrics::evaluate(&load_cube(recon)?, &load_cube(truth)?)?;
    let id = recon.file_stem().and_then(|s| s.to_str()).unwrap_or("recon");
    println!("{id} psnr={:.4} ssim={:.4} sam={:.6}", r.psnr, r.ssim, r.sam);
    if let Some(out) = &common.out {
        let mut f = fs::File::create(out)?;
        writeln!(f, "id,psnr,ssim,sam")?;
        writeln!(f, "{id},{},{},{}", r.psnr, r.ssim, r.sam)?;
    }
    Ok(())
}

fn run_gradcheck(common: &Common, preset: &str) -> Result<()> {
    let preset: Preset = preset.parse()?;
    let seed = seed_or_draw(common.seed);
    let report = gradcheck::run(preset, seed)?;
    for r in &report.results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} checks={:<4} max_error={:.3e} tolerance={:.0e}", r.name, r.checks, r.max_error, r.tolerance);
    }
    if !report.all_passed() {
        let failed = report.results.iter().filter(|r| !r.passed()).count();
        bail!(jr2net::Error::Numeric { stage: 0, detail: format!("{failed} gradient check suites failed") });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData { count, height, width, bands } => gen_data(common, *count, *height, *width, *bands),
        Command::Simulate { cube, transmittance, snr_db } => simulate(common, cube, *transmittance, *snr_db),
        Command::Train { config, admmnet } => train(common, config, *admmnet),
        Command::Reconstruct { checkpoint, measurement, aperture, trace } => {
            reconstruct(common, checkpoint, measurement, aperture, *trace)
        }
        Command::Evaluate { recon, truth } => evaluate(common, recon, truth),
        Command::Gradcheck { preset } => run_gradcheck(common, preset),
        Command::Render { cube, band, rgb, weights } => {
            let out = required_out(common)?;
            let cube = load_cube(cube)?;
            let image = match (band, rgb) {
                (Some(b), false) => render::band(&cube, *b)?,
                (None, true) => {
                    let w = match weights {
                        Some(text) => render::parse_weights(text, cube.bands())?,
                        None => render::default_weights(cube.bands()),
                    };
                    render::composite(&cube, &w)?
                }
                _ => bail!(jr2net::Error::Argument("render needs exactly one of --band or --rgb".into())),
            };
            image.save(out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("JR2_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!(jr2net::Error::Argument(format!("JR2_THREADS must be a positive integer, got '{raw}'"))))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// `error kind=<kind> message=<text>` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<jr2net::Error>())
        .map(jr2net::Error::kind)
        .unwrap_or("cli");
    let message = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error kind={kind} message={message}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
