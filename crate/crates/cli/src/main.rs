use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fastshade::augment::{load_pair_dir, PairDataset};
use fastshade::container::{load_model, save_model};
use fastshade::gradcheck::standard_suite;
use fastshade::image_io::{crop, read_png, reflect_pad_to_multiple, write_png};
use fastshade::metrics::{challenge_score, psnr, ScoreInput, PIXEL_MAX};
use fastshade::model::BlockTap;
use fastshade::nn::DownsampleMode;
use fastshade::reparam::{fuse_model, verify_equivalence};
use fastshade::spectral::branch_spectrum_report;
use fastshade::trainer::{synth_dataset, train_two_stage_with, NoiseModel, TrainData, TrainPlan};
use fastshade::{build_model, Error, FastShadeConfig, Result, Tensor, Topology};

#[derive(Parser)]
#[command(
    name = "fastshade",
    version,
    about = "Two-scale reparameterizable image denoiser"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a freshly initialised model and save it.
    Init {
        /// m, l, xl or tiny.
        #[arg(long, default_value = "m")]
        variant: String,
        /// JSON model config; overrides --variant.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        downsample: Option<DownsampleMode>,
        #[arg(long)]
        lf_ratio: Option<f64>,
        #[arg(long)]
        no_dw_refine: bool,
        /// Zero the residual head so the model returns its input.
        #[arg(long)]
        zero_residual: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one 8-bit RGB PNG.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Clean image; prints the PSNR of the output against it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Collapse branches and fold I/O scalars into a deployment container.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two models on seeded random images; exits 1 if they differ.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Two-stage training on synthetic or on-disk pairs.
    Train {
        #[arg(long, default_value = "tiny")]
        variant: String,
        /// JSON model config; overrides --variant.
        #[arg(long)]
        config: Option<PathBuf>,
        /// toy, full, or a JSON plan file.
        #[arg(long, default_value = "toy")]
        plan: String,
        /// `synth:gaussian:SIGMA`, `synth:poisson_gaussian:A:B`, or a
        /// directory with clean/ and noisy/ subdirectories.
        #[arg(long)]
        data: String,
        /// Validation directory for on-disk data.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        synth_count: usize,
        #[arg(long, default_value_t = 8)]
        synth_val_count: usize,
        #[arg(long, default_value_t = 64)]
        synth_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where the EMA model is written.
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Radial power spectra of one AFDB's two paths over a set of images.
    Spectrum {
        #[arg(long)]
        model: PathBuf,
        /// Directory of equally sized PNGs.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
    /// Latency-fidelity score from PSNR and runtime.
    Score {
        #[arg(long)]
        psnr: f64,
        #[arg(long)]
        runtime_ms: f64,
    },
    /// Finite-difference gradient checks; exits 1 if any fails.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_config(path: &Path) -> Result<FastShadeConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn base_config(variant: &str, config: Option<&Path>) -> Result<FastShadeConfig> {
    match config {
        Some(p) => read_config(p),
        None => FastShadeConfig::preset(variant),
    }
}

fn denoise(model: &Path, input: &Path, output: &Path, reference: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let img = read_png(input)?;
    let s = img.shape();
    let padded = reflect_pad_to_multiple(&img, 4);
    let out = crop(&model.forward(&padded)?, 0, 0, s.h, s.w)?;
    write_png(output, &out)?;
    if let Some(r) = reference {
        let p = psnr(&out, &read_png(r)?, PIXEL_MAX)?;
        if p.is_infinite() {
            println!("psnr inf");
        } else {
            println!("psnr {p:.4}");
        }
    }
    Ok(())
}

fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("{}: no PNG files", dir.display())));
    }
    files
        .iter()
        .map(|f| read_png(f).map(|t| reflect_pad_to_multiple(&t, 4)))
        .collect()
}

fn load_plan(spec: &str) -> Result<TrainPlan> {
    match spec {
        "toy" => Ok(TrainPlan::toy()),
        "full" => Ok(TrainPlan::full()),
        path => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: FastShadeConfig,
    plan: &str,
    data: &str,
    val: Option<&Path>,
    counts: (usize, usize, usize),
    seed: u64,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let plan = load_plan(plan)?;
    let data = if let Some(noise) = data.strip_prefix("synth:") {
        let noise: NoiseModel = noise.parse()?;
        let (n, n_val, size) = counts;
        TrainData {
            train: PairDataset::new("synth", synth_dataset(n, size, noise, seed)?),
            val: synth_dataset(n_val, size, noise, seed.wrapping_add(1))?,
        }
    } else {
        let val =
            val.ok_or_else(|| Error::Config("on-disk training data needs --val DIR".into()))?;
        TrainData {
            train: load_pair_dir(Path::new(data))?,
            val: load_pair_dir(val)?.pairs,
        }
    };
    let model = build_model(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sink = match log {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    let mut write_err = None;
    let outcome = train_two_stage_with(model, &plan, &data, &mut rng, &mut |r| {
        let line = serde_json::to_string(r).expect("log records serialise");
        eprintln!("{line}");
        if let Some(f) = sink.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_model(&outcome.ema_model, out)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Init {
            variant,
            config,
            downsample,
            lf_ratio,
            no_dw_refine,
            zero_residual,
            seed,
            out,
        } => {
            let mut cfg = base_config(&variant, config.as_deref())?;
            if let Some(d) = downsample {
                cfg.downsample_mode = d;
            }
            if let Some(r) = lf_ratio {
                cfg.lf_ratio = r;
            }
            if no_dw_refine {
                cfg.sgu_dw_refine = false;
            }
            let mut model = build_model(&cfg, seed)?;
            if zero_residual {
                model.tail.zero();
            }
            save_model(&model, &out)?;
        }
        Cmd::Denoise {
            model,
            input,
            output,
            reference,
        } => denoise(&model, &input, &output, reference.as_deref())?,
        Cmd::Fuse { input, out } => {
            let model = load_model(&input)?;
            if model.topology() == Topology::Fused {
                return Err(Error::Ordering(format!(
                    "{} is already fused",
                    input.display()
                )));
            }
            save_model(&fuse_model(&model)?, &out)?;
        }
        Cmd::Verify {
            a,
            b,
            trials,
            tol,
            seed,
        } => {
            let r = verify_equivalence(&load_model(&a)?, &load_model(&b)?, trials, seed, tol)?;
            println!(
                "trials {} max_abs_diff {:.3e} mean_abs_diff {:.3e} rounded_mismatch {:.3e} tol {:.1e} {}",
                r.n_trials,
                r.max_abs_diff,
                r.mean_abs_diff,
                r.rounded_mismatch_fraction,
                r.threshold,
                if r.pass { "PASS" } else { "FAIL" }
            );
            if !r.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Train {
            variant,
            config,
            plan,
            data,
            val,
            synth_count,
            synth_val_count,
            synth_size,
            seed,
            out,
            log,
        } => train(
            base_config(&variant, config.as_deref())?,
            &plan,
            &data,
            val.as_deref(),
            (synth_count, synth_val_count, synth_size),
            seed,
            &out,
            log.as_deref(),
        )?,
        Cmd::Spectrum {
            model,
            images,
            out,
            stage,
            block,
        } => {
            let model = load_model(&model)?;
            let imgs = load_images(&images)?;
            let r = branch_spectrum_report(
                &model,
                &imgs,
                BlockTap {
                    stage,
                    index: block,
                },
            )?;
            fs::write(&out, r.to_tsv())?;
            println!(
                "lf_low_fraction {:.4} hf_low_fraction {:.4}",
                r.lf_low_fraction, r.hf_low_fraction
            );
        }
        Cmd::Score { psnr, runtime_ms } => {
            let s = challenge_score(ScoreInput {
                psnr_db: psnr,
                runtime_s: runtime_ms / 1000.0,
            })?;
            println!("{s:.2}");
        }
        Cmd::Gradcheck { seed } => {
            let results = standard_suite(seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<24} rel_err {:.3e} tol {:.0e} probes {:>5} {}",
                    r.name,
                    r.rel_err,
                    r.tol,
                    r.probes,
                    if r.pass { "PASS" } else { "FAIL" }
                );
                ok &= r.pass;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
