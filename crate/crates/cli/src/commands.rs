use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use momae_core::dataio::{self, Checkpoint};
use momae_core::masker::{self, DEFAULT_MASK_RATIO, DEFAULT_Q, DEFAULT_SPACING};
use momae_core::mfcore;
use momae_core::patching::{to_luminance, PatchGrid};
use momae_core::pipeline::{self, Dataset, Stage};
use momae_core::selfcheck;
use momae_core::{ImageBuffer, MaskPolicy};

use crate::config::{RunConfig, TrainFlags};
use crate::CliError;

const TAU_SCALES: [u32; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Parser)]
#[command(
    name = "momae",
    version,
    about = "Entropy-guided masked autoencoder toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every patch of an image and write an entropy CSV and heatmap
    Analyze {
        /// Input PGM or PPM image
        image: PathBuf,
        /// Renyi order
        #[arg(long, default_value_t = DEFAULT_Q)]
        q: f64,
        /// Histogram bin spacing
        #[arg(long, default_value_t = DEFAULT_SPACING)]
        s: u32,
        /// Patch side length in pixels
        #[arg(long, default_value_t = 16)]
        patch_size: usize,
        /// Output directory for entropy.csv and heatmap.pgm
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a mask plan for an image and write it with a dimmed preview
    Mask {
        /// Input PGM or PPM image
        image: PathBuf,
        /// Fraction of patches to mask
        #[arg(long, default_value_t = DEFAULT_MASK_RATIO)]
        ratio: f64,
        /// Selection policy: multifractal, inverted or random
        #[arg(long, default_value_t = MaskPolicy::Multifractal)]
        policy: MaskPolicy,
        /// Seed for the random policy
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch side length in pixels
        #[arg(long, default_value_t = 16)]
        patch_size: usize,
        /// Renyi order for scoring
        #[arg(long, default_value_t = DEFAULT_Q)]
        q: f64,
        /// Histogram bin spacing for scoring
        #[arg(long, default_value_t = DEFAULT_SPACING)]
        s: u32,
        /// Output directory for plan.txt and the masked preview
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Masked-autoencoder pretraining on a MOMD container
    Pretrain {
        /// JSON configuration with flat training keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training container (.momd)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Fine-tune a pretrained encoder with a classification head
    Finetune {
        /// JSON configuration with flat training keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Training container (.momd)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation container reported after training
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a fine-tuned checkpoint and write metrics, PR curves and confusion matrix
    Eval {
        /// Fine-tuned checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Test container (.momd)
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        /// Maximum accepted relative error
        #[arg(long, default_value_t = selfcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Seed for the random inputs
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn at(context: impl AsRef<Path>) -> impl Fn(momae_core::Error) -> CliError {
    let c = context.as_ref().display().to_string();
    move |e| CliError::from_core(&c, e)
}

fn flagged(flag: &str, path: &Path) -> String {
    format!("{flag} {}", path.display())
}

fn required(flag: &str, cli: Option<PathBuf>, file: Option<PathBuf>) -> Result<PathBuf, CliError> {
    cli.or(file).ok_or_else(|| {
        CliError::usage(format!(
            "{flag} is required (on the command line or in --config)"
        ))
    })
}

fn out_write(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::data(format!("stdout: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze {
            image,
            q,
            s,
            patch_size,
            out,
        } => analyze(&image, q, s, patch_size, &out),
        Command::Mask {
            image,
            ratio,
            policy,
            seed,
            patch_size,
            q,
            s,
            out,
        } => mask(&image, ratio, policy, seed, patch_size, q, s, &out),
        Command::Pretrain {
            config,
            data,
            out,
            flags,
        } => pretrain(config.as_deref(), data, out, &flags),
        Command::Finetune {
            config,
            ckpt,
            data,
            val,
            out,
            flags,
        } => finetune(config.as_deref(), ckpt, data, val, out, &flags),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, &out),
        Command::Gradcheck { tolerance, seed } => gradcheck(tolerance, seed),
    }
}

fn load_image(path: &Path) -> Result<ImageBuffer, CliError> {
    dataio::load_pgm_ppm(path).map_err(at(path))
}

fn analyze(image: &Path, q: f64, s: u32, patch_size: usize, out: &Path) -> Result<(), CliError> {
    let img = load_image(image)?;
    let luma = to_luminance(&img).map_err(at(image))?;
    let grid = PatchGrid::new(luma.height(), luma.width(), patch_size)
        .map_err(|e| CliError::from_core("--patch-size", e))?;
    let scores =
        masker::score_patches(&luma, &grid, q, s).map_err(|e| CliError::from_core("--q/--s", e))?;
    let mut csv = String::from("index,row,col,entropy\n");
    for (k, e) in scores.scores.iter().enumerate() {
        let (r, c) = grid.cell(k);
        let _ = writeln!(csv, "{k},{r},{c},{e}");
    }
    dataio::write_text(out.join("entropy.csv"), &csv).map_err(at(out))?;
    dataio::write_heatmap(
        &scores.scores,
        grid.rows,
        grid.cols,
        out.join("heatmap.pgm"),
    )
    .map_err(at(out))?;
    let scales: Vec<u32> = TAU_SCALES
        .iter()
        .copied()
        .filter(|&sc| sc <= luma.levels())
        .collect();
    let mut report = format!(
        "patches={} grid={}x{} q={q} s={s}\n",
        grid.num_patches(),
        grid.rows,
        grid.cols
    );
    match mfcore::estimate_tau(luma.data(), &scales, q, luma.levels()) {
        Ok(t) => {
            let _ = writeln!(
                report,
                "tau={} r_squared={} scales={:?}",
                t.tau, t.r_squared, t.scales
            );
        }
        Err(e) => {
            let _ = writeln!(report, "tau=undefined ({e})");
        }
    }
    out_write(&report)
}

/// Copy of `image` with every masked patch scaled to a quarter intensity.
fn dim_masked(image: &ImageBuffer, grid: &PatchGrid, masked: &[usize]) -> ImageBuffer {
    let mut img = image.clone();
    let p = grid.patch_size;
    for &k in masked {
        let (r0, c0) = grid.origin(k);
        for r in r0..r0 + p {
            for c in c0..c0 + p {
                for ch in 0..img.channels() {
                    let v = img.get(r, c, ch) as f64 * 0.25;
                    img.set(r, c, ch, v.round() as u8);
                }
            }
        }
    }
    img
}

#[allow(clippy::too_many_arguments)]
fn mask(
    image: &Path,
    ratio: f64,
    policy: MaskPolicy,
    seed: u64,
    patch_size: usize,
    q: f64,
    s: u32,
    out: &Path,
) -> Result<(), CliError> {
    let img = load_image(image)?;
    let grid = PatchGrid::new(img.height(), img.width(), patch_size)
        .map_err(|e| CliError::from_core("--patch-size", e))?;
    let plan = masker::plan_for_image(&img, patch_size, policy, ratio, q, s, seed)
        .map_err(|e| CliError::from_core("--ratio/--policy", e))?;
    let text = plan.to_string();
    dataio::write_text(out.join("plan.txt"), &text).map_err(at(out))?;
    let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
    let preview = dim_masked(&img, &grid, &plan.masked);
    dataio::save_pgm_ppm(&preview, out.join(format!("masked.{ext}"))).map_err(at(out))?;
    out_write(&text)
}

fn load_dataset(flag: &str, path: &Path) -> Result<Dataset, CliError> {
    let c =
        dataio::load_container(path).map_err(|e| CliError::from_core(&flagged(flag, path), e))?;
    Dataset::from_container(&c).map_err(|e| CliError::from_core(&flagged(flag, path), e))
}

fn train_error(e: momae_core::Error) -> CliError {
    CliError::from_core("training", e)
}

fn pretrain(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    let run = RunConfig::load(Stage::Pretrain, config, flags)?;
    let data = required("--data", data, run.paths.data.clone())?;
    let out = required("--out", out, run.paths.out.clone())?;
    let ds = load_dataset("--data", &data)?;
    let outcome = {
        let mut log = std::io::stdout().lock();
        pipeline::pretrain(&ds, &run.train, &mut log).map_err(train_error)?
    };
    let ckpt = Checkpoint::from_model(
        &outcome.model,
        Stage::Pretrain,
        run.train.seed,
        Some(run.train.clone()),
        Some(outcome.plan_digest.clone()),
    );
    dataio::save_checkpoint(&ckpt, &out)
        .map_err(|e| CliError::from_core(&flagged("--out", &out), e))?;
    out_write(&format!(
        "plan_digest={}\ninit_digest={}\norder_digest={}\n",
        outcome.plan_digest, outcome.init_digest, outcome.order_digest
    ))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    dataio::load_checkpoint(path).map_err(|e| CliError::from_core(&flagged("--ckpt", path), e))
}

fn finetune(
    config: Option<&Path>,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    out: Option<PathBuf>,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    let run = RunConfig::load(Stage::Finetune, config, flags)?;
    let ckpt_path = required("--ckpt", ckpt, run.paths.ckpt.clone())?;
    let data = required("--data", data, run.paths.data.clone())?;
    let out = required("--out", out, run.paths.out.clone())?;
    let val = val.or(run.paths.val.clone());
    let pre = load_ckpt(&ckpt_path)?;
    let pre_model = pre
        .model()
        .map_err(|e| CliError::from_core(&flagged("--ckpt", &ckpt_path), e))?;
    let ds = load_dataset("--data", &data)?;
    let val_ds = val
        .as_deref()
        .map(|v| load_dataset("--val", v))
        .transpose()?;
    let outcome = {
        let mut log = std::io::stdout().lock();
        pipeline::finetune(&pre_model, &ds, &run.train, &mut log).map_err(|e| match e {
            momae_core::Error::CheckpointIncompatible(_) => {
                CliError::from_core(&flagged("--ckpt", &ckpt_path), e)
            }
            other => train_error(other),
        })?
    };
    let ckpt = Checkpoint::from_model(
        &outcome.model,
        Stage::Finetune,
        run.train.seed,
        Some(run.train.clone()),
        pre.meta.plan_digest.clone(),
    );
    dataio::save_checkpoint(&ckpt, &out)
        .map_err(|e| CliError::from_core(&flagged("--out", &out), e))?;
    if let (Some(v), Some(vds)) = (val.as_deref(), val_ds.as_ref()) {
        let m = pipeline::evaluate(&outcome.model, vds)
            .map_err(|e| CliError::from_core(&flagged("--val", v), e))?;
        out_write(&format!(
            "val accuracy={} f1={} pr_auc={} roc_auc={}\n",
            m.accuracy, m.f1, m.pr_auc, m.roc_auc
        ))?;
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_ckpt(ckpt)?
        .model()
        .map_err(|e| CliError::from_core(&flagged("--ckpt", ckpt), e))?;
    let ds = load_dataset("--data", data)?;
    let m = pipeline::evaluate(&model, &ds)
        .map_err(|e| CliError::from_core(&flagged("--data", data), e))?;
    let json = m.to_json();
    let write = |name: &str, text: &str| {
        dataio::write_text(out.join(name), text)
            .map_err(|e| CliError::from_core(&flagged("--out", out), e))
    };
    write("metrics.json", &format!("{json}\n"))?;
    write("confusion.csv", &m.confusion_csv())?;
    if let [curve] = m.pr_curves.as_slice() {
        write("pr_curve.csv", &curve.to_csv())?;
    } else {
        for curve in &m.pr_curves {
            write(
                &format!("pr_curve_class{}.csv", curve.class),
                &curve.to_csv(),
            )?;
        }
    }
    out_write(&format!("{json}\n"))
}

fn gradcheck(tolerance: f64, seed: u64) -> Result<(), CliError> {
    let results =
        selfcheck::run_suite(seed).map_err(|e| CliError::numeric(format!("gradcheck: {e}")))?;
    let mut report = String::new();
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.report.passes(tolerance);
        let _ = writeln!(
            report,
            "{} {} max_rel_error={:.3e} checked={}",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_error,
            r.report.checked
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    out_write(&report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradcheck: {} above tolerance {tolerance}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
