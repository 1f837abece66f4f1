//! Run configuration: stage defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use momae_core::pipeline::{Stage, TrainConfig};
use momae_core::MaskPolicy;
use serde_json::{Map, Value};

use crate::CliError;

/// Training flags. Every flag is optional and overrides the configuration
/// file; the stage defaults are filled into the help text at startup.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Number of training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate after warmup
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Decoupled AdamW weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Linear warmup length in epochs
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Images per optimizer step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of patches hidden from the encoder
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Renyi order used to score patches
    #[arg(long)]
    pub q: Option<f64>,
    /// Histogram bin spacing used to score patches
    #[arg(long)]
    pub s: Option<u32>,
    /// Mask selection policy: multifractal, inverted or random
    #[arg(long)]
    pub policy: Option<MaskPolicy>,
    /// Seed for initialization, shuffling and random masks
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standardize each target patch before the reconstruction loss
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize_targets: Option<bool>,
    /// Reconstruction loss over all patches instead of masked ones only
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub loss_on_all_patches: Option<bool>,
    /// Patch side length in pixels
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Encoder token width
    #[arg(long)]
    pub encoder_dim: Option<usize>,
    /// Decoder token width
    #[arg(long)]
    pub decoder_dim: Option<usize>,
    /// Encoder transformer blocks
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Decoder transformer blocks
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Encoder attention heads
    #[arg(long)]
    pub encoder_heads: Option<usize>,
    /// Decoder attention heads
    #[arg(long)]
    pub decoder_heads: Option<usize>,
    /// MLP hidden width as a multiple of the token width
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// Clip each batch gradient to this global L2 norm
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f.clone() { c.$f = v; })*
            };
        }
        set!(
            epochs,
            base_lr,
            weight_decay,
            batch_size,
            mask_ratio,
            q,
            s,
            policy,
            seed,
            normalize_targets,
            loss_on_all_patches,
            patch_size,
            encoder_dim,
            decoder_dim,
            encoder_layers,
            decoder_layers,
            encoder_heads,
            decoder_heads,
            mlp_ratio
        );
        if self.warmup_epochs.is_some() {
            c.warmup_epochs = self.warmup_epochs;
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
    }
}

/// Path entries that may come from the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunPaths {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: RunPaths,
    /// Orders for a q sweep; consumed by the sweep recipe, not by a single run.
    pub q_sweep: Vec<f64>,
}

fn usage(msg: String) -> CliError {
    CliError::usage(msg)
}

fn path_entry(
    doc: &mut Map<String, Value>,
    key: &str,
    file: &Path,
) -> Result<Option<PathBuf>, CliError> {
    match doc.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(other) => Err(usage(format!(
            "{}: key `{key}` must be a string path, found {other}",
            file.display()
        ))),
    }
}

impl RunConfig {
    /// Stage defaults, overlaid with `file` (if any), overlaid with `flags`.
    pub fn load(stage: Stage, file: Option<&Path>, flags: &TrainFlags) -> Result<Self, CliError> {
        let mut merged =
            serde_json::to_value(TrainConfig::defaults_for(stage)).expect("config serializes");
        let mut paths = RunPaths::default();
        let mut q_sweep: Vec<f64> = Vec::new();
        if let Some(file) = file {
            let text = fs::read_to_string(file)
                .map_err(|e| CliError::data(format!("--config {}: {e}", file.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("--config {}: {e}", file.display())))?;
            let Value::Object(mut doc) = value else {
                return Err(usage(format!(
                    "--config {}: expected a JSON object of flat keys",
                    file.display()
                )));
            };
            paths.data = path_entry(&mut doc, "data", file)?;
            paths.val = path_entry(&mut doc, "val", file)?;
            paths.ckpt = path_entry(&mut doc, "ckpt", file)?;
            paths.out = path_entry(&mut doc, "out", file)?;
            if let Some(v) = doc.remove("q_sweep") {
                q_sweep = serde_json::from_value(v)
                    .map_err(|e| usage(format!("--config {}: q_sweep: {e}", file.display())))?;
            }
            if let Some(s) = doc.get("stage") {
                let declared: Stage = serde_json::from_value(s.clone())
                    .map_err(|e| usage(format!("--config {}: stage: {e}", file.display())))?;
                if declared != stage {
                    return Err(usage(format!(
                        "--config {}: stage `{}` does not match the command",
                        file.display(),
                        s.as_str().unwrap_or("?")
                    )));
                }
            }
            let target = merged.as_object_mut().expect("object");
            for (k, v) in doc {
                target.insert(k, v);
            }
        }
        let mut train: TrainConfig = serde_json::from_value(merged).map_err(|e| {
            usage(format!(
                "--config {}: {e}",
                file.map(|f| f.display().to_string()).unwrap_or_default()
            ))
        })?;
        flags.apply(&mut train);
        train
            .validate()
            .map_err(|e| usage(format!("training configuration: {e}")))?;
        if let Some(q) = q_sweep.iter().find(|q| **q < 0.0 || !q.is_finite()) {
            return Err(usage(format!(
                "q_sweep: order {q} must be finite and non-negative"
            )));
        }
        Ok(RunConfig {
            train,
            paths,
            q_sweep,
        })
    }
}

/// Help-text default for a training flag under `stage`.
pub fn default_text(stage: Stage, key: &str) -> Option<String> {
    let value = serde_json::to_value(TrainConfig::defaults_for(stage)).ok()?;
    let v = value.get(key)?;
    Some(match (key, v) {
        ("warmup_epochs", Value::Null) => "10% of epochs".to_string(),
        (_, Value::Null) => "off".to_string(),
        (_, Value::String(s)) => s.clone(),
        (_, other) => other.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, text: &str) -> PathBuf {
        let p = dir.path().join("c.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"epochs": 7, "base_lr": 0.01, "data": "x.momd", "q_sweep": [1, 2, 10]}"#,
        );
        let flags = TrainFlags {
            epochs: Some(3),
            ..Default::default()
        };
        let c = RunConfig::load(Stage::Pretrain, Some(&p), &flags).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.base_lr, 0.01);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.paths.data, Some(PathBuf::from("x.momd")));
        assert_eq!(c.q_sweep, vec![1.0, 2.0, 10.0]);
    }

    #[test]
    fn unknown_key_and_stage_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"epoch": 7}"#);
        let e = RunConfig::load(Stage::Pretrain, Some(&p), &TrainFlags::default()).unwrap_err();
        assert_eq!(e.code, 1);
        assert!(e.message.contains("epoch"));
        let p = write(&dir, r#"{"stage": "finetune"}"#);
        assert!(RunConfig::load(Stage::Pretrain, Some(&p), &TrainFlags::default()).is_err());
    }

    #[test]
    fn defaults_in_help() {
        assert_eq!(default_text(Stage::Pretrain, "epochs").unwrap(), "200");
        assert_eq!(default_text(Stage::Finetune, "base_lr").unwrap(), "0.001");
        assert_eq!(
            default_text(Stage::Pretrain, "policy").unwrap(),
            "multifractal"
        );
        assert_eq!(default_text(Stage::Pretrain, "grad_clip").unwrap(), "off");
    }
}
