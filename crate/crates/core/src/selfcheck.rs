//! Finite-difference checks of every tape operation and of the model
//! objectives, run at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::mae::{LossOptions, MaeModel, ViTConfig};
use crate::masker::{self, MaskPolicy};
use crate::numerics::gradcheck::{compare_gradients, grad_check, DEFAULT_STEP};
use crate::numerics::{GradCheckReport, ParamSet, Tape, Tensor, Var};
use crate::patching::ImageBuffer;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

type OpCase = (
    &'static str,
    &'static [&'static [usize]],
    fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// Reduces `x` with fixed pseudo-random weights so no gradient entry is
/// structurally zero.
fn project(tape: &mut Tape<'_, f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = tape.constant(uniform(&mut rng, &shape));
    let y = tape.mul(x, w)?;
    Ok(tape.mean(y))
}

const OPS: &[OpCase] = &[
    ("add", &[&[3, 4], &[3, 4]], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    }),
    ("add_broadcast", &[&[3, 4], &[4]], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    }),
    ("sub", &[&[2, 5], &[2, 5]], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y)
    }),
    ("mul_broadcast", &[&[3, 4], &[4]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y)
    }),
    ("scale", &[&[6]], |t, v| {
        let y = t.scale(v[0], 2.5);
        project(t, y)
    }),
    ("matmul", &[&[3, 4], &[4, 2]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    }),
    ("transpose", &[&[3, 4]], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y)
    }),
    ("reshape", &[&[2, 6]], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y)
    }),
    ("concat", &[&[2, 3], &[1, 3]], |t, v| {
        let y = t.concat(&[v[0], v[1]], 0)?;
        project(t, y)
    }),
    ("slice", &[&[3, 5]], |t, v| {
        let y = t.slice(v[0], 1, 1, 4)?;
        project(t, y)
    }),
    ("select_rows", &[&[3, 2]], |t, v| {
        let y = t.select_rows(v[0], &[1, 1, 0, 2])?;
        project(t, y)
    }),
    ("gelu", &[&[2, 5]], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y)
    }),
    ("softmax", &[&[3, 4]], |t, v| {
        let y = t.softmax(v[0], 1)?;
        project(t, y)
    }),
    ("layer_norm", &[&[3, 5]], |t, v| {
        let y = t.layer_norm(v[0], 1, 1e-6)?;
        project(t, y)
    }),
    ("mean_axis", &[&[3, 4]], |t, v| {
        let y = t.mean_axis(v[0], 0)?;
        project(t, y)
    }),
    ("mse_loss", &[&[2, 3], &[2, 3]], |t, v| {
        t.mse_loss(v[0], v[1])
    }),
    ("cross_entropy", &[&[2, 4]], |t, v| {
        t.cross_entropy_loss(v[0], &[3, 1])
    }),
];

/// 16x16 single-channel images cut into 4x4 patches, width 8.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_height: 16,
        image_width: 16,
        channels: 1,
        patch_size: 4,
        encoder_dim: 8,
        decoder_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        encoder_heads: 2,
        decoder_heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
    }
}

fn rebuild(config: &ViTConfig, names: &[String], xs: &[Tensor<f64>]) -> Result<MaeModel<f64>> {
    let mut p = ParamSet::new();
    for (n, t) in names.iter().zip(xs) {
        p.push(n.clone(), t.clone());
    }
    MaeModel::from_params(config.clone(), p)
}

fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let config = tiny_config();
    let mut model = MaeModel::<f64>::init(config.clone(), seed)?;
    // unit-scale weights keep every gradient well above difference noise
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let noise = Normal::new(0.0, 0.4).expect("valid sigma");
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let names = model.params().names().to_vec();
    let inputs = model.params().tensors().to_vec();
    let pixels = (0..256).map(|_| rng.random()).collect();
    let image = ImageBuffer::gray(16, 16, pixels)?;
    let patches = model.patchify(&image)?;
    let plan = masker::plan_for_image(&image, 4, MaskPolicy::Multifractal, 0.75, 2.0, 8, 0)?;

    let mut out = Vec::new();
    for (name, opts) in [
        ("mae_loss", LossOptions::default()),
        (
            "mae_loss_normalized_all",
            LossOptions {
                masked_only: false,
                normalize_targets: true,
            },
        ),
    ] {
        let (_, grads) = model.pretrain_grads(&patches, &plan, opts)?;
        let report = compare_gradients(
            |xs| {
                let m = rebuild(&config, &names, xs)?;
                let mut tape = Tape::new();
                let p = m.bind(&mut tape);
                let l = m.pretrain_loss_on(&mut tape, &p, &patches, &plan, opts)?;
                Ok(tape.item(l))
            },
            &grads,
            &inputs,
            DEFAULT_STEP,
        )?;
        out.push(CheckResult {
            name: name.into(),
            report,
        });
    }
    let (_, grads) = model.classify_grads(&patches, 1)?;
    let report = compare_gradients(
        |xs| {
            let m = rebuild(&config, &names, xs)?;
            let mut tape = Tape::new();
            let p = m.bind(&mut tape);
            let x = tape.constant(patches.clone());
            let logits = m.classify_on(&mut tape, &p, x)?;
            let l = tape.cross_entropy_loss(logits, &[1])?;
            Ok(tape.item(l))
        },
        &grads,
        &inputs,
        DEFAULT_STEP,
    )?;
    out.push(CheckResult {
        name: "classifier_loss".into(),
        report,
    });
    Ok(out)
}

/// Every tape operation followed by the composite model objectives.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len() + 3);
    for (name, shapes, f) in OPS {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
        out.push(CheckResult {
            name: (*name).into(),
            report: grad_check(f, &inputs, DEFAULT_STEP)?,
        });
    }
    out.extend(model_checks(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(0).unwrap();
        assert_eq!(results.len(), OPS.len() + 3);
        for r in &results {
            assert!(
                r.report.passes(DEFAULT_TOLERANCE),
                "{} {:?}",
                r.name,
                r.report
            );
        }
    }
}
