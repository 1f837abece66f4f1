//! Entropy scoring of patches and visible/masked partitioning.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mfcore;
use crate::patching::{extract, to_luminance, ImageBuffer, PatchGrid};

pub const DEFAULT_Q: f64 = 2.0;
pub const DEFAULT_SPACING: u32 = 8;
pub const DEFAULT_MASK_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    Multifractal,
    Inverted,
    Random,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::Multifractal => "multifractal",
            MaskPolicy::Inverted => "inverted",
            MaskPolicy::Random => "random",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multifractal" => Ok(MaskPolicy::Multifractal),
            "inverted" => Ok(MaskPolicy::Inverted),
            "random" => Ok(MaskPolicy::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask policy `{other}` (expected multifractal, inverted or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScores {
    pub scores: Vec<f64>,
    pub q: f64,
    pub s: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub policy: MaskPolicy,
    /// Only meaningful for the random policy.
    pub seed: u64,
    pub q: f64,
    pub s: u32,
}

/// `max(1, round((1 - r) * n_P))`, rounding half away from zero.
pub fn visible_count(num_patches: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * num_patches as f64).round() as usize)
        .max(1)
        .min(num_patches)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    Ok(())
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Plan with every patch visible, as used for fine-tuning.
    pub fn all_visible(num_patches: usize) -> Self {
        MaskPlan {
            visible: (0..num_patches).collect(),
            masked: Vec::new(),
            ratio: 0.0,
            policy: MaskPolicy::Multifractal,
            seed: 0,
            q: DEFAULT_Q,
            s: DEFAULT_SPACING,
        }
    }

    /// Checks the partition invariant.
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.num_patches() != num_patches {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} patches, expected {num_patches}",
                self.num_patches()
            )));
        }
        let mut seen = vec![false; num_patches];
        for &k in self.visible.iter().chain(&self.masked) {
            if k >= num_patches || seen[k] {
                return Err(Error::InvalidArgument(format!(
                    "patch index {k} is out of range or listed twice"
                )));
            }
            seen[k] = true;
        }
        if self.visible.is_empty() {
            return Err(Error::DegeneratePlan("no visible patches".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the text form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_string().as_bytes()))
    }
}

fn join(idx: &[usize]) -> String {
    idx.iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for MaskPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} {} {} {}",
            self.policy,
            self.q,
            self.s,
            self.ratio,
            self.num_patches()
        )?;
        writeln!(f, "{}", join(&self.visible))?;
        writeln!(f, "{}", join(&self.masked))
    }
}

impl FromStr for MaskPlan {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty mask plan".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "mask plan header needs 5 fields, found {}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("mask plan header: bad {what}"));
        let policy: MaskPolicy = fields[0].parse()?;
        let q: f64 = fields[1].parse().map_err(|_| bad("q"))?;
        let s: u32 = fields[2].parse().map_err(|_| bad("s"))?;
        let ratio: f64 = fields[3].parse().map_err(|_| bad("ratio"))?;
        let n: usize = fields[4].parse().map_err(|_| bad("patch count"))?;
        let parse_line = |line: Option<&str>| -> Result<Vec<usize>> {
            line.unwrap_or("")
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Format(format!("bad patch index `{t}`")))
                })
                .collect()
        };
        let visible = parse_line(lines.next())?;
        let masked = parse_line(lines.next())?;
        let plan = MaskPlan {
            visible,
            masked,
            ratio,
            policy,
            seed: 0,
            q,
            s,
        };
        plan.validate(n)?;
        Ok(plan)
    }
}

pub fn score_patches(image: &ImageBuffer, grid: &PatchGrid, q: f64, s: u32) -> Result<PatchScores> {
    if image.channels() != 1 {
        return Err(Error::InvalidArgument(
            "score_patches expects a single-channel image; convert with to_luminance".into(),
        ));
    }
    let levels = image.levels();
    let scores = (0..grid.num_patches())
        .into_par_iter()
        .map(|k| {
            let patch = extract(image, grid, k)?;
            Ok(mfcore::pixel_entropy(&patch.pixels, q, s, levels)?.entropy)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PatchScores { scores, q, s })
}

/// Luminance conversion followed by [`score_patches`].
pub fn score_image(image: &ImageBuffer, patch_size: usize, q: f64, s: u32) -> Result<PatchScores> {
    let luma = to_luminance(image)?;
    let grid = PatchGrid::new(luma.height(), luma.width(), patch_size)?;
    score_patches(&luma, &grid, q, s)
}

/// Keeps the `n_S` highest-entropy patches visible; ties go to the lower index.
pub fn select_visible(scores: &PatchScores, ratio: f64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = scores.scores.len();
    if n == 0 {
        return Err(Error::DegenerateInput("no patch scores".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    let n_s = visible_count(n, ratio);
    let mut visible = order[..n_s].to_vec();
    let mut masked = order[n_s..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
        policy: MaskPolicy::Multifractal,
        seed: 0,
        q: scores.q,
        s: scores.s,
    })
}

pub fn invert_plan(plan: &MaskPlan) -> Result<MaskPlan> {
    if plan.masked.is_empty() {
        return Err(Error::DegeneratePlan(
            "inverting a plan with no masked patches leaves nothing visible".into(),
        ));
    }
    let n = plan.num_patches();
    Ok(MaskPlan {
        visible: plan.masked.clone(),
        masked: plan.visible.clone(),
        ratio: plan.visible.len() as f64 / n as f64,
        policy: MaskPolicy::Inverted,
        seed: plan.seed,
        q: plan.q,
        s: plan.s,
    })
}

/// Uniform random `n_S`-subset via a partial Fisher-Yates shuffle driven by
/// ChaCha8 seeded with `seed`.
pub fn random_mask(num_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if num_patches == 0 {
        return Err(Error::InvalidArgument(
            "number of patches must be positive".into(),
        ));
    }
    let n_s = visible_count(num_patches, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..num_patches).collect();
    for i in 0..n_s {
        let j = rng.random_range(i..num_patches);
        idx.swap(i, j);
    }
    let mut visible = idx[..n_s].to_vec();
    let mut masked = idx[n_s..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
        policy: MaskPolicy::Random,
        seed,
        q: DEFAULT_Q,
        s: DEFAULT_SPACING,
    })
}

/// Builds a plan for `image` under `policy`.
pub fn plan_for_image(
    image: &ImageBuffer,
    patch_size: usize,
    policy: MaskPolicy,
    ratio: f64,
    q: f64,
    s: u32,
    seed: u64,
) -> Result<MaskPlan> {
    match policy {
        MaskPolicy::Random => {
            let grid = PatchGrid::new(image.height(), image.width(), patch_size)?;
            random_mask(grid.num_patches(), ratio, seed)
        }
        MaskPolicy::Multifractal => select_visible(&score_image(image, patch_size, q, s)?, ratio),
        MaskPolicy::Inverted => invert_plan(&select_visible(
            &score_image(image, patch_size, q, s)?,
            ratio,
        )?),
    }
}
