//! Shared oracles and synthetic fixtures for the integration tests.
#![allow(dead_code)]

use momae_core::pipeline::Dataset;
use momae_core::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive bin assignment: bin `j` covers intensities `(j-1)s+1 ..= js`,
/// intensity 0 joins bin 1 and anything past the last bin joins the last.
pub fn naive_counts(pixels: &[u8], s: u32, levels: u32) -> Vec<u64> {
    let n_bins = (levels / s) as usize;
    let mut counts = vec![0u64; n_bins];
    for &p in pixels {
        let v = p as u32;
        let mut placed = false;
        for j in 1..=n_bins as u32 {
            let lo = (j - 1) * s + 1;
            let hi = j * s;
            if v >= lo && v <= hi {
                counts[j as usize - 1] += 1;
                placed = true;
                break;
            }
        }
        if !placed {
            let idx = if v == 0 { 0 } else { n_bins - 1 };
            counts[idx] += 1;
        }
    }
    counts
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Reference Renyi entropy of raw bin counts. Integer orders use exact
/// integer moment sums; others use compensated sums.
pub fn brute_force_renyi(counts: &[u64], q: f64) -> f64 {
    let total: u64 = counts.iter().sum();
    let n = total as f64;
    if (q - 1.0).abs() <= 1e-9 {
        let h = neumaier_sum(counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        }));
        return h.max(0.0);
    }
    if q.fract() == 0.0 && q > 1.0 {
        let k = q as u32;
        let mut moment: u128 = 0;
        for &c in counts {
            moment += (c as u128).pow(k);
        }
        let ln_z = (moment as f64).ln() - q * n.ln();
        return (ln_z / (1.0 - q)).max(0.0);
    }
    let z = neumaier_sum(
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| (c as f64 / n).powf(q)),
    );
    (z.ln() / (1.0 - q)).max(0.0)
}

/// All-pairs ROC statistic: P(score+ > score-) + 0.5 P(tie).
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        if !positive[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

pub fn noise_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let data = (0..h * w).map(|_| rng.random::<u8>()).collect();
    ImageBuffer::gray(h, w, data).unwrap()
}

pub fn flat_image(h: usize, w: usize, value: u8) -> ImageBuffer {
    ImageBuffer::filled(h, w, 1, value).unwrap()
}

/// Left half constant, right half uniform noise.
pub fn half_noise_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = flat_image(h, w, 128);
    for r in 0..h {
        for c in w / 2..w {
            img.set(r, c, 0, rng.random());
        }
    }
    img
}

/// Smooth sinusoidal stripes with a random phase and orientation.
pub fn wave_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let fx: f64 = rng.random_range(0.05..0.25);
    let fy: f64 = rng.random_range(0.05..0.25);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v = 0.5 + 0.4 * (fx * c as f64 + fy * r as f64 + phase).sin();
            data.push((v * 255.0).round() as u8);
        }
    }
    ImageBuffer::gray(h, w, data).unwrap()
}

/// Two-class texture task: class 0 is a flat image at a random gray level,
/// class 1 is uniform noise.
pub fn flat_vs_noise(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let img = if label == 0 {
            let v = rng.random_range(32..224u8);
            flat_image(size, size, v)
        } else {
            noise_image(size, size, &mut rng)
        };
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, 2).unwrap()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_len);
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.random();
            // some exact zeros to exercise support handling
            if x < 0.1 {
                0.0
            } else {
                x
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return vec![1.0];
    }
    w.into_iter().map(|v| v / total).collect()
}
