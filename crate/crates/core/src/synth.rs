//! Deterministic synthetic asynchronous-channel task.
//!
//! Each sample's target is a uniform random sequence of 4–8 symbols over a
//! 12-symbol vocabulary. Channel A carries only the even-index target symbols
//! at 2 frames per symbol; channel B carries only the odd-index symbols at 3
//! frames per symbol, so the channels are asynchronous by construction and
//! each alone lacks half the information. Frames are 16-dim noisy one-hots
//! (σ = 0.1) of the carried symbol. Channel A additionally emits per-frame
//! anchor labels (the carried symbol id, 12 classes).

use crate::data::MultiChannelSample;
use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

pub const SYNTH_SYMBOLS: usize = 12;
pub const SYNTH_FEATURE_DIM: usize = 16;
pub const SYNTH_NOISE_SIGMA: f64 = 0.1;
pub const SYNTH_FRAMES_A: usize = 2;
pub const SYNTH_FRAMES_B: usize = 3;
pub const SYNTH_MIN_LEN: usize = 4;
pub const SYNTH_MAX_LEN: usize = 8;

fn noisy_one_hot(rng: &mut ChaCha20Rng, symbol: usize) -> Vec<f32> {
    let noise = Normal::new(0.0, SYNTH_NOISE_SIGMA).expect("valid sigma");
    (0..SYNTH_FEATURE_DIM)
        .map(|d| {
            let base = if d == symbol { 1.0 } else { 0.0 };
            (base + noise.sample(rng)) as f32
        })
        .collect()
}

fn channel_features(
    rng: &mut ChaCha20Rng,
    symbols: &[usize],
    frames_per_symbol: usize,
) -> (Tensor<f32>, Vec<usize>) {
    let t = symbols.len() * frames_per_symbol;
    let mut data = Vec::with_capacity(t * SYNTH_FEATURE_DIM);
    let mut labels = Vec::with_capacity(t);
    for &sym in symbols {
        for _ in 0..frames_per_symbol {
            data.extend(noisy_one_hot(rng, sym));
            labels.push(sym);
        }
    }
    (Tensor::new(vec![t, SYNTH_FEATURE_DIM], data).expect("synth features"), labels)
}

/// Generate `n_samples` samples, deterministic per seed (each sample draws
/// from its own stream keyed by the sample index).
pub fn synth_generate(n_samples: usize, seed: u64) -> Result<Vec<MultiChannelSample<f32>>> {
    if n_samples == 0 {
        return Err(crate::error::Error::Input("synthetic corpus needs at least one sample".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (0x53594e54 + i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let len = rng.random_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..SYNTH_SYMBOLS)).collect();
        let evens: Vec<usize> = symbols.iter().copied().step_by(2).collect();
        let odds: Vec<usize> = symbols.iter().copied().skip(1).step_by(2).collect();
        let (feat_a, labels_a) = channel_features(&mut rng, &evens, SYNTH_FRAMES_A);
        let (feat_b, _) = channel_features(&mut rng, &odds, SYNTH_FRAMES_B);
        samples.push(MultiChannelSample {
            id: format!("synth{i:05}"),
            channels: vec![feat_a, feat_b],
            anchors: vec![Some(labels_a), None],
            target: symbols.iter().map(|&s| format!("s{s}")).collect(),
        });
    }
    Ok(samples)
}
