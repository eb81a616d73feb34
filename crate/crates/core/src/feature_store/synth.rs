use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DataError, Dataset, Label, FEATURE_DIM};

/// Which modalities carry their latent bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthSignal {
    #[default]
    Both,
    Audio,
    Video,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub signal: SynthSignal,
    /// Draw labels from these class weights instead of two fair bits.
    pub proportions: Option<[f64; 4]>,
}

impl SynthOptions {
    pub fn new(n: usize, sigma: f64, seed: u64) -> Self {
        Self { n, sigma, seed, signal: SynthSignal::Both, proportions: None }
    }
}

/// Two-bit complementary dataset.
///
/// Each clip draws bits `(b_a, b_v)`, labelled `2·b_a + b_v`. Audio is
/// `±e₁ + σ·N(0, I)` carrying only `b_a`; video does the same with `b_v`.
/// Either modality alone can therefore recover at most half the labels.
pub fn synth_complementary(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset, DataError> {
    synth_with(&SynthOptions::new(n, noise_sigma, seed))
}

pub fn synth_with(opts: &SynthOptions) -> Result<Dataset, DataError> {
    if opts.n < 40 {
        return Err(DataError::Invalid(format!("need at least 40 clips, got {}", opts.n)));
    }
    if !(opts.sigma > 0.0 && opts.sigma.is_finite()) {
        return Err(DataError::Invalid(format!("noise sigma must be positive, got {}", opts.sigma)));
    }
    let weighted = match opts.proportions {
        Some(p) => Some(
            WeightedIndex::new(p).map_err(|e| DataError::Invalid(format!("class proportions: {e}")))?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sigma = opts.sigma;
    let mut records = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let code = match &weighted {
            Some(w) => w.sample(&mut rng),
            None => {
                let b_a = rng.random::<bool>() as usize;
                let b_v = rng.random::<bool>() as usize;
                2 * b_a + b_v
            }
        };
        let (b_a, b_v) = (code >> 1, code & 1);
        let mut draw = |bit: usize, carries: bool| -> Vec<f32> {
            let mut x: Vec<f64> =
                (0..FEATURE_DIM).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            if carries {
                x[0] += if bit == 1 { 1.0 } else { -1.0 };
            }
            x.into_iter().map(|v| v as f32).collect()
        };
        let audio = draw(b_a, opts.signal != SynthSignal::Video);
        let video = draw(b_v, opts.signal != SynthSignal::Audio);
        let label = Label::from_index(code).expect("code < 4");
        records.push(ClipRecord { clip_id: i as u64, label, audio, video });
    }
    Dataset::new(1, 1, records)
}

/// Clip counts per class in the reference moderation corpus.
pub fn reference_class_counts() -> [(Label, u64); 4] {
    [(Label::Safe, 70741), (Label::Sexual, 9335), (Label::Violent, 19658), (Label::Both, 8173)]
}

/// [`reference_class_counts`] normalised by their total of 107 907 clips.
pub fn reference_class_proportions() -> BTreeMap<Label, f64> {
    let counts = reference_class_counts();
    let total: u64 = counts.iter().map(|(_, c)| c).sum();
    counts.iter().map(|&(l, c)| (l, c as f64 / total as f64)).collect()
}
