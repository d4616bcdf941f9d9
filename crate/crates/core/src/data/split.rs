use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SegmentationSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.75, seed: 0 }
    }
}

impl SplitSpec {
    /// `round(train_fraction * n)`, halves rounding up.
    pub fn train_count(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64) + 0.5).floor() as usize
    }
}

/// Seeded partition into `(train, test)`; each side keeps the input order.
pub fn split(
    samples: &[SegmentationSample],
    spec: &SplitSpec,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {} outside (0, 1)", spec.train_fraction)));
    }
    if samples.len() < 2 {
        return Err(Error::Data(format!("cannot split {} sample(s)", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut in_train = vec![false; samples.len()];
    for &i in &order[..spec.train_count(samples.len())] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|(s, _)| s).collect(), test.into_iter().map(|(s, _)| s).collect()))
}

/// Short hex digest of the train and test membership, for comparing runs.
pub fn split_hash(train: &[SegmentationSample], test: &[SegmentationSample]) -> String {
    let mut h = Sha256::new();
    for (tag, side) in [("train", train), ("test", test)] {
        h.update(tag.as_bytes());
        for s in side {
            h.update(b"\n");
            h.update(s.id.as_bytes());
        }
        h.update(b"\0");
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
