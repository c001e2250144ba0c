//! Query distortion models: sample a mask of corrupted coordinates, then
//! fill the masked coordinates.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::Domain;

#[derive(Debug, Error, PartialEq)]
pub enum DistortError {
    #[error("cannot corrupt {count} of {dim} coordinates")]
    CountTooLarge { count: usize, dim: usize },
    #[error("rate {0} is outside [0, 1]")]
    Rate(f64),
    #[error("{h}x{w} block does not fit a {img_h}x{img_w} image")]
    BlockFit { h: usize, w: usize, img_h: usize, img_w: usize },
    #[error("{img_h}x{img_w} image does not have {dim} coordinates")]
    ImageDim { img_h: usize, img_w: usize, dim: usize },
    #[error("mask has {got} coordinates, pattern has {expected}")]
    MaskLen { expected: usize, got: usize },
    #[error("fill mode {fill:?} does not apply to {domain:?} patterns")]
    FillDomain { fill: Fill, domain: Domain },
}

pub type Result<T> = std::result::Result<T, DistortError>;

/// Which coordinates get corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Exactly `count` coordinates, uniformly without replacement.
    BitFlipCount { count: usize },
    /// Each coordinate independently with probability `rate`.
    SaltPepper { rate: f64 },
    /// One `h × w` rectangle of a row-major `img_h × img_w` image.
    Block { h: usize, w: usize, img_h: usize, img_w: usize },
}

/// What a corrupted coordinate becomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    /// Negate; bipolar only.
    Flip,
    /// Fair coin over the domain's two extremes.
    RandomBinary,
    /// Uniform on [0, 1]; unit-box only.
    RandomUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub mask: MaskSpec,
    pub fill: Fill,
}

impl DistortionSpec {
    /// Flip exactly `count` bits.
    pub fn flip(count: usize) -> Self {
        DistortionSpec { mask: MaskSpec::BitFlipCount { count }, fill: Fill::Flip }
    }

    /// Redraw exactly `count` coordinates from a fair coin; about half of
    /// them end up wrong.
    pub fn randomize(count: usize) -> Self {
        DistortionSpec { mask: MaskSpec::BitFlipCount { count }, fill: Fill::RandomBinary }
    }

    /// Salt-and-pepper noise at `rate`.
    pub fn salt_pepper(rate: f64) -> Self {
        DistortionSpec { mask: MaskSpec::SaltPepper { rate }, fill: Fill::RandomBinary }
    }

    /// Occluding block filled with random binary values for bipolar data and
    /// uniform values otherwise.
    pub fn block(h: usize, w: usize, img_h: usize, img_w: usize, domain: Domain) -> Self {
        let fill = match domain {
            Domain::Bipolar => Fill::RandomBinary,
            Domain::UnitBox => Fill::RandomUniform,
        };
        DistortionSpec { mask: MaskSpec::Block { h, w, img_h, img_w }, fill }
    }

    pub fn validate(&self, dim: usize, domain: Domain) -> Result<()> {
        match self.mask {
            MaskSpec::BitFlipCount { count } if count > dim => {
                return Err(DistortError::CountTooLarge { count, dim });
            }
            MaskSpec::SaltPepper { rate } if !(0.0..=1.0).contains(&rate) => {
                return Err(DistortError::Rate(rate));
            }
            MaskSpec::Block { h, w, img_h, img_w } => {
                if img_h * img_w != dim {
                    return Err(DistortError::ImageDim { img_h, img_w, dim });
                }
                if h > img_h || w > img_w {
                    return Err(DistortError::BlockFit { h, w, img_h, img_w });
                }
            }
            _ => {}
        }
        check_fill(self.fill, domain)
    }

    /// Sample a mask and apply it. Returns the query and the mask.
    pub fn distort<R: Rng + ?Sized>(&self, x: &[f64], domain: Domain, rng: &mut R) -> Result<(Vec<f64>, Vec<bool>)> {
        self.validate(x.len(), domain)?;
        let mask = sample_mask(&self.mask, x.len(), rng)?;
        let q = apply(x, &mask, self.fill, domain, rng)?;
        Ok((q, mask))
    }
}

fn check_fill(fill: Fill, domain: Domain) -> Result<()> {
    match (fill, domain) {
        (Fill::Flip, Domain::UnitBox) | (Fill::RandomUniform, Domain::Bipolar) => {
            Err(DistortError::FillDomain { fill, domain })
        }
        _ => Ok(()),
    }
}

/// Corrupted-coordinate mask over `dim` coordinates.
pub fn sample_mask<R: Rng + ?Sized>(spec: &MaskSpec, dim: usize, rng: &mut R) -> Result<Vec<bool>> {
    let mut mask = vec![false; dim];
    match *spec {
        MaskSpec::BitFlipCount { count } => {
            if count > dim {
                return Err(DistortError::CountTooLarge { count, dim });
            }
            for i in index::sample(rng, dim, count) {
                mask[i] = true;
            }
        }
        MaskSpec::SaltPepper { rate } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(DistortError::Rate(rate));
            }
            for m in &mut mask {
                *m = rng.gen_bool(rate);
            }
        }
        MaskSpec::Block { h, w, img_h, img_w } => {
            if img_h * img_w != dim {
                return Err(DistortError::ImageDim { img_h, img_w, dim });
            }
            if h > img_h || w > img_w {
                return Err(DistortError::BlockFit { h, w, img_h, img_w });
            }
            let top = rng.gen_range(0..=img_h - h);
            let left = rng.gen_range(0..=img_w - w);
            for r in top..top + h {
                mask[r * img_w + left..r * img_w + left + w].fill(true);
            }
        }
    }
    Ok(mask)
}

/// Replace masked coordinates of `x` according to `fill`.
pub fn apply<R: Rng + ?Sized>(x: &[f64], mask: &[bool], fill: Fill, domain: Domain, rng: &mut R) -> Result<Vec<f64>> {
    if mask.len() != x.len() {
        return Err(DistortError::MaskLen { expected: x.len(), got: mask.len() });
    }
    check_fill(fill, domain)?;
    let (lo, hi) = match domain {
        Domain::Bipolar => (-1.0, 1.0),
        Domain::UnitBox => (0.0, 1.0),
    };
    Ok(x.iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                return v;
            }
            match fill {
                Fill::Flip => -v,
                Fill::RandomBinary => {
                    if rng.gen_bool(0.5) {
                        hi
                    } else {
                        lo
                    }
                }
                Fill::RandomUniform => rng.gen::<f64>(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_mask_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = sample_mask(&MaskSpec::BitFlipCount { count: 64 }, 128, &mut rng).unwrap();
            assert_eq!(m.iter().filter(|&&b| b).count(), 64);
        }
    }

    #[test]
    fn block_positions_all_reachable() {
        let spec = MaskSpec::Block { h: 16, w: 16, img_h: 32, img_w: 32 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20_000 {
            let m = sample_mask(&spec, 1024, &mut rng).unwrap();
            assert_eq!(m.iter().filter(|&&b| b).count(), 256);
            let first = m.iter().position(|&b| b).unwrap();
            let (r, c) = (first / 32, first % 32);
            for dr in 0..16 {
                assert!(m[(r + dr) * 32 + c..(r + dr) * 32 + c + 16].iter().all(|&b| b));
            }
            seen.insert(first);
        }
        assert_eq!(seen.len(), 17 * 17);
    }

    #[test]
    fn same_seed_same_mask() {
        let spec = MaskSpec::SaltPepper { rate: 0.3 };
        let a = sample_mask(&spec, 100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(&spec, 100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_full_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![1.0, -1.0, -1.0, 1.0];
        assert_eq!(apply(&x, &[false; 4], Fill::RandomBinary, Domain::Bipolar, &mut rng).unwrap(), x);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(apply(&x, &[true; 4], Fill::Flip, Domain::Bipolar, &mut rng).unwrap(), neg);
    }

    #[test]
    fn random_binary_hamming_mean() {
        // Each masked bit differs with probability 1/2.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = vec![1.0; 64];
        let mask = vec![true; 64];
        let trials = 4000;
        let total: usize = (0..trials)
            .map(|_| {
                let q = apply(&x, &mask, Fill::RandomBinary, Domain::Bipolar, &mut rng).unwrap();
                crate::patterns::hamming(&x, &q)
            })
            .sum();
        let mean = total as f64 / trials as f64;
        // σ of the mean is 4 / √4000 ≈ 0.063.
        assert!((mean - 32.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn invalid_specs() {
        assert_eq!(
            DistortionSpec::flip(5).validate(4, Domain::Bipolar),
            Err(DistortError::CountTooLarge { count: 5, dim: 4 })
        );
        assert_eq!(DistortionSpec::salt_pepper(1.5).validate(4, Domain::Bipolar), Err(DistortError::Rate(1.5)));
        assert!(matches!(
            DistortionSpec::block(5, 2, 4, 4, Domain::Bipolar).validate(16, Domain::Bipolar),
            Err(DistortError::BlockFit { .. })
        ));
        assert!(matches!(
            DistortionSpec::flip(1).validate(4, Domain::UnitBox),
            Err(DistortError::FillDomain { .. })
        ));
    }
}
