//! Example-tied dropout.
//!
//! The layer splits its `H` inputs into a fixed prefix of generalizing
//! neurons `[0, gen_count)` and a pool of memorizing neurons
//! `[gen_count, H)`. Every example owns exactly `k` pool neurons, chosen by a
//! deterministic draw keyed on `(allocation_seed, example_id)`.
//!
//! In train mode an example sees the generalizing prefix plus its own
//! memorizing neurons; in test mode only the prefix survives. Kept
//! activations are never rescaled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::seed::bounded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairDropoutConfig {
    #[serde(rename = "H")]
    width: usize,
    p_gen: f64,
    p_mem: f64,
    allocation_seed: u64,
}

/// Memorizing neurons owned by one example, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskAllocation {
    pub example_id: u64,
    pub mem_indices: Vec<usize>,
}

impl FairDropoutConfig {
    pub fn new(width: usize, p_gen: f64, p_mem: f64, allocation_seed: u64) -> Result<Self> {
        let cfg = FairDropoutConfig {
            width,
            p_gen,
            p_mem,
            allocation_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("fair dropout width must be >= 1".into()));
        }
        if !(self.p_gen > 0.0 && self.p_gen <= 1.0) {
            return Err(Error::Config(format!(
                "p_gen must lie in (0, 1], got {}",
                self.p_gen
            )));
        }
        if !(0.0..=1.0).contains(&self.p_mem) {
            return Err(Error::Config(format!(
                "p_mem must lie in [0, 1], got {}",
                self.p_mem
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn p_gen(&self) -> f64 {
        self.p_gen
    }

    pub fn p_mem(&self) -> f64 {
        self.p_mem
    }

    pub fn allocation_seed(&self) -> u64 {
        self.allocation_seed
    }

    pub fn gen_count(&self) -> usize {
        ((self.p_gen * self.width as f64).round_ties_even() as usize).min(self.width)
    }

    pub fn pool_size(&self) -> usize {
        self.width - self.gen_count()
    }

    /// Memorizing neurons per example.
    pub fn mem_count(&self) -> usize {
        let pool = self.pool_size();
        ((self.p_mem * pool as f64).round_ties_even() as usize).min(pool)
    }

    pub fn allocate(&self, example_id: u64) -> MaskAllocation {
        let gen = self.gen_count();
        let k = self.mem_count();
        let mut pool: Vec<usize> = (gen..self.width).collect();
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.allocation_seed.to_le_bytes());
        key[8..16].copy_from_slice(&example_id.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut next = || rng.next_u64();
        let n = pool.len();
        for i in 0..k {
            let j = i + bounded(&mut next, (n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        MaskAllocation {
            example_id,
            mem_indices: pool,
        }
    }

    /// `true` where the neuron passes through. Train mode requires the
    /// example's allocation.
    pub fn keep_mask(&self, mode: Mode, allocation: Option<&MaskAllocation>) -> Result<Vec<bool>> {
        let gen = self.gen_count();
        let mut keep: Vec<bool> = (0..self.width).map(|i| i < gen).collect();
        if mode == Mode::Train {
            let alloc = allocation.ok_or(Error::MissingExampleId)?;
            for &i in &alloc.mem_indices {
                if i < gen || i >= self.width {
                    return Err(Error::Index {
                        context: "memorizing pool",
                        index: i,
                        len: self.width,
                    });
                }
                keep[i] = true;
            }
        }
        Ok(keep)
    }

    fn check_width(&self, len: usize) -> Result<()> {
        if len != self.width {
            return Err(Error::Dimension {
                context: "fair dropout input",
                expected: self.width,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn forward_train(&self, allocation: &MaskAllocation, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(Mode::Train, Some(allocation), x)
    }

    pub fn forward_test(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(Mode::Test, None, x)
    }

    /// Zero the upstream gradient wherever the forward pass zeroed output.
    pub fn backward_mask(
        &self,
        allocation: Option<&MaskAllocation>,
        mode: Mode,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.apply(mode, allocation, upstream)
    }

    fn apply(
        &self,
        mode: Mode,
        allocation: Option<&MaskAllocation>,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_width(v.len())?;
        let keep = self.keep_mask(mode, allocation)?;
        Ok(v.iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect())
    }
}
