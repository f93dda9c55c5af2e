use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{CorpusManifest, Subset};
use crate::error::{Error, Result};

/// Draws training indices so that base and extension entries are equally
/// likely regardless of how many of each there are.
///
/// Each draw flips a fair coin for the subset, then picks uniformly inside it.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    base: Vec<usize>,
    extension: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(base: Vec<usize>, extension: Vec<usize>, seed: u64) -> Result<Self> {
        if base.is_empty() || extension.is_empty() {
            return Err(Error::Config(format!(
                "equal-probability sampling needs both subsets non-empty (base {}, extension {})",
                base.len(),
                extension.len()
            )));
        }
        Ok(BatchSampler {
            base,
            extension,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_manifest(manifest: &CorpusManifest, seed: u64) -> Result<Self> {
        BatchSampler::new(
            manifest.subset_indices(Subset::Base),
            manifest.subset_indices(Subset::Extension),
            seed,
        )
    }

    pub fn draw(&mut self) -> usize {
        let pool = if self.rng.random_bool(0.5) {
            &self.extension
        } else {
            &self.base
        };
        pool[self.rng.random_range(0..pool.len())]
    }

    pub fn sample_batch(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.draw()).collect()
    }

    pub fn is_extension(&self, index: usize) -> bool {
        self.extension.contains(&index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_subset_is_config_error() {
        assert!(matches!(BatchSampler::new(vec![0], vec![], 1), Err(Error::Config(_))));
        assert!(matches!(BatchSampler::new(vec![], vec![0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_subsets_emit_only_their_members() {
        let mut s = BatchSampler::new(vec![4], vec![9], 3).unwrap();
        let batch = s.sample_batch(200);
        assert!(batch.iter().all(|&i| i == 4 || i == 9));
        assert!(batch.contains(&4) && batch.contains(&9));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mk = || BatchSampler::new((0..10).collect(), (10..13).collect(), 42).unwrap();
        assert_eq!(mk().sample_batch(500), mk().sample_batch(500));
    }

    #[test]
    fn extension_fraction_is_one_half() {
        let base: Vec<usize> = (0..1325).collect();
        let ext: Vec<usize> = (1325..1478).collect();
        let mut s = BatchSampler::new(base, ext, 7).unwrap();
        let draws = s.sample_batch(10_000);
        let frac = draws.iter().filter(|&&i| i >= 1325).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }
}
