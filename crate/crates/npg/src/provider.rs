use std::ops::Range;

use rayon::prelude::*;

use npg_core::regression::RegressionKind;
use npg_core::sampling::{RolloutSample, SampleProvider, SequentialProvider};
use npg_core::{Result, RngStream, Sampler};

/// Draws rollouts on a rayon pool. Every rollout owns its counter-keyed
/// stream, so the output equals [`SequentialProvider`]'s for any pool size.
pub struct ParallelProvider {
    pool: rayon::ThreadPool,
}

impl ParallelProvider {
    pub fn new(workers: usize) -> std::result::Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        Ok(Self { pool })
    }
}

impl SampleProvider for ParallelProvider {
    fn draw(
        &self,
        sampler: &Sampler<'_>,
        kind: RegressionKind,
        seed: u64,
        iteration: u64,
        range: Range<usize>,
    ) -> Result<Vec<RolloutSample>> {
        self.pool.install(|| {
            range
                .into_par_iter()
                .map(|t| {
                    let mut rng = RngStream::for_sample(seed, iteration, t as u64).rng();
                    sampler.sample(kind, &mut rng)
                })
                .collect()
        })
    }
}

/// Sequential for one worker, rayon otherwise.
pub fn make_provider(workers: usize) -> Box<dyn SampleProvider + Sync> {
    if workers <= 1 {
        return Box::new(SequentialProvider);
    }
    match ParallelProvider::new(workers) {
        Ok(p) => Box::new(p),
        Err(_) => Box::new(SequentialProvider),
    }
}
