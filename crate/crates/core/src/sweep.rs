//! Independent runs over a grid of methods and seeds. With the `parallel`
//! feature the runs are spread over the rayon pool; results come back in
//! grid order either way.

use crate::cl::{ClConfig, ClTrainer, RunLog};
use crate::data::ChunkedDataset;
use crate::error::Result;
use crate::expansion::ExpansionMethod;
use crate::rl::{run_rl, RlConfig, RlRun, Variant};

fn grid<A: Copy, B: Copy>(a: &[A], b: &[B]) -> Vec<(A, B)> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect()
}

#[cfg(feature = "parallel")]
fn map_grid<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_grid<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    items.iter().map(f).collect()
}

/// One continual-learning run per `(method, seed)`, all on the same data.
pub fn sweep_cl(
    base: &ClConfig,
    data: &ChunkedDataset,
    methods: &[ExpansionMethod],
    seeds: &[u64],
) -> Result<Vec<(ExpansionMethod, u64, RunLog)>> {
    map_grid(&grid(methods, seeds), |&(method, seed)| {
        let cfg = ClConfig { method, seed, ..base.clone() };
        Ok((method, seed, ClTrainer::new(cfg, data.clone())?.run()?))
    })
}

/// One RL run per `(variant, seed)`.
pub fn sweep_rl(base: &RlConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<(Variant, u64, RlRun)>> {
    map_grid(&grid(variants, seeds), |&(variant, seed)| {
        let cfg = RlConfig { variant, seed, ..base.clone() };
        Ok((variant, seed, run_rl(&cfg)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_chunks, DataConfig};
    use crate::nn::BaseModelConfig;

    #[test]
    fn sweep_matches_individual_runs() {
        let base = ClConfig {
            data: DataConfig { num_chunks: 2, classes_per_chunk: 2, samples_per_class: 4, channels: 1, height: 4, width: 4, ..Default::default() },
            model: BaseModelConfig { in_channels: 1, image_size: 4, conv_widths: vec![2], kernel: 3, width: 8, num_classes: 4 },
            budget: 128,
            steps_per_chunk: 2,
            batch_size: 4,
            eval_every: 1,
            eval_size: 8,
            ..Default::default()
        };
        let data = gen_synthetic_chunks(&base.data).unwrap();
        let methods = [ExpansionMethod::None, ExpansionMethod::DynamicMoe { granularity: 2 }];
        let out = sweep_cl(&base, &data, &methods, &[3, 4]).unwrap();
        assert_eq!(out.iter().map(|(m, s, _)| (*m, *s)).collect::<Vec<_>>(), grid(&methods, &[3, 4]));
        let single = crate::cl::run_cl(&ClConfig { method: methods[1], seed: 4, ..base.clone() }).unwrap();
        assert_eq!(out[3].2, single);
    }
}
