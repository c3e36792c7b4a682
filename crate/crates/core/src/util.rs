use rayon::prelude::*;

/// Chunk length for parallel reductions. Partial sums are formed over fixed
/// chunks and combined left to right, so results do not depend on the number
/// of worker threads.
pub(crate) const REDUCE_CHUNK: usize = 4096;

pub(crate) fn ordered_sum(values: &[f64]) -> f64 {
    if values.len() <= REDUCE_CHUNK {
        return values.iter().sum();
    }
    let partials: Vec<f64> = values.par_chunks(REDUCE_CHUNK).map(|c| c.iter().sum()).collect();
    partials.iter().sum()
}
