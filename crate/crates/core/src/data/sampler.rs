use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::losses::TripletBatchSpec;

/// Derive an independent stream seed from a base seed and a path of
/// counters (epoch, step, slot, ...), via SplitMix64 finalization.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// K record indices of one identity; with replacement when it has fewer.
fn draw_k(records: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if records.len() >= k {
        index::sample(rng, records.len(), k)
            .into_iter()
            .map(|i| records[i])
            .collect()
    } else {
        (0..k)
            .map(|_| records[rng.random_range(0..records.len())])
            .collect()
    }
}

fn check_spec(index: &DatasetIndex, spec: &TripletBatchSpec) -> Result<usize> {
    spec.validate()?;
    let available = index.id_to_records().len();
    if available < spec.p {
        return Err(Error::Dataset(format!(
            "{available} train identities, need at least P = {}",
            spec.p
        )));
    }
    Ok(available)
}

/// One P x K batch: P distinct train identities, K records each, grouped by
/// identity. Deterministic for a fixed seed.
pub fn pk_sample(index: &DatasetIndex, spec: &TripletBatchSpec, seed: u64) -> Result<Vec<usize>> {
    check_spec(index, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<&Vec<usize>> = index.id_to_records().values().collect();
    let chosen = index::sample(&mut rng, ids.len(), spec.p);
    let mut batch = Vec::with_capacity(spec.batch_size());
    for i in chosen {
        batch.extend(draw_k(ids[i], spec.k, &mut rng));
    }
    Ok(batch)
}

/// All batches of one epoch: identities are shuffled and consumed P at a time,
/// dropping the incomplete tail, so every identity appears at most once.
pub fn epoch_batches(
    index: &DatasetIndex,
    spec: &TripletBatchSpec,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    check_spec(index, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[epoch as u64]));
    let mut ids: Vec<&Vec<usize>> = index.id_to_records().values().collect();
    ids.shuffle(&mut rng);
    Ok(ids
        .chunks_exact(spec.p)
        .map(|group| {
            group
                .iter()
                .flat_map(|recs| draw_k(recs, spec.k, &mut rng))
                .collect()
        })
        .collect())
}
