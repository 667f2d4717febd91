//! Flip-averaged embedding extraction and the single-query CMC / mAP protocol.

use std::collections::BTreeSet;

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, flip_tensor_horizontal, Dataset, ImageRecord, JUNK_ID};
use crate::error::{Error, Result};
use crate::network::CgpnModel;

/// Identity and camera of one query or gallery image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub person_id: i64,
    pub camera_id: u32,
}

impl From<&ImageRecord> for Meta {
    fn from(r: &ImageRecord) -> Self {
        Self {
            person_id: r.person_id,
            camera_id: r.camera_id,
        }
    }
}

/// Matching rules. Junk ids are removed from every ranking; distractor ids
/// stay in the ranking but are never relevant. Queries whose id is junk or a
/// distractor are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub exclude_same_camera_same_id: bool,
    pub junk_ids: BTreeSet<i64>,
    pub distractor_ids: BTreeSet<i64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            exclude_same_camera_same_id: true,
            junk_ids: BTreeSet::from([JUNK_ID]),
            distractor_ids: BTreeSet::from([0]),
        }
    }
}

impl EvalProtocol {
    fn removed(&self, q: &Meta, g: &Meta) -> bool {
        self.junk_ids.contains(&g.person_id)
            || (self.exclude_same_camera_same_id && g.person_id == q.person_id && g.camera_id == q.camera_id)
    }

    fn relevant(&self, q: &Meta, g: &Meta) -> bool {
        g.person_id == q.person_id && !self.distractor_ids.contains(&g.person_id)
    }

    fn scorable_query(&self, q: &Meta) -> bool {
        !self.junk_ids.contains(&q.person_id) && !self.distractor_ids.contains(&q.person_id)
    }
}

/// Pairwise Euclidean distances `(nq, ng)`, accumulated in double precision.
/// With `l2_normalize` both sides are scaled to unit length first.
pub fn distance_matrix(query: ArrayView2<f32>, gallery: ArrayView2<f32>, l2_normalize: bool) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query dimension {} vs gallery dimension {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let prep = |m: ArrayView2<f32>| -> Array2<f64> {
        let mut m = m.mapv(f64::from);
        if l2_normalize {
            for mut row in m.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
        }
        m
    };
    let (q, g) = (prep(query), prep(gallery));
    let mut out = Array2::zeros((q.nrows(), g.nrows()));
    for (i, qr) in q.rows().into_iter().enumerate() {
        let qs = qr.as_slice().expect("standard layout");
        for (j, gr) in g.rows().into_iter().enumerate() {
            out[[i, j]] = squared_distance(qs, gr.as_slice().expect("standard layout")).sqrt();
        }
    }
    Ok(out)
}

/// Sum of squared differences over eight fixed lanes, so the loop vectorizes
/// while the summation order stays fixed.
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Per-query retrieval outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    /// Gallery indices by ascending distance, after protocol filtering.
    pub ranking: Vec<usize>,
    pub average_precision: f64,
    /// Zero-based position of the first relevant entry in `ranking`.
    pub first_match: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryResult>,
    /// Queries without any valid gallery match.
    pub skipped: Vec<usize>,
    /// `cmc[k - 1]` is the fraction of scored queries matched within rank k.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl RankingResult {
    pub fn rank(&self, k: usize) -> f64 {
        if k == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

fn sorted_gallery(row: ndarray::ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable: equal distances keep gallery index order.
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

/// Single-query CMC and mAP.
pub fn cmc_map(dist: &Array2<f64>, query_meta: &[Meta], gallery_meta: &[Meta], protocol: &EvalProtocol) -> Result<RankingResult> {
    let (nq, ng) = dist.dim();
    if nq != query_meta.len() || ng != gallery_meta.len() {
        return Err(Error::Shape(format!(
            "distance matrix {nq}x{ng} vs {} query and {} gallery records",
            query_meta.len(),
            gallery_meta.len()
        )));
    }
    let mut queries = Vec::new();
    let mut skipped = Vec::new();
    let mut hits = vec![0usize; ng];
    for (qi, q) in query_meta.iter().enumerate() {
        if !protocol.scorable_query(q) {
            skipped.push(qi);
            continue;
        }
        let ranking: Vec<usize> = sorted_gallery(dist.row(qi))
            .into_iter()
            .filter(|&g| !protocol.removed(q, &gallery_meta[g]))
            .collect();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in ranking.iter().enumerate() {
            if protocol.relevant(q, &gallery_meta[g]) {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        let Some(first_match) = first else {
            skipped.push(qi);
            continue;
        };
        hits[first_match] += 1;
        queries.push(QueryResult {
            query: qi,
            ranking,
            average_precision: precision_sum / found as f64,
            first_match,
        });
    }
    let valid = queries.len();
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(if valid == 0 { 0.0 } else { acc as f64 / valid as f64 });
    }
    let map = if valid == 0 {
        0.0
    } else {
        queries.iter().map(|q| q.average_precision).sum::<f64>() / valid as f64
    };
    if !skipped.is_empty() {
        log::info!("{} of {nq} queries have no valid match and were skipped", skipped.len());
    }
    Ok(RankingResult {
        queries,
        skipped,
        cmc,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub gallery: usize,
    pub distance: f64,
    pub is_match: bool,
}

/// Top-k gallery entries per query after protocol filtering, with match flags.
/// Lists are shorter than `k` when fewer valid gallery entries exist.
pub fn rank_list(
    dist: &Array2<f64>,
    query_meta: &[Meta],
    gallery_meta: &[Meta],
    protocol: &EvalProtocol,
    k: usize,
) -> Result<Vec<Vec<RankEntry>>> {
    let (nq, ng) = dist.dim();
    if nq != query_meta.len() || ng != gallery_meta.len() {
        return Err(Error::Shape(format!("distance matrix {nq}x{ng} does not match metadata")));
    }
    Ok(query_meta
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            sorted_gallery(dist.row(qi))
                .into_iter()
                .filter(|&g| !protocol.removed(q, &gallery_meta[g]))
                .take(k)
                .map(|g| RankEntry {
                    gallery: g,
                    distance: dist[[qi, g]],
                    is_match: protocol.relevant(q, &gallery_meta[g]),
                })
                .collect()
        })
        .collect())
}

/// Mean mAP of uniformly random rankings, the chance level for a metadata set.
pub fn chance_map(query_meta: &[Meta], gallery_meta: &[Meta], protocol: &EvalProtocol, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let dist = Array2::from_shape_fn((query_meta.len(), gallery_meta.len()), |_| rng.random::<f64>());
        total += cmc_map(&dist, query_meta, gallery_meta, protocol)?.map;
    }
    Ok(total / trials.max(1) as f64)
}

/// Embeddings of `indices`, each the mean of the image and its mirror.
/// Rows follow `indices`; columns follow the model's feature census.
pub fn extract_embeddings(model: &CgpnModel, dataset: &Dataset, indices: &[usize], batch_size: usize) -> Result<Array2<f32>> {
    let dim = model.embedding_dim();
    let mut out = Array2::zeros((indices.len(), dim));
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for (chunk_no, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let images = chunk
            .iter()
            .map(|&i| augment(&dataset.image(i)?, false, &mut unused))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&images, 0)?;
        let plain = model.embed(&batch)?;
        let mirrored = model.embed(&flip_tensor_horizontal(&batch)?)?;
        let mean = ((plain + mirrored)? * 0.5)?;
        let rows: Vec<Vec<f32>> = mean.to_vec2()?;
        for (r, row) in rows.into_iter().enumerate() {
            let target = chunk_no * batch_size.max(1) + r;
            for (c, v) in row.into_iter().enumerate() {
                out[[target, c]] = v;
            }
        }
    }
    Ok(out)
}

/// Summary written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub num_scored: usize,
    pub num_skipped: usize,
    pub embedding_dim: usize,
}

impl MetricsReport {
    pub fn new(result: &RankingResult, embedding_dim: usize) -> Self {
        Self {
            map: result.map,
            rank1: result.rank(1),
            rank5: result.rank(5),
            rank10: result.rank(10),
            num_queries: result.queries.len() + result.skipped.len(),
            num_scored: result.queries.len(),
            num_skipped: result.skipped.len(),
            embedding_dim,
        }
    }

    pub fn to_table(&self) -> String {
        format!(
            "metric    value\n\
             mAP       {:.4}\n\
             Rank-1    {:.4}\n\
             Rank-5    {:.4}\n\
             Rank-10   {:.4}\n\
             queries   {} ({} scored, {} skipped)\n\
             dim       {}\n",
            self.map, self.rank1, self.rank5, self.rank10, self.num_queries, self.num_scored, self.num_skipped, self.embedding_dim
        )
    }
}
