//! Reference implementations written directly from the definitions, with no
//! shared code with the library.

use cgpn::evaluation::Meta;

/// Contiguous proper windows (start, length) of `n` strips covering at least
/// half the height, found by scanning every subset of strips.
pub fn windows_exhaustive(n: usize) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let len = members.len();
        let contiguous = members.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous && len < n && 2 * len >= n {
            found.push((members[0], len));
        }
    }
    found.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    found
}

/// Summed negative log-likelihood, log-sum-exp in f64.
pub fn softmax_nll(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Summed batch-hard hinge, looping over all anchors, positives and negatives.
pub fn batch_hard(features: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for (a, fa) in features.iter().enumerate() {
        let mut hardest_pos = 0.0f64;
        let mut hardest_neg = f64::INFINITY;
        for (j, fj) in features.iter().enumerate() {
            let d = euclid(fa, fj);
            if labels[j] == labels[a] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (margin + hardest_pos - hardest_neg).max(0.0);
    }
    total
}

/// Sum over branches and parts of squared distances, summed over the batch.
pub fn mse_sum(globals: &[Vec<Vec<Vec<f64>>>], targets: &[Vec<Vec<Vec<f64>>>]) -> f64 {
    let mut s = 0.0;
    for (gb, tb) in globals.iter().zip(targets) {
        for (gp, tp) in gb.iter().zip(tb) {
            for (g, t) in gp.iter().zip(tp) {
                for (x, y) in g.iter().zip(t) {
                    s += (x - y) * (x - y);
                }
            }
        }
    }
    s
}

/// Metrics from the definitions: junk is -1, distractor 0, and same id plus
/// same camera is excluded. Returns (mAP, CMC rank 1..=ng, scored queries).
pub fn cmc_map_reference(dist: &[Vec<f64>], q: &[Meta], g: &[Meta]) -> (f64, Vec<f64>, usize) {
    let ng = g.len();
    let mut ap_sum = 0.0;
    let mut first_hits = vec![0usize; ng + 1];
    let mut scored = 0;
    for (qi, qm) in q.iter().enumerate() {
        if qm.person_id == -1 || qm.person_id == 0 {
            continue;
        }
        let valid: Vec<usize> = (0..ng)
            .filter(|&j| g[j].person_id != -1 && !(g[j].person_id == qm.person_id && g[j].camera_id == qm.camera_id))
            .collect();
        // Rank of each valid entry: how many valid entries precede it.
        let rank_of = |j: usize| {
            1 + valid
                .iter()
                .filter(|&&o| dist[qi][o] < dist[qi][j] || (dist[qi][o] == dist[qi][j] && o < j))
                .count()
        };
        let relevant_ranks: Vec<usize> = {
            let mut r: Vec<usize> = valid
                .iter()
                .copied()
                .filter(|&j| g[j].person_id == qm.person_id)
                .map(rank_of)
                .collect();
            r.sort_unstable();
            r
        };
        if relevant_ranks.is_empty() {
            continue;
        }
        scored += 1;
        let ap: f64 = relevant_ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum::<f64>()
            / relevant_ranks.len() as f64;
        ap_sum += ap;
        first_hits[relevant_ranks[0]] += 1;
    }
    let cmc = (1..=ng)
        .map(|k| {
            if scored == 0 {
                0.0
            } else {
                first_hits[1..=k].iter().sum::<usize>() as f64 / scored as f64
            }
        })
        .collect();
    let map = if scored == 0 { 0.0 } else { ap_sum / scored as f64 };
    (map, cmc, scored)
}
