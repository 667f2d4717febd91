//! Identity softmax, batch-hard triplet and global-feature MSE losses.
//!
//! Each loss is a differentiable candle expression so the trainer can
//! backpropagate through it. The batch reduction is explicit: the literal
//! formulas are batch sums ([`Reduction::Sum`]); the trainer divides every
//! term by the batch size ([`Reduction::Mean`]) so the equal weighting of the
//! sum is preserved while the learning rate stays batch-size independent.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn apply(&self, per_item: &Tensor, batch: usize) -> Result<Tensor> {
        let s = per_item.sum_all()?;
        Ok(match self {
            Reduction::Sum => s,
            Reduction::Mean => (s / batch as f64)?,
        })
    }
}

/// P identities with K images each, and the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletBatchSpec {
    pub p: usize,
    pub k: usize,
    pub margin: f64,
}

impl Default for TripletBatchSpec {
    fn default() -> Self {
        Self {
            p: 8,
            k: 8,
            margin: 1.2,
        }
    }
}

impl TripletBatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch-hard mining needs P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::InvalidArgument(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }

    /// Labels must form exactly P identities of K entries each.
    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        if labels.len() != self.batch_size() {
            return Err(Error::InvalidArgument(format!(
                "batch of {} labels, expected P*K = {}",
                labels.len(),
                self.batch_size()
            )));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_default() += 1;
        }
        if counts.len() != self.p || counts.values().any(|&c| c != self.k) {
            return Err(Error::InvalidArgument(format!(
                "labels do not form {} identities of {} images: {counts:?}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Branch and part counts of the supervision term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MseConfig {
    pub branches: usize,
    pub parts: usize,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self { branches: 3, parts: 2 }
    }
}

fn labels_tensor(labels: &[u32], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(labels, like.device())?)
}

/// Negative log-likelihood of the true class under a softmax over `logits`
/// `(n, c)`, stabilized by subtracting the row maximum.
pub fn softmax_loss(logits: &Tensor, labels: &[u32], reduction: Reduction) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {c})")));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_prob = shifted.broadcast_sub(&lse)?;
    let idx = labels_tensor(labels, logits)?.unsqueeze(1)?;
    let picked = log_prob.gather(&idx, 1)?.squeeze(1)?;
    reduction.apply(&picked.neg()?, n)
}

/// Squared Euclidean distances between all rows of `x` `(n, d)`, clamped at
/// zero against cancellation.
fn pairwise_sq_dist(x: &Tensor) -> Result<Tensor> {
    let sq = x.sqr()?.sum(1)?;
    let gram = x.matmul(&x.t()?)?;
    let d = sq
        .unsqueeze(1)?
        .broadcast_add(&sq.unsqueeze(0)?)?
        .sub(&(gram * 2.0)?)?;
    Ok(d.relu()?)
}

/// Per-anchor hinge `[margin + max_pos d - min_neg d]_+` over a P x K batch,
/// using Euclidean distances.
///
/// The hardest positive may be the anchor itself only when all its positives
/// coincide with it; ties are routed to the first index.
pub fn batch_hard_triplet(
    features: &Tensor,
    labels: &[u32],
    spec: &TripletBatchSpec,
    reduction: Reduction,
) -> Result<Tensor> {
    spec.validate()?;
    let (n, _) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {n} features", labels.len())));
    }
    spec.check_labels(labels)?;
    let dtype = features.dtype();
    let device = features.device();
    let same: Vec<f64> = labels
        .iter()
        .flat_map(|a| labels.iter().map(move |b| if a == b { 1.0 } else { 0.0 }))
        .collect();
    let same = Tensor::from_vec(same, (n, n), device)?.to_dtype(dtype)?;

    let d2 = pairwise_sq_dist(features)?;
    let d2_const = d2.detach();
    // Non-negative distances: zeroing the negatives leaves the positive max.
    let pos_idx = (&d2_const * &same)?.argmax_keepdim(1)?;
    let big = d2_const.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * 2.0 + 1.0;
    let neg_idx = (&d2_const + (&same * big)?)?.argmin_keepdim(1)?;
    let hardest_pos = d2.gather(&pos_idx, 1)?.squeeze(1)?;
    let hardest_neg = d2.gather(&neg_idx, 1)?.squeeze(1)?;
    // sqrt has an infinite slope at zero; the floor only matters for
    // coincident features.
    let dp = hardest_pos.maximum(1e-12)?.sqrt()?;
    let dn = hardest_neg.maximum(1e-12)?.sqrt()?;
    let hinge = ((dp - dn)? + spec.margin)?.relu()?;
    reduction.apply(&hinge, n)
}

/// `sum_branches sum_parts ||global - target||^2`, with targets held constant.
///
/// Tensors are `(b, c)` (or `(c)` for a single sample); `globals[i][p]`
/// pairs with `targets[i][p]`.
pub fn mse_supervision(
    globals: &[Vec<Tensor>],
    targets: &[Vec<Tensor>],
    cfg: &MseConfig,
    reduction: Reduction,
) -> Result<Tensor> {
    if globals.len() != cfg.branches || targets.len() != cfg.branches {
        return Err(Error::InvalidArgument(format!(
            "expected {} branches, got {} globals and {} targets",
            cfg.branches,
            globals.len(),
            targets.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut batch = None;
    for (i, (gs, ts)) in globals.iter().zip(targets).enumerate() {
        if gs.len() != cfg.parts || ts.len() != cfg.parts {
            return Err(Error::InvalidArgument(format!(
                "branch {}: expected {} parts, got {} globals and {} targets",
                i + 1,
                cfg.parts,
                gs.len(),
                ts.len()
            )));
        }
        for (p, (g, t)) in gs.iter().zip(ts).enumerate() {
            if g.dims() != t.dims() {
                return Err(Error::InvalidArgument(format!(
                    "branch {} part {}: global {:?} vs target {:?}",
                    i + 1,
                    p + 1,
                    g.dims(),
                    t.dims()
                )));
            }
            let b = if g.rank() >= 2 { g.dim(0)? } else { 1 };
            batch.get_or_insert(b);
            let term = (g - t.detach())?.sqr()?.sum_all()?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no supervision terms".into()))?;
    reduction.apply(&total, batch.unwrap_or(1))
}

/// The three loss components of one batch. `mse` is `None` when the variant
/// has no supervision term.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub softmax: Tensor,
    pub triplet: Tensor,
    pub mse: Option<Tensor>,
}

/// Unweighted sum of the components.
pub fn total_loss(parts: &LossParts) -> Result<Tensor> {
    let mut total = (&parts.softmax + &parts.triplet)?;
    if let Some(mse) = &parts.mse {
        total = (total + mse)?;
    }
    Ok(total)
}

/// Host-side copy of [`LossParts`] for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub softmax: f64,
    pub triplet: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossValues {
    pub fn from_parts(parts: &LossParts, total: &Tensor) -> Result<Self> {
        Ok(Self {
            softmax: scalar(&parts.softmax)?,
            triplet: scalar(&parts.triplet)?,
            mse: parts.mse.as_ref().map(scalar).transpose()?,
            total: scalar(total)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.softmax.is_finite()
            && self.triplet.is_finite()
            && self.mse.is_none_or(f64::is_finite)
            && self.total.is_finite()
    }
}

/// Sum of a list of scalar tensors.
pub(crate) fn sum_scalars(terms: &[Tensor]) -> Result<Tensor> {
    let mut it = terms.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty loss sum".into()))?
        .clone();
    it.try_fold(first, |acc, t| Ok((acc + t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t64(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn uniform_softmax_is_log_c() {
        let logits = t64(&[0.3; 4], (1, 4));
        let l = val(&softmax_loss(&logits, &[2], Reduction::Sum).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn softmax_spike_goes_to_zero() {
        let logits = t64(&[0.0, 1e4, 0.0], (1, 3));
        assert!(val(&softmax_loss(&logits, &[1], Reduction::Sum).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        let logits = t64(&[0.0; 6], (2, 3));
        assert!(softmax_loss(&logits, &[0, 3], Reduction::Sum).is_err());
        assert!(softmax_loss(&logits, &[0], Reduction::Sum).is_err());
    }

    #[test]
    fn softmax_mean_divides_by_batch() {
        let logits = t64(&[1.0, 2.0, 0.5, -1.0], (2, 2));
        let s = val(&softmax_loss(&logits, &[0, 1], Reduction::Sum).unwrap());
        let m = val(&softmax_loss(&logits, &[0, 1], Reduction::Mean).unwrap());
        assert!((s / 2.0 - m).abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_triplet_example() {
        let x = t64(&[0.0, 1.0, 3.0, 3.1], (4, 1));
        let spec = TripletBatchSpec { p: 2, k: 2, margin: 1.2 };
        let l = val(&batch_hard_triplet(&x, &[0, 0, 1, 1], &spec, Reduction::Sum).unwrap());
        assert!((l - 0.2).abs() < 1e-9, "{l}");
    }

    #[test]
    fn separated_clusters_have_zero_triplet() {
        let x = t64(&[0.0, 0.1, 10.0, 10.1], (4, 1));
        let spec = TripletBatchSpec { p: 2, k: 2, margin: 1.2 };
        assert_eq!(val(&batch_hard_triplet(&x, &[4, 4, 9, 9], &spec, Reduction::Sum).unwrap()), 0.0);
    }

    #[test]
    fn triplet_rejects_degenerate_batches() {
        let x = t64(&[0.0, 1.0, 2.0, 3.0], (4, 1));
        let bad = TripletBatchSpec { p: 1, k: 4, margin: 1.0 };
        assert!(batch_hard_triplet(&x, &[0, 0, 0, 0], &bad, Reduction::Sum).is_err());
        let spec = TripletBatchSpec { p: 2, k: 2, margin: 1.0 };
        assert!(batch_hard_triplet(&x, &[0, 0, 0, 1], &spec, Reduction::Sum).is_err());
        assert!(batch_hard_triplet(&x, &[0, 0, 1], &spec, Reduction::Sum).is_err());
    }

    #[test]
    fn mse_cases() {
        let cfg = MseConfig { branches: 1, parts: 2 };
        let a = t64(&[1.0, 2.0], (1, 2));
        let b = t64(&[1.0, 3.0], (1, 2));
        let zero = mse_supervision(&[vec![a.clone(), a.clone()]], &[vec![a.clone(), a.clone()]], &cfg, Reduction::Mean).unwrap();
        assert_eq!(val(&zero), 0.0);
        let one = mse_supervision(&[vec![a.clone(), a.clone()]], &[vec![b, a.clone()]], &cfg, Reduction::Mean).unwrap();
        assert_eq!(val(&one), 1.0);
        let short = t64(&[1.0], (1, 1));
        assert!(mse_supervision(&[vec![a.clone(), a.clone()]], &[vec![short, a.clone()]], &cfg, Reduction::Mean).is_err());
        assert!(mse_supervision(&[vec![a.clone()]], &[vec![a]], &cfg, Reduction::Mean).is_err());
    }

    #[test]
    fn mse_targets_receive_no_gradient() {
        let cfg = MseConfig { branches: 1, parts: 1 };
        let g = Var::from_tensor(&t64(&[1.0, 2.0, 3.0], (1, 3))).unwrap();
        let t = Var::from_tensor(&t64(&[0.0, 0.0, 0.0], (1, 3))).unwrap();
        let loss = mse_supervision(&[vec![g.as_tensor().clone()]], &[vec![t.as_tensor().clone()]], &cfg, Reduction::Sum).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(t.as_tensor()).is_none());
        let gg: Vec<f64> = grads.get(g.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gg, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn total_is_plain_sum() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let parts = LossParts { softmax: s(1.0), triplet: s(2.0), mse: Some(s(0.5)) };
        assert_eq!(val(&total_loss(&parts).unwrap()), 3.5);
        let parts = LossParts { softmax: s(0.0), triplet: s(0.0), mse: None };
        assert_eq!(val(&total_loss(&parts).unwrap()), 0.0);
    }
}
