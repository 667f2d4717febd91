//! Coarse-grained strip partitioning of branch feature maps.
//!
//! A branch output of height `h` is cut into `N` equal horizontal strips.
//! Local features are taken from *contiguous* runs of strips whose combined
//! height is at least a minimum fraction of the map (one half by default) and
//! strictly less than the whole map, then reduced by global max pooling.

use std::fmt;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A contiguous vertical region of `length` strips starting at strip `start`,
/// out of `total` equal strips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StripWindow {
    pub start: usize,
    pub length: usize,
    pub total: usize,
}

impl StripWindow {
    pub fn new(start: usize, length: usize, total: usize) -> Result<Self> {
        if length == 0 || start + length > total {
            return Err(Error::InvalidArgument(format!(
                "window ({start}, {length}) does not fit in {total} strips"
            )));
        }
        Ok(Self {
            start,
            length,
            total,
        })
    }

    /// Fraction of the map height covered by the window.
    pub fn height_fraction(&self) -> f64 {
        self.length as f64 / self.total as f64
    }

    /// Half-open row range `[begin, end)` of the window in a map of `height` rows.
    pub fn rows(&self, height: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.total) {
            return Err(Error::NotDivisible {
                height,
                divisor: self.total,
            });
        }
        let strip = height / self.total;
        Ok((self.start * strip, (self.start + self.length) * strip))
    }
}

impl fmt::Display for StripWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}..{})/{}", self.start, self.start + self.length, self.total)
    }
}

/// Exact non-negative rational, used for the minimum height proportion so the
/// boundary case (exactly one half) is decided without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub const HALF: Fraction = Fraction { num: 1, den: 2 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::InvalidArgument(format!(
                "min_fraction {num}/{den} outside (0, 1]"
            )));
        }
        Ok(Self { num, den })
    }

    /// `length / total >= self`, by cross multiplication.
    fn admits(&self, length: usize, total: usize) -> bool {
        length * self.den >= self.num * total
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Fraction::HALF
    }
}

/// Rules for which contiguous windows become local features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPolicy {
    pub min_fraction: Fraction,
    /// Also emit the full-height window. Off for the canonical model, where
    /// the global part already covers the whole map.
    pub include_full_height: bool,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            min_fraction: Fraction::HALF,
            include_full_height: false,
        }
    }
}

/// Per-branch partition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub branch_index: usize,
    pub num_strips: usize,
}

impl BranchSpec {
    /// The three canonical branches, split into 2, 3 and 4 strips.
    pub fn canonical() -> [BranchSpec; 3] {
        [
            BranchSpec {
                branch_index: 1,
                num_strips: 2,
            },
            BranchSpec {
                branch_index: 2,
                num_strips: 3,
            },
            BranchSpec {
                branch_index: 3,
                num_strips: 4,
            },
        ]
    }
}

/// Every contiguous window of `num_strips` strips covering at least
/// `min_fraction` of the height, excluding the full-height window.
///
/// Ordered by descending length, then ascending start.
pub fn enumerate_windows(num_strips: usize, min_fraction: Fraction) -> Result<Vec<StripWindow>> {
    enumerate_windows_with(
        num_strips,
        &WindowPolicy {
            min_fraction,
            include_full_height: false,
        },
    )
}

pub fn enumerate_windows_with(num_strips: usize, policy: &WindowPolicy) -> Result<Vec<StripWindow>> {
    if num_strips < 1 {
        return Err(Error::InvalidArgument(
            "num_strips must be at least 1".into(),
        ));
    }
    let frac = Fraction::new(policy.min_fraction.num, policy.min_fraction.den)?;
    let max_len = if policy.include_full_height {
        num_strips
    } else {
        num_strips - 1
    };
    let mut out = Vec::new();
    for length in (1..=max_len).rev() {
        if !frac.admits(length, num_strips) {
            break;
        }
        for start in 0..=(num_strips - length) {
            out.push(StripWindow {
                start,
                length,
                total: num_strips,
            });
        }
    }
    Ok(out)
}

/// Plain uniform split into `num_strips` single-strip windows (the fine-grained
/// ablation).
pub fn uniform_strips(num_strips: usize) -> Result<Vec<StripWindow>> {
    if num_strips < 1 {
        return Err(Error::InvalidArgument(
            "num_strips must be at least 1".into(),
        ));
    }
    Ok((0..num_strips)
        .map(|start| StripWindow {
            start,
            length: 1,
            total: num_strips,
        })
        .collect())
}

/// A rank-3 `(c, h, w)` or batched rank-4 `(b, c, h, w)` activation.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.rank() {
            3 | 4 => Ok(Self(tensor)),
            r => Err(Error::Shape(format!(
                "feature map must be rank 3 or 4, got rank {r}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_batched(&self) -> bool {
        self.0.rank() == 4
    }

    pub fn channels(&self) -> usize {
        let dims = self.0.dims();
        dims[dims.len() - 3]
    }

    pub fn height(&self) -> usize {
        let dims = self.0.dims();
        dims[dims.len() - 2]
    }

    pub fn width(&self) -> usize {
        let dims = self.0.dims();
        dims[dims.len() - 1]
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    fn height_dim(&self) -> usize {
        self.0.rank() - 2
    }

    /// Rows `[begin, end)`, all channels and columns.
    pub fn rows(&self, begin: usize, end: usize) -> Result<FeatureMap> {
        if begin >= end || end > self.height() {
            return Err(Error::Shape(format!(
                "row range [{begin}, {end}) outside height {}",
                self.height()
            )));
        }
        Ok(FeatureMap(self.0.narrow(self.height_dim(), begin, end - begin)?))
    }

    pub fn detach(&self) -> FeatureMap {
        FeatureMap(self.0.detach())
    }
}

/// Sub-map covered by `window`.
pub fn slice_window(fmap: &FeatureMap, window: &StripWindow) -> Result<FeatureMap> {
    let (begin, end) = window.rows(fmap.height())?;
    fmap.rows(begin, end)
}

/// Global max pooling: per-channel maximum over all spatial positions.
///
/// Returns shape `(c)` for an unbatched map and `(b, c)` for a batched one.
pub fn pool_window(fmap: &FeatureMap) -> Result<Tensor> {
    if fmap.height() == 0 || fmap.width() == 0 {
        return Err(Error::Shape(format!(
            "cannot pool empty spatial extent {}x{}",
            fmap.height(),
            fmap.width()
        )));
    }
    let flat = fmap.tensor().flatten_from(fmap.height_dim())?;
    Ok(flat.max(D::Minus1)?)
}

/// Pooled features for an explicit list of windows, in list order.
pub fn local_features(
    fmap: &FeatureMap,
    windows: &[StripWindow],
) -> Result<Vec<(StripWindow, Tensor)>> {
    windows
        .iter()
        .map(|w| Ok((*w, pool_window(&slice_window(fmap, w)?)?)))
        .collect()
}

/// Coarse-grained local features of one branch: enumerate, slice, pool.
pub fn branch_local_features(
    fmap: &FeatureMap,
    spec: &BranchSpec,
) -> Result<Vec<(StripWindow, Tensor)>> {
    if !fmap.height().is_multiple_of(spec.num_strips) {
        return Err(Error::NotDivisible {
            height: fmap.height(),
            divisor: spec.num_strips,
        });
    }
    let windows = enumerate_windows(spec.num_strips, Fraction::HALF)?;
    local_features(fmap, &windows)
}
