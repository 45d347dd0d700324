//! Overlapping contiguous band groups and recombination of per-group
//! predictions into a full cube.
//!
//! Groups start every `stride` bands and hold exactly `group_size` bands.
//! The last group is right-aligned to end at the final band, so it can
//! overlap its predecessor by more than `group_size - stride`. Bands covered
//! by several groups are merged by an unweighted mean.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandGroupPlan {
    pub total_bands: usize,
    pub group_size: usize,
    pub stride: usize,
    pub groups: Vec<Range<usize>>,
    /// Number of groups covering each band.
    pub coverage: Vec<usize>,
}

pub fn plan_groups(total_bands: usize, group_size: usize, stride: usize) -> Result<BandGroupPlan> {
    if total_bands == 0 || group_size == 0 || stride == 0 {
        return Err(Error::config("band counts, group size and stride must be >= 1"));
    }
    if group_size > total_bands {
        return Err(Error::config(format!(
            "group size {group_size} exceeds the {total_bands} available bands"
        )));
    }
    if stride > group_size {
        return Err(Error::config(format!(
            "group stride {stride} larger than group size {group_size} would leave bands uncovered"
        )));
    }
    let mut groups = Vec::new();
    let mut start = 0;
    loop {
        if start + group_size >= total_bands {
            groups.push(total_bands - group_size..total_bands);
            break;
        }
        groups.push(start..start + group_size);
        start += stride;
    }
    let mut coverage = vec![0; total_bands];
    for g in &groups {
        coverage[g.clone()].iter_mut().for_each(|c| *c += 1);
    }
    Ok(BandGroupPlan {
        total_bands,
        group_size,
        stride,
        groups,
        coverage,
    })
}

impl BandGroupPlan {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Slices an `[H, W, total_bands]` tensor into one `[H, W, G]` tensor per group.
    pub fn split(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (h, w, c) = hwc(x, "split_groups")?;
        if c != self.total_bands {
            return Err(Error::dim(
                "split_groups",
                format!("tensor has {c} bands, plan covers {}", self.total_bands),
            ));
        }
        self.groups
            .iter()
            .map(|r| {
                let mut out = Vec::with_capacity(h * w * r.len());
                for px in x.data().chunks(c) {
                    out.extend_from_slice(&px[r.clone()]);
                }
                Tensor::new(vec![h, w, r.len()], out)
            })
            .collect()
    }

    /// Averages per-group `[H, W, G]` predictions back to `[H, W, total_bands]`.
    pub fn merge(&self, preds: &[Tensor]) -> Result<Tensor> {
        if preds.len() != self.groups.len() {
            return Err(Error::dim(
                "merge_groups",
                format!("{} predictions for {} groups", preds.len(), self.groups.len()),
            ));
        }
        let (h, w, _) = hwc(&preds[0], "merge_groups")?;
        let c = self.total_bands;
        // Mean computed as `first + Σ(p − first)/n`, so agreeing predictions
        // merge back to the identical value.
        let mut first = vec![f64::NAN; h * w * c];
        let mut out = vec![0.0; h * w * c];
        for (pred, range) in preds.iter().zip(&self.groups) {
            let (ph, pw, pc) = hwc(pred, "merge_groups")?;
            if (ph, pw, pc) != (h, w, self.group_size) {
                return Err(Error::dim(
                    "merge_groups",
                    format!(
                        "prediction {:?} expected [{h}, {w}, {}]",
                        pred.shape(),
                        self.group_size
                    ),
                ));
            }
            for ((dst, base), src) in out.chunks_mut(c).zip(first.chunks_mut(c)).zip(pred.data().chunks(pc)) {
                for ((d, b), &s) in dst[range.clone()].iter_mut().zip(&mut base[range.clone()]).zip(src) {
                    if b.is_nan() {
                        *b = s;
                    }
                    *d += s - *b;
                }
            }
        }
        for (px, base) in out.chunks_mut(c).zip(first.chunks(c)) {
            for ((v, &n), &b) in px.iter_mut().zip(&self.coverage).zip(base) {
                *v = b + *v / n as f64;
            }
        }
        Tensor::new(vec![h, w, c], out)
    }
}

/// Convenience wrapper matching the plan-free call style.
pub fn merge_groups(preds: &[Tensor], plan: &BandGroupPlan) -> Result<Tensor> {
    plan.merge(preds)
}

fn hwc(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        [1, h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(op, format!("expected [H, W, C] tensor, got {:?}", t.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(p: &BandGroupPlan) -> Vec<(usize, usize)> {
        p.groups.iter().map(|r| (r.start, r.end)).collect()
    }

    #[test]
    fn ten_bands_four_by_two() {
        let p = plan_groups(10, 4, 2).unwrap();
        assert_eq!(ranges(&p), vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
    }

    #[test]
    fn full_width_group() {
        let p = plan_groups(7, 7, 3).unwrap();
        assert_eq!(ranges(&p), vec![(0, 7)]);
    }

    #[test]
    fn config_errors() {
        assert!(plan_groups(4, 5, 1).unwrap_err().is_config());
        assert!(plan_groups(10, 4, 5).unwrap_err().is_config());
        assert!(plan_groups(10, 0, 1).unwrap_err().is_config());
    }

    #[test]
    fn disjoint_plan_concatenates() {
        let p = plan_groups(6, 3, 3).unwrap();
        let a = Tensor::from_fn(&[1, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[1, 1, 3], |i| 10.0 + i as f64);
        let m = p.merge(&[a, b]).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn overlapping_band_is_averaged() {
        let p = plan_groups(3, 2, 1).unwrap();
        let a = Tensor::new(vec![1, 1, 2], vec![5.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![3.0, 7.0]).unwrap();
        let m = p.merge(&[a, b]).unwrap();
        assert_eq!(m.data(), &[5.0, 2.0, 7.0]);
    }

    #[test]
    fn equal_predictions_merge_to_same_value() {
        let p = plan_groups(5, 3, 2).unwrap();
        let preds: Vec<Tensor> = (0..p.len()).map(|_| Tensor::full(&[2, 2, 3], 0.75)).collect();
        assert!(p.merge(&preds).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn merge_count_mismatch() {
        let p = plan_groups(5, 3, 2).unwrap();
        assert!(p.merge(&[Tensor::zeros(&[1, 1, 3])]).is_err());
    }
}
