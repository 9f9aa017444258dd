//! Intersection over union between hard masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// IoU per foreground class present in either mask, then the mean over those classes.
    #[default]
    PerClass,
    /// One IoU over all foreground pixels; intersection requires the same class.
    ClassAgnostic,
}

/// IoU of the foreground of two hard masks. Both-empty foreground gives 1.0.
pub fn iou<T: Scalar>(pred: &SegMask<T>, target: &SegMask<T>, mode: IouMode) -> Result<f64> {
    pred.check_same_shape(target)?;
    let p = pred.class_map().ok_or(Error::MaskNotHard("prediction"))?;
    let t = target.class_map().ok_or(Error::MaskNotHard("target"))?;
    Ok(iou_of_class_maps(&p, &t, pred.num_classes(), mode))
}

pub(crate) fn iou_of_class_maps(p: &[u8], t: &[u8], num_classes: usize, mode: IouMode) -> f64 {
    match mode {
        IouMode::PerClass => {
            let mut inter = vec![0usize; num_classes];
            let mut union = vec![0usize; num_classes];
            for (&a, &b) in p.iter().zip(t) {
                if a == b {
                    if a > 0 {
                        inter[a as usize] += 1;
                        union[a as usize] += 1;
                    }
                } else {
                    if a > 0 {
                        union[a as usize] += 1;
                    }
                    if b > 0 {
                        union[b as usize] += 1;
                    }
                }
            }
            let scores: Vec<f64> = (1..num_classes)
                .filter(|&k| union[k] > 0)
                .map(|k| inter[k] as f64 / union[k] as f64)
                .collect();
            if scores.is_empty() {
                1.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            }
        }
        IouMode::ClassAgnostic => {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in p.iter().zip(t) {
                if a > 0 || b > 0 {
                    union += 1;
                    if a == b {
                        inter += 1;
                    }
                }
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, k: usize, ids: &[u8]) -> SegMask<f64> {
        SegMask::from_class_map(w, h, k, ids).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(2, 2, 3, &[0, 1, 2, 2]);
        assert_eq!(iou(&m, &m, IouMode::PerClass).unwrap(), 1.0);
        assert_eq!(iou(&m, &m, IouMode::ClassAgnostic).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_same_class_scores_zero() {
        let a = mask(2, 1, 2, &[1, 0]);
        let b = mask(2, 1, 2, &[0, 1]);
        assert_eq!(iou(&a, &b, IouMode::PerClass).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_squares_score_one_third() {
        // 2x2 squares at x in {0,1} and x in {1,2}, rows 0..2: overlap 2, union 6.
        let mut a = [0u8; 16];
        let mut b = [0u8; 16];
        for y in 0..2 {
            for x in 0..2 {
                a[y * 4 + x] = 1;
                b[y * 4 + x + 1] = 1;
            }
        }
        let v = iou(&mask(4, 4, 2, &a), &mask(4, 4, 2, &b), IouMode::PerClass).unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }

    #[test]
    fn empty_foreground_conventions() {
        let empty = mask(2, 1, 2, &[0, 0]);
        let some = mask(2, 1, 2, &[1, 0]);
        assert_eq!(iou(&empty, &empty, IouMode::PerClass).unwrap(), 1.0);
        assert_eq!(iou(&empty, &some, IouMode::PerClass).unwrap(), 0.0);
        assert_eq!(iou(&some, &empty, IouMode::ClassAgnostic).unwrap(), 0.0);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = mask(2, 1, 2, &[0, 0]);
        let b = mask(1, 2, 2, &[0, 0]);
        let msg = iou(&a, &b, IouMode::PerClass).unwrap_err().to_string();
        assert!(msg.contains("2x1x2") && msg.contains("2x2x1"), "{msg}");
    }

    #[test]
    fn soft_masks_are_rejected() {
        let soft = SegMask::<f64>::from_planes(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let hard = mask(1, 1, 2, &[0]);
        assert!(iou(&soft, &hard, IouMode::PerClass).is_err());
    }

    #[test]
    fn symmetric_over_all_two_by_two_two_class_pairs() {
        for a in 0u8..16 {
            for b in 0u8..16 {
                let ids = |bits: u8| (0..4).map(|i| (bits >> i) & 1).collect::<Vec<_>>();
                let ma = mask(2, 2, 2, &ids(a));
                let mb = mask(2, 2, 2, &ids(b));
                for mode in [IouMode::PerClass, IouMode::ClassAgnostic] {
                    assert_eq!(iou(&ma, &mb, mode).unwrap(), iou(&mb, &ma, mode).unwrap());
                }
            }
        }
    }

    #[test]
    fn class_mismatch_counts_against_both_classes() {
        // pixel 0: pred 1, target 2. class 1: 0/1, class 2: 0/1, class agnostic: 0/1.
        let a = mask(2, 1, 3, &[1, 0]);
        let b = mask(2, 1, 3, &[2, 0]);
        assert_eq!(iou(&a, &b, IouMode::PerClass).unwrap(), 0.0);
        assert_eq!(iou(&a, &b, IouMode::ClassAgnostic).unwrap(), 0.0);
    }
}
