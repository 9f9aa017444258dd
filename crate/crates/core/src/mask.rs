use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-class mask stack of shape `(num_classes, height, width)`, plane-major.
///
/// A soft mask holds a probability simplex per pixel; a hard mask is one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SegMask<T: Scalar> {
    width: usize,
    height: usize,
    num_classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> SegMask<T> {
    pub fn from_planes(width: usize, height: usize, num_classes: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::Config(format!(
                "mask dimensions must be positive, got {num_classes}x{height}x{width}"
            )));
        }
        if data.len() != width * height * num_classes {
            return Err(Error::LengthMismatch {
                what: "mask values",
                expected: width * height * num_classes,
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Config(format!("mask value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            data,
        })
    }

    /// One-hot mask from a row-major class-id map.
    pub fn from_class_map(width: usize, height: usize, num_classes: usize, ids: &[u8]) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "class-map pixels",
                expected: width * height,
                found: ids.len(),
            });
        }
        if let Some(bad) = ids.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Config(format!(
                "class id {bad} outside vocabulary of {num_classes} classes"
            )));
        }
        let n = width * height;
        let mut data = vec![T::zero(); n * num_classes];
        for (p, &c) in ids.iter().enumerate() {
            data[c as usize * n + p] = T::one();
        }
        Self::from_planes(width, height, num_classes, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn plane(&self, class: usize) -> &[T] {
        let n = self.pixels();
        &self.data[class * n..(class + 1) * n]
    }

    pub fn get(&self, class: usize, x: usize, y: usize) -> T {
        self.data[class * self.pixels() + y * self.width + x]
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.num_classes, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.num_classes == other.num_classes
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    /// True when every pixel is one-hot.
    pub fn is_hard(&self) -> bool {
        let n = self.pixels();
        (0..n).all(|p| {
            let mut ones = 0;
            for k in 0..self.num_classes {
                let v = self.data[k * n + p];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return false;
                }
            }
            ones == 1
        })
    }

    /// Class id per pixel; `None` for soft masks.
    pub fn class_map(&self) -> Option<Vec<u8>> {
        self.is_hard().then(|| self.argmax_map())
    }

    /// Per-pixel argmax, ties going to the lower class id.
    pub fn argmax_map(&self) -> Vec<u8> {
        let n = self.pixels();
        (0..n)
            .map(|p| {
                let mut best = 0usize;
                let mut best_v = self.data[p];
                for k in 1..self.num_classes {
                    let v = self.data[k * n + p];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn harden(&self) -> Self {
        let ids = self.argmax_map();
        Self::from_class_map(self.width, self.height, self.num_classes, &ids)
            .expect("argmax ids are in range")
    }

    /// Classes with at least one pixel of nonzero mass.
    pub fn classes_present(&self) -> BTreeSet<u8> {
        (0..self.num_classes)
            .filter(|&k| self.plane(k).iter().any(|v| *v > T::zero()))
            .map(|k| k as u8)
            .collect()
    }

    /// Fraction of the image covered by each class of a hard mask.
    pub fn class_fractions(&self) -> Vec<f64> {
        let n = self.pixels() as f64;
        (0..self.num_classes)
            .map(|k| self.plane(k).iter().map(|v| v.as_f64()).sum::<f64>() / n)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SegMask<U> {
        SegMask {
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let m = SegMask::<f64>::from_planes(1, 1, 3, vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(m.argmax_map(), vec![1]);
        let even = SegMask::<f64>::from_planes(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(even.argmax_map(), vec![0]);
        assert!(!even.is_hard());
        assert!(even.harden().is_hard());
    }

    #[test]
    fn class_map_round_trip() {
        let ids = [0u8, 1, 2, 2, 0, 1];
        let m = SegMask::<f32>::from_class_map(3, 2, 3, &ids).unwrap();
        assert!(m.is_hard());
        assert_eq!(m.class_map().unwrap(), ids);
        assert_eq!(m.classes_present().into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(SegMask::<f64>::from_planes(1, 1, 2, vec![1.5, 0.0]).is_err());
        assert!(SegMask::<f64>::from_class_map(1, 1, 2, &[2]).is_err());
    }
}
