//! Student and teacher segmentation networks.
//!
//! The student is a tiny ViT encoder followed by a feature-pyramid head that
//! predicts full-resolution logits. The teacher is a wider, deeper ViT with a
//! transformer mask decoder that predicts logits at a quarter of the input
//! resolution. Both expose their final encoder hidden states for
//! distillation.

pub mod layers;
pub mod resample;
mod student;
mod teacher;
pub mod vit;

use kd_autograd::{ParamStore, Tensor};

use crate::data::Mask;

pub use student::{Student, StudentConfig, StudentVars};
pub use teacher::{drop_last_channel, Teacher, TeacherConfig, TeacherVars};
pub use vit::{EncoderOutput, ViTEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Full,
    Low,
}

/// Per-pixel class logits stored pixel-major as an `(h*w) x C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLogits {
    pub logits: Tensor,
    pub height: usize,
    pub width: usize,
    pub resolution: Resolution,
}

impl SegLogits {
    pub fn classes(&self) -> usize {
        self.logits.cols()
    }

    /// `(C, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.classes(), self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.logits.at(y * self.width + x, c)
    }

    /// Arg-max class per pixel (ties go to the lower index).
    pub fn argmax(&self) -> Mask {
        let data = self
            .logits
            .data()
            .chunks(self.classes())
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Mask::new(self.height, self.width, data).expect("logit grid matches mask")
    }

    pub fn is_finite(&self) -> bool {
        self.logits.is_finite()
    }
}

/// Exact number of (optionally only trainable) scalar parameters.
pub fn param_count(store: &ParamStore, trainable_only: bool) -> usize {
    store.count(trainable_only)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_cases() {
        let mut s = ParamStore::new();
        assert_eq!(param_count(&s, false), 0);
        s.insert("w", Tensor::zeros(&[10, 10]), true).unwrap();
        assert_eq!(param_count(&s, true), 100);
        s.insert("f", Tensor::zeros(&[3]), false).unwrap();
        assert_eq!(param_count(&s, true), 100);
        assert_eq!(param_count(&s, false), 103);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let l = SegLogits {
            logits: Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap(),
            height: 1,
            width: 2,
            resolution: Resolution::Full,
        };
        assert_eq!(l.argmax().data, vec![0, 1]);
    }
}
