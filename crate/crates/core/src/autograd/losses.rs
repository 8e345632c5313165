//! Summed, masked losses. Each returns `(sum, counted_rows)`; normalisation is
//! left to the caller so a batch can be divided by one global count.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from every loss and from the counted positions.
pub const IGNORE_INDEX: i64 = -100;

impl Graph {
    /// Sum of `-log softmax(logits)[label]` over rows whose label is not
    /// `ignore_index`. With nothing counted the result is an exact `(0, 0)`.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<(Var, usize)> {
        let targets = labels
            .iter()
            .map(|&l| match l {
                l if l == ignore_index => Ok(None),
                l if l >= 0 => Ok(Some(l as usize)),
                l => Err(Error::invalid("cross_entropy", format!("negative label {l}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Ok((self.constant(Tensor::scalar(0.0)), 0));
        }
        let rows = self.cross_entropy_rows(logits, &targets)?;
        Ok((self.sum(rows), count))
    }

    /// Sum over masked rows of `KL(softmax(teacher/T) || softmax(student/T))`.
    pub fn kl_divergence_masked(
        &mut self,
        teacher: &Tensor,
        student: Var,
        mask: &[bool],
        temperature: f64,
    ) -> Result<(Var, usize)> {
        let count = mask.iter().filter(|&&m| m).count();
        if !(temperature > 0.0) {
            return Err(Error::invalid("kl_divergence", format!("temperature must be positive, got {temperature}")));
        }
        if count == 0 {
            return Ok((self.constant(Tensor::scalar(0.0)), 0));
        }
        let rows = self.kl_rows(teacher, student, mask, temperature)?;
        Ok((self.sum(rows), count))
    }
}
