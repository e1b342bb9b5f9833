//! Shared / task-specific split of episodic-memory gradients.

use crate::error::{Error, Result};
use crate::linalg::{ColumnMatrix, FlatVector};

/// The new-task gradient together with the old-task gradients and their
/// decomposition.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub new_grad: FlatVector,
    pub old_grads: Vec<FlatVector>,
    /// Mean of `old_grads`; `None` when there are no old tasks yet.
    pub shared: Option<FlatVector>,
    /// Column `i` is `old_grads[i] - shared`.
    pub specific: ColumnMatrix,
}

impl GradientBundle {
    pub fn new(new_grad: FlatVector, old_grads: Vec<FlatVector>) -> Result<Self> {
        let dim = new_grad.len();
        if dim == 0 {
            return Err(Error::Empty("gradient"));
        }
        for g in &old_grads {
            if g.len() != dim {
                return Err(Error::mismatch("old-task gradient", dim, g.len()));
            }
        }
        let (shared, specific) = if old_grads.is_empty() {
            (None, ColumnMatrix::empty(dim))
        } else {
            let shared = shared_gradient(&old_grads)?;
            let specific = task_specific_gradients(&old_grads, &shared)?;
            (Some(shared), specific)
        };
        Ok(GradientBundle {
            new_grad,
            old_grads,
            shared,
            specific,
        })
    }

    pub fn dim(&self) -> usize {
        self.new_grad.len()
    }

    pub fn num_old(&self) -> usize {
        self.old_grads.len()
    }

    /// The bundle restricted to coordinates `offset..offset + len`.
    ///
    /// The decomposition is coordinate-wise, so slicing it is the same as
    /// decomposing the sliced gradients.
    pub fn restrict(&self, offset: usize, len: usize) -> GradientBundle {
        GradientBundle {
            new_grad: self.new_grad.slice(offset, len),
            old_grads: self
                .old_grads
                .iter()
                .map(|g| g.slice(offset, len))
                .collect(),
            shared: self.shared.as_ref().map(|s| s.slice(offset, len)),
            specific: self.specific.row_block(offset, len),
        }
    }
}

/// Arithmetic mean of the old-task gradients, summed in task order.
pub fn shared_gradient(old_grads: &[FlatVector]) -> Result<FlatVector> {
    let (first, rest) = old_grads
        .split_first()
        .ok_or(Error::Empty("old-task gradient list"))?;
    let mut sum = first.clone();
    for g in rest {
        if g.len() != sum.len() {
            return Err(Error::mismatch("old-task gradient", sum.len(), g.len()));
        }
        sum.axpy(1.0, g);
    }
    let n = old_grads.len() as f64;
    sum.iter_mut().for_each(|x| *x /= n);
    Ok(sum)
}

pub fn task_specific_gradients(
    old_grads: &[FlatVector],
    shared: &FlatVector,
) -> Result<ColumnMatrix> {
    if shared.is_empty() {
        return Err(Error::Empty("shared gradient"));
    }
    let mut specific = ColumnMatrix::empty(shared.len());
    for g in old_grads {
        if g.len() != shared.len() {
            return Err(Error::mismatch("old-task gradient", shared.len(), g.len()));
        }
        specific.push_column(&g.sub(shared))?;
    }
    Ok(specific)
}
