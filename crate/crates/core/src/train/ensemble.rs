use rayon::prelude::*;

use super::augment::{dihedral, inverse_code};
use crate::error::{ActError, Result};
use crate::tensor::Tensor;

/// Runs `f` on all eight dihedral transforms of `x`, maps each output back
/// with the inverse transform and averages. The eight candidates are summed
/// as a balanced tree, so an exactly equivariant `f` reproduces its plain
/// output bit for bit.
pub fn self_ensemble<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let candidates = ensemble_candidates(f, x)?;
    let sum = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(ActError::dim("self_ensemble", a.shape(), b.shape()));
        }
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect())
    };
    let mut level = candidates;
    while level.len() > 1 {
        level = level.chunks(2).map(|p| sum(&p[0], &p[1])).collect::<Result<_>>()?;
    }
    let total = level.pop().expect("eight candidates");
    Tensor::new(total.shape().to_vec(), total.data().iter().map(|v| v / 8.0).collect())
}

/// The eight inverse-transformed outputs, in code order.
pub fn ensemble_candidates<F>(f: F, x: &Tensor) -> Result<Vec<Tensor>>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    (0..8u8)
        .into_par_iter()
        .map(|code| dihedral(&f(&dihedral(x, code)?)?, inverse_code(code)))
        .collect()
}
