//! Compacter: adapter weights parameterized as sums of Kronecker products
//! (PHM layers), optionally with the big factors decomposed into rank-r
//! products (LPHM) and the small factors shared globally.

use crate::error::Result;
use crate::numerics::{Element, GradTape, ValueId};
use crate::sharing::Bottleneck;

/// The tape nodes holding one PHM-parameterized weight matrix's factors.
pub struct PhmFactors {
    /// A_i, each [k, k].
    pub a: Vec<ValueId>,
    /// Dense B_i [(rows/k), (cols/k)], or low-rank pairs (u_i, v_i).
    pub b: PhmB,
}

pub enum PhmB {
    Dense(Vec<ValueId>),
    LowRank(Vec<(ValueId, ValueId)>),
}

/// Materialize theta = sum_i A_i (x) B_i on the tape, with B_i = u_i v_i
/// first in the low-rank form. Gradients flow back into every factor.
pub fn phm_materialize<E: Element>(tape: &mut GradTape<E>, factors: &PhmFactors) -> Result<ValueId> {
    let k = factors.a.len();
    let mut total: Option<ValueId> = None;
    for i in 0..k {
        let b = match &factors.b {
            PhmB::Dense(bs) => bs[i],
            PhmB::LowRank(uvs) => {
                let (u, v) = uvs[i];
                tape.matmul(u, v)?
            }
        };
        let term = tape.kron(factors.a[i], b)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| crate::error::Error::Config("compacter: k must be positive".into()))
}

/// Matrix dimensions of the factors for one bottleneck matrix.
/// Down maps d_i -> d, up maps d -> d_i.
pub fn factor_dims(matrix: Bottleneck, d_i: usize, d: usize, k: usize) -> (usize, usize) {
    match matrix {
        Bottleneck::Down => (d_i / k, d / k),
        Bottleneck::Up => (d / k, d_i / k),
    }
}
