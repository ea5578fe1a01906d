//! LoRA: low-rank weight deltas on frozen attention projections.
//!
//! The delta form computes x (theta + A B) + b as x theta + (x A) B, so the
//! host weight is never touched; after training the delta can be merged back
//! into the host weight with no inference overhead.

use crate::error::Result;
use crate::numerics::{Element, GradTape, Tensor, ValueId};

/// Add the low-rank delta (and optional bias delta) to a frozen projection's
/// output. `base` is x * theta + b with the frozen weight.
pub fn lora_adjust<E: Element>(
    tape: &mut GradTape<E>,
    x: ValueId,
    base: ValueId,
    a: ValueId,
    b: ValueId,
    bias_delta: Option<ValueId>,
) -> Result<ValueId> {
    let xa = tape.matmul(x, a)?;
    let delta = tape.matmul(xa, b)?;
    let out = tape.add(base, delta)?;
    match bias_delta {
        Some(bd) => tape.add_bias(out, bd),
        None => Ok(out),
    }
}

/// theta' = theta + A B, plain tensor math for post-training merging.
pub fn merged_weight(host: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    host.add(&a.matmul(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DType;
    use crate::rng::Rng;

    #[test]
    fn zero_b_leaves_base_output_exact() {
        let mut rng = Rng::new(2);
        let x_t = Tensor::gaussian(vec![3, 6], 1.0, &mut rng, DType::F64);
        let w_t = Tensor::gaussian(vec![6, 6], 1.0, &mut rng, DType::F64);
        let a_t = Tensor::gaussian(vec![6, 2], 1.0, &mut rng, DType::F64);
        let b_t = Tensor::zeros(vec![2, 6], DType::F64);

        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(&x_t);
        let w = tape.constant(&w_t);
        let a = tape.constant(&a_t);
        let b = tape.constant(&b_t);
        let base = tape.matmul(x, w).unwrap();
        let out = lora_adjust(&mut tape, x, base, a, b, None).unwrap();
        assert_eq!(
            tape.value(out).to_f64_vec(),
            tape.value(base).to_f64_vec()
        );
    }

    #[test]
    fn merged_equals_delta_form() {
        let mut rng = Rng::new(3);
        let x_t = Tensor::gaussian(vec![4, 6], 1.0, &mut rng, DType::F64);
        let w_t = Tensor::gaussian(vec![6, 6], 1.0, &mut rng, DType::F64);
        let a_t = Tensor::gaussian(vec![6, 2], 0.5, &mut rng, DType::F64);
        let b_t = Tensor::gaussian(vec![2, 6], 0.5, &mut rng, DType::F64);

        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(&x_t);
        let w = tape.constant(&w_t);
        let a = tape.constant(&a_t);
        let b = tape.constant(&b_t);
        let base = tape.matmul(x, w).unwrap();
        let delta_out = lora_adjust(&mut tape, x, base, a, b, None).unwrap();

        let merged = merged_weight(&w_t, &a_t, &b_t).unwrap();
        let plain = x_t.matmul(&merged).unwrap();
        assert!(tape.value(delta_out).max_abs_diff(&plain) < 1e-10);
    }

    #[test]
    fn full_rank_cancellation_leaves_bias_only() {
        // A B = -theta makes the effective weight zero.
        let mut rng = Rng::new(4);
        let d = 4;
        let w_t = Tensor::gaussian(vec![d, d], 1.0, &mut rng, DType::F64);
        let a_t = Tensor::eye(d, DType::F64);
        let neg_w: Vec<f64> = w_t.to_f64_vec().iter().map(|v| -v).collect();
        let b_t = Tensor::new_f64(vec![d, d], neg_w).unwrap();
        let bias_t = Tensor::gaussian(vec![d], 1.0, &mut rng, DType::F64);
        let x_t = Tensor::gaussian(vec![2, d], 1.0, &mut rng, DType::F64);

        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(&x_t);
        let w = tape.constant(&w_t);
        let a = tape.constant(&a_t);
        let b = tape.constant(&b_t);
        let bias = tape.constant(&bias_t);
        let xw = tape.matmul(x, w).unwrap();
        let base = tape.add_bias(xw, bias).unwrap();
        let out = lora_adjust(&mut tape, x, base, a, b, None).unwrap();

        let got = tape.value(out);
        for r in 0..2 {
            for j in 0..d {
                assert!((got.get(r * d + j) - bias_t.get(j)).abs() < 1e-12);
            }
        }
    }
}
