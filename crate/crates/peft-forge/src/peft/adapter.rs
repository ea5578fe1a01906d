//! Bottleneck adapter: down-project, GELU, up-project, residual.

use crate::error::Result;
use crate::numerics::{Element, GradTape, ValueId};

/// up(gelu(down(x))) + x, with the weights supplied as tape values so the
/// same code serves plain adapters (parameter leaves), compacters
/// (materialized Kronecker sums), and hyperformers (generated weights).
pub fn bottleneck_forward<E: Element>(
    tape: &mut GradTape<E>,
    x: ValueId,
    down: ValueId,
    bias_down: ValueId,
    up: ValueId,
    bias_up: ValueId,
) -> Result<ValueId> {
    let h = tape.matmul(x, down)?;
    let h = tape.add_bias(h, bias_down)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, up)?;
    let h = tape.add_bias(h, bias_up)?;
    tape.add(h, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DType, Tensor};
    use crate::rng::Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_f64(shape, data).unwrap()
    }

    fn run_adapter(x: &Tensor, down: &Tensor, bd: &Tensor, up: &Tensor, bu: &Tensor) -> Tensor {
        let mut tape = GradTape::<f64>::new();
        let xv = tape.constant(x);
        let d = tape.constant(down);
        let bdv = tape.constant(bd);
        let u = tape.constant(up);
        let buv = tape.constant(bu);
        let out = bottleneck_forward(&mut tape, xv, d, bdv, u, buv).unwrap();
        tape.value(out)
    }

    #[test]
    fn zero_up_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::gaussian(vec![3, 8], 1.0, &mut rng, DType::F64);
        let down = Tensor::gaussian(vec![8, 4], 0.5, &mut rng, DType::F64);
        let out = run_adapter(
            &x,
            &down,
            &Tensor::zeros(vec![4], DType::F64),
            &Tensor::zeros(vec![4, 8], DType::F64),
            &Tensor::zeros(vec![8], DType::F64),
        );
        assert!(out.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn identity_projections_give_gelu_plus_x() {
        let x = t(vec![1, 3], vec![-1.0, 0.5, 2.0]);
        let eye = Tensor::eye(3, DType::F64);
        let out = run_adapter(
            &x,
            &eye,
            &Tensor::zeros(vec![3], DType::F64),
            &eye,
            &Tensor::zeros(vec![3], DType::F64),
        );
        for (i, &xi) in x.to_f64_vec().iter().enumerate() {
            let expect = crate::numerics::kernels::gelu(xi) + xi;
            assert!((out.get(i) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_independent_straight_line_reference() {
        // Hand-rolled two-matmul reference, no tape involved.
        let mut rng = Rng::new(7);
        let (d_i, d, rows) = (8, 4, 5);
        let x = Tensor::gaussian(vec![rows, d_i], 1.0, &mut rng, DType::F64);
        let down = Tensor::gaussian(vec![d_i, d], 0.3, &mut rng, DType::F64);
        let bd = Tensor::gaussian(vec![d], 0.3, &mut rng, DType::F64);
        let up = Tensor::gaussian(vec![d, d_i], 0.3, &mut rng, DType::F64);
        let bu = Tensor::gaussian(vec![d_i], 0.3, &mut rng, DType::F64);

        let got = run_adapter(&x, &down, &bd, &up, &bu);

        let xv = x.to_f64_vec();
        let dv = down.to_f64_vec();
        let bdv = bd.to_f64_vec();
        let uv = up.to_f64_vec();
        let buv = bu.to_f64_vec();
        for r in 0..rows {
            let mut hidden = vec![0.0; d];
            for j in 0..d {
                let mut acc = bdv[j];
                for i in 0..d_i {
                    acc += xv[r * d_i + i] * dv[i * d + j];
                }
                hidden[j] = crate::numerics::kernels::gelu(acc);
            }
            for i in 0..d_i {
                let mut acc = buv[i];
                for j in 0..d {
                    acc += hidden[j] * uv[j * d_i + i];
                }
                acc += xv[r * d_i + i];
                let diff = (got.get(r * d_i + i) - acc).abs();
                assert!(diff < 1e-12, "row {r} col {i}: {diff}");
            }
        }
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(&t(vec![1, 3], vec![0.0; 3]));
        let down = tape.constant(&Tensor::zeros(vec![4, 2], DType::F64));
        let bd = tape.constant(&Tensor::zeros(vec![2], DType::F64));
        let up = tape.constant(&Tensor::zeros(vec![2, 4], DType::F64));
        let bu = tape.constant(&Tensor::zeros(vec![4], DType::F64));
        assert!(bottleneck_forward(&mut tape, x, down, bd, up, bu).is_err());
    }
}
