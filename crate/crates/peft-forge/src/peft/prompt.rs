//! Soft-prompt network: a prompt embedding table pushed through a two-layer
//! tanh network, producing continuous vectors that the encoder prepends to
//! its input.

use crate::error::Result;
use crate::numerics::{Element, GradTape, ValueId};

/// h_p = up(tanh(down(embed))), shape [N_p, d_model]. The embedding rows are
/// the prompt indices 1..N_p embedded, so no gather is needed.
pub fn prompt_forward<E: Element>(
    tape: &mut GradTape<E>,
    embed: ValueId,
    down: ValueId,
    bias_down: ValueId,
    up: ValueId,
    bias_up: ValueId,
) -> Result<ValueId> {
    let h = tape.matmul(embed, down)?;
    let h = tape.add_bias(h, bias_down)?;
    let h = tape.tanh_act(h)?;
    let h = tape.matmul(h, up)?;
    tape.add_bias(h, bias_up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DType, Tensor};
    use crate::rng::Rng;

    #[test]
    fn zero_up_gives_constant_bias_rows() {
        let mut rng = Rng::new(5);
        let (n_p, d_i, d_m) = (4, 6, 3);
        let embed = Tensor::gaussian(vec![n_p, d_i], 0.5, &mut rng, DType::F64);
        let down = Tensor::gaussian(vec![d_i, d_m], 0.5, &mut rng, DType::F64);
        let bd = Tensor::zeros(vec![d_m], DType::F64);
        let up = Tensor::zeros(vec![d_m, d_i], DType::F64);
        let bu = Tensor::full(vec![d_i], 0.25, DType::F64);

        let mut tape = GradTape::<f64>::new();
        let e = tape.constant(&embed);
        let d = tape.constant(&down);
        let bdv = tape.constant(&bd);
        let u = tape.constant(&up);
        let buv = tape.constant(&bu);
        let out = prompt_forward(&mut tape, e, d, bdv, u, buv).unwrap();
        let got = tape.value(out);
        for r in 0..n_p {
            for c in 0..d_i {
                assert_eq!(got.get(r * d_i + c), 0.25);
            }
        }
    }

    #[test]
    fn output_shape_is_np_by_di_regardless_of_dm() {
        for d_m in [1usize, 7, 31] {
            let mut rng = Rng::new(d_m as u64);
            let (n_p, d_i) = (1, 5);
            let embed = Tensor::gaussian(vec![n_p, d_i], 0.5, &mut rng, DType::F64);
            let down = Tensor::gaussian(vec![d_i, d_m], 0.5, &mut rng, DType::F64);
            let bd = Tensor::zeros(vec![d_m], DType::F64);
            let up = Tensor::gaussian(vec![d_m, d_i], 0.5, &mut rng, DType::F64);
            let bu = Tensor::zeros(vec![d_i], DType::F64);
            let mut tape = GradTape::<f64>::new();
            let e = tape.constant(&embed);
            let d = tape.constant(&down);
            let bdv = tape.constant(&bd);
            let u = tape.constant(&up);
            let buv = tape.constant(&bu);
            let out = prompt_forward(&mut tape, e, d, bdv, u, buv).unwrap();
            assert_eq!(tape.shape(out), &[n_p, d_i]);
        }
    }
}
