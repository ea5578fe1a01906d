//! Finite-difference gradient oracle and the per-op gradient check suite.
//!
//! The oracle is the independent side of every gradient test: it only ever
//! calls a black-box scalar function, never the tape's backward pass.

use super::tape::GradTape;
use super::tensor::{DType, Tensor};
use crate::error::Result;
use crate::rng::Rng;

/// Central-difference gradient of a deterministic scalar function, one
/// coordinate at a time: (f(p + h e_i) - f(p - h e_i)) / 2h.
/// Run this at f64; f32 has too little headroom for the subtraction.
pub fn finite_diff_grad<F>(f: F, p: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; p.numel()];
    let mut work = p.clone();
    for i in 0..p.numel() {
        let orig = work.get(i);
        work.set(i, orig + h);
        let plus = f(&work)?;
        work.set(i, orig - h);
        let minus = f(&work)?;
        work.set(i, orig);
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::from_f64(p.shape().to_vec(), grad, DType::F64)
}

/// Relative error with a floor. Central differences carry O(h^2) truncation
/// noise, so coordinates whose true derivative is far below the tensor's
/// typical gradient scale would otherwise dominate the ratio; the floor keeps
/// the comparison meaningful for O(1) gradients while still flagging real
/// faults (a sign flip on an O(1) coordinate scores about 2).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Max elementwise relative error between two gradients.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .to_f64_vec()
        .iter()
        .zip(numeric.to_f64_vec().iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of checking one op (or one PEFT regime) against the oracle.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const FD_STEP: f64 = 1e-4;

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    Tensor::gaussian(shape, 1.0, rng, DType::F64)
}

/// Check d(weighted sum of op output)/d(one input) against finite
/// differences. `forward` rebuilds the graph from scratch for every probe, so
/// the oracle only sees a black-box function.
fn check_input<F>(rng: &mut Rng, input: &Tensor, forward: F) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, &Tensor) -> Result<super::tape::ValueId>,
{
    // Weighted sum makes structurally-conserved outputs (softmax rows,
    // normalized rows) still produce informative gradients.
    let mut tape = GradTape::<f64>::new();
    let probe_id = forward(&mut tape, input)?;
    let weights = rand_tensor(rng, tape.shape(probe_id).to_vec());

    let scalar = |t: &mut GradTape<f64>, x: &Tensor| -> Result<super::tape::ValueId> {
        let out = forward(t, x)?;
        let w = t.constant(&weights);
        let prod = t.mul(out, w)?;
        t.sum_all(prod)
    };

    let mut tape = GradTape::<f64>::new();
    let loss = scalar(&mut tape, input)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros("__probe", input.shape(), DType::F64);

    let numeric = finite_diff_grad(
        |x| {
            let mut t = GradTape::<f64>::new();
            let loss = scalar(&mut t, x)?;
            Ok(t.value(loss).get(0))
        },
        input,
        FD_STEP,
    )?;

    Ok(max_rel_error(&analytic, &numeric))
}

macro_rules! max_err {
    ($acc:expr, $e:expr) => {
        $acc = $acc.max($e)
    };
}

/// Run the finite-difference suite over every differentiable tape op, at f64,
/// `cases` random shapes each (dims at most 8). Returns one report per op.
pub fn check_all_ops(seed: u64, cases: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();
    let dim = |rng: &mut Rng| rng.below(7) + 2; // 2..=8

    let mut run = |name: &str,
                   tolerance: f64,
                   rng: &mut Rng,
                   case: &mut dyn FnMut(&mut Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            max_err!(worst, case(rng)?);
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            cases,
            max_rel_err: worst,
            tolerance,
        });
        Ok(())
    };

    run("matmul", 1e-5, &mut rng, &mut |rng| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, vec![m, k]);
        let b = rand_tensor(rng, vec![k, n]);
        let mut worst = check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.matmul(xa, xb)
        })?;
        max_err!(
            worst,
            check_input(rng, &b, |t, x| {
                let xa = t.constant(&a);
                let xb = t.var("__probe", x);
                t.matmul(xa, xb)
            })?
        );
        Ok(worst)
    })?;

    run("matmul_nt", 1e-5, &mut rng, &mut |rng| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, vec![m, k]);
        let b = rand_tensor(rng, vec![n, k]);
        let mut worst = check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.matmul_nt(xa, xb)
        })?;
        max_err!(
            worst,
            check_input(rng, &b, |t, x| {
                let xa = t.constant(&a);
                let xb = t.var("__probe", x);
                t.matmul_nt(xa, xb)
            })?
        );
        Ok(worst)
    })?;

    run("kron", 1e-5, &mut rng, &mut |rng| {
        let (p, q, m, n) = (dim(rng) / 2 + 1, dim(rng) / 2 + 1, dim(rng), dim(rng));
        let a = rand_tensor(rng, vec![p, q]);
        let b = rand_tensor(rng, vec![m, n]);
        let mut worst = check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.kron(xa, xb)
        })?;
        max_err!(
            worst,
            check_input(rng, &b, |t, x| {
                let xa = t.constant(&a);
                let xb = t.var("__probe", x);
                t.kron(xa, xb)
            })?
        );
        Ok(worst)
    })?;

    run("gelu", 1e-5, &mut rng, &mut |rng| {
        let x = { let s = vec![dim(rng), dim(rng)]; rand_tensor(rng, s) };
        check_input(rng, &x, |t, v| {
            let id = t.var("__probe", v);
            t.gelu(id)
        })
    })?;

    run("tanh", 1e-5, &mut rng, &mut |rng| {
        let x = { let s = vec![dim(rng), dim(rng)]; rand_tensor(rng, s) };
        check_input(rng, &x, |t, v| {
            let id = t.var("__probe", v);
            t.tanh_act(id)
        })
    })?;

    run("layer_norm", 1e-4, &mut rng, &mut |rng| {
        let (r, d) = (dim(rng), dim(rng));
        let x = rand_tensor(rng, vec![r, d]);
        let gain = rand_tensor(rng, vec![d]);
        let bias = rand_tensor(rng, vec![d]);
        let mut worst = check_input(rng, &x, |t, v| {
            let xv = t.var("__probe", v);
            let g = t.constant(&gain);
            let b = t.constant(&bias);
            t.layer_norm(xv, g, b, 1e-5)
        })?;
        max_err!(
            worst,
            check_input(rng, &gain, |t, v| {
                let xv = t.constant(&x);
                let g = t.var("__probe", v);
                let b = t.constant(&bias);
                t.layer_norm(xv, g, b, 1e-5)
            })?
        );
        max_err!(
            worst,
            check_input(rng, &bias, |t, v| {
                let xv = t.constant(&x);
                let g = t.constant(&gain);
                let b = t.var("__probe", v);
                t.layer_norm(xv, g, b, 1e-5)
            })?
        );
        Ok(worst)
    })?;

    run("softmax_rows", 1e-5, &mut rng, &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let visible: Vec<usize> = (0..m).map(|_| rng.below(n) + 1).collect();
        let x = rand_tensor(rng, vec![m, n]);
        let vis = visible.clone();
        check_input(rng, &x, move |t, v| {
            let id = t.var("__probe", v);
            t.softmax_rows(id, vis.clone())
        })
    })?;

    run("softmax_cross_entropy", 1e-5, &mut rng, &mut |rng| {
        let (m, v) = (dim(rng), dim(rng));
        let logits = rand_tensor(rng, vec![m, v]);
        let ignore = u32::MAX;
        let targets: Vec<u32> = (0..m)
            .map(|_| if rng.below(4) == 0 { ignore } else { rng.below(v) as u32 })
            .collect();
        let tg = targets.clone();
        check_input(rng, &logits, move |t, x| {
            let id = t.var("__probe", x);
            t.cross_entropy_mean(id, &tg, ignore)
        })
    })?;

    run("gather_rows", 1e-5, &mut rng, &mut |rng| {
        let (rows, d) = (dim(rng), dim(rng));
        let table = rand_tensor(rng, vec![rows, d]);
        let ids: Vec<u32> = (0..dim(rng)).map(|_| rng.below(rows) as u32).collect();
        let idv = ids.clone();
        check_input(rng, &table, move |t, x| {
            let id = t.var("__probe", x);
            t.gather_rows(id, &idv)
        })
    })?;

    run("add", 1e-5, &mut rng, &mut |rng| {
        let shape = vec![dim(rng), dim(rng)];
        let a = rand_tensor(rng, shape.clone());
        let b = rand_tensor(rng, shape);
        check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.add(xa, xb)
        })
    })?;

    run("add_bias", 1e-5, &mut rng, &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let x = rand_tensor(rng, vec![m, n]);
        let b = rand_tensor(rng, vec![n]);
        let mut worst = check_input(rng, &x, |t, v| {
            let xv = t.var("__probe", v);
            let bv = t.constant(&b);
            t.add_bias(xv, bv)
        })?;
        max_err!(
            worst,
            check_input(rng, &b, |t, v| {
                let xv = t.constant(&x);
                let bv = t.var("__probe", v);
                t.add_bias(xv, bv)
            })?
        );
        Ok(worst)
    })?;

    run("mul", 1e-5, &mut rng, &mut |rng| {
        let shape = vec![dim(rng), dim(rng)];
        let a = rand_tensor(rng, shape.clone());
        let b = rand_tensor(rng, shape);
        check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.mul(xa, xb)
        })
    })?;

    run("scale", 1e-5, &mut rng, &mut |rng| {
        let x = { let s = vec![dim(rng), dim(rng)]; rand_tensor(rng, s) };
        let c = rng.normal();
        check_input(rng, &x, move |t, v| {
            let id = t.var("__probe", v);
            t.scale(id, c)
        })
    })?;

    run("concat_rows", 1e-5, &mut rng, &mut |rng| {
        let n = dim(rng);
        let a = { let s = vec![dim(rng), n]; rand_tensor(rng, s) };
        let b = { let s = vec![dim(rng), n]; rand_tensor(rng, s) };
        check_input(rng, &a, |t, x| {
            let xa = t.var("__probe", x);
            let xb = t.constant(&b);
            t.concat_rows(&[xa, xb])
        })
    })?;

    run("concat_cols", 1e-5, &mut rng, &mut |rng| {
        let m = dim(rng);
        let a = { let s = vec![m, dim(rng)]; rand_tensor(rng, s) };
        let b = { let s = vec![m, dim(rng)]; rand_tensor(rng, s) };
        check_input(rng, &b, |t, x| {
            let xa = t.constant(&a);
            let xb = t.var("__probe", x);
            t.concat_cols(&[xa, xb])
        })
    })?;

    run("row_slice", 1e-5, &mut rng, &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let x = rand_tensor(rng, vec![m, n]);
        let start = rng.below(m);
        let len = rng.below(m - start) + 1;
        check_input(rng, &x, move |t, v| {
            let id = t.var("__probe", v);
            t.row_slice(id, start, len)
        })
    })?;

    run("col_slice", 1e-5, &mut rng, &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let x = rand_tensor(rng, vec![m, n]);
        let start = rng.below(n);
        let len = rng.below(n - start) + 1;
        check_input(rng, &x, move |t, v| {
            let id = t.var("__probe", v);
            t.col_slice(id, start, len)
        })
    })?;

    run("reshape", 1e-5, &mut rng, &mut |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let x = rand_tensor(rng, vec![m, n]);
        check_input(rng, &x, move |t, v| {
            let id = t.var("__probe", v);
            t.reshape(id, vec![n * m])
        })
    })?;

    run("sum_all", 1e-5, &mut rng, &mut |rng| {
        let x = { let s = vec![dim(rng), dim(rng)]; rand_tensor(rng, s) };
        check_input(rng, &x, |t, v| {
            let id = t.var("__probe", v);
            t.sum_all(id)
        })
    })?;

    Ok(reports)
}
