//! Finite-difference verification of every tape primitive: 20 random
//! float64 cases per op at h = 1e-5, rtol 1e-6, atol 1e-9, plus the
//! composite chain and the float32 tolerance variant.

use graybox::rng::DetRng;
use graybox::tensor::gradcheck::{check_scalar_fn, Tolerance};
use graybox::tensor::{Scalar, Tape, Tensor, VarId};

fn random_tensor(rng: &mut DetRng, dims: &[usize]) -> Tensor<f64> {
    let numel: usize = dims.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.normal()).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting
/// so every output element influences the check.
fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, y: VarId, salt: u64) -> VarId {
    let dims = tape.dims(y).to_vec();
    let mut rng = DetRng::derive(0xC0FFEE, salt);
    let numel: usize = dims.iter().product();
    let w = Tensor::new(
        dims,
        (0..numel).map(|_| T::from_f64(rng.normal())).collect(),
    )
    .unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod)
}

fn run_cases(name: &str, mut case: impl FnMut(u64) -> Result<(), String>) {
    for i in 0..20 {
        case(i).unwrap_or_else(|e| panic!("{name} case {i}: {e}"));
    }
}

#[test]
fn grad_add() {
    run_cases("add", |i| {
        let mut rng = DetRng::derive(1, i);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[3, 4]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.add(vars[0], vars[1]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_add_bias_rows() {
    run_cases("add_bias_rows", |i| {
        let mut rng = DetRng::derive(2, i);
        let x = random_tensor(&mut rng, &[5, 3]);
        let b = random_tensor(&mut rng, &[3]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.add_bias_rows(vars[0], vars[1]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[x, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_mul() {
    run_cases("mul", |i| {
        let mut rng = DetRng::derive(3, i);
        let a = random_tensor(&mut rng, &[2, 6]);
        let b = random_tensor(&mut rng, &[2, 6]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.mul(vars[0], vars[1]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_scale() {
    run_cases("scale", |i| {
        let mut rng = DetRng::derive(4, i);
        let a = random_tensor(&mut rng, &[7]);
        let c = rng.normal();
        check_scalar_fn(
            |tape, vars| {
                let y = tape.scale(vars[0], c);
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_matmul() {
    run_cases("matmul", |i| {
        let mut rng = DetRng::derive(5, i);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_matmul_sum_wrt_a_3x3() {
    // sum(A * B) with random 3x3 A, B against central differences.
    run_cases("matmul_sum", |i| {
        let mut rng = DetRng::derive(6, i);
        let a = random_tensor(&mut rng, &[3, 3]);
        let b = random_tensor(&mut rng, &[3, 3]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]).unwrap();
                tape.sum(y)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_transpose() {
    run_cases("transpose", |i| {
        let mut rng = DetRng::derive(7, i);
        let a = random_tensor(&mut rng, &[3, 5]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.transpose(vars[0]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_reshape() {
    run_cases("reshape", |i| {
        let mut rng = DetRng::derive(8, i);
        let a = random_tensor(&mut rng, &[4, 6]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.reshape(vars[0], &[2, 3, 4]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_concat_and_slice_rows() {
    run_cases("concat/slice_rows", |i| {
        let mut rng = DetRng::derive(9, i);
        let a = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, &[4, 3]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.concat_rows(&[vars[0], vars[1]]).unwrap();
                let s = tape.slice_rows(y, 1, 4).unwrap();
                weighted_sum(tape, s, i)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_concat_and_slice_cols() {
    run_cases("concat/slice_cols", |i| {
        let mut rng = DetRng::derive(10, i);
        let a = random_tensor(&mut rng, &[3, 2]);
        let b = random_tensor(&mut rng, &[3, 5]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.concat_cols(&[vars[0], vars[1]]).unwrap();
                let s = tape.slice_cols(y, 1, 4).unwrap();
                weighted_sum(tape, s, i)
            },
            &[a, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_embedding_lookup() {
    run_cases("embedding_lookup", |i| {
        let mut rng = DetRng::derive(11, i);
        let table = random_tensor(&mut rng, &[6, 4]);
        let ids = [rng.index(6), rng.index(6), rng.index(6)];
        check_scalar_fn(
            |tape, vars| {
                let y = tape.embedding_lookup(vars[0], &ids).unwrap();
                weighted_sum(tape, y, i)
            },
            &[table],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_gelu() {
    run_cases("gelu", |i| {
        let mut rng = DetRng::derive(12, i);
        let a = random_tensor(&mut rng, &[9]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.gelu(vars[0]);
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_l2_normalize() {
    run_cases("l2_normalize", |i| {
        let mut rng = DetRng::derive(13, i);
        let a = random_tensor(&mut rng, &[2, 5]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.l2_normalize(vars[0]);
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_softmax_rows() {
    run_cases("softmax_rows", |i| {
        let mut rng = DetRng::derive(14, i);
        let a = random_tensor(&mut rng, &[3, 6]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.softmax_rows(vars[0]);
                weighted_sum(tape, y, i)
            },
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_layernorm() {
    run_cases("layernorm", |i| {
        let mut rng = DetRng::derive(15, i);
        let x = random_tensor(&mut rng, &[3, 8]);
        let gain = random_tensor(&mut rng, &[8]);
        let bias = random_tensor(&mut rng, &[8]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.layernorm(vars[0], vars[1], vars[2]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[x, gain, bias],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_conv2d_same_random_3ch_8x8() {
    run_cases("conv2d_same", |i| {
        let mut rng = DetRng::derive(16, i);
        let x = random_tensor(&mut rng, &[3, 8, 8]);
        let k = random_tensor(&mut rng, &[3, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.conv2d_same(vars[0], vars[1], vars[2]).unwrap();
                weighted_sum(tape, y, i)
            },
            &[x, k, b],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_patchify() {
    run_cases("patchify", |i| {
        let mut rng = DetRng::derive(17, i);
        let x = random_tensor(&mut rng, &[2, 4, 4]);
        check_scalar_fn(
            |tape, vars| {
                let y = tape.patchify(vars[0], 2).unwrap();
                weighted_sum(tape, y, i)
            },
            &[x],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_cross_entropy_logits() {
    run_cases("cross_entropy_logits", |i| {
        let mut rng = DetRng::derive(18, i);
        let logits = random_tensor(&mut rng, &[4, 5]);
        let targets = [rng.index(5), rng.index(5), rng.index(5), rng.index(5)];
        check_scalar_fn(
            |tape, vars| tape.cross_entropy_logits(vars[0], &targets).unwrap(),
            &[logits],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_sum_and_mean() {
    run_cases("sum/mean", |i| {
        let mut rng = DetRng::derive(19, i);
        let a = random_tensor(&mut rng, &[3, 3]);
        check_scalar_fn(
            |tape, vars| tape.sum(vars[0]),
            std::slice::from_ref(&a),
            Tolerance::strict_f64(),
        )?;
        check_scalar_fn(
            |tape, vars| tape.mean(vars[0]),
            &[a],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_composite_conv_layernorm_matmul_chain() {
    run_cases("composite chain", |i| {
        let mut rng = DetRng::derive(20, i);
        let x = random_tensor(&mut rng, &[2, 4, 4]);
        let k = random_tensor(&mut rng, &[2, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[2]);
        let gain = random_tensor(&mut rng, &[8]);
        let bias = random_tensor(&mut rng, &[8]);
        let w = random_tensor(&mut rng, &[8, 3]);
        check_scalar_fn(
            |tape, vars| {
                let conv = tape.conv2d_same(vars[0], vars[1], vars[2]).unwrap();
                let rows = tape.reshape(conv, &[4, 8]).unwrap();
                let normed = tape.layernorm(rows, vars[3], vars[4]).unwrap();
                let out = tape.matmul(normed, vars[5]).unwrap();
                weighted_sum(tape, out, i)
            },
            &[x, k, b, gain, bias, w],
            Tolerance::strict_f64(),
        )
    });
}

#[test]
fn grad_f32_chain_at_loose_tolerance() {
    for i in 0..5u64 {
        let mut rng = DetRng::derive(21, i);
        let to_f32 = |t: Tensor<f64>| -> Tensor<f32> { t.converted() };
        let x = to_f32(random_tensor(&mut rng, &[2, 4, 4]));
        let k = to_f32(random_tensor(&mut rng, &[2, 2, 3, 3]));
        let b = to_f32(random_tensor(&mut rng, &[2]));
        check_scalar_fn(
            |tape: &mut Tape<f32>, vars: &[VarId]| {
                let y = tape.conv2d_same(vars[0], vars[1], vars[2]).unwrap();
                let n = tape.l2_normalize(y);
                weighted_sum(tape, n, i)
            },
            &[x, k, b],
            Tolerance::loose_f32(),
        )
        .unwrap_or_else(|e| panic!("f32 chain case {i}: {e}"));
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // softmax(P x) == P softmax(x) for any row permutation.
        #[test]
        fn softmax_rows_is_permutation_equivariant(
            rows in 2usize..5,
            cols in 2usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = DetRng::derive(22, seed);
            let x = random_tensor(&mut rng, &[rows, cols]);
            let mut perm: Vec<usize> = (0..rows).collect();
            rng.shuffle(&mut perm);

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let s = tape.softmax_rows(xv);
            let base = tape.value(s).clone();

            let mut permuted = Tensor::<f64>::zeros(&[rows, cols]);
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..cols {
                    permuted.data_mut()[dst * cols + j] = x.data()[src * cols + j];
                }
            }
            let pv = tape.constant(permuted);
            let ps = tape.softmax_rows(pv);
            let permuted_softmax = tape.value(ps);

            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..cols {
                    prop_assert_eq!(
                        permuted_softmax.data()[dst * cols + j],
                        base.data()[src * cols + j]
                    );
                }
            }
        }

        // Round trip of the binary tensor encoding is bit-exact.
        #[test]
        fn tensor_encoding_round_trips(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let mut rng = DetRng::derive(23, seed);
            let t = random_tensor(&mut rng, &dims);
            let bytes = t.encode();
            let (back, used) = Tensor::<f64>::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, t);
        }
    }
}
