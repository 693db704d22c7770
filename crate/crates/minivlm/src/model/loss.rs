//! Sigmoid contrastive loss over a batch of paired embeddings.
//!
//! Every image–text pair in a batch is scored against every other:
//! matched pairs should score high, mismatched pairs low, each judged by
//! an independent sigmoid. With pair label z_ij = +1 on the diagonal and
//! −1 off it, the loss is
//!
//!   L = −(1/B) · Σ_{i,j} log σ( z_ij · (t · xᵢ·yⱼ + b) )
//!
//! where t is a learnable temperature (stored as log t so it stays
//! positive) and b a learnable bias. −log σ(v) = softplus(−v) is what the
//! implementation evaluates, which is stable at any magnitude.

use crate::error::{Error, Result};
use crate::scalar::{fp, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds the loss on a tape. `img` and `txt` are B×D embedding matrices
/// (rows paired by index), `log_t` and `b` are 1×1 variables. Returns the
/// 1×1 loss variable.
pub fn contrastive_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    txt: Var,
    log_t: Var,
    b: Var,
) -> Result<Var> {
    let (bi, di) = tape.shape(img);
    let (bt, dt) = tape.shape(txt);
    if bi == 0 {
        return Err(Error::Data("empty batch of embeddings".into()));
    }
    if (bi, di) != (bt, dt) {
        return Err(Error::shape(
            "sigmoid_contrastive_loss",
            format!("image embeddings are {bi}×{di}, text embeddings are {bt}×{dt}"),
        ));
    }

    let logits = tape.matmul_bt(img, txt)?; // B×B, [i][j] = xᵢ·yⱼ
    let t = tape.exp(log_t);
    let scaled = tape.scale_by_var(logits, t)?;
    let shifted = tape.offset_by_var(scaled, b)?;

    // z_ij: +1 on the diagonal, −1 off it.
    let mut z = vec![-S::one(); bi * bi];
    for i in 0..bi {
        z[i * bi + i] = S::one();
    }
    let zv = tape.leaf(&z, bi, bi)?;

    let signed = tape.mul(zv, shifted)?;
    let negated = tape.scale(signed, -S::one());
    let per_pair = tape.softplus(negated); // softplus(−z·logit) = −log σ(z·logit)
    let total = tape.sum_all(per_pair);
    Ok(tape.scale(total, fp(1.0 / bi as f64)))
}

/// Evaluates the loss eagerly for given embeddings, temperature t (not
/// log t), and bias b.
pub fn sigmoid_contrastive_loss<S: Scalar>(
    img: &Tensor<S>,
    txt: &Tensor<S>,
    t: S,
    b: S,
) -> Result<S> {
    if !(t > S::zero()) || !t.is_finite() {
        return Err(Error::Data(format!("temperature must be positive, got {t}")));
    }
    let mut tape = Tape::new();
    let iv = tape.leaf_tensor(img)?;
    let tv = tape.leaf_tensor(txt)?;
    let log_t = tape.leaf(&[t.ln()], 1, 1)?;
    let bias = tape.leaf(&[b], 1, 1)?;
    let loss = contrastive_loss_on_tape(&mut tape, iv, tv, log_t, bias)?;
    Ok(tape.value(loss)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..cols {
                data[r * cols + c] = fp(v[c] / norm);
            }
        }
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matched_pair_at_zero_logit_costs_log_two() {
        // x = y ⇒ x·y = 1; with t = 10, b = −10 the logit is exactly 0 and
        // −log σ(0) = log 2.
        let e = Tensor::matrix(1, 4, vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let loss = sigmoid_contrastive_loss(&e, &e, 10.0, -10.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn orthogonal_matched_pairs_at_large_t_cost_log_two() {
        // Two matched pairs on orthogonal axes, b = 0: diagonal terms
        // vanish as t grows; each off-diagonal term is softplus(0) = log 2,
        // so L → (1/2)·2·log 2 = log 2.
        let x = Tensor::matrix(2, 4, vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = sigmoid_contrastive_loss(&x, &x, 1e4, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn random_batch_matches_a_scalar_loop_reference() {
        let (b, d) = (4, 8);
        let img = unit_rows::<f64>(b, d, 21);
        let txt = unit_rows::<f64>(b, d, 22);
        let (t, bias) = (7.3, -2.1);
        let loss = sigmoid_contrastive_loss(&img, &txt, t, bias).unwrap();

        let mut expect = 0.0f64;
        for i in 0..b {
            for j in 0..b {
                let dot: f64 = (0..d)
                    .map(|k| img.data()[i * d + k] * txt.data()[j * d + k])
                    .sum();
                let z = if i == j { 1.0 } else { -1.0 };
                let v = -z * (t * dot + bias);
                expect += v.max(0.0) + (-v.abs()).exp().ln_1p();
            }
        }
        expect /= b as f64;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn loss_is_nonnegative_and_permutation_equivariant() {
        let (b, d) = (5, 6);
        let img = unit_rows::<f32>(b, d, 31);
        let txt = unit_rows::<f32>(b, d, 32);
        let loss = sigmoid_contrastive_loss(&img, &txt, 9.0, -4.0).unwrap();
        assert!(loss >= 0.0);

        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor<f32>| {
            let mut data = Vec::with_capacity(b * d);
            for &r in &perm {
                data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
            Tensor::matrix(b, d, data).unwrap()
        };
        let loss_p =
            sigmoid_contrastive_loss(&permute(&img), &permute(&txt), 9.0, -4.0).unwrap();
        assert!((loss - loss_p).abs() < 1e-6, "{loss} vs {loss_p}");
    }

    #[test]
    fn aligned_batch_loss_vanishes_as_t_grows() {
        // Perfect diagonal (x_i = y_i) and orthogonal off-diagonal pairs:
        // as t → ∞ the diagonal terms go to 0 and each off-diagonal term
        // goes to softplus(b), so with the b = −10 initialization the loss
        // settles at (B−1)·softplus(−10) ≈ 1.4e−4.
        let mut data = vec![0.0f64; 16];
        for i in 0..4 {
            data[i * 4 + i] = 1.0;
        }
        let x = Tensor::matrix(4, 4, data).unwrap();
        let mut prev = f64::INFINITY;
        for t in [1.0, 10.0, 100.0] {
            let loss = sigmoid_contrastive_loss(&x, &x, t, -10.0).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < prev, "loss should shrink as t grows");
            prev = loss;
        }
        // Past t ≈ 100 the diagonal terms underflow entirely and only the
        // b-dependent floor remains.
        let limit = sigmoid_contrastive_loss(&x, &x, 1e3, -10.0).unwrap();
        assert!(limit <= prev);
        assert!(limit < 2e-4, "limit loss {limit}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        // A 0-row embedding matrix is unrepresentable — the rejection
        // fires at tensor construction, upstream of the loss itself.
        assert!(Tensor::<f64>::matrix(0, 4, vec![]).is_err());
    }

    #[test]
    fn mismatched_batch_sizes_are_rejected() {
        let a = unit_rows::<f32>(3, 4, 41);
        let b = unit_rows::<f32>(2, 4, 42);
        let err = sigmoid_contrastive_loss(&a, &b, 10.0, -10.0).unwrap_err();
        assert!(err.to_string().contains("3×4"), "{err}");
        assert!(err.to_string().contains("2×4"), "{err}");
    }

    #[test]
    fn four_pair_loss_gradient_matches_finite_differences_in_f32() {
        // Gradient w.r.t. the image embeddings of a 4-pair batch, checked
        // at f32 with a power-of-two step.
        let img = unit_rows::<f32>(4, 8, 51);
        let txt = unit_rows::<f32>(4, 8, 52);
        let worst = finite_diff_check(
            |tape, x| {
                let tv = tape.leaf_tensor(&txt)?;
                let log_t = tape.leaf(&[2.0f32.ln()], 1, 1)?;
                let b = tape.leaf(&[-0.5f32], 1, 1)?;
                contrastive_loss_on_tape(tape, x, tv, log_t, b)
            },
            &img,
            0.0078125, // 2⁻⁷
        )
        .unwrap();
        assert!(worst <= 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn temperature_gradient_matches_finite_differences() {
        let img = unit_rows::<f64>(4, 8, 61);
        let txt = unit_rows::<f64>(4, 8, 62);
        let log_t = Tensor::matrix(1, 1, vec![10.0f64.ln()]).unwrap();
        let worst = finite_diff_check(
            |tape, lt| {
                let iv = tape.leaf_tensor(&img)?;
                let tv = tape.leaf_tensor(&txt)?;
                let b = tape.leaf(&[-10.0f64], 1, 1)?;
                contrastive_loss_on_tape(tape, iv, tv, lt, b)
            },
            &log_t,
            1e-5,
        )
        .unwrap();
        assert!(worst <= 1e-3, "worst rel err {worst}");

        // Same check at production precision. Milder constants keep the
        // sigmoids out of saturation, where an f32 finite difference has
        // nothing left to measure.
        let log_t32 = Tensor::matrix(1, 1, vec![3.0f32.ln()]).unwrap();
        let img32 = img.cast::<f32>();
        let txt32 = txt.cast::<f32>();
        let worst32 = finite_diff_check(
            |tape, lt| {
                let iv = tape.leaf_tensor(&img32)?;
                let tv = tape.leaf_tensor(&txt32)?;
                let b = tape.leaf(&[-1.0f32], 1, 1)?;
                contrastive_loss_on_tape(tape, iv, tv, lt, b)
            },
            &log_t32,
            0.0078125,
        )
        .unwrap();
        assert!(worst32 <= 1e-3, "worst f32 rel err {worst32}");
    }
}
