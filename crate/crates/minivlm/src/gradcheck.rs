//! Randomized gradient-verification sweeps for every tape primitive.
//!
//! Each primitive is wrapped in a scalar probe loss
//! `L(x) = Σ w ⊙ (op(x) − op(x₀))` with fixed random weights `w`, checked
//! by [`finite_diff_check`](crate::tape::finite_diff_check) at random
//! points. Two choices keep fp32 central differences meaningful at the
//! 1e-3 tolerance:
//!
//! * the loss is *centered* at the evaluation point, so unperturbed
//!   output elements cancel bitwise and rounding enters only through the
//!   handful of elements a coordinate actually touches;
//! * test points are *conditioned*: a draw is rejected (and redrawn)
//!   unless every nonzero element of the true gradient — computed on the
//!   f64 instantiation of the same primitive — clears a floor that fp32
//!   differences can resolve. Exact zeros (elements the op provably does
//!   not read, such as unsliced rows) are exempt: both sides are 0.
//!
//! Steps are powers of two so `x ± h` is exact: 2⁻² for ops whose probe
//! loss is linear in `x` (central differences are then exact up to
//! rounding) and ≈ε^⅓ otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{fp, Scalar};
use crate::tape::{finite_diff_check, Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error seen for one primitive over a sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub op: &'static str,
    pub worst_rel_err: f64,
}

/// One randomized check: the differentiated input `x` and the primitive
/// application `apply: x ↦ y` with all other operands fixed inside.
struct OpSpec<S: Scalar> {
    name: &'static str,
    /// Whether the probe loss is linear in `x` (exact central differences).
    linear: bool,
    /// Smallest nonzero true-gradient magnitude a test point must have.
    /// fp32 central differences carry an absolute error floor of a few
    /// 1e-5 for O(1) operands — larger for ops whose rounding accumulates
    /// across a whole row — so the floor keeps worst relative errors
    /// comfortably under 1e-3.
    min_grad: f64,
    x: Tensor<S>,
    apply: Box<dyn Fn(&mut Tape<S>, Var) -> Result<Var>>,
}

type BuilderFn<S> = fn(&mut ChaCha8Rng) -> Result<OpSpec<S>>;

// ---- random draws (always in f64, then cast, so the f64 conditioning
// ---- pass and the checked-precision pass replay identical streams) ----

fn signed_mag(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.gen_range(lo..hi);
    if rng.gen::<bool>() {
        m
    } else {
        -m
    }
}

/// Entries with magnitude in [lo, hi), random sign — bounded away from 0.
fn mat_signed<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| fp::<S>(signed_mag(rng, lo, hi))).collect();
    Tensor::new(vec![rows, cols], data).expect("valid shape")
}

/// Entries uniform in [lo, hi).
fn mat_uniform<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| fp::<S>(rng.gen_range(lo..hi))).collect();
    Tensor::new(vec![rows, cols], data).expect("valid shape")
}

fn weights<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n).map(|_| fp::<S>(signed_mag(rng, 0.7, 1.5))).collect()
}

/// Probe loss Σ w ⊙ (y − y₀); y₀ enters as a constant so the gradient is
/// untouched while unperturbed elements cancel exactly.
fn centered_weighted_sum<S: Scalar>(t: &mut Tape<S>, y: Var, y0: &[S], w: &[S]) -> Result<Var> {
    let (r, c) = t.shape(y);
    let y0v = t.leaf(y0, r, c)?;
    let neg = t.scale(y0v, -S::one());
    let d = t.add(y, neg)?;
    let wv = t.leaf(w, r, c)?;
    let p = t.mul(d, wv)?;
    Ok(t.sum_all(p))
}

// ---- per-primitive builders ----------------------------------------

fn b_matmul_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_signed::<S>(rng, 3, 4, 0.3, 1.5);
    let b = mat_signed::<S>(rng, 4, 2, 0.3, 1.5);
    Ok(OpSpec {
        name: "matmul/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let bv = t.leaf_tensor(&b)?;
            t.matmul(xv, bv)
        }),
    })
}

fn b_matmul_b<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_signed::<S>(rng, 3, 4, 0.3, 1.5);
    let x = mat_signed::<S>(rng, 4, 2, 0.3, 1.5);
    Ok(OpSpec {
        name: "matmul/b",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.matmul(av, xv)
        }),
    })
}

fn b_matmul_bt_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_signed::<S>(rng, 3, 4, 0.3, 1.5);
    let b = mat_signed::<S>(rng, 5, 4, 0.3, 1.5);
    Ok(OpSpec {
        name: "matmul_bt/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let bv = t.leaf_tensor(&b)?;
            t.matmul_bt(xv, bv)
        }),
    })
}

fn b_matmul_bt_b<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_signed::<S>(rng, 3, 4, 0.3, 1.5);
    let x = mat_signed::<S>(rng, 5, 4, 0.3, 1.5);
    Ok(OpSpec {
        name: "matmul_bt/b",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.matmul_bt(av, xv)
        }),
    })
}

fn b_add<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let b = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    Ok(OpSpec {
        name: "add",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let bv = t.leaf_tensor(&b)?;
            t.add(xv, bv)
        }),
    })
}

fn b_mul_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let b = mat_signed::<S>(rng, 2, 5, 0.3, 1.5);
    Ok(OpSpec {
        name: "mul/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let bv = t.leaf_tensor(&b)?;
            t.mul(xv, bv)
        }),
    })
}

fn b_mul_b<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_signed::<S>(rng, 2, 5, 0.3, 1.5);
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    Ok(OpSpec {
        name: "mul/b",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.mul(av, xv)
        }),
    })
}

fn b_scale<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let c = fp::<S>(signed_mag(rng, 0.5, 1.5));
    Ok(OpSpec {
        name: "scale",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| Ok(t.scale(xv, c))),
    })
}

fn b_add_scalar<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let c = fp::<S>(signed_mag(rng, 0.5, 1.5));
    Ok(OpSpec {
        name: "add_scalar",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| Ok(t.add_scalar(xv, c))),
    })
}

fn b_scale_by_var_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let s = fp::<S>(signed_mag(rng, 0.5, 1.5));
    Ok(OpSpec {
        name: "scale_by_var/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let sv = t.leaf(&[s], 1, 1)?;
            t.scale_by_var(xv, sv)
        }),
    })
}

fn b_scale_by_var_s<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_signed::<S>(rng, 2, 5, 0.3, 1.5);
    let x = mat_signed::<S>(rng, 1, 1, 0.5, 1.5);
    Ok(OpSpec {
        name: "scale_by_var/s",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.scale_by_var(av, xv)
        }),
    })
}

fn b_offset_by_var_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let s = fp::<S>(signed_mag(rng, 0.5, 1.5));
    Ok(OpSpec {
        name: "offset_by_var/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let sv = t.leaf(&[s], 1, 1)?;
            t.offset_by_var(xv, sv)
        }),
    })
}

fn b_offset_by_var_s<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    let x = mat_signed::<S>(rng, 1, 1, 0.5, 1.5);
    Ok(OpSpec {
        name: "offset_by_var/s",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.offset_by_var(av, xv)
        }),
    })
}

fn b_add_row_a<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 3, 4, -2.0, 2.0);
    let row = mat_uniform::<S>(rng, 1, 4, -1.0, 1.0);
    Ok(OpSpec {
        name: "add_row/a",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let rv = t.leaf_tensor(&row)?;
            t.add_row(xv, rv)
        }),
    })
}

fn b_add_row_row<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let a = mat_uniform::<S>(rng, 3, 4, -2.0, 2.0);
    let x = mat_uniform::<S>(rng, 1, 4, -1.0, 1.0);
    Ok(OpSpec {
        name: "add_row/row",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let av = t.leaf_tensor(&a)?;
            t.add_row(av, xv)
        }),
    })
}

fn b_embed_lookup<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 7, 5, -1.5, 1.5);
    // Repeated ids exercise scatter-add; rows 2, 4, 5 stay untouched.
    let ids: Vec<u32> = vec![3, 1, 3, 6, 0];
    Ok(OpSpec {
        name: "embed_lookup/table",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| t.embed_lookup(xv, &ids)),
    })
}

fn b_softmax<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    // Softmax gradients carry the probabilities as factors (Σs = 1 per
    // row), so their natural scale is ~1/n; the conditioning floor must
    // sit below that, and a narrow logit range keeps the smallest
    // probability from vanishing.
    let x = mat_uniform::<S>(rng, 1, 3, -0.8, 0.8);
    Ok(OpSpec {
        name: "softmax_rows",
        linear: false,
        min_grad: 0.03,
        x,
        apply: Box::new(move |t, xv| Ok(t.softmax_rows(xv))),
    })
}

fn b_layer_norm_x<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 3, 6, -1.5, 1.5);
    let gamma = mat_signed::<S>(rng, 1, 6, 0.3, 1.5);
    let beta = mat_uniform::<S>(rng, 1, 6, -0.5, 0.5);
    Ok(OpSpec {
        name: "layer_norm/x",
        linear: false,
        min_grad: 0.15,
        x,
        apply: Box::new(move |t, xv| {
            let g = t.leaf_tensor(&gamma)?;
            let b = t.leaf_tensor(&beta)?;
            t.layer_norm(xv, g, b, fp(1e-5))
        }),
    })
}

fn b_layer_norm_gamma<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let xf = mat_uniform::<S>(rng, 3, 6, -1.5, 1.5);
    let x = mat_signed::<S>(rng, 1, 6, 0.3, 1.5);
    let beta = mat_uniform::<S>(rng, 1, 6, -0.5, 0.5);
    Ok(OpSpec {
        name: "layer_norm/gamma",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let xv_in = t.leaf_tensor(&xf)?;
            let b = t.leaf_tensor(&beta)?;
            t.layer_norm(xv_in, xv, b, fp(1e-5))
        }),
    })
}

fn b_layer_norm_beta<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let xf = mat_uniform::<S>(rng, 3, 6, -1.5, 1.5);
    let gamma = mat_signed::<S>(rng, 1, 6, 0.3, 1.5);
    let x = mat_uniform::<S>(rng, 1, 6, -0.5, 0.5);
    Ok(OpSpec {
        name: "layer_norm/beta",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let xv_in = t.leaf_tensor(&xf)?;
            let g = t.leaf_tensor(&gamma)?;
            t.layer_norm(xv_in, g, xv, fp(1e-5))
        }),
    })
}

fn b_gelu<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    // The tanh-GELU derivative crosses zero near x ≈ −0.75; fp32 central
    // differences cannot resolve gradients that flat at the sweep
    // tolerance, so points skirt the dead band.
    let data: Vec<S> = (0..8)
        .map(|_| loop {
            let u = rng.gen_range(-2.0..2.0);
            if !(-1.4..-0.2).contains(&u) {
                break fp::<S>(u);
            }
        })
        .collect();
    let x = Tensor::new(vec![2, 4], data).expect("valid shape");
    Ok(OpSpec {
        name: "gelu",
        linear: false,
        min_grad: 0.12,
        x,
        apply: Box::new(move |t, xv| Ok(t.gelu(xv))),
    })
}

fn b_sigmoid<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 4, -1.5, 1.5);
    Ok(OpSpec {
        name: "sigmoid",
        linear: false,
        min_grad: 0.08,
        x,
        apply: Box::new(move |t, xv| Ok(t.sigmoid(xv))),
    })
}

fn b_softplus<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 4, -1.5, 1.5);
    Ok(OpSpec {
        name: "softplus",
        linear: false,
        min_grad: 0.08,
        x,
        apply: Box::new(move |t, xv| Ok(t.softplus(xv))),
    })
}

fn b_exp<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 4, -1.5, 1.5);
    Ok(OpSpec {
        name: "exp",
        linear: false,
        min_grad: 0.08,
        x,
        apply: Box::new(move |t, xv| Ok(t.exp(xv))),
    })
}

fn b_l2_normalize<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_signed::<S>(rng, 2, 5, 0.3, 1.5);
    Ok(OpSpec {
        name: "l2_normalize_rows",
        linear: false,
        min_grad: 0.12,
        x,
        apply: Box::new(move |t, xv| Ok(t.l2_normalize_rows(xv))),
    })
}

fn b_slice_rows<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 4, 3, -2.0, 2.0);
    Ok(OpSpec {
        name: "slice_rows",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| t.slice_rows(xv, 1, 2)),
    })
}

fn b_slice_cols<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 3, 5, -2.0, 2.0);
    Ok(OpSpec {
        name: "slice_cols",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| t.slice_cols(xv, 1, 3)),
    })
}

fn b_concat_cols<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 3, 2, -2.0, 2.0);
    let other = mat_uniform::<S>(rng, 3, 3, -2.0, 2.0);
    Ok(OpSpec {
        name: "concat_cols",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| {
            let ov = t.leaf_tensor(&other)?;
            t.concat_cols(&[xv, ov])
        }),
    })
}

fn b_sum_all<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    Ok(OpSpec {
        name: "sum_all",
        linear: true,
        min_grad: 0.06,
        x,
        apply: Box::new(move |t, xv| Ok(t.sum_all(xv))),
    })
}

fn b_mean_all<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<OpSpec<S>> {
    let x = mat_uniform::<S>(rng, 2, 5, -2.0, 2.0);
    Ok(OpSpec {
        name: "mean_all",
        linear: true,
        min_grad: 0.02,
        x,
        apply: Box::new(move |t, xv| Ok(t.mean_all(xv))),
    })
}

fn builder_list<S: Scalar>() -> Vec<BuilderFn<S>> {
    vec![
        b_matmul_a::<S>,
        b_matmul_b::<S>,
        b_matmul_bt_a::<S>,
        b_matmul_bt_b::<S>,
        b_add::<S>,
        b_mul_a::<S>,
        b_mul_b::<S>,
        b_scale::<S>,
        b_add_scalar::<S>,
        b_scale_by_var_a::<S>,
        b_scale_by_var_s::<S>,
        b_offset_by_var_a::<S>,
        b_offset_by_var_s::<S>,
        b_add_row_a::<S>,
        b_add_row_row::<S>,
        b_embed_lookup::<S>,
        b_softmax::<S>,
        b_layer_norm_x::<S>,
        b_layer_norm_gamma::<S>,
        b_layer_norm_beta::<S>,
        b_gelu::<S>,
        b_sigmoid::<S>,
        b_softplus::<S>,
        b_exp::<S>,
        b_l2_normalize::<S>,
        b_slice_rows::<S>,
        b_slice_cols::<S>,
        b_concat_cols::<S>,
        b_sum_all::<S>,
        b_mean_all::<S>,
    ]
}

// ---- sweep framework ------------------------------------------------

fn eval_unperturbed<S: Scalar>(spec: &OpSpec<S>) -> Result<(Vec<S>, (usize, usize))> {
    let mut t = Tape::new();
    let xv = t.leaf_tensor(&spec.x)?;
    let y = (spec.apply)(&mut t, xv)?;
    Ok((t.value(y).to_vec(), t.shape(y)))
}

fn analytic_grad(spec: &OpSpec<f64>, y0: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let xv = t.param_tensor(&spec.x)?;
    let y = (spec.apply)(&mut t, xv)?;
    let loss = centered_weighted_sum(&mut t, y, y0, w)?;
    t.backward(loss)?;
    Ok(t.grad(xv)
        .ok_or_else(|| Error::Numeric("probe loss does not reach x".to_string()))?
        .to_vec())
}

fn well_conditioned(g: &[f64], min_grad: f64) -> bool {
    g.iter().all(|&v| v == 0.0 || v.abs() >= min_grad)
}

/// Finite-difference step ≈ ε^⅓ rounded to a power of two, so `x ± h`
/// stays exactly representable.
fn nonlinear_step<S: Scalar>() -> S {
    let eps = S::epsilon().to_f64().expect("epsilon fits in f64");
    let exp = (eps.log2() / 3.0).ceil() as i32;
    fp(2f64.powi(exp))
}

/// Checks every tape primitive at `points` random well-conditioned
/// points, returning the worst relative error per primitive (one entry
/// per differentiated input slot, e.g. `matmul/a` and `matmul/b`).
pub fn primitive_gradient_sweep<S: Scalar>(seed: u64, points: usize) -> Result<Vec<SweepOutcome>> {
    let builders_s = builder_list::<S>();
    let builders_64 = builder_list::<f64>();
    let h_linear: S = fp(0.25);
    let h_nonlinear: S = nonlinear_step::<S>();

    let mut outcomes = Vec::with_capacity(builders_s.len());
    for (i, (build_s, build_64)) in builders_s.iter().zip(&builders_64).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut name = "";
        let mut worst = 0.0f64;
        for _ in 0..points {
            // Draw in f64 first; accept only well-conditioned points, then
            // replay the identical RNG stream at the checked precision.
            let mut attempts = 0;
            let (spec, y0, w) = loop {
                attempts += 1;
                let mut probe = rng.clone();
                let spec64 = build_64(&mut probe)?;
                name = spec64.name;
                if attempts > 5000 {
                    return Err(Error::Numeric(format!(
                        "no well-conditioned test point found for {name} after 5000 draws"
                    )));
                }
                let (y0_64, (yr, yc)) = eval_unperturbed(&spec64)?;
                let w64 = weights::<f64>(&mut probe, yr * yc);
                let g = analytic_grad(&spec64, &y0_64, &w64)?;
                if well_conditioned(&g, spec64.min_grad) {
                    let spec_s = build_s(&mut rng)?;
                    let (y0_s, (sr, sc)) = eval_unperturbed(&spec_s)?;
                    let w_s = weights::<S>(&mut rng, sr * sc);
                    break (spec_s, y0_s, w_s);
                }
                rng = probe;
            };
            name = spec.name;
            let h = if spec.linear { h_linear } else { h_nonlinear };
            let apply = spec.apply;
            let err = finite_diff_check(
                move |t, xv| {
                    let y = apply(t, xv)?;
                    centered_weighted_sum(t, y, &y0, &w)
                },
                &spec.x,
                h,
            )?;
            let err = err.to_f64().expect("error fits in f64");
            if err > worst {
                worst = err;
            }
        }
        outcomes.push(SweepOutcome {
            op: name,
            worst_rel_err: worst,
        });
    }
    Ok(outcomes)
}
