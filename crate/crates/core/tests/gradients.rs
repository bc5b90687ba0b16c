//! Finite-difference validation of every differentiable kernel.
//!
//! Each kernel is composed with the smooth readout `L(out) = ½‖out‖²`, whose
//! gradient w.r.t. `out` is `out` itself; the analytic input/parameter
//! gradients are then compared against central finite differences of the
//! composite at 64-bit precision.
//!
//! Kernels with max-selection or sign decisions (pool, maxout, relu) get
//! inputs drawn from a jittered, shuffled lattice whose pairwise gaps are an
//! order of magnitude wider than the finite-difference step, so perturbation
//! never flips a selection.

use akid::tensor::gradcheck::check_gradient;
use akid::tensor::tape::Tape;
use akid::tensor::{kernels, Padding, Pcg32, Tensor};

const TOL: f64 = 1e-4;
const CASES: u64 = 20;

/// ½‖t‖².
fn half_sq(t: &Tensor<f64>) -> f64 {
    kernels::scaled_sum_squares(t, 0.5)
}

/// Random values with pairwise separation ≥ 0.034 and magnitude ≥ 0.017:
/// a centered 0.05-lattice, jittered by ±0.008, then shuffled.
fn separated(shape: &[usize], rng: &mut Pcg32) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len)
        .map(|i| (i as f64 - len as f64 / 2.0) * 0.05 + 0.025 + rng.uniform(-0.008, 0.008))
        .collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(1000 + case, 7);
        let c = case as usize;
        let (n, h, w) = (1 + c % 2, 4 + c % 3, 4 + (c / 2) % 3);
        let (cin, cout) = (1 + c % 2, 1 + c % 3);
        let k = 1 + c % 3;
        let s = 1 + c % 2;
        let padding = if c % 2 == 0 { Padding::Same } else { Padding::Valid };

        let x = separated(&[n, h, w, cin], &mut rng);
        let kt = Tensor::rand_uniform(vec![k, k, cin, cout], 0.7, &mut rng);
        let b = Tensor::rand_uniform(vec![cout], 0.5, &mut rng);
        let out = kernels::conv2d(&x, &kt, Some(&b), (s, s), padding).unwrap();
        let (gx, gk, gb) = kernels::conv2d_backward(&x, &kt, (s, s), padding, &out).unwrap();

        let ex = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(&kernels::conv2d(p, &kt, Some(&b), (s, s), padding).unwrap())
            },
            &x,
            &gx,
        );
        let ek = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(&kernels::conv2d(&x, p, Some(&b), (s, s), padding).unwrap())
            },
            &kt,
            &gk,
        );
        let eb = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(&kernels::conv2d(&x, &kt, Some(p), (s, s), padding).unwrap())
            },
            &b,
            &gb,
        );
        assert!(ex <= TOL, "case {case}: input grad error {ex}");
        assert!(ek <= TOL, "case {case}: kernel grad error {ek}");
        assert!(eb <= TOL, "case {case}: bias grad error {eb}");
    }
}

#[test]
fn maxpool2d_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(2000 + case, 7);
        let c = case as usize;
        let (n, h, w, ch) = (1 + c % 2, 4 + c % 4, 4 + (c / 3) % 4, 1 + c % 3);
        let k = 2 + c % 2;
        let s = 1 + c % 3;
        let padding = if c % 2 == 0 { Padding::Same } else { Padding::Valid };

        let x = separated(&[n, h, w, ch], &mut rng);
        let (out, argmax) = kernels::maxpool2d(&x, (k, k), (s, s), padding).unwrap();
        let gx = kernels::maxpool2d_backward(x.shape(), &argmax, &out).unwrap();
        let err = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(&kernels::maxpool2d(p, (k, k), (s, s), padding).unwrap().0)
            },
            &x,
            &gx,
        );
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

#[test]
fn relu_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(3000 + case, 7);
        let x = separated(&[3, 4 + case as usize % 5], &mut rng);
        let out = kernels::relu(&x);
        let gx = kernels::relu_backward(&x, &out).unwrap();
        let err = check_gradient(&mut |p: &Tensor<f64>| half_sq(&kernels::relu(p)), &x, &gx);
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

#[test]
fn maxout_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(4000 + case, 7);
        let c = case as usize;
        let g = 1 + c % 4;
        let channels = g * (1 + c % 3);
        let x = if c % 2 == 0 {
            separated(&[2, channels], &mut rng)
        } else {
            separated(&[1, 3, 3, channels], &mut rng)
        };
        let (out, argmax) = kernels::maxout(&x, g).unwrap();
        let gx = kernels::maxout_backward(x.shape(), &argmax, &out).unwrap();
        let err = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::maxout(p, g).unwrap().0),
            &x,
            &gx,
        );
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

#[test]
fn inner_product_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(5000 + case, 7);
        let c = case as usize;
        let (n, k) = (1 + c % 3, 2 + c % 4);
        // Every other case uses a rank-4 input to cover the flatten path.
        let x = if c % 2 == 0 {
            Tensor::rand_uniform(vec![n, 3 + c % 4], 1.0, &mut rng)
        } else {
            Tensor::rand_uniform(vec![n, 2, 2, 1 + c % 2], 1.0, &mut rng)
        };
        let d = x.len() / n;
        let w = Tensor::rand_uniform(vec![d, k], 0.8, &mut rng);
        let b = Tensor::rand_uniform(vec![k], 0.5, &mut rng);
        let out = kernels::inner_product(&x, &w, Some(&b)).unwrap();
        let (gx, gw, gb) = kernels::inner_product_backward(&x, &w, &out).unwrap();

        let ex = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::inner_product(p, &w, Some(&b)).unwrap()),
            &x,
            &gx,
        );
        let ew = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::inner_product(&x, p, Some(&b)).unwrap()),
            &w,
            &gw,
        );
        let eb = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::inner_product(&x, &w, Some(p)).unwrap()),
            &b,
            &gb,
        );
        assert!(ex <= TOL, "case {case}: input grad error {ex}");
        assert!(ew <= TOL, "case {case}: weight grad error {ew}");
        assert!(eb <= TOL, "case {case}: bias grad error {eb}");
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    const EPS: f64 = 1e-5;
    for case in 0..CASES {
        let mut rng = Pcg32::new(6000 + case, 7);
        let c = case as usize;
        let channels = 1 + c % 3;
        let x = if c % 2 == 0 {
            Tensor::rand_uniform(vec![3 + c % 3, channels], 1.0, &mut rng)
        } else {
            Tensor::rand_uniform(vec![2, 2, 2, channels], 1.0, &mut rng)
        };
        let with_affine = c % 3 != 0;
        let gamma = with_affine
            .then(|| Tensor::rand_uniform(vec![channels], 0.5, &mut rng).map(|v| v + 1.0));
        let beta = with_affine.then(|| Tensor::rand_uniform(vec![channels], 0.5, &mut rng));

        let fwd = kernels::batch_norm_train(&x, gamma.as_ref(), beta.as_ref(), EPS).unwrap();
        let (gx, ggamma, gbeta) = kernels::batch_norm_backward(
            &x,
            gamma.as_ref(),
            &fwd.mean,
            &fwd.var,
            EPS,
            &fwd.output,
        )
        .unwrap();

        let ex = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(
                    &kernels::batch_norm_train(p, gamma.as_ref(), beta.as_ref(), EPS)
                        .unwrap()
                        .output,
                )
            },
            &x,
            &gx,
        );
        assert!(ex <= TOL, "case {case}: input grad error {ex}");

        if let (Some(g), Some(b)) = (&gamma, &beta) {
            let eg = check_gradient(
                &mut |p: &Tensor<f64>| {
                    half_sq(
                        &kernels::batch_norm_train(&x, Some(p), Some(b), EPS).unwrap().output,
                    )
                },
                g,
                &ggamma,
            );
            let eb = check_gradient(
                &mut |p: &Tensor<f64>| {
                    half_sq(
                        &kernels::batch_norm_train(&x, Some(g), Some(p), EPS).unwrap().output,
                    )
                },
                b,
                &gbeta,
            );
            assert!(eg <= TOL, "case {case}: gamma grad error {eg}");
            assert!(eb <= TOL, "case {case}: beta grad error {eb}");
        }
    }
}

#[test]
fn softmax_cross_entropy_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(7000 + case, 7);
        let c = case as usize;
        let (n, k) = (1 + c % 4, 2 + c % 5);
        let labels: Vec<usize> = (0..n).map(|_| rng.bounded(k as u32) as usize).collect();
        let x = Tensor::rand_uniform(vec![n, k], 3.0, &mut rng);
        let got = kernels::softmax_cross_entropy(&x, &labels).unwrap();
        let gx = kernels::softmax_cross_entropy_backward(&got.probs, &labels, 1.0);
        let err = check_gradient(
            &mut |p: &Tensor<f64>| kernels::softmax_cross_entropy(p, &labels).unwrap().loss,
            &x,
            &gx,
        );
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

#[test]
fn add_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(8000 + case, 7);
        let shape = vec![2, 3 + case as usize % 4];
        let a = Tensor::rand_uniform(shape.clone(), 1.0, &mut rng);
        let b = Tensor::rand_uniform(shape, 1.0, &mut rng);
        let out = kernels::add(&a, &b).unwrap();
        // dL/da = dL/db = out for L = ½‖a+b‖².
        let ea = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::add(p, &b).unwrap()),
            &a,
            &out,
        );
        let eb = check_gradient(
            &mut |p: &Tensor<f64>| half_sq(&kernels::add(&a, p).unwrap()),
            &b,
            &out,
        );
        assert!(ea <= TOL, "case {case}: lhs grad error {ea}");
        assert!(eb <= TOL, "case {case}: rhs grad error {eb}");
    }
}

#[test]
fn weight_decay_gradients_match_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(9000 + case, 7);
        let scale = 0.0005 * (1 + case as usize % 5) as f64;
        let w = Tensor::rand_uniform(vec![3, 2 + case as usize % 3], 2.0, &mut rng);
        let gw = kernels::scaled_sum_squares_backward(&w, scale, 1.0);
        let err = check_gradient(
            &mut |p: &Tensor<f64>| kernels::scaled_sum_squares(p, scale),
            &w,
            &gw,
        );
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

#[test]
fn dropout_with_replayed_mask_matches_finite_differences() {
    for case in 0..CASES {
        let mut rng = Pcg32::new(10_000 + case, 7);
        let x = Tensor::rand_uniform(vec![4, 5], 1.0, &mut rng);
        let keep = 0.6;
        // Re-seeding per evaluation replays the same mask, making the
        // composite a fixed (differentiable) linear map.
        let mask_rng = || Pcg32::new(77 + case, 9);
        let (out, mask) = kernels::dropout_train(&x, keep, &mut mask_rng()).unwrap();
        let gx = kernels::dropout_backward(&mask, keep, &out).unwrap();
        let err = check_gradient(
            &mut |p: &Tensor<f64>| {
                half_sq(&kernels::dropout_train(p, keep, &mut mask_rng()).unwrap().0)
            },
            &x,
            &gx,
        );
        assert!(err <= TOL, "case {case}: error {err}");
    }
}

/// One taped pipeline — conv → BN → relu → pool → inner product → softmax
/// cross-entropy plus a weight-decay term — checked end-to-end against finite
/// differences for every parameter. Exercises gradient accumulation through
/// the whole record chain.
#[test]
fn taped_network_gradients_match_finite_differences() {
    let mut rng = Pcg32::new(42, 11);
    let x = separated(&[2, 6, 6, 1], &mut rng);
    let w_conv = Tensor::rand_uniform(vec![3, 3, 1, 2], 0.6, &mut rng);
    let b_conv = Tensor::rand_uniform(vec![2], 0.3, &mut rng);
    let gamma = Tensor::rand_uniform(vec![2], 0.4, &mut rng).map(|v| v + 1.0);
    let beta = Tensor::rand_uniform(vec![2], 0.4, &mut rng);
    let w_ip = Tensor::rand_uniform(vec![18, 3], 0.6, &mut rng);
    let labels = vec![0usize, 2];
    const EPS: f64 = 1e-5;
    const WD: f64 = 0.01;

    // Pure re-implementation of the pipeline for the finite-difference side.
    let eval = |x: &Tensor<f64>,
                w_conv: &Tensor<f64>,
                b_conv: &Tensor<f64>,
                gamma: &Tensor<f64>,
                beta: &Tensor<f64>,
                w_ip: &Tensor<f64>|
     -> f64 {
        let c = kernels::conv2d(x, w_conv, Some(b_conv), (1, 1), Padding::Same).unwrap();
        let bn = kernels::batch_norm_train(&c, Some(gamma), Some(beta), EPS).unwrap().output;
        let r = kernels::relu(&bn);
        let (p, _) = kernels::maxpool2d(&r, (2, 2), (2, 2), Padding::Same).unwrap();
        let ip = kernels::inner_product(&p, w_ip, None).unwrap();
        let xent = kernels::softmax_cross_entropy(&ip, &labels).unwrap().loss;
        xent + kernels::scaled_sum_squares(w_conv, WD)
    };

    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let wi = tape.leaf(w_conv.clone(), true);
    let bi = tape.leaf(b_conv.clone(), true);
    let gi = tape.leaf(gamma.clone(), true);
    let be = tape.leaf(beta.clone(), true);
    let wp = tape.leaf(w_ip.clone(), true);
    let c = tape.conv2d(xi, wi, Some(bi), (1, 1), Padding::Same).unwrap();
    let (bn, _, _) = tape.batch_norm_train(c, Some(gi), Some(be), EPS).unwrap();
    let r = tape.relu(bn);
    let p = tape.maxpool2d(r, (2, 2), (2, 2), Padding::Same).unwrap();
    let ip = tape.inner_product(p, wp, None).unwrap();
    let (xent, _) = tape.softmax_cross_entropy(ip, labels.clone()).unwrap();
    let wd = tape.scaled_sum_squares(wi, WD);
    let total = tape.sum_scalars(vec![xent, wd]).unwrap();
    tape.backward(total).unwrap();

    let checks: Vec<(&str, &Tensor<f64>, Tensor<f64>, Box<dyn FnMut(&Tensor<f64>) -> f64>)> = vec![
        (
            "conv weights",
            &w_conv,
            tape.grad(wi).unwrap().clone(),
            Box::new(|t: &Tensor<f64>| eval(&x, t, &b_conv, &gamma, &beta, &w_ip)),
        ),
        (
            "conv bias",
            &b_conv,
            tape.grad(bi).unwrap().clone(),
            Box::new(|t: &Tensor<f64>| eval(&x, &w_conv, t, &gamma, &beta, &w_ip)),
        ),
        (
            "gamma",
            &gamma,
            tape.grad(gi).unwrap().clone(),
            Box::new(|t: &Tensor<f64>| eval(&x, &w_conv, &b_conv, t, &beta, &w_ip)),
        ),
        (
            "beta",
            &beta,
            tape.grad(be).unwrap().clone(),
            Box::new(|t: &Tensor<f64>| eval(&x, &w_conv, &b_conv, &gamma, t, &w_ip)),
        ),
        (
            "ip weights",
            &w_ip,
            tape.grad(wp).unwrap().clone(),
            Box::new(|t: &Tensor<f64>| eval(&x, &w_conv, &b_conv, &gamma, &beta, t)),
        ),
    ];
    for (name, point, analytic, mut f) in checks {
        let err = check_gradient(&mut f, point, &analytic);
        assert!(err <= TOL, "{name}: error {err}");
    }
}
