//! Randomized property checks over the tensor core.

use akid::tensor::{kernels, Pcg32, Tensor};
use proptest::prelude::*;

fn small_tensor() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..4, 1usize..6).prop_flat_map(|(a, b, c)| {
        let len = a * b * c;
        proptest::collection::vec(-10.0f64..10.0, len)
            .prop_map(move |data| Tensor::new(vec![a, b, c], data).unwrap())
    })
}

proptest! {
    #[test]
    fn construction_rejects_mismatched_lengths(
        shape in proptest::collection::vec(1usize..5, 0..4),
        extra in 1usize..4,
    ) {
        let len: usize = shape.iter().product();
        prop_assert!(Tensor::<f64>::new(shape.clone(), vec![0.0; len]).is_ok());
        prop_assert!(Tensor::<f64>::new(shape, vec![0.0; len + extra]).is_err());
    }

    #[test]
    fn relu_is_nonnegative_and_idempotent(t in small_tensor()) {
        let once = kernels::relu(&t);
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(kernels::relu(&once), once);
    }

    #[test]
    fn maxout_group_one_is_identity(t in small_tensor()) {
        let (out, _) = kernels::maxout(&t, 1).unwrap();
        prop_assert_eq!(out, t);
    }

    #[test]
    fn add_commutes(t in small_tensor(), seed in 0u64..1000) {
        let mut rng = Pcg32::new(seed, 0);
        let u = Tensor::rand_uniform(t.shape().to_vec(), 5.0, &mut rng);
        prop_assert_eq!(
            kernels::add(&t, &u).unwrap(),
            kernels::add(&u, &t).unwrap()
        );
    }

    #[test]
    fn softmax_rows_are_distributions(
        n in 1usize..5,
        k in 2usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = Pcg32::new(seed, 1);
        let logits = Tensor::rand_uniform(vec![n, k], 4.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.bounded(k as u32) as usize).collect();
        let got = kernels::softmax_cross_entropy(&logits, &labels).unwrap();
        prop_assert!(got.loss >= 0.0);
        for row in got.probs.data().chunks(k) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn rng_is_reproducible_per_stream(seed in 0u64..10_000, stream in 0u64..100) {
        let mut a = Pcg32::new(seed, stream);
        let mut b = Pcg32::new(seed, stream);
        let sa: Vec<u32> = (0..16).map(|_| a.next_u32()).collect();
        let sb: Vec<u32> = (0..16).map(|_| b.next_u32()).collect();
        prop_assert_eq!(sa, sb);
    }
}
