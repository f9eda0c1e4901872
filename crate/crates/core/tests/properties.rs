//! Property tests for the structural invariants: kernel mass
//! conservation, normalization bounds, tensor view round-trips, and
//! clamping under adversarial optimizer steps.

use proptest::prelude::*;

use dcls_core::interp::InterpKind;
use dcls_core::kernel::{construct_bilinear, construct_interp, DclsParams, DEFAULT_EPS};
use dcls_core::tensor::Tensor;
use dcls_core::train::{AdamConfig, AdamState, ParamGroup};

fn params_with(
    d: usize,
    size: usize,
    weights: Vec<f64>,
    positions: Vec<f64>,
    sigma: f64,
) -> DclsParams<f64> {
    let m = weights.len();
    let w = Tensor::from_vec(&[1, 1, m], weights).unwrap();
    let p = Tensor::from_vec(&[d, 1, 1, m], positions).unwrap();
    let s = Tensor::full(&[d, 1, 1, m], sigma).unwrap();
    DclsParams::new(w, p, s, vec![size; d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // Bilinear mass conservation: with every element's support fully
    // inside the window the kernel sums to the sum of the weights.
    #[test]
    fn bilinear_kernel_sum_equals_weight_sum(
        weights in prop::collection::vec(-3.0f64..3.0, 1..5),
        seeds in prop::collection::vec(0.0f64..1.0, 10),
        size in 3usize..8,
    ) {
        let m = weights.len();
        let shift = (size / 2) as f64;
        let mut positions = Vec::new();
        for axis in 0..2 {
            for k in 0..m {
                // Shifted position in [0, size-2]: the high corner stays in.
                let u = seeds[(axis * m + k) % seeds.len()];
                positions.push(u * (size as f64 - 2.0) - shift);
            }
        }
        let params = params_with(2, size, weights.clone(), positions, 0.0);
        let kernel = construct_bilinear(&params).unwrap();
        let total: f64 = weights.iter().sum();
        prop_assert!((kernel.sum() - total).abs() <= 1e-12);
    }

    // Normalized interpolation: each element's footprint sums to
    // S / (eps + S), strictly below 1 and above 1 - 1e-6 for sigma = 0
    // in 1-d and 2-d.
    #[test]
    fn normalized_element_mass_bounds(
        kind_gauss in any::<bool>(),
        d in 1usize..3,
        u0 in 0.0f64..1.0,
        u1 in 0.0f64..1.0,
        size in 5usize..10,
    ) {
        let kind = if kind_gauss { InterpKind::Gauss } else { InterpKind::Triangle };
        let shift = (size / 2) as f64;
        let positions: Vec<f64> = [u0, u1][..d]
            .iter()
            .map(|u| u * (size as f64 - 1.0) - shift)
            .collect();
        let params = params_with(d, size, vec![1.0], positions, 0.0);
        let kernel = construct_interp(&params, kind, DEFAULT_EPS).unwrap();
        let total = kernel.sum();
        prop_assert!(total < 1.0, "sum {total}");
        prop_assert!(total > 1.0 - 1e-6, "sum {total}");
    }

    // Reshape preserves data order; permute then inverse permute is the
    // identity.
    #[test]
    fn reshape_and_permute_round_trip(
        data in prop::collection::vec(-10.0f64..10.0, 24),
        perm_seed in 0usize..6,
    ) {
        let t = Tensor::from_vec(&[2, 3, 4], data.clone()).unwrap();
        let r = t.reshape(&[4, 6]).unwrap();
        prop_assert_eq!(r.data(), &data[..]);

        let perms = [
            [0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        let perm = perms[perm_seed];
        let mut inverse = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back = t.permute(&perm).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(back, t);
    }

    // Serialization round-trip is bitwise for both dtypes.
    #[test]
    fn save_load_round_trip(data in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let n = data.len();
        let t = Tensor::from_vec(&[n], data.clone()).unwrap();
        let path = dir.path().join("t.dcls");
        t.save(&path).unwrap();
        let back = Tensor::<f64>::load(&path).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let t32 = Tensor::<f32>::from_vec(&[n], data.iter().map(|&v| v as f32).collect()).unwrap();
        let path32 = dir.path().join("t32.dcls");
        t32.save(&path32).unwrap();
        let back32 = Tensor::<f32>::load(&path32).unwrap();
        for (a, b) in back32.data().iter().zip(t32.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // After any optimizer step followed by clamp, positions are inside
    // their per-axis bounds, under adversarial gradients.
    #[test]
    fn positions_stay_in_bounds_after_step_and_clamp(
        grads in prop::collection::vec(-1e4f64..1e4, 8),
        lr in 0.001f64..10.0,
        size in 1usize..9,
    ) {
        let weights = vec![1.0; 4];
        let positions = vec![0.0; 8];
        let mut params = params_with(2, size, weights, positions, 0.0);
        params.clamp_positions();
        let grad = Tensor::from_vec(&[2, 1, 1, 4], grads).unwrap();
        let mut state = AdamState::new(params.positions.shape());
        let group = ParamGroup::positions();
        for _ in 0..3 {
            group
                .step(&mut state, &mut params.positions, &grad, lr, &AdamConfig::default())
                .unwrap();
            params.clamp_positions();
            for axis in 0..2 {
                let (lo, hi) = params.position_bounds(axis);
                let per_axis = params.weights.len();
                for &p in &params.positions.data()[axis * per_axis..(axis + 1) * per_axis] {
                    prop_assert!(p >= lo && p <= hi, "{p} outside [{lo}, {hi}]");
                }
            }
        }
    }
}
