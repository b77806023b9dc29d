//! Cross-module invariants checked on random inputs.

use proptest::prelude::*;

use fep_core::harness::replica_rng;
use fep_core::lattice::is_ergodic;
use fep_core::observables::field;
use fep_core::{
    simulate, Base, CanonicalWindow, Embedding, GrandCanonical, Profile, RateModel, SimOptions, TestFunction,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dynamics_conserve_particles_and_ergodicity(
        rho in 0.55f64..0.95,
        len in 20usize..120,
        seed in any::<u64>(),
        asym in any::<bool>(),
        tilted in any::<bool>(),
    ) {
        let mut rng = replica_rng(seed, 0);
        let init = GrandCanonical::new(rho).unwrap().sample_ring(len, &mut rng);
        let n = len as f64 / 2.0;
        let base = if asym { Base::Asymmetric } else { Base::Symmetric };
        let model = if tilted {
            let h = TestFunction::stationary(Profile::gaussian(1.0, 0.0, 0.05));
            RateModel::tilted(base, n, h, n.powf(0.75))
        } else if asym {
            RateModel::asymmetric(n)
        } else {
            RateModel::symmetric(n)
        };
        let emb = Embedding::centered(n, len);
        let horizon = 20.0 / n.powi(model.speed_exponent());
        let path = simulate(&init, &model, &emb, horizon, &mut [], SimOptions::default(), &mut rng).unwrap();
        prop_assert_eq!(path.final_config.particles(), init.particles());
        prop_assert!(is_ergodic(&path.final_config));
    }

    #[test]
    fn canonical_samples_respect_constraints(
        half in 2usize..40,
        extra in 0usize..100,
        left in 0u8..2,
        right in 0u8..2,
        seed in any::<u64>(),
    ) {
        let width = 2 * half + 1;
        // between the ergodic minimum and a full window
        let lo = width.div_ceil(2) + usize::from(left == 0 && right == 0);
        let k = lo + extra % (width - lo + 1);
        let w = CanonicalWindow::new(half, k, left, right);
        let gc = GrandCanonical::new(0.75).unwrap();
        let mut rng = replica_rng(seed, 1);
        match w.sample(&gc, &mut rng) {
            Ok(s) => {
                prop_assert_eq!(s.iter().filter(|&&b| b == 1).count(), k);
                let mut full = vec![left];
                full.extend(&s);
                full.push(right);
                prop_assert!(full.windows(2).all(|p| p[0] + p[1] > 0));
            }
            // some boundary and count combinations admit no ergodic word
            Err(e) => {
                let empty = matches!(e, fep_core::FepError::EmptySupport { .. });
                prop_assert!(empty, "unexpected error {}", e);
            }
        }
    }

    #[test]
    fn field_is_linear_in_the_test_function(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let (n, len) = (100.0, 400);
        let emb = Embedding::centered(n, len);
        let mut rng = replica_rng(seed, 2);
        let c = GrandCanonical::new(0.7).unwrap().sample_ring(len, &mut rng);
        let g = Profile::gaussian(1.0, 0.1, 0.05);
        let f = |p: &Profile| field(&c, p, 0.7, 10.0, &emb).unwrap();
        let lhs = f(&g.scaled(a)) + f(&g.scaled(b));
        prop_assert!((lhs - f(&g.scaled(a + b))).abs() < 1e-10);
    }
}
