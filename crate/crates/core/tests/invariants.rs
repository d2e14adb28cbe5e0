use fbf_core::autodiff::ParameterStore;
use fbf_core::baselines::{ess, systematic_resample};
use fbf_core::filtering::{measurement_update, Conditioning, GaussianBelief};
use fbf_core::flows::{FlowConfig, FlowInit, FlowTransform};
use fbf_core::latent_ssm::ObservationCoefficients;
use fbf_core::metrics::{crps, mmd, rmse, SampleSet};
use fbf_core::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn flow(dim: usize, seed: u64) -> (FlowTransform, ParameterStore) {
    let cfg = FlowConfig {
        blocks: 3,
        layers: 3,
        units: 16,
        ..FlowConfig::default()
    };
    let t = FlowTransform::new("T", dim, &cfg).unwrap();
    let mut store = ParameterStore::new();
    t.register(&mut store, &mut rng::from_seed(seed), FlowInit::Random(0.4)).unwrap();
    (t, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_round_trip(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 4)) {
        let (t, store) = flow(4, seed);
        let (z, logdet) = t.forward_point(&store, &x).unwrap();
        prop_assert!(logdet.is_finite());
        let back = t.inverse_point(&store, &z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let x2 = t.inverse_point(&store, &x).unwrap();
        let (z2, _) = t.forward_point(&store, &x2).unwrap();
        for (a, b) in x.iter().zip(&z2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn logdet_bounded_by_clamp(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let (t, store) = flow(3, seed);
        let (_, logdet) = t.forward_point(&store, &x).unwrap();
        // every block scales at most ceil(D/2) coordinates by e^{+-clamp}
        let bound = 3.0 * 2.0 * 2.0;
        prop_assert!(logdet.abs() <= bound);
    }

    #[test]
    fn conditioning_shrinks_covariance(
        a in prop::collection::vec(-2.0f64..2.0, 4),
        d in prop::collection::vec(-2.0f64..2.0, 4),
        gamma in prop::collection::vec(-3.0f64..3.0, 2),
        q in 0.05f64..3.0,
    ) {
        let a = DMatrix::from_row_slice(2, 2, &a);
        let sigma = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
        let prior = GaussianBelief::new(DVector::zeros(2), sigma.clone()).unwrap();
        let obs = ObservationCoefficients {
            c: DVector::zeros(2),
            d: DMatrix::from_row_slice(2, 2, &d),
            q_gamma: DMatrix::identity(2, 2) * q,
        };
        let post = measurement_update(&prior, &DVector::from_vec(gamma), &obs, Conditioning::Exact).unwrap();
        prop_assert_eq!(post.cov.clone(), post.cov.transpose());
        // prior minus posterior is positive semidefinite
        let gap = (&sigma - &post.cov).symmetric_eigenvalues();
        prop_assert!(gap.iter().all(|l| *l > -1e-10));
        let eig = post.cov.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|l| *l > -1e-12));
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil(raw in prop::collection::vec(0.01f64..1.0, 2..20), count in 1usize..200, seed in 0u64..100) {
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let idx = systematic_resample(&w, count, &mut rng::from_seed(seed));
        prop_assert_eq!(idx.len(), count);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        for (i, wi) in w.iter().enumerate() {
            let n = idx.iter().filter(|&&j| j == i).count() as f64;
            let expect = wi * count as f64;
            prop_assert!(n >= expect.floor() - 1e-9 && n <= expect.ceil() + 1e-9, "index {} drawn {} times, expected {}", i, n, expect);
        }
        let e = ess(&w);
        prop_assert!(e >= 1.0 - 1e-12 && e <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn metrics_nonnegative(values in prop::collection::vec(-10.0f64..10.0, 12), truth in prop::collection::vec(-10.0f64..10.0, 4)) {
        // K = 2 steps, N = 3 samples, m = 2
        let s = SampleSet::new(2, 3, 2, values).unwrap();
        prop_assert!(rmse(&truth, &s).unwrap() >= 0.0);
        prop_assert!(crps(&truth, &s).unwrap() >= -1e-12);
        prop_assert!(mmd(&truth, &s, 2.0).unwrap() >= -1e-12);
    }
}
