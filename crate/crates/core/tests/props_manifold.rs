//! Property tests for manifold projections, the KL term and learned decoders.

use proptest::prelude::*;

use robustlab::manifold::{
    kl_divergence, nearest_neighbors, project_knn, Decoder, KnnAnchor, ManifoldArch, ManifoldConfig, ManifoldModel, Scope,
};
use robustlab::tensor::{dot, norm_l2, Tensor};

const DIM: usize = 12;

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, DIM)
}

/// Neighbor sets that often repeat rows or exceed the ambient dimension, so
/// the least-squares problem is frequently rank deficient.
fn neighbors() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(vector(), 1..6), prop::collection::vec(0usize..6, 1..16)).prop_map(|(base, picks)| {
        let rows: Vec<f64> = picks.iter().flat_map(|&p| base[p % base.len()].clone()).collect();
        Tensor::new(vec![picks.len(), DIM], rows).unwrap()
    })
}

fn anchor() -> impl Strategy<Value = KnnAnchor> {
    prop_oneof![Just(KnnAnchor::TestImage), Just(KnnAnchor::NeighborMean)]
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn knn_projection_is_idempotent(xt in vector(), x in vector(), nb in neighbors(), a in anchor()) {
        let once = project_knn(&xt, &x, &nb, a).unwrap();
        let twice = project_knn(&once.projected, &x, &nb, a).unwrap();
        prop_assert!(norm_l2(&sub(&once.projected, &twice.projected)) < 1e-8);
        prop_assert!(twice.distance < 1e-8);
    }

    #[test]
    fn knn_residual_is_orthogonal_and_distances_nonnegative(xt in vector(), x in vector(), nb in neighbors(), a in anchor()) {
        let r = project_knn(&xt, &x, &nb, a).unwrap();
        prop_assert!(r.distance >= 0.0);
        let residual = sub(&xt, &r.projected);
        prop_assert!((norm_l2(&residual) - r.distance).abs() < 1e-10);
        for i in 0..nb.rows() {
            let j = (i + 1) % nb.rows();
            let col = sub(nb.row(i), nb.row(j));
            prop_assert!(dot(&residual, &col).abs() < 1e-8);
        }
    }

    #[test]
    fn test_centered_projection_satisfies_pythagoras(xt in vector(), x in vector(), nb in neighbors()) {
        let r = project_knn(&xt, &x, &nb, KnnAnchor::TestImage).unwrap();
        let full = norm_l2(&sub(&xt, &x)).powi(2);
        let parts = r.distance.powi(2) + norm_l2(&sub(&r.projected, &x)).powi(2);
        prop_assert!((full - parts).abs() < 1e-8 * (1.0 + full), "{full} vs {parts}");
    }

    #[test]
    fn projection_never_moves_farther_than_the_anchor(xt in vector(), x in vector(), nb in neighbors()) {
        let r = project_knn(&xt, &x, &nb, KnnAnchor::TestImage).unwrap();
        prop_assert!(r.distance <= norm_l2(&sub(&xt, &x)) + 1e-10);
    }

    #[test]
    fn nearest_neighbors_are_sorted_by_distance(nb in neighbors(), q in vector(), k in 1usize..16) {
        let k = k.min(nb.rows());
        let idx = nearest_neighbors(&nb, &q, k).unwrap();
        let d: Vec<f64> = idx.iter().map(|&i| norm_l2(&sub(nb.row(i), &q))).collect();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let worst = d[k - 1];
        let closer = (0..nb.rows()).filter(|&i| norm_l2(&sub(nb.row(i), &q)) < worst).count();
        prop_assert!(closer < k);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..8), lv in prop::collection::vec(-4.0f64..4.0, 8)) {
        let lv = &lv[..mu.len()];
        prop_assert!(kl_divergence(&mu, lv) >= 0.0);
        let zeros = vec![0.0; mu.len()];
        prop_assert_eq!(kl_divergence(&zeros, &zeros), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decoder_outputs_are_pixels(seed in any::<u64>(), z in prop::collection::vec(-2.0f64..2.0, 3 * 4)) {
        let config = ManifoldConfig { latent_dim: 4, arch: ManifoldArch::Mlp { hidden: 16 }, seed, ..ManifoldConfig::default() };
        let model = ManifoldModel::new(&[1, 8, 8], Scope::ClassAgnostic, config).unwrap();
        let out = model.decode_values(&Tensor::new(vec![3, 4], z).unwrap()).unwrap();
        prop_assert_eq!(out.shape(), &[3, 1, 8, 8]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn duplicated_neighbors_project_like_a_single_direction() {
    let x = vec![0.0; DIM];
    let mut e = vec![0.0; DIM];
    e[0] = 1.0;
    let mut rows = Vec::new();
    for _ in 0..5 {
        rows.extend_from_slice(&e);
    }
    let nb = Tensor::new(vec![5, DIM], rows).unwrap();
    let mut xt = vec![0.5; DIM];
    xt[0] = 3.0;
    let r = project_knn(&xt, &x, &nb, KnnAnchor::TestImage).unwrap();
    let mut expected = vec![0.0; DIM];
    expected[0] = 3.0;
    assert!(norm_l2(&sub(&r.projected, &expected)) < 1e-12);
    assert!(r.coefficients.iter().all(|c| (c - 0.6).abs() < 1e-12), "{:?}", r.coefficients);
}
