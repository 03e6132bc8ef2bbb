use pmae_core::linalg::symmetric_eig;
use pmae_core::masking::{component_mask_from_order, sample_patch_mask};
use pmae_core::objectives::pmae_pixel_target;
use pmae_core::pca::{fit_pca, PcaBasis};
use pmae_core::{rng, Tensor};
use proptest::prelude::*;

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d)
        .prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn spectrum() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_filter_map("all zero", |raw| {
        let total: f64 = raw.iter().sum();
        (total > 1e-6).then(|| raw.iter().map(|v| v / total).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigen_decomposition_reconstructs(n in 1usize..12, seed in any::<u64>()) {
        use rand::Rng;
        let mut g = rng::seeded(seed);
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = g.random_range(-1.0..1.0);
                s[i * n + j] = v;
                s[j * n + i] = v;
            }
        }
        let e = symmetric_eig(&s, n).unwrap();
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.eigenvectors[i * n + k] * e.eigenvalues[k] * e.eigenvectors[j * n + k]).sum();
                prop_assert!((r - s[i * n + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pca_round_trip_and_ordering(x in matrix(12, 6)) {
        let b = fit_pca(&x).unwrap();
        let back = b.from_pc(&b.to_pc(&x).unwrap()).unwrap();
        prop_assert!(max_abs_diff(back.data(), x.data()) < 1e-9);
        prop_assert!(b.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let f: f64 = b.variance_fractions().iter().sum();
        prop_assert!((f - 1.0).abs() < 1e-12 || f == 0.0);
    }

    #[test]
    fn complementary_reconstructions_add_up(x in matrix(10, 5), order in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(), r in 0.0f64..1.0) {
        let b = fit_pca(&x).unwrap();
        prop_assume!(b.eigenvalues()[0] > 1e-9);
        let m = component_mask_from_order(&order, b.variance_fractions(), r).unwrap();
        let vis = b.masked_reconstruction(&x, &m).unwrap();
        let hid = b.masked_reconstruction(&x, &m.complement()).unwrap();
        // each reconstruction carries the mean once
        let mean = b.mean();
        let sum: Vec<f64> = vis.data().iter().zip(hid.data()).enumerate().map(|(i, (a, c))| a + c - mean[i % 5]).collect();
        prop_assert!(max_abs_diff(&sum, x.data()) < 1e-9);
    }

    #[test]
    fn component_budget_bounds(fr in spectrum(), r in 0.0f64..1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..fr.len()).collect();
        order.shuffle(&mut rng::seeded(seed));
        let m = component_mask_from_order(&order, &fr, r).unwrap();
        let achieved: f64 = fr.iter().zip(&m.masked).filter(|(_, &k)| k).map(|(f, _)| f).sum();
        let top = fr.iter().cloned().fold(0.0, f64::max);
        prop_assert!((achieved - m.achieved_ratio).abs() < 1e-12);
        if r > 0.0 {
            prop_assert!(achieved >= r - 1e-9 || m.masked.iter().all(|&k| k));
            prop_assert!(achieved < r + top + 1e-12);
        } else {
            prop_assert_eq!(m.num_masked(), 0);
        }
    }

    #[test]
    fn patch_mask_count(gh in 1usize..6, gw in 1usize..6, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_patch_mask(&mut rng::seeded(seed), gh, gw, r).unwrap();
        let p = gh * gw;
        prop_assert_eq!(m.num_masked(), ((r * p as f64).round() as usize).min(p));
        prop_assert_eq!(m.visible_indices().len() + m.masked_indices().len(), p);
    }
}

#[test]
fn basis_bytes_are_stable() {
    let x = Tensor::from_fn(vec![7, 4], |i| ((i * 37) % 11) as f64 - 5.0);
    let b = fit_pca(&x).unwrap();
    let bytes = b.encode();
    let again = PcaBasis::decode(&bytes).unwrap();
    assert_eq!(again.encode(), bytes);
    assert_eq!(again.eigenvalues(), b.eigenvalues());
}

#[test]
fn pixel_target_of_empty_mask_is_the_mean() {
    let x = Tensor::from_fn(vec![9, 16], |i| ((i * 13) % 7) as f64);
    let b = fit_pca(&x).unwrap();
    let m = component_mask_from_order(&(0..16).collect::<Vec<_>>(), b.variance_fractions(), 0.0)
        .unwrap();
    let imgs = x.reshape(vec![9, 4, 4, 1]).unwrap();
    let t = pmae_pixel_target(&imgs, &m, &b).unwrap();
    for row in t.data().chunks(16) {
        assert!(max_abs_diff(row, b.mean()) < 1e-12);
    }
}
