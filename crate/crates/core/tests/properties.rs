use fedrecon_core::dataio::*;
use fedrecon_core::metrics::{align_batches, mse, ssim};
use fedrecon_core::Tensor;
use proptest::prelude::*;

fn labeled(n: usize, classes: usize) -> LabeledDataset {
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
    LabeledDataset::new("p", Tensor::zeros(&[n, 1, 1, 1]), labels, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_is_disjoint_and_complete(k in 1usize..20, alpha in 0.01f64..100.0, seed in any::<u64>(), n in 20usize..300) {
        let d = labeled(n, 5);
        let p = dirichlet_partition(&d, k, alpha, seed).unwrap();
        prop_assert_eq!(p.clients(), k);
        let mut all: Vec<usize> = p.client_indices.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn huge_alpha_gives_near_uniform_histograms() {
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let d = LabeledDataset::new("u", Tensor::zeros(&[1000, 1, 1, 1]), labels, 10).unwrap();
    for seed in 0..20 {
        let p = dirichlet_partition(&d, 10, 1e6, seed).unwrap();
        for client in &p.client_indices {
            let mut hist = [0usize; 10];
            for &i in client {
                hist[d.labels[i]] += 1;
            }
            for h in hist {
                assert!((h as f64 - 10.0).abs() <= 0.5, "seed {seed}: {hist:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_pixels_land_in_unit_interval(bytes in prop::collection::vec(any::<u8>(), 12)) {
        let mut raw = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
        raw.extend(&bytes);
        let t = parse_idx_images(&raw, std::path::Path::new("x")).unwrap();
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (v, b) in t.data().iter().zip(&bytes) {
            prop_assert_eq!(*v, *b as f64 / 255.0);
        }
    }

    #[test]
    fn metrics_are_symmetric(a in prop::collection::vec(0.0f64..1.0, 64), b in prop::collection::vec(0.0f64..1.0, 64)) {
        let (x, y) = (Tensor::new(vec![1, 8, 8], a).unwrap(), Tensor::new(vec![1, 8, 8], b).unwrap());
        prop_assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn mse_matches_two_loop_recomputation(a in prop::collection::vec(0.0f64..1.0, 48), b in prop::collection::vec(0.0f64..1.0, 48)) {
        let (x, y) = (Tensor::new(vec![3, 4, 4], a.clone()).unwrap(), Tensor::new(vec![3, 4, 4], b.clone()).unwrap());
        let mut s = 0.0;
        for c in 0..3 {
            for p in 0..16 {
                s += (a[c * 16 + p] - b[c * 16 + p]).powi(2);
            }
        }
        prop_assert!((mse(&x, &y).unwrap() - s / 48.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_is_never_worse_than_identity(
        recon in prop::collection::vec(0.0f64..1.0, 8 * 9),
        truth in prop::collection::vec(0.0f64..1.0, 8 * 9),
        labels in prop::collection::vec(0usize..3, 8),
    ) {
        let r = Tensor::new(vec![8, 1, 3, 3], recon).unwrap();
        let t = Tensor::new(vec![8, 1, 3, 3], truth).unwrap();
        let perm = align_batches(&r, &t, &labels, &labels).unwrap();
        let total = |p: &dyn Fn(usize) -> usize| -> f64 {
            (0..8).map(|j| r.row(p(j)).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
        };
        prop_assert!(total(&|j| perm[j]) <= total(&|j| j) + 1e-12);
        for j in 0..8 {
            prop_assert_eq!(labels[perm[j]], labels[j]);
        }
    }
}
