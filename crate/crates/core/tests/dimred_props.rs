use ndarray::{Array2, Axis};
use phylofunc::dimred::{ica, ipca, match_components, pca, DimensionPolicy};
use phylofunc::pipeline::{simulate, PipelineConfig};
use phylofunc::simcore::FunctionalDataset;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sim(seed: u64) -> phylofunc::pipeline::Simulation {
    simulate(&PipelineConfig {
        seed,
        n_tips: 48,
        grid_size: 128,
        ..Default::default()
    })
    .unwrap()
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ica_sources_are_white(seed in any::<u64>(), k in 2usize..5, n in 200usize..600) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, k), |(_, j)| {
            let u: f64 = rng.random();
            if j % 2 == 0 {
                u.powi(3)
            } else {
                u - 0.5
            }
        });
        let mix = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 2.0 } else { 0.3 * (i + j) as f64 });
        let x = raw.dot(&mix);
        let res = ica(x.view(), seed).unwrap();
        let s = &res.sources;
        let m = s.mean_axis(Axis(1)).unwrap();
        let c = (s - &m.insert_axis(Axis(1))).dot(&s.t()) / (n - 1) as f64;
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((c[[i, j]] - want).abs() <= 1e-6, "cov[{i},{j}]={}", c[[i, j]]);
            }
        }
    }

    #[test]
    fn pca_error_shrinks_with_rank(seed in any::<u64>(), n in 4usize..12, g in 5usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traits = Array2::from_shape_fn((n, g), |_| rng.random_range(-1.0..1.0));
        let d = FunctionalDataset::new(traits, (0..n).map(|i| format!("t{i}")).collect(), phylofunc::simcore::unit_grid(g)).unwrap();
        let p = pca(&d).unwrap();
        let mut last = f64::INFINITY;
        for m in 0..=p.rank() {
            let e = frob(&(&p.reconstruct(m) - &d.traits));
            prop_assert!(e <= last + 1e-9);
            last = e;
        }
        prop_assert!(last <= 1e-8 * (1.0 + frob(&d.traits)));
        let gram = p.components.dot(&p.components.t());
        for i in 0..p.rank() {
            for j in 0..p.rank() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - want).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn ipca_ignores_taxa_order() {
    for seed in [1u64, 2] {
        let sim = small_sim(seed);
        let d = &sim.dataset;
        let a = ipca(d, DimensionPolicy::default(), 9).unwrap();
        let order: Vec<usize> = (0..d.n_taxa()).rev().collect();
        let b = ipca(&d.select_rows(&order), DimensionPolicy::default(), 9).unwrap();
        assert_eq!(a.k, b.k);
        let ma = match_components(&a.basis_hat, &sim.basis).unwrap();
        let mb = match_components(&b.basis_hat, &sim.basis).unwrap();
        for (x, y) in ma.similarities.iter().zip(&mb.similarities) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn ipca_reconstruction_within_truncation() {
    let sim = small_sim(3);
    let d = &sim.dataset;
    let res = ipca(d, DimensionPolicy::default(), 0).unwrap();
    let centered = &d.traits - &res.mean_curve.view().insert_axis(Axis(0));
    let resid = &res.reconstruct() - &d.traits;
    // squared relative error is exactly the discarded variance fraction
    let rel2 = (frob(&resid) / frob(&centered)).powi(2);
    assert!(rel2 <= (1.0 - res.retained_variance()) + 1e-8, "rel2={rel2}");
    for row in res.basis_hat.functions.rows() {
        let norm = row.dot(&row).sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
        let peak = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(peak > 0.0);
    }
}
