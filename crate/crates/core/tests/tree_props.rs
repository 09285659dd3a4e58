use phylofunc::tree::{generate_random_tree, parse_newick, write_newick, BranchLengthSampler, Phylogeny};
use proptest::prelude::*;

fn sampler(constant: Option<f64>) -> BranchLengthSampler<f64> {
    match constant {
        Some(c) => BranchLengthSampler::Constant(c),
        None => BranchLengthSampler::default(),
    }
}

fn arb_tree() -> impl Strategy<Value = Phylogeny<f64>> {
    (2usize..40, proptest::option::of(0.05f64..2.0), any::<u64>())
        .prop_map(|(n, c, seed)| generate_random_tree(n, &sampler(c), seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn newick_round_trip(t in arb_tree()) {
        let text = write_newick(&t);
        let back: Phylogeny<f64> = parse_newick(&text).unwrap();
        prop_assert_eq!(back.len(), t.len());
        prop_assert_eq!(write_newick(&back), text);
        let tips = t.tips();
        let d0 = t.patristic_matrix(&tips).unwrap();
        let ids: Vec<_> = tips.iter().map(|&i| back.require(t.label(i)).unwrap()).collect();
        let d1 = back.patristic_matrix(&ids).unwrap();
        for (a, b) in d0.iter().zip(d1.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn patristic_is_tree_metric(t in arb_tree()) {
        let ids: Vec<_> = (0..t.len()).collect();
        let d = t.patristic_matrix(&ids).unwrap();
        let n = ids.len().min(12);
        for i in 0..d.nrows() {
            prop_assert_eq!(d[[i, i]], 0.0);
            for j in 0..d.nrows() {
                prop_assert_eq!(d[[i, j]], d[[j, i]]);
            }
        }
        // four-point condition: the two largest of the three pair sums agree
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    for e in c + 1..n {
                        let mut s = [
                            d[[a, b]] + d[[c, e]],
                            d[[a, c]] + d[[b, e]],
                            d[[a, e]] + d[[b, c]],
                        ];
                        s.sort_by(f64::total_cmp);
                        prop_assert!((s[2] - s[1]).abs() <= 1e-9 * (1.0 + s[2]));
                    }
                }
            }
        }
    }

    #[test]
    fn induced_subtree_keeps_distances(t in arb_tree(), pick in proptest::collection::vec(any::<bool>(), 40)) {
        let tips = t.tips();
        let mut keep: Vec<_> = tips.iter().zip(&pick).filter(|(_, &p)| p).map(|(&i, _)| i).collect();
        if keep.len() < 2 {
            keep = tips[..2].to_vec();
        }
        let sub = t.induced_subtree(&keep).unwrap();
        prop_assert_eq!(sub.n_tips(), keep.len());
        let before = t.patristic_matrix(&keep).unwrap();
        let ids: Vec<_> = keep.iter().map(|&i| sub.require(t.label(i)).unwrap()).collect();
        let after = sub.patristic_matrix(&ids).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }
}

#[test]
fn generated_tree_is_reproducible() {
    let s = BranchLengthSampler::default();
    let a: Phylogeny<f64> = generate_random_tree(128, &s, 11).unwrap();
    let b: Phylogeny<f64> = generate_random_tree(128, &s, 11).unwrap();
    assert_eq!(write_newick(&a), write_newick(&b));
    let c: Phylogeny<f64> = generate_random_tree(128, &s, 12).unwrap();
    assert_ne!(write_newick(&a), write_newick(&c));
}

#[test]
fn f32_tree_parses() {
    let t: Phylogeny<f32> = parse_newick("((A:1,B:1):1,C:2);").unwrap();
    let d = t.patristic_matrix(&t.tips()).unwrap();
    assert_eq!(d[[0, 1]], 2.0);
    assert_eq!(d[[0, 2]], 4.0);
}
