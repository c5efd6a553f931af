//! Property tests over the public API: exact identities on random inputs and
//! order-theoretic facts about region and polymer operations.

use msrg::cluster::ursell;
use msrg::fluctuation::FluctuationProblem;
use msrg::geometry::{LatticeGeometry, Region, SiteSet};
use msrg::polymers::{count_labeled_trees, enumerate_by_growth, enumerate_polymers, Adjacency, CubeGraph, PolymerKind};
use msrg::quadforms::{summation_by_parts, ActionParams};
use msrg::renormflow::{random_field, reblock, Functional, LocalFamily, SyntheticSpec};
use nalgebra::DVector;
use proptest::prelude::*;

fn region(mask: u16) -> Region {
    Region::from_mask(1, 4, 2, (0..16).map(|i| mask >> i & 1 == 1).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summation_by_parts_on_plane(
        f in prop::collection::vec(-1.0f64..1.0, 16),
        g in prop::collection::vec(-1.0f64..1.0, 16),
        lam in any::<u16>(),
    ) {
        let geom = LatticeGeometry::with_side(2, 2, 1, 0, 4).unwrap();
        let set = SiteSet::from_indices(16, (0..16).filter(|i| lam >> i & 1 == 1));
        let r = summation_by_parts(&geom, &DVector::from_vec(f), &DVector::from_vec(g), &set);
        prop_assert!(r.abs() < 1e-13, "{r}");
    }

    #[test]
    fn star_and_natural_are_monotone(a in any::<u16>(), b in any::<u16>(), r in 0usize..3) {
        let (x, y) = (region(a & b), region(a));
        prop_assert!(x.is_subset(&y));
        prop_assert!(x.star(r).is_subset(&y.star(r)));
        prop_assert!(x.natural(r).is_subset(&y.natural(r)));
        prop_assert!(y.natural(r).is_subset(&y) && y.is_subset(&y.star(r)));
        prop_assert!(y.star(r).is_subset(&y.star(r + 1)));
        prop_assert!(y.natural(r + 1).is_subset(&y.natural(r)));
    }

    #[test]
    fn ursell_is_permutation_invariant(edges in any::<u16>(), rot in 0usize..5) {
        let n = 5;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let mut adj = vec![0u64; n];
        let mut perm = vec![0u64; n];
        let p = |i: usize| (i + rot) % n;
        for (e, &(i, j)) in pairs.iter().enumerate() {
            if edges >> e & 1 == 1 {
                adj[i] |= 1 << j;
                adj[j] |= 1 << i;
                perm[p(i)] |= 1 << p(j);
                perm[p(j)] |= 1 << p(i);
            }
        }
        prop_assert_eq!(ursell(&adj), ursell(&perm));
    }

    #[test]
    fn polymer_enumerations_agree(omega in 1u64..(1 << 9)) {
        let g = CubeGraph::grid(2, 3, false).unwrap();
        for kind in [PolymerKind::Connected, PolymerKind::ModHoles(omega)] {
            let a = enumerate_polymers(&g, Adjacency::Face, 5, kind).unwrap();
            let b = enumerate_by_growth(&g, Adjacency::Face, 5, kind).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reblocking_preserves_totals(seed in 0u64..1000, symmetric in any::<bool>()) {
        let g = LatticeGeometry::with_side(2, 2, 0, 1, 16).unwrap();
        let fam = LocalFamily::synthetic(&g, 2, &SyntheticSpec { seed, symmetric, ..Default::default() }).unwrap();
        let phi = random_field(&g, seed + 1);
        let fine: f64 = fam.entries.iter().map(|e| e.e.eval(&phi)).sum();
        let coarse: f64 = reblock(&fam, 2).unwrap().iter().map(|(_, e)| e.eval(&phi)).sum();
        prop_assert!((fine - coarse).abs() <= 1e-12 * fine.abs().max(1.0), "{fine} vs {coarse}");
    }

    #[test]
    fn resolvent_identity_at_random_r(log_r in -3.0f64..4.0, mu in 0.0f64..0.5) {
        let g = LatticeGeometry::new(2, 0, 5, 4, 1, 1).unwrap();
        let fp = FluctuationProblem::global(&g, &ActionParams::new(1.0, 2, 1, mu, 3)).unwrap();
        let res = fp.resolvent_identity_residual(10f64.powf(log_r)).unwrap();
        prop_assert!(res < 1e-11, "{res}");
    }
}

#[test]
fn cayley_counts() {
    for n in 1..=7usize {
        let want = if n <= 2 { 1 } else { (n as u64).pow(n as u32 - 2) };
        assert_eq!(count_labeled_trees(n), want, "n = {n}");
    }
}
