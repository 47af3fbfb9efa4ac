//! Property tests: algebraic invariants of the flow step, spectral sanity of
//! validated operators, word formatting, and transition distributions, over
//! seeded random inputs.

use proptest::prelude::*;

use wrflow::measure::{transition, MeasureSpec};
use wrflow::operator::{dissipated, wr_update, PsdOperator, ProjectionFamily};
use wrflow::random::{
    gaussian_matrix, random_projection, random_psd, random_subspace_split, random_unit_vector,
    seeded_rng,
};
use wrflow::scenario::OperatorData;
use wrflow::tree::{TreeCache, Word};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_step_identity_reassembles_parent(seed in any::<u64>(), dim in 2usize..7) {
        let mut rng = seeded_rng(seed);
        let rank = 1 + (seed as usize % dim);
        let root = random_psd(&mut rng, dim, rank, dim as f64).unwrap();
        let p = random_projection(&mut rng, dim, 1 + (seed as usize / 7) % dim).unwrap();
        let child = wr_update(&root, &p).unwrap();
        let diss = dissipated(&root, &p).unwrap();
        let defect = (root.matrix() - child.matrix() - diss.matrix()).norm();
        prop_assert!(defect <= 1e-10 * root.matrix().norm());
    }

    #[test]
    fn flow_step_never_exceeds_parent(seed in any::<u64>(), dim in 2usize..7) {
        let mut rng = seeded_rng(seed);
        let root = random_psd(&mut rng, dim, dim, dim as f64).unwrap();
        let p = random_projection(&mut rng, dim, 1 + seed as usize % dim).unwrap();
        let child = wr_update(&root, &p).unwrap();
        // parent - child is the dissipated term, so it must validate as PSD;
        // the floor absorbs rounding at the parent's scale.
        let diff = root.matrix() - child.matrix();
        prop_assert!(
            PsdOperator::validate_with_floor(diff, 1e-10, 1e-10 * root.op_norm()).is_ok()
        );
    }

    #[test]
    fn psd_sqrt_squares_back(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = seeded_rng(seed);
        let rank = 1 + seed as usize % dim;
        let m = random_psd(&mut rng, dim, rank, 1.0).unwrap();
        let defect = (m.sqrt() * m.sqrt() - m.matrix()).norm();
        prop_assert!(defect <= 1e-10 * m.matrix().norm());
        prop_assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(m.eigenvalues().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn word_display_parse_round_trip(
        letters in prop::collection::vec(1u8..=9, 0..12),
        wide in any::<bool>(),
    ) {
        // m = 12 exercises the comma-separated format, m = 9 the digit string
        let m = if wide { 12 } else { 9 };
        let word = Word::from_letters(letters);
        let back = Word::parse(&word.display(m), m).unwrap();
        prop_assert_eq!(word, back);
    }

    #[test]
    fn alive_transitions_are_probabilities(seed in any::<u64>()) {
        let dim = 4;
        let mut rng = seeded_rng(seed);
        let root = random_psd(&mut rng, dim, dim, dim as f64).unwrap();
        let projections = random_subspace_split(&mut rng, dim, 2).unwrap();
        let family = ProjectionFamily::for_root(projections, &root, 1e-12).unwrap();
        let spec = MeasureSpec::energy(random_unit_vector(&mut rng, dim));
        let mut cache = TreeCache::new(root, family).unwrap();
        spec.validate_for(&cache).unwrap();

        let dist = transition(&mut cache, &spec, &Word::root()).unwrap();
        let total: f64 = dist.probs.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(dist.probs.iter().all(|&p| (-1e-15..=1.0 + 1e-12).contains(&p)));
        prop_assert!(dist.raw_weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn matrix_json_round_trip(seed in any::<u64>(), dim in 1usize..6) {
        let mut rng = seeded_rng(seed);
        let m = gaussian_matrix(&mut rng, dim, dim);
        let data = OperatorData::from_matrix(&m);
        let json = serde_json::to_string(&data).unwrap();
        let back: OperatorData = serde_json::from_str(&json).unwrap();
        prop_assert_eq!((back.to_matrix().unwrap() - m).norm(), 0.0);
    }
}
