use proptest::prelude::*;
use robia_core::model::DisparityMap;
use robia_core::proxy::{
    lr_confidence, make_masks, sgm_aggregate, ConfidenceMap, CostVolume, Direction,
};
use robia_core::Tensor;

/// Minimum path energy over every disparity sequence on a 1×W strip ending
/// in `d` at column `x`: sum of costs plus transition penalties.
fn brute_force_energy(cost: &[Vec<u32>], p1: u32, p2: u32) -> Vec<Vec<u64>> {
    let w = cost.len();
    let dn = cost[0].len();
    let mut best = vec![vec![u64::MAX; dn]; w];
    for x in 0..w {
        let len = x + 1;
        let total = dn.pow(len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % dn);
                c /= dn;
            }
            let mut e = 0u64;
            for (i, &d) in seq.iter().enumerate() {
                e += cost[i][d] as u64;
                if i > 0 {
                    let jump = seq[i - 1].abs_diff(d);
                    e += match jump {
                        0 => 0,
                        1 => p1 as u64,
                        _ => p2 as u64,
                    };
                }
            }
            let last = seq[len - 1];
            best[x][last] = best[x][last].min(e);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_path_matches_brute_force_dp(
        w in 1usize..=6,
        dn in 1usize..=4,
        p1 in 1u32..8,
        extra in 0u32..30,
        seed in prop::collection::vec(0u32..40, 24),
    ) {
        let p2 = p1 + extra;
        let cost: Vec<Vec<u32>> = (0..w).map(|x| (0..dn).map(|d| seed[x * 4 + d]).collect()).collect();
        let flat: Vec<u32> = cost.iter().flatten().copied().collect();
        let cv = CostVolume::new(1, w, dn, flat).unwrap();
        let agg = sgm_aggregate(&cv, p1, p2, &[Direction::FromLeft]);
        let energy = brute_force_energy(&cost, p1, p2);
        // The recurrence subtracts the previous column minimum at every step;
        // telescoped, that is the minimum path energy of the previous column.
        for x in 0..w {
            let offset = if x == 0 { 0 } else { *energy[x - 1].iter().min().unwrap() };
            for d in 0..dn {
                prop_assert_eq!(agg.at(0, x, d) as u64, energy[x][d] - offset);
            }
        }
    }

    #[test]
    fn masks_partition_and_shrink_with_epsilon(
        values in prop::collection::vec(0.0f64..=1.0, 1..64),
        e1 in 0.0f64..=1.0,
        e2 in 0.0f64..=1.0,
    ) {
        let n = values.len();
        let c = ConfidenceMap { c: Tensor::from_vec(&[1, n], values).unwrap() };
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let a = make_masks(&c, lo).unwrap();
        let b = make_masks(&c, hi).unwrap();
        for i in 0..n {
            prop_assert!(a.valid[i] ^ a.invalid[i]);
            prop_assert!(!b.valid[i] || a.valid[i]);
        }
    }

    #[test]
    fn confidence_stays_in_unit_interval(
        dl in prop::collection::vec(0.0f64..12.0, 16),
        dr in prop::collection::vec(0.0f64..12.0, 16),
    ) {
        let l = DisparityMap::dense(Tensor::from_vec(&[2, 8], dl).unwrap());
        let r = DisparityMap::dense(Tensor::from_vec(&[2, 8], dr).unwrap());
        let c = lr_confidence(&l, &r).unwrap();
        prop_assert!(c.c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
