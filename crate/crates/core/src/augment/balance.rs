use std::collections::BTreeMap;

use crate::manifest::Subgroup;
use crate::subgroup::SubgroupDistribution;

/// Synthetic counts per subgroup that bring the final distribution as close
/// to uniform as integer counts allow.
///
/// Water-filling: the lowest subgroups are raised to a common integer level
/// `l`, the largest one for which the fill fits in `n_synth`; the leftover
/// units (fewer than the number of subgroups at level `l`) go one each to
/// those subgroups in enumeration order. This is largest-remainder rounding
/// of the continuous fill, whose remainders are all equal.
pub fn balance_targets(d: &SubgroupDistribution, n_synth: u64) -> BTreeMap<Subgroup, u64> {
    let counts: Vec<(&Subgroup, u64)> = d.counts.iter().map(|(sg, &c)| (sg, c)).collect();
    if counts.is_empty() {
        return BTreeMap::new();
    }
    let fill = |level: u64| -> u64 { counts.iter().map(|&(_, c)| level.saturating_sub(c)).sum() };
    let min = counts.iter().map(|&(_, c)| c).min().expect("non-empty");
    let (mut lo, mut hi) = (min, min + n_synth);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fill(mid) <= n_synth {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let level = lo;
    let mut leftover = n_synth - fill(level);
    counts
        .iter()
        .map(|&(sg, c)| {
            let mut a = level.saturating_sub(c);
            if leftover > 0 && c <= level {
                a += 1;
                leftover -= 1;
            }
            (sg.clone(), a)
        })
        .collect()
}
