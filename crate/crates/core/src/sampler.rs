//! Resolution-balanced sampling.
//!
//! Samples are keyed by the mean pixel area of their candidate pages, split
//! into quantile bins, and a budget is apportioned across the bins in
//! proportion to bin size. Each bin is then sampled without replacement.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::RerankSample;

pub const DEFAULT_TOTAL: usize = 3000;
pub const DEFAULT_BINS: usize = 10;
pub const SIZE_KEY: &str = "mean_pixel_area";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("budget {total} exceeds dataset size {available}")]
    BudgetExceedsDataset { total: usize, available: usize },
    #[error("duplicate query_id {0:?}")]
    DuplicateQueryId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionBin {
    pub bin_index: usize,
    /// Smallest key in the bin (inclusive).
    pub lower: f64,
    /// Lower bound of the next bin (exclusive), or the largest key for the
    /// last bin (inclusive).
    pub upper: f64,
    pub member_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub bins: Vec<ResolutionBin>,
    pub warnings: Vec<String>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.member_ids.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAllocation {
    pub bin_index: usize,
    pub lower: f64,
    pub upper: f64,
    pub size: usize,
    pub allocated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total: usize,
    pub requested_bins: usize,
    pub seed: u64,
    pub size_key: String,
    pub per_bin: Vec<BinAllocation>,
    pub warnings: Vec<String>,
}

fn keyed_order(dataset: &[RerankSample]) -> Result<Vec<(f64, usize)>, SamplerError> {
    let mut ids = HashSet::with_capacity(dataset.len());
    for s in dataset {
        if !ids.insert(s.query_id.as_str()) {
            return Err(SamplerError::DuplicateQueryId(s.query_id.clone()));
        }
    }
    let mut keyed: Vec<(f64, usize)> = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| (s.mean_pixel_area(), i))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| dataset[a.1].query_id.cmp(&dataset[b.1].query_id))
    });
    Ok(keyed)
}

/// Quantile bins over the size key.
///
/// With distinct keys, bin sizes differ by at most one. Samples sharing a key
/// always land in the same bin, so ties can empty a bin; empty bins are
/// dropped and reported in `warnings`.
pub fn partition_by_resolution(dataset: &[RerankSample], bins: usize) -> Result<Partition, SamplerError> {
    if dataset.is_empty() {
        return Err(SamplerError::EmptyDataset);
    }
    if bins == 0 {
        return Err(SamplerError::ZeroBins);
    }
    let keyed = keyed_order(dataset)?;
    let n = keyed.len();

    let (base, extra) = (n / bins, n % bins);
    let mut cuts = Vec::with_capacity(bins + 1);
    cuts.push(0);
    let mut target = 0;
    for b in 0..bins {
        target += base + usize::from(b < extra);
        let mut cut = target.max(*cuts.last().unwrap());
        while cut > 0 && cut < n && keyed[cut].0 == keyed[cut - 1].0 {
            cut += 1;
        }
        cuts.push(cut);
    }

    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo == hi {
            continue;
        }
        out.push(ResolutionBin {
            bin_index: out.len(),
            lower: keyed[lo].0,
            upper: if hi < n { keyed[hi].0 } else { keyed[n - 1].0 },
            member_ids: keyed[lo..hi]
                .iter()
                .map(|&(_, i)| dataset[i].query_id.clone())
                .collect(),
        });
    }
    let mut warnings = Vec::new();
    if out.len() < bins {
        warnings.push(format!(
            "requested {bins} bins but only {} are populated; degenerate bins merged",
            out.len()
        ));
    }
    Ok(Partition { bins: out, warnings })
}

/// Apportions `total` across bins in proportion to `bin_sizes`.
///
/// Largest remainder first (ties go to the lower bin index). Then every
/// non-empty bin is guaranteed at least one draw when the budget covers all
/// of them: a bin left at zero takes one unit from the bin most above its
/// exact quota (among bins holding two or more; ties: the higher index gives).
pub fn proportional_allocation(bin_sizes: &[usize], total: usize) -> Result<Vec<usize>, SamplerError> {
    let available: usize = bin_sizes.iter().sum();
    if total > available {
        return Err(SamplerError::BudgetExceedsDataset { total, available });
    }
    if available == 0 {
        return Ok(vec![0; bin_sizes.len()]);
    }
    let (t, s) = (total as u128, available as u128);
    let mut alloc: Vec<usize> = bin_sizes.iter().map(|&b| (t * b as u128 / s) as usize).collect();
    let remainders: Vec<u128> = bin_sizes.iter().map(|&b| t * b as u128 % s).collect();

    let mut order: Vec<usize> = (0..bin_sizes.len()).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    let leftover = total - alloc.iter().sum::<usize>();
    for &i in order.iter().take(leftover) {
        alloc[i] += 1;
    }

    let non_empty = bin_sizes.iter().filter(|&&b| b > 0).count();
    if total >= non_empty {
        for i in 0..bin_sizes.len() {
            if bin_sizes[i] == 0 || alloc[i] > 0 {
                continue;
            }
            // excess over quota, scaled by `available`: alloc*S - total*size
            let excess = |j: usize| alloc[j] as i128 * s as i128 - (t * bin_sizes[j] as u128) as i128;
            let donor = (0..bin_sizes.len())
                .filter(|&j| alloc[j] >= 2)
                .max_by(|&a, &b| excess(a).cmp(&excess(b)).then(a.cmp(&b)))
                .expect("budget covers every non-empty bin, so some bin holds two");
            alloc[donor] -= 1;
            alloc[i] = 1;
        }
    }
    debug_assert!(alloc.iter().zip(bin_sizes).all(|(a, b)| a <= b));
    debug_assert_eq!(alloc.iter().sum::<usize>(), total);
    Ok(alloc)
}

/// Draws `total` samples balanced across `bins` resolution bins.
///
/// Output is bin-major; within a bin, samples appear in a seeded shuffle.
pub fn sample_balanced(
    dataset: &[RerankSample],
    total: usize,
    bins: usize,
    seed: u64,
) -> Result<(Vec<RerankSample>, SamplingPlan), SamplerError> {
    if total > dataset.len() {
        return Err(SamplerError::BudgetExceedsDataset { total, available: dataset.len() });
    }
    let partition = partition_by_resolution(dataset, bins)?;
    let alloc = proportional_allocation(&partition.sizes(), total)?;

    let by_id: std::collections::HashMap<&str, &RerankSample> =
        dataset.iter().map(|s| (s.query_id.as_str(), s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    let mut per_bin = Vec::with_capacity(partition.bins.len());
    for (bin, &take) in partition.bins.iter().zip(&alloc) {
        let mut members: Vec<&str> = bin.member_ids.iter().map(String::as_str).collect();
        members.shuffle(&mut rng);
        out.extend(members[..take].iter().map(|id| by_id[id].clone()));
        per_bin.push(BinAllocation {
            bin_index: bin.bin_index,
            lower: bin.lower,
            upper: bin.upper,
            size: bin.member_ids.len(),
            allocated: take,
        });
    }

    let plan = SamplingPlan {
        total,
        requested_bins: bins,
        seed,
        size_key: SIZE_KEY.to_string(),
        per_bin,
        warnings: partition.warnings,
    };
    Ok((out, plan))
}

/// True when bin ranges increase strictly and do not overlap.
pub fn bins_monotone(bins: &[ResolutionBin]) -> bool {
    bins.windows(2).all(|w| {
        w[0].lower.total_cmp(&w[1].lower) == Ordering::Less && w[0].upper <= w[1].lower
    })
}
