use std::fmt;
use std::str::FromStr;

use super::adam::{AdamState, Moments};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Whether the magnitude ranking is done per tensor or across all selected
/// tensors at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PruneScope {
    #[default]
    PerTensor,
    Global,
}

/// Whether `m` and `v` are ranked by their own magnitudes or share the
/// mask derived from `|m|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PruneCoupling {
    #[default]
    Independent,
    Coupled,
}

impl fmt::Display for PruneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneScope::PerTensor => "per_tensor",
            PruneScope::Global => "global",
        })
    }
}

impl FromStr for PruneScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(PruneScope::PerTensor),
            "global" => Ok(PruneScope::Global),
            _ => Err(Error::Config(format!("unknown prune scope `{s}`"))),
        }
    }
}

impl fmt::Display for PruneCoupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneCoupling::Independent => "independent",
            PruneCoupling::Coupled => "coupled",
        })
    }
}

impl FromStr for PruneCoupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(PruneCoupling::Independent),
            "coupled" => Ok(PruneCoupling::Coupled),
            _ => Err(Error::Config(format!("unknown prune coupling `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PruneOptions {
    pub scope: PruneScope,
    pub coupling: PruneCoupling,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneEntry {
    pub name: String,
    pub numel: usize,
    pub zeroed_m: usize,
    pub zeroed_v: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PruneReport {
    pub entries: Vec<PruneEntry>,
}

impl PruneReport {
    pub fn total_zeroed(&self) -> usize {
        self.entries.iter().map(|e| e.zeroed_m + e.zeroed_v).sum()
    }
}

/// Number of entries pruned out of `n` at `ratio`.
pub fn prune_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).floor() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio must lie in [0, 1], got {ratio}")));
    }
    Ok(())
}

/// Flat indices of the `k` smallest magnitudes, where larger magnitudes and
/// then lower indices rank first among the survivors.
fn smallest_indices(mags: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_unstable_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    order.split_off(mags.len() - k)
}

/// Zeroes the `floor(ratio * n)` smallest-magnitude entries of `values`.
pub fn prune_smallest<T: Scalar>(values: &mut [T], ratio: f64) -> Result<usize> {
    check_ratio(ratio)?;
    let k = prune_count(values.len(), ratio);
    let mags: Vec<f64> = values.iter().map(|x| x.f64().abs()).collect();
    for i in smallest_indices(&mags, k) {
        values[i] = T::zero();
    }
    Ok(k)
}

/// Per-tensor, independent pruning of every moment buffer in `state`.
pub fn prune_optimizer_state<T: Scalar>(state: &mut AdamState<T>, prune_ratio: f64) -> Result<PruneReport> {
    prune_optimizer_state_with(state, prune_ratio, PruneOptions::default(), |_| true)
}

/// Prunes the moment buffers whose names pass `select`.
pub fn prune_optimizer_state_with<T: Scalar>(
    state: &mut AdamState<T>,
    prune_ratio: f64,
    opts: PruneOptions,
    select: impl Fn(&str) -> bool,
) -> Result<PruneReport> {
    check_ratio(prune_ratio)?;
    let mut selected: Vec<(&String, &mut Moments<T>)> =
        state.iter_mut().filter(|(name, _)| select(name)).collect();
    let mut report = PruneReport::default();
    match opts.scope {
        PruneScope::PerTensor => {
            for (name, mom) in selected.iter_mut() {
                let n = mom.m.len();
                let k = prune_count(n, prune_ratio);
                let m_mags: Vec<f64> = mom.m.iter().map(|x| x.f64().abs()).collect();
                let m_idx = smallest_indices(&m_mags, k);
                let v_idx = match opts.coupling {
                    PruneCoupling::Independent => {
                        let v_mags: Vec<f64> = mom.v.iter().map(|x| x.f64().abs()).collect();
                        smallest_indices(&v_mags, k)
                    }
                    PruneCoupling::Coupled => m_idx.clone(),
                };
                for &i in &m_idx {
                    mom.m[i] = T::zero();
                }
                for &i in &v_idx {
                    mom.v[i] = T::zero();
                }
                report.entries.push(PruneEntry {
                    name: name.to_string(),
                    numel: n,
                    zeroed_m: m_idx.len(),
                    zeroed_v: v_idx.len(),
                });
            }
        }
        PruneScope::Global => {
            let offsets: Vec<usize> = selected
                .iter()
                .scan(0, |acc, (_, mom)| {
                    let start = *acc;
                    *acc += mom.m.len();
                    Some(start)
                })
                .collect();
            let total: usize = selected.iter().map(|(_, mom)| mom.m.len()).sum();
            let k = prune_count(total, prune_ratio);
            let m_mags: Vec<f64> = selected
                .iter()
                .flat_map(|(_, mom)| mom.m.iter().map(|x| x.f64().abs()))
                .collect();
            let m_idx = smallest_indices(&m_mags, k);
            let v_idx = match opts.coupling {
                PruneCoupling::Independent => {
                    let v_mags: Vec<f64> = selected
                        .iter()
                        .flat_map(|(_, mom)| mom.v.iter().map(|x| x.f64().abs()))
                        .collect();
                    smallest_indices(&v_mags, k)
                }
                PruneCoupling::Coupled => m_idx.clone(),
            };
            let locate = |flat: usize| {
                let t = offsets.partition_point(|&o| o <= flat) - 1;
                (t, flat - offsets[t])
            };
            let mut zm = vec![0usize; selected.len()];
            let mut zv = vec![0usize; selected.len()];
            for &flat in &m_idx {
                let (t, i) = locate(flat);
                selected[t].1.m[i] = T::zero();
                zm[t] += 1;
            }
            for &flat in &v_idx {
                let (t, i) = locate(flat);
                selected[t].1.v[i] = T::zero();
                zv[t] += 1;
            }
            for (t, (name, mom)) in selected.iter().enumerate() {
                report.entries.push(PruneEntry {
                    name: name.to_string(),
                    numel: mom.m.len(),
                    zeroed_m: zm[t],
                    zeroed_v: zv[t],
                });
            }
        }
    }
    Ok(report)
}
