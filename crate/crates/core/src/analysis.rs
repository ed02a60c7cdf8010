//! Singular-value analysis of weight differences between checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{effective_weight, Archive};
use crate::error::{Error, Result};
use crate::model::ParamId;
use crate::tensor::singular_values;
use crate::trainer::{reset_checkpoint_name, WARM_START_CHECKPOINT};

/// Relative cutoff for numerical rank: `sigma > RANK_EPS * sigma_max`.
pub const RANK_EPS: f64 = 1e-8;

/// Absolute display threshold for counting small singular values.
pub const SMALL_SIGMA: f64 = 0.1;

/// Number of singular values strictly above `eps * sigma_max`.
pub fn numerical_rank(sv: &[f64], eps: f64) -> usize {
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    count_above(sv, eps * max)
}

/// Number of singular values strictly above an absolute `cutoff`; an
/// all-zero spectrum has none.
pub fn count_above(sv: &[f64], cutoff: f64) -> usize {
    sv.iter().filter(|&&s| s > cutoff && s > 0.0).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub layer: String,
    pub shape: (usize, usize),
    /// Descending.
    pub singular_values: Vec<f64>,
}

impl SpectrumReport {
    pub fn from_matrix(layer: impl Into<String>, rows: usize, cols: usize, data: &[f64]) -> Self {
        SpectrumReport {
            layer: layer.into(),
            shape: (rows, cols),
            singular_values: singular_values(data, rows, cols),
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn count_below(&self, tau: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s < tau).count()
    }

    /// Count below the fixed display threshold 0.1.
    pub fn count_below_threshold(&self) -> usize {
        self.count_below(SMALL_SIGMA)
    }

    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.singular_values, RANK_EPS)
    }
}

/// `W_b - W_a` for one projection, using effective weights of wrapped
/// layers.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDelta {
    pub layer: String,
    pub shape: (usize, usize),
    pub delta: Vec<f64>,
}

pub fn weight_delta(a: &Archive, b: &Archive, layer: &str) -> Result<WeightDelta> {
    let (sa, wa) = effective_weight(a, layer)?;
    let (sb, wb) = effective_weight(b, layer)?;
    if sa != sb {
        return Err(Error::TensorShape {
            name: layer.to_string(),
            expected: sa,
            found: sb,
        });
    }
    Ok(WeightDelta {
        layer: layer.to_string(),
        shape: (sa[0], sa[1]),
        delta: wb.iter().zip(&wa).map(|(y, x)| y - x).collect(),
    })
}

pub fn delta_spectrum_archives(a: &Archive, b: &Archive, layer: &str) -> Result<SpectrumReport> {
    let d = weight_delta(a, b, layer)?;
    Ok(SpectrumReport::from_matrix(d.layer, d.shape.0, d.shape.1, &d.delta))
}

/// Spectrum of `W_b - W_a` for the named projection (e.g. `layers.0.wv`).
pub fn delta_spectrum(ckpt_a: &Path, ckpt_b: &Path, layer: &str) -> Result<SpectrumReport> {
    delta_spectrum_archives(&Archive::load(ckpt_a)?, &Archive::load(ckpt_b)?, layer)
}

/// Names of every per-layer projection stored in the archive.
pub fn projection_layers(archive: &Archive) -> Vec<String> {
    let mut ids: Vec<ParamId> = archive
        .buffers
        .keys()
        .filter_map(|k| k.strip_prefix("param/"))
        .filter_map(|n| n.parse().ok())
        .filter(|id| matches!(id, ParamId::Weight(..)))
        .collect();
    ids.sort();
    ids.iter().map(ParamId::to_string).collect()
}

/// Spectra of every projection present in both checkpoints.
pub fn all_delta_spectra(a: &Archive, b: &Archive) -> Result<Vec<SpectrumReport>> {
    projection_layers(a)
        .iter()
        .map(|layer| delta_spectrum_archives(a, b, layer))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankSum {
    pub rank_a: usize,
    pub rank_b: usize,
    pub rank_sum: usize,
    pub bound_holds: bool,
}

/// Numerical ranks of `A`, `B` and `A + B` for row-major `rows x cols`
/// matrices.
///
/// `A` and `B` share the cutoff `tau = RANK_EPS * max(sigma_max(A),
/// sigma_max(B))`. The sum is counted above `2 tau`: by Weyl's inequality
/// the tails discarded from `A` and `B` can add up to at most `2 tau`, which
/// keeps the numerical bound consistent with the exact one.
pub fn verify_rank_sum(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<RankSum> {
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::shape("verify_rank_sum", &[a.len()], &[b.len()]));
    }
    let sa = singular_values(a, rows, cols);
    let sb = singular_values(b, rows, cols);
    let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let ss = singular_values(&sum, rows, cols);
    let first = |s: &[f64]| s.first().copied().unwrap_or(0.0);
    let tau = RANK_EPS * first(&sa).max(first(&sb));
    let rank_a = count_above(&sa, tau);
    let rank_b = count_above(&sb, tau);
    let rank_sum = count_above(&ss, 2.0 * tau);
    Ok(RankSum {
        rank_a,
        rank_b,
        rank_sum,
        bound_holds: rank_sum <= rank_a + rank_b,
    })
}

/// Numerical rank of `W_after_reset_k - W_warm_start` per projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTrajectory {
    pub layers: Vec<String>,
    /// `ranks[k][i]` is the rank for layer `i` after reset `k + 1`.
    pub ranks: Vec<Vec<usize>>,
}

impl RankTrajectory {
    pub fn layer(&self, name: &str) -> Option<Vec<usize>> {
        let i = self.layers.iter().position(|l| l == name)?;
        Some(self.ranks.iter().map(|r| r[i]).collect())
    }
}

/// Reads `warm_start.ckpt` and `reset_001.ckpt`, `reset_002.ckpt`, ... from
/// a run directory.
pub fn accumulated_update_rank(run_dir: &Path) -> Result<RankTrajectory> {
    let warm_path = run_dir.join(WARM_START_CHECKPOINT);
    if !warm_path.exists() {
        return Err(Error::Checkpoint(format!("{} is missing", warm_path.display())));
    }
    let warm = Archive::load(&warm_path)?;
    let layers = projection_layers(&warm);
    let mut ranks = Vec::new();
    for k in 1.. {
        let path = run_dir.join(reset_checkpoint_name(k));
        if !path.exists() {
            break;
        }
        let after = Archive::load(&path)?;
        let row = layers
            .iter()
            .map(|l| delta_spectrum_archives(&warm, &after, l).map(|s| s.numerical_rank()))
            .collect::<Result<Vec<_>>>()?;
        ranks.push(row);
    }
    if ranks.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no per-reset checkpoints ({}) in {}",
            reset_checkpoint_name(1),
            run_dir.display()
        )));
    }
    Ok(RankTrajectory { layers, ranks })
}

/// `layer,index,sigma` rows.
pub fn spectra_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("layer,index,sigma\n");
    for r in reports {
        for (i, s) in r.singular_values.iter().enumerate() {
            let _ = writeln!(out, "{},{i},{s:e}", r.layer);
        }
    }
    out
}

/// `layer,rows,cols,sigma_max,numerical_rank,count_below_0.1` rows.
pub fn summary_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("layer,rows,cols,sigma_max,numerical_rank,count_below_0.1\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{},{}",
            r.layer,
            r.shape.0,
            r.shape.1,
            r.sigma_max(),
            r.numerical_rank(),
            r.count_below_threshold()
        );
    }
    out
}

/// Writes `spectra.csv` and `summary.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[SpectrumReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spectra.csv"), spectra_csv(reports))?;
    fs::write(dir.join("summary.csv"), summary_csv(reports))?;
    Ok(())
}
