//! Distribution statistics over attention score matrices: how heavy-tailed
//! the rows are and how far critical keys sit from their query in the grid.

use serde::{Deserialize, Serialize};

use crate::attention::{critical_prefix, descending_order, AttentionScores};
use crate::error::{CoreError, Result};
use crate::grid::TokenGrid;
use crate::tensor::Real;

/// Upper edges of the score histogram bins; the first bin also holds exact zeros.
pub const HISTOGRAM_EDGES: [f64; 6] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Share of keys counted as the "top" of a row.
pub const TOP_FRACTION: f64 = 0.1;

/// Mass the top keys must reach for a query to count as concentrated.
pub const CONCENTRATED_MASS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub theta: f64,
    /// Mean over queries of the mean grid distance to their critical keys.
    pub mean_critical_distance: f64,
    /// Fraction of all critical (query, key) pairs within distance 5.
    pub within_radius_5: f64,
    /// Fraction of all critical (query, key) pairs farther than distance 10.
    pub beyond_radius_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub queries: usize,
    pub keys: usize,
    /// Fraction of all scores per bin, bins split at [`HISTOGRAM_EDGES`].
    pub histogram: [f64; 6],
    /// Per query: mass held by its top `ceil(0.1 * keys)` scores.
    pub top_mass: Vec<f64>,
    pub mean_top_mass: f64,
    /// Fraction of queries whose top 10% of keys hold at least 90% of the mass.
    pub concentrated_fraction: f64,
    pub locality: Option<LocalityReport>,
}

fn bin_of(score: f64) -> usize {
    HISTOGRAM_EDGES.iter().position(|&edge| score < edge).unwrap_or(HISTOGRAM_EDGES.len() - 1)
}

/// Heavy-tail and locality statistics for a score matrix. Locality needs a
/// square matrix over `grid` and a mass threshold.
pub fn analyze_distribution<T: Real>(
    scores: &AttentionScores<T>,
    locality: Option<(&TokenGrid, f64)>,
) -> Result<DistributionReport> {
    let (queries, keys) = (scores.queries(), scores.keys());
    if queries == 0 || keys == 0 {
        return Err(CoreError::invalid("analyze_distribution", "empty score matrix"));
    }
    let top_n = ((TOP_FRACTION * keys as f64).ceil() as usize).max(1);

    let mut counts = [0usize; 6];
    let mut top_mass = Vec::with_capacity(queries);
    for i in 0..queries {
        let row = scores.row(i);
        for &v in row {
            counts[bin_of(v.as_f64())] += 1;
        }
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        let top: f64 = descending_order(row)[..top_n].iter().map(|&j| row[j].as_f64()).sum();
        top_mass.push(top / total);
    }
    let cells = (queries * keys) as f64;
    let histogram = counts.map(|c| c as f64 / cells);
    let mean_top_mass = top_mass.iter().sum::<f64>() / queries as f64;
    // Same relative slack as the critical-KV oracle.
    let concentrated = top_mass.iter().filter(|&&m| m >= CONCENTRATED_MASS - 1e-12).count();

    let locality = match locality {
        None => None,
        Some((grid, theta)) => {
            if grid.len() != keys || queries != keys {
                return Err(CoreError::shape(
                    "analyze_distribution",
                    format!("{queries}x{keys} scores over a grid of {} tokens", grid.len()),
                ));
            }
            Some(locality_stats(scores, grid, theta))
        }
    };

    Ok(DistributionReport {
        queries,
        keys,
        histogram,
        top_mass,
        mean_top_mass,
        concentrated_fraction: concentrated as f64 / queries as f64,
        locality,
    })
}

fn locality_stats<T: Real>(scores: &AttentionScores<T>, grid: &TokenGrid, theta: f64) -> LocalityReport {
    let mut per_query = 0.0;
    let (mut pairs, mut near, mut far) = (0usize, 0usize, 0usize);
    for i in 0..scores.queries() {
        let set = critical_prefix(scores.row(i), theta);
        let mut sum = 0.0;
        for &j in &set {
            let d = grid.distance(i, j);
            sum += d;
            near += usize::from(d <= 5.0);
            far += usize::from(d > 10.0);
        }
        per_query += sum / set.len() as f64;
        pairs += set.len();
    }
    LocalityReport {
        theta,
        mean_critical_distance: per_query / scores.queries() as f64,
        within_radius_5: near as f64 / pairs as f64,
        beyond_radius_10: far as f64 / pairs as f64,
    }
}
