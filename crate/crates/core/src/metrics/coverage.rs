use super::fid::FeatureSet;
use crate::error::{ensure_arg, Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Radius of each real point's neighbourhood: distance to its k-th nearest
/// other real point.
pub fn knn_radii(real: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    let n = real.len();
    ensure_arg!(k >= 1, "k must be positive");
    ensure_arg!(k < n, "k = {k} needs more than {k} real samples (got {n})");
    let rows = real.rows();
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist(&rows[i], &rows[j]))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect())
}

/// k-NN coverage and density of `gen` with respect to `real`.
///
/// Coverage is the fraction of real points whose neighbourhood contains at
/// least one generated point; density is the mean number of neighbourhoods
/// containing each generated point, divided by k.
pub fn coverage_density(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    ensure_arg!(!gen.is_empty(), "generated set is empty");
    if real.dim() != gen.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            real.dim(),
            gen.dim()
        )));
    }
    let radii = knn_radii(real, k)?;
    let mut covered = vec![false; real.len()];
    let mut hits = 0usize;
    for g in gen.rows() {
        for (i, r) in real.rows().iter().enumerate() {
            if dist(g, r) <= radii[i] {
                covered[i] = true;
                hits += 1;
            }
        }
    }
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.len() as f64;
    let density = hits as f64 / (k as f64 * gen.len() as f64);
    Ok((coverage, density))
}
