//! Weighting-matrix diagnostics: per-scenario similarity of mean compact
//! matrices, a PCA projection for plotting, and a silhouette score for how
//! well scenarios separate in that projection.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn features(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    if !model.is_modulated() {
        return Err(Error::Degenerate("model has no weighting matrices (S = 1)".into()));
    }
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    model.compact_features(&samples)
}

/// Cosine similarity between per-scenario means of the flattened compact
/// weighting matrices. Diagonal is 1.
pub fn scenario_similarity(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let rows = features(model, dataset)?;
    similarity_from_features(&rows, dataset)
}

pub fn similarity_from_features(rows: &[Vec<f64>], dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let parts = dataset.partition_by_scenario();
    let width = rows.first().map_or(0, Vec::len);
    let mut means = Vec::with_capacity(parts.len());
    for (d, idx) in parts.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Degenerate(format!("scenario {d} has no samples")));
        }
        let mut m = vec![0.0; width];
        for &i in idx {
            for (a, v) in m.iter_mut().zip(&rows[i]) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= idx.len() as f64);
        means.push(m);
    }
    let k = means.len();
    let mut sim = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(&means[i], &means[j]);
            sim[i][j] = c;
            sim[j][i] = c;
        }
    }
    Ok(sim)
}

pub fn mean_off_diagonal(matrix: &[Vec<f64>]) -> f64 {
    let k = matrix.len();
    if k < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                sum += v;
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub scenarios: Vec<usize>,
    /// Unit principal directions (zero when the data has no variance left).
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub variances: [f64; 2],
}

/// Components, their variances and the projected coordinates.
pub type Pca2 = ([Vec<f64>; 2], [f64; 2], Vec<[f64; 2]>);

/// Top-two principal components of `rows` by power iteration with deflation.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Pca2> {
    if rows.len() < 3 {
        return Err(Error::Degenerate(format!("projection needs at least 3 samples, got {}", rows.len())));
    }
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let cov_apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for r in &centered {
            let proj: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
            if proj != 0.0 {
                for (o, a) in out.iter_mut().zip(r) {
                    *o += proj * a;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= (n - 1) as f64);
        out
    };

    // Variance below this is rounding noise from centering.
    let scale_sq = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v * v));
    let floor = 1e-24 * scale_sq + 1e-300;

    let mut init_rng = Rng::new(0x9e37_79b9);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    let mut variances = [0.0; 2];
    for slot in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| init_rng.normal()).collect();
        orthogonalize(&mut v, &comps);
        let mut found = normalize(&mut v);
        let mut lambda = 0.0;
        if found {
            found = false;
            for _ in 0..POWER_MAX_ITERS {
                let mut w = cov_apply(&v);
                orthogonalize(&mut w, &comps);
                lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if lambda <= floor {
                    break;
                }
                w.iter_mut().for_each(|x| *x /= lambda);
                let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                v = w;
                found = true;
                if delta < POWER_TOL {
                    break;
                }
            }
        }
        if !found {
            v = vec![0.0; d];
            lambda = 0.0;
        } else {
            // Fix the sign: largest-magnitude entry positive.
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            if v[imax] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        variances[slot] = lambda;
        comps.push(v);
    }
    let coords = centered
        .iter()
        .map(|r| {
            let x = r.iter().zip(&comps[0]).map(|(a, b)| a * b).sum();
            let y = r.iter().zip(&comps[1]).map(|(a, b)| a * b).sum();
            [x, y]
        })
        .collect();
    let c1 = comps.pop().unwrap();
    let c0 = comps.pop().unwrap();
    Ok(([c0, c1], variances, coords))
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= dot * y;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-300 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Two-dimensional PCA projection of every sample's compact weighting
/// matrices, tagged with its scenario.
pub fn export_projection(model: &Model, dataset: &Dataset) -> Result<Projection> {
    let rows = features(model, dataset)?;
    let (components, variances, coords) = pca2(&rows)?;
    Ok(Projection {
        coords,
        scenarios: dataset.samples.iter().map(|s| s.scenario_id).collect(),
        components,
        variances,
    })
}

/// Mean silhouette coefficient of labelled 2-D points (Euclidean). Points in
/// singleton clusters score 0.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if coords.len() != labels.len() || coords.is_empty() {
        return Err(Error::Config("silhouette needs matching, non-empty coords and labels".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for (i, p) in coords.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (q, &l) in coords.iter().zip(labels) {
            sums[l] += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / coords.len() as f64)
}

pub fn similarity_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("scenario");
    for j in 0..matrix.len() {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn projection_csv(p: &Projection) -> String {
    let mut out = String::from("x,y,scenario\n");
    for (c, s) in p.coords.iter().zip(&p.scenarios) {
        let _ = writeln!(out, "{},{},{s}", c[0], c[1]);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
