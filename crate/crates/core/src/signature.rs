//! Gate vectors as class structure signatures: pairwise distances,
//! average-linkage agglomeration, and a 2D PCA projection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::SubnetworkBundle;
use crate::rngutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// One row per class: the class's flattened (post-binarization) gate vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub class_labels: Vec<String>,
    pub family_labels: Vec<String>,
}

/// Builds the signature matrix from one bundle per class (class c at row c).
pub fn build_signatures(
    bundles: &[SubnetworkBundle],
    class_labels: &[String],
    family_labels: &[String],
) -> Result<SignatureMatrix> {
    let k = class_labels.len();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; k];
    for bundle in bundles {
        if bundle.class >= k {
            return Err(Error::LabelOutOfRange {
                label: bundle.class,
                num_classes: k,
            });
        }
        rows[bundle.class] = Some(bundle.gates.flatten());
    }
    let mut out = Vec::with_capacity(k);
    for (c, row) in rows.into_iter().enumerate() {
        out.push(row.ok_or(Error::MissingClassBundle(c))?);
    }
    let width = out[0].len();
    if let Some(bad) = out.iter().position(|r| r.len() != width) {
        return Err(Error::ShapeMismatch {
            op: "build_signatures",
            lhs: vec![width],
            rhs: vec![out[bad].len()],
        });
    }
    Ok(SignatureMatrix {
        rows: out,
        class_labels: class_labels.to_vec(),
        family_labels: family_labels.to_vec(),
    })
}

/// Symmetric K x K distance matrix with zero diagonal.
pub fn pairwise_distance(sig: &SignatureMatrix, metric: DistanceMetric) -> Result<Vec<Vec<f64>>> {
    let k = sig.rows.len();
    if metric == DistanceMetric::Cosine {
        for (c, row) in sig.rows.iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroSignatureRow { class: c });
            }
        }
    }
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = match metric {
                DistanceMetric::Cosine => cosine_distance(&sig.rows[i], &sig.rows[j]),
                DistanceMetric::Euclidean => euclidean_distance(&sig.rows[i], &sig.rows[j]),
            };
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok(dist)
}

fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

fn euclidean_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Mean intra-family and inter-family distance over off-diagonal pairs.
pub fn family_distance_summary(dist: &[Vec<f64>], family_labels: &[String]) -> (f64, f64) {
    let k = dist.len();
    let (mut intra, mut intra_n, mut inter, mut inter_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..k {
        for j in i + 1..k {
            if family_labels[i] == family_labels[j] {
                intra += dist[i][j];
                intra_n += 1;
            } else {
                inter += dist[i][j];
                inter_n += 1;
            }
        }
    }
    (intra / intra_n.max(1) as f64, inter / inter_n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Average-linkage agglomeration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Merge {
    /// Cluster ids; leaves are 0..K, merge m creates cluster K+m.
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_order: Vec<usize>,
}

#[derive(Clone)]
struct Cluster {
    id: usize,
    members: Vec<usize>,
}

/// Cluster labels for leaves 0..k, numbered by each cluster's smallest leaf.
fn flat_assignment(active: &[Cluster], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.sort_by_key(|&c| active[c].members.iter().min().copied().unwrap_or(0));
    let mut assignment = vec![0usize; k];
    for (label, &c) in order.iter().enumerate() {
        for &m in &active[c].members {
            assignment[m] = label;
        }
    }
    assignment
}

/// Average-linkage (UPGMA) agglomeration plus a flat cut at `n_clusters`.
pub fn agglomerate(dist: &[Vec<f64>], n_clusters: usize) -> Result<(Dendrogram, Vec<usize>)> {
    let k = dist.len();
    if n_clusters < 1 || n_clusters > k {
        return Err(Error::ClusterCountOutOfRange {
            requested: n_clusters,
            max: k,
        });
    }

    let mut active: Vec<Cluster> = (0..k)
        .map(|i| Cluster {
            id: i,
            members: vec![i],
        })
        .collect();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut merges = Vec::with_capacity(k.saturating_sub(1));
    let mut children: Vec<Option<(usize, usize)>> = vec![None; 2 * k - 1];
    let mut cut = (active.len() == n_clusters).then(|| flat_assignment(&active, k));

    for step in 0..k.saturating_sub(1) {
        // closest active pair; smallest (i, j) wins ties
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                if d[i][j] < best {
                    best = d[i][j];
                    bi = i;
                    bj = j;
                }
            }
        }
        let new_id = k + step;
        merges.push(Merge {
            a: active[bi].id.min(active[bj].id),
            b: active[bi].id.max(active[bj].id),
            distance: best,
        });
        children[new_id] = Some((active[bi].id, active[bj].id));

        // average linkage: d(A u B, C) = (|A| d(A,C) + |B| d(B,C)) / (|A|+|B|)
        let (na, nb) = (
            active[bi].members.len() as f64,
            active[bj].members.len() as f64,
        );
        let keep: Vec<usize> = (0..active.len()).filter(|&c| c != bi && c != bj).collect();
        let new_row: Vec<f64> = keep
            .iter()
            .map(|&c| (na * d[bi][c] + nb * d[bj][c]) / (na + nb))
            .collect();
        let mut merged_members = active[bi].members.clone();
        merged_members.extend_from_slice(&active[bj].members);

        active = keep.iter().map(|&c| active[c].clone()).collect();
        d = keep
            .iter()
            .map(|&r| keep.iter().map(|&c| d[r][c]).collect())
            .collect();
        for (row, &val) in d.iter_mut().zip(&new_row) {
            row.push(val);
        }
        let mut last = new_row;
        last.push(0.0);
        d.push(last);
        active.push(Cluster {
            id: new_id,
            members: merged_members,
        });

        if active.len() == n_clusters {
            cut = Some(flat_assignment(&active, k));
        }
    }

    // leaf order by depth-first traversal of the final tree
    let mut leaf_order = Vec::with_capacity(k);
    let mut stack = vec![2 * k - 2];
    while let Some(node) = stack.pop() {
        match children[node] {
            Some((a, b)) => {
                stack.push(b);
                stack.push(a);
            }
            None => leaf_order.push(node),
        }
    }

    Ok((
        Dendrogram { merges, leaf_order },
        cut.expect("cut recorded during agglomeration"),
    ))
}

// ---------------------------------------------------------------------------
// PCA projection
// ---------------------------------------------------------------------------

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 1000;

fn centered_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rows.len();
    let dim = rows[0].len();
    let mut centered = rows.to_vec();
    for j in 0..dim {
        let mean: f64 = centered.iter().map(|r| r[j]).sum::<f64>() / k as f64;
        for row in centered.iter_mut() {
            row[j] -= mean;
        }
    }
    centered
}

/// Projects rows onto the top-2 principal directions of the centered data,
/// by power iteration with deflation. The sign of each direction is fixed
/// so its largest-magnitude loading is positive.
pub fn project_2d(sig: &SignatureMatrix) -> Result<Vec<[f64; 2]>> {
    if sig.rows.len() < 2 {
        return Err(Error::InvalidParam(
            "project_2d needs at least 2 rows".into(),
        ));
    }
    let centered = centered_rows(&sig.rows);
    let (v1, l1) = top_direction(&centered, None, 1e-300)?;
    let (v2, _) = top_direction(&centered, Some(&v1), 1e-12 * l1)?;
    Ok(centered
        .iter()
        .map(|row| [dot(row, &v1), dot(row, &v2)])
        .collect())
}

/// Top-2 eigenvalues of the scatter matrix X^T X of the centered rows,
/// computed via the power-iteration route (tests pin this against a dense
/// eigensolver on the Gram dual).
pub fn top2_scatter_eigenvalues(sig: &SignatureMatrix) -> Result<[f64; 2]> {
    let centered = centered_rows(&sig.rows);
    let (v1, l1) = top_direction(&centered, None, 1e-300)?;
    let (_, l2) = top_direction(&centered, Some(&v1), 1e-12 * l1)?;
    Ok([l1, l2])
}

/// Dominant right-singular direction of X (optionally deflated against a
/// previous direction), returned with its X^T X eigenvalue. An iterate whose
/// image norm falls at or below `zero_floor` is treated as a numerically
/// zero eigenvalue rather than iterated on rounding noise.
fn top_direction(
    x: &[Vec<f64>],
    deflate: Option<&[f64]>,
    zero_floor: f64,
) -> Result<(Vec<f64>, f64)> {
    let dim = x[0].len();
    let mut rng = rngutil::rng_for(0xC0FF_EE00, 0);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rngutil::standard_normal(&mut rng))
        .collect();
    orthogonalize(&mut v, deflate);
    if normalize(&mut v) == 0.0 {
        return Ok((v, 0.0));
    }

    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        // w = X^T (X v)
        let xv: Vec<f64> = x.iter().map(|row| dot(row, &v)).collect();
        let mut w = vec![0.0; dim];
        for (row, &coef) in x.iter().zip(&xv) {
            for (wj, &rj) in w.iter_mut().zip(row) {
                *wj += coef * rj;
            }
        }
        orthogonalize(&mut w, deflate);
        if normalize(&mut w) <= zero_floor {
            // numerically zero eigenvalue: any deterministic unit vector in
            // the deflated subspace serves as the direction
            let mut u = vec![0.0; dim];
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = if j % 2 == 0 { 1.0 } else { -1.0 };
            }
            orthogonalize(&mut u, deflate);
            if normalize(&mut u) == 0.0 {
                u = v;
            }
            fix_sign(&mut u);
            return Ok((u, 0.0));
        }
        residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if residual < POWER_TOL {
            fix_sign(&mut v);
            let xv: Vec<f64> = x.iter().map(|row| dot(row, &v)).collect();
            let lambda = xv.iter().map(|a| a * a).sum();
            return Ok((v, lambda));
        }
    }
    Err(Error::PowerIterationDiverged {
        max_iters: POWER_MAX_ITERS,
        residual,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let proj = dot(v, u);
        for (vj, &uj) in v.iter_mut().zip(u) {
            *vj -= proj * uj;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for vj in v.iter_mut() {
            *vj /= norm;
        }
    }
    norm
}

/// Largest-magnitude loading becomes positive; first index wins ties.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (j, vj) in v.iter().enumerate() {
        if vj.abs() > v[best].abs() {
            best = j;
        }
    }
    if v[best] < 0.0 {
        for vj in v.iter_mut() {
            *vj = -*vj;
        }
    }
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

/// Distance matrix as CSV with class-label headers.
pub fn write_distance_csv(path: &Path, sig: &SignatureMatrix, dist: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("class");
    for label in &sig.class_labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, row) in dist.iter().enumerate() {
        out.push_str(&sig.class_labels[i]);
        for v in row {
            out.push_str(&format!(",{v:.12}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// 2D scatter as a standalone SVG, one circle per class colored by family.
pub fn write_scatter_svg(path: &Path, sig: &SignatureMatrix, coords: &[[f64; 2]]) -> Result<()> {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 50.0;
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &[x, y] in coords {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let palette = ["#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e"];
    let mut families: Vec<&String> = Vec::new();
    for f in &sig.family_labels {
        if !families.contains(&f) {
            families.push(f);
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n",
        s = SIZE
    );
    svg.push_str(&format!(
        "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    ));
    for (i, &[x, y]) in coords.iter().enumerate() {
        let px = PAD + (x - min_x) / span_x * (SIZE - 2.0 * PAD);
        let py = SIZE - PAD - (y - min_y) / span_y * (SIZE - 2.0 * PAD);
        let fam_idx = families
            .iter()
            .position(|f| **f == sig.family_labels[i])
            .unwrap();
        let color = palette[fam_idx % palette.len()];
        svg.push_str(&format!(
            "<circle cx=\"{px:.3}\" cy=\"{py:.3}\" r=\"6\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>\n",
            px + 8.0,
            py + 4.0,
            sig.class_labels[i]
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig_from_rows(rows: Vec<Vec<f64>>) -> SignatureMatrix {
        let k = rows.len();
        SignatureMatrix {
            rows,
            class_labels: (0..k).map(|i| format!("c{i}")).collect(),
            family_labels: (0..k).map(|i| format!("f{i}")).collect(),
        }
    }

    #[test]
    fn distance_basics() {
        let sig = sig_from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let cos = pairwise_distance(&sig, DistanceMetric::Cosine).unwrap();
        assert_eq!(cos[0][2], 0.0); // identical rows
        assert!((cos[0][1] - 1.0).abs() < 1e-12); // orthogonal rows
        let euc = pairwise_distance(&sig, DistanceMetric::Euclidean).unwrap();
        assert!((euc[0][1] - 2f64.sqrt()).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(cos[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(cos[i][j], cos[j][i]);
            }
        }
    }

    #[test]
    fn zero_row_under_cosine_names_class() {
        let sig = sig_from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            pairwise_distance(&sig, DistanceMetric::Cosine),
            Err(Error::ZeroSignatureRow { class: 1 })
        ));
    }

    #[test]
    fn agglomerate_recovers_planted_blocks() {
        // blocks {0,1,2} and {3,4}: intra <= 0.1, inter >= 0.9
        let k = 5;
        let block = |i: usize| usize::from(i >= 3);
        let mut dist = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    dist[i][j] = if block(i) == block(j) { 0.08 } else { 0.95 };
                }
            }
        }
        let (dendro, assignment) = agglomerate(&dist, 2).unwrap();
        assert_eq!(assignment, vec![0, 0, 0, 1, 1]);
        assert_eq!(dendro.merges.len(), k - 1);

        // brute-force oracle: the planted bipartition minimizes mean
        // within-cluster distance over all bipartitions
        let mean_within = |assign: &[usize]| -> f64 {
            let (mut sum, mut n) = (0.0, 0usize);
            for i in 0..k {
                for j in i + 1..k {
                    if assign[i] == assign[j] {
                        sum += dist[i][j];
                        n += 1;
                    }
                }
            }
            if n == 0 {
                f64::INFINITY
            } else {
                sum / n as f64
            }
        };
        let planted: Vec<usize> = (0..k).map(block).collect();
        let planted_score = mean_within(&planted);
        for code in 1..(1usize << (k - 1)) {
            let assign: Vec<usize> = (0..k)
                .map(|i| if i == 0 { 0 } else { (code >> (i - 1)) & 1 })
                .collect();
            if assign != planted {
                assert!(mean_within(&assign) >= planted_score);
            }
        }
    }

    #[test]
    fn trivial_cluster_counts() {
        let sig = sig_from_rows(vec![vec![0.0], vec![1.0], vec![3.0]]);
        let dist = pairwise_distance(&sig, DistanceMetric::Euclidean).unwrap();
        let (_, singletons) = agglomerate(&dist, 3).unwrap();
        assert_eq!(singletons, vec![0, 1, 2]);
        let (_, one) = agglomerate(&dist, 1).unwrap();
        assert_eq!(one, vec![0, 0, 0]);
        assert!(matches!(
            agglomerate(&dist, 4),
            Err(Error::ClusterCountOutOfRange { .. })
        ));
    }

    #[test]
    fn average_linkage_merge_distances_nondecreasing() {
        let pts = [0.0f64, 0.3, 1.1, 4.0, 4.2, 9.0];
        let k = pts.len();
        let dist: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| (pts[i] - pts[j]).abs()).collect())
            .collect();
        let (dendro, _) = agglomerate(&dist, 1).unwrap();
        for w in dendro.merges.windows(2) {
            assert!(w[0].distance <= w[1].distance + 1e-12);
        }
    }

    #[test]
    fn projection_preserves_2d_geometry() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![0.4, 1.3],
            vec![-0.7, 0.5],
        ];
        let sig = sig_from_rows(rows.clone());
        let coords = project_2d(&sig).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let orig = euclidean_distance(&rows[i], &rows[j]);
                let proj = ((coords[i][0] - coords[j][0]).powi(2)
                    + (coords[i][1] - coords[j][1]).powi(2))
                .sqrt();
                assert!((orig - proj).abs() < 1e-9, "pair {i},{j}: {orig} vs {proj}");
            }
        }
    }

    #[test]
    fn collinear_points_have_negligible_second_component() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let t = i as f64;
                (0..40).map(|j| t * (j as f64 + 1.0) / 40.0).collect()
            })
            .collect();
        let sig = sig_from_rows(rows);
        let coords = project_2d(&sig).unwrap();
        let var2: f64 = coords.iter().map(|c| c[1] * c[1]).sum();
        assert!(var2 < 1e-12, "second-component variance {var2}");
    }

    #[test]
    fn projection_invariant_to_row_order() {
        let rows = vec![
            vec![0.1, 0.9, 0.3, 0.0],
            vec![0.8, 0.2, 0.2, 0.4],
            vec![0.5, 0.5, 0.9, 0.1],
            vec![0.0, 0.3, 0.7, 0.6],
        ];
        let sig = sig_from_rows(rows.clone());
        let coords = project_2d(&sig).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let sig_p = sig_from_rows(permuted);
        let coords_p = project_2d(&sig_p).unwrap();
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            for axis in 0..2 {
                assert!((coords_p[new_pos][axis] - coords[old_pos][axis]).abs() < 1e-9);
            }
        }
    }
}
