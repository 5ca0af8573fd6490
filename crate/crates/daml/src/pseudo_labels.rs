//! Joint-subspace pseudo-label generation.
//!
//! Two samples are neighbors only when their cosine distance is below
//! `alpha` in *both* subspaces; pairs that pass the mutual gate get a finite
//! distance equal to one minus the cosine similarity of their concatenated
//! features, everything else is infinite. DBSCAN over that matrix yields the
//! per-epoch pseudo identities, and per-cluster feature means in each
//! subspace become the class centers.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::data::{augment, AugmentPolicy, Dataset};
use crate::encoders::Encoder;
use crate::error::{Error, Result};

/// Mutual-neighbor gate. `adjacency[(i, j)]` is true iff i and j are within
/// `alpha` cosine distance in both subspaces; the relation is symmetric by
/// construction, and the diagonal is always true.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub adjacency: Array2<bool>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }
}

/// Pairwise distances with `f64::INFINITY` marking gated-out pairs.
/// Finite entries lie in [0, 2]; the diagonal is zero; the matrix is
/// symmetric.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub d: Array2<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// Cluster assignment for one epoch. `labels[i]` is `None` for outliers;
/// cluster ids are dense in `0..k` and ordered by first member appearance.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub labels: Vec<Option<usize>>,
    pub k: usize,
}

impl PseudoLabels {
    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Members per cluster, in index order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                m[*c].push(i);
            }
        }
        m
    }

    /// Sizes of all clusters.
    pub fn size_histogram(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }
}

/// Pseudo labels plus per-cluster centers in both subspaces.
#[derive(Debug, Clone)]
pub struct PseudoLabelState {
    pub labels: PseudoLabels,
    pub centers_teacher: Array2<f64>,
    pub centers_student: Array2<f64>,
}

/// Row-normalize, failing on zero rows.
fn normalized_rows(feats: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = feats.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-300 {
            return Err(Error::ZeroVector(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Pairwise cosine distances (1 - cosine similarity), exactly symmetric,
/// clamped into [0, 2].
pub fn cosine_distance_matrix(feats: &Array2<f64>) -> Result<Array2<f64>> {
    let normed = normalized_rows(feats)?;
    let sim = normed.dot(&normed.t());
    let n = sim.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = (1.0 - sim[[i, j]]).clamp(0.0, 2.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Gate on closeness in both subspaces simultaneously.
pub fn neighbor_graph(
    feats_teacher: &Array2<f64>,
    feats_student: &Array2<f64>,
    alpha: f64,
) -> Result<NeighborGraph> {
    if feats_teacher.nrows() != feats_student.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "subspace row counts differ: {} vs {}",
            feats_teacher.nrows(),
            feats_student.nrows()
        )));
    }
    let dt = cosine_distance_matrix(feats_teacher)?;
    let ds = cosine_distance_matrix(feats_student)?;
    let n = dt.nrows();
    let adjacency = Array2::from_shape_fn((n, n), |(i, j)| dt[[i, j]] < alpha && ds[[i, j]] < alpha);
    Ok(NeighborGraph { adjacency })
}

/// Distance between mutually adjacent samples: one minus the cosine
/// similarity of the concatenated subspace features. Non-adjacent pairs are
/// infinite; the diagonal is forced to zero.
///
/// With `normalize_subspaces` each subspace is L2-normalized before the
/// concatenation, weighting both subspaces equally regardless of scale.
pub fn joint_distance(
    feats_teacher: &Array2<f64>,
    feats_student: &Array2<f64>,
    graph: &NeighborGraph,
    normalize_subspaces: bool,
) -> Result<DistanceMatrix> {
    let n = feats_teacher.nrows();
    if graph.len() != n || feats_student.nrows() != n {
        return Err(Error::ShapeMismatch(
            "graph and feature row counts differ".into(),
        ));
    }
    let (ft, fs);
    let (teacher, student) = if normalize_subspaces {
        ft = normalized_rows(feats_teacher)?;
        fs = normalized_rows(feats_student)?;
        (&ft, &fs)
    } else {
        (feats_teacher, feats_student)
    };
    let concat = ndarray::concatenate(Axis(1), &[teacher.view(), student.view()])
        .expect("row counts checked above");
    let joint = cosine_distance_matrix(&concat)?;
    let mut d = Array2::from_elem((n, n), f64::INFINITY);
    for i in 0..n {
        d[[i, i]] = 0.0;
        for j in i + 1..n {
            if graph.adjacency[[i, j]] && graph.adjacency[[j, i]] {
                d[[i, j]] = joint[[i, j]];
                d[[j, i]] = joint[[i, j]];
            }
        }
    }
    Ok(DistanceMatrix { d })
}

/// DBSCAN over a precomputed distance matrix.
///
/// A point is core when its eps-neighborhood (self included) holds at least
/// `min_samples` points. Clusters are grown from core points in index order;
/// border points join the first cluster that reaches them, which is the
/// lowest cluster id among their core neighbors. Final ids are renumbered by
/// first appearance in sample order, so labels are stable run to run.
pub fn cluster(d: &DistanceMatrix, eps: f64, min_samples: usize) -> PseudoLabels {
    let n = d.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.d[[i, j]] <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= min_samples).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut k = 0usize;
    for seed in 0..n {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        labels[seed] = Some(k);
        let mut queue = std::collections::VecDeque::from([seed]);
        while let Some(q) = queue.pop_front() {
            for &j in &neighbors[q] {
                if labels[j].is_none() {
                    labels[j] = Some(k);
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
        k += 1;
    }

    // renumber by first appearance
    let mut remap: Vec<Option<usize>> = vec![None; k];
    let mut next = 0usize;
    for l in labels.iter().flatten() {
        if remap[*l].is_none() {
            remap[*l] = Some(next);
            next += 1;
        }
    }
    let labels = labels
        .into_iter()
        .map(|l| l.map(|c| remap[c].unwrap()))
        .collect();
    PseudoLabels { labels, k }
}

/// Per-cluster arithmetic means of the member features, one row per cluster,
/// in both subspaces. Outliers are excluded.
pub fn compute_centers(
    feats_teacher: &Array2<f64>,
    feats_student: &Array2<f64>,
    labels: &PseudoLabels,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mean_of =
        |feats: &Array2<f64>, members: &[usize], k: usize| -> Result<ndarray::Array1<f64>> {
            if members.is_empty() {
                return Err(Error::EmptyCluster(k));
            }
            let mut acc = ndarray::Array1::zeros(feats.ncols());
            for &i in members {
                acc += &feats.row(i);
            }
            Ok(acc / members.len() as f64)
        };
    let members = labels.members();
    let mut centers_t = Array2::zeros((labels.k, feats_teacher.ncols()));
    let mut centers_s = Array2::zeros((labels.k, feats_student.ncols()));
    for (k, m) in members.iter().enumerate() {
        centers_t.row_mut(k).assign(&mean_of(feats_teacher, m, k)?);
        centers_s.row_mut(k).assign(&mean_of(feats_student, m, k)?);
    }
    Ok((centers_t, centers_s))
}

/// Eval-mode features for clustering: the mean over the original image and
/// `repeat` augmented copies of it.
pub fn clustering_features(
    encoder: &Encoder,
    dataset: &Dataset,
    policy: &AugmentPolicy,
    repeat: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let size = encoder.config.input_size;
    let images: Vec<_> = (0..dataset.len())
        .map(|i| dataset.load_image(i, size))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = extract_in_chunks(encoder, &images)?;
    for _ in 0..repeat {
        let augmented: Vec<_> = images.iter().map(|img| augment(img, policy, rng)).collect();
        acc += &extract_in_chunks(encoder, &augmented)?;
    }
    Ok(acc / (repeat + 1) as f64)
}

/// Extraction in fixed-size chunks with order-stable assembly.
fn extract_in_chunks(encoder: &Encoder, images: &[crate::data::Image]) -> Result<Array2<f64>> {
    const CHUNK: usize = 64;
    let mut out = Array2::zeros((images.len(), encoder.config.feature_dim));
    let mut row = 0;
    for chunk in images.chunks(CHUNK) {
        let feats = encoder.extract_features(chunk)?;
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&feats);
        row += chunk.len();
    }
    Ok(out)
}

/// The full pipeline for one epoch: gate, joint distances, DBSCAN, centers.
pub fn generate_pseudo_labels(
    feats_teacher: &Array2<f64>,
    feats_student: &Array2<f64>,
    hp: &HyperParams,
) -> Result<PseudoLabelState> {
    let graph = neighbor_graph(feats_teacher, feats_student, hp.alpha)?;
    let d = joint_distance(feats_teacher, feats_student, &graph, hp.normalize_subspaces)?;
    let labels = cluster(&d, hp.eps, hp.min_samples);
    let (centers_teacher, centers_student) = if labels.k > 0 {
        compute_centers(feats_teacher, feats_student, &labels)?
    } else {
        (
            Array2::zeros((0, feats_teacher.ncols())),
            Array2::zeros((0, feats_student.ncols())),
        )
    };
    Ok(PseudoLabelState {
        labels,
        centers_teacher,
        centers_student,
    })
}
