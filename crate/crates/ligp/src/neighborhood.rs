//! Local neighborhoods over unique design inputs.
//!
//! Neighborhoods are defined on the deduplicated inputs, never on raw rows:
//! a heavily replicated location contributes one neighborhood slot and all
//! of its replicates. Queries are exact Euclidean k-nearest-neighbor with
//! ties broken by the lower design row index, so repeated queries are
//! bitwise reproducible.

use nalgebra::DVector;

use crate::design::ReplicatedDesign;
use crate::error::{Error, Result};

/// A prediction site together with the indices of its nearest unique inputs,
/// sorted by ascending distance.
#[derive(Debug, Clone)]
pub struct LocalNeighborhood {
    pub xprime: DVector<f64>,
    pub indices: Vec<usize>,
    /// Total replicates across the selected unique inputs.
    pub n_local: usize,
}

struct Node {
    /// splitting dimension
    dim: usize,
    /// index into `pts` of the point stored at this node
    point: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// A kd-tree over the unique inputs of a [`ReplicatedDesign`].
pub struct SpatialIndex {
    pts: Vec<Vec<f64>>,
    root: Option<Box<Node>>,
    dim: usize,
}

fn build_node(ids: &mut [usize], pts: &[Vec<f64>], depth: usize, dim: usize) -> Option<Box<Node>> {
    if ids.is_empty() {
        return None;
    }
    let axis = depth % dim;
    ids.sort_by(|&a, &b| {
        pts[a][axis]
            .partial_cmp(&pts[b][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mid = ids.len() / 2;
    let point = ids[mid];
    let (left_ids, rest) = ids.split_at_mut(mid);
    let right_ids = &mut rest[1..];
    Some(Box::new(Node {
        dim: axis,
        point,
        left: build_node(left_ids, pts, depth + 1, dim),
        right: build_node(right_ids, pts, depth + 1, dim),
    }))
}

/// Candidate ordering: by squared distance, then by row index. The heap keeps
/// the current worst candidate on top.
#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    fn search(
        &self,
        node: &Node,
        query: &[f64],
        k: usize,
        heap: &mut std::collections::BinaryHeap<Candidate>,
    ) {
        let pt = &self.pts[node.point];
        let d2 = crate::kernel::sq_dist(query, pt);
        let cand = Candidate { d2, id: node.point };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }

        let delta = query[node.dim] - pt[node.dim];
        let (near, far) = if delta <= 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.search(n, query, k, heap);
        }
        // the far side can only matter if the splitting plane is within the
        // current worst distance (or the heap is not yet full); equality must
        // recurse so that index tie-breaking stays exact
        let must_check = heap.len() < k
            || heap
                .peek()
                .map(|w| delta * delta <= w.d2)
                .unwrap_or(true);
        if must_check {
            if let Some(n) = far {
                self.search(n, query, k, heap);
            }
        }
    }

    /// Exact k-nearest unique inputs, ascending by distance with row-index
    /// tie-breaks.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.pts.len() {
            return Err(Error::invalid(format!(
                "k = {k} out of range for {} unique inputs",
                self.pts.len()
            )));
        }
        let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
        if let Some(root) = &self.root {
            self.search(root, query, k, &mut heap);
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.id, c.d2)).collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }
}

/// Build the search structure over a design's unique inputs.
pub fn build_index(design: &ReplicatedDesign) -> SpatialIndex {
    let nbar = design.n_unique();
    let dim = design.dim();
    let pts: Vec<Vec<f64>> = (0..nbar).map(|i| design.row(i)).collect();
    let mut ids: Vec<usize> = (0..nbar).collect();
    let root = build_node(&mut ids, &pts, 0, dim.max(1));
    SpatialIndex { pts, root, dim }
}

/// Select the `nbar` unique inputs nearest `xprime` and total their
/// replicates.
pub fn neighborhood(
    index: &SpatialIndex,
    design: &ReplicatedDesign,
    xprime: &DVector<f64>,
    nbar: usize,
) -> Result<LocalNeighborhood> {
    if nbar == 0 || nbar > design.n_unique() {
        return Err(Error::invalid(format!(
            "neighborhood size {nbar} out of range for {} unique inputs",
            design.n_unique()
        )));
    }
    let query: Vec<f64> = xprime.iter().copied().collect();
    let found = index.knn(&query, nbar)?;
    let indices: Vec<usize> = found.iter().map(|&(id, _)| id).collect();
    let n_local = indices
        .iter()
        .map(|&i| design.multiplicities()[i] as usize)
        .sum();
    Ok(LocalNeighborhood {
        xprime: xprime.clone(),
        indices,
        n_local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{compress, RawDesign};
    use crate::rng::stream;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn design_from_points(pts: &[Vec<f64>]) -> ReplicatedDesign {
        let d = pts[0].len();
        let x = DMatrix::from_fn(pts.len(), d, |i, j| pts[i][j]);
        let y = DVector::from_fn(pts.len(), |i, _| i as f64);
        compress(&RawDesign::new(x, y).unwrap(), 0.0).unwrap()
    }

    fn brute_force(pts: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<(usize, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, crate::kernel::sq_dist(query, p)))
            .collect();
        order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        order[..k].iter().map(|&(i, _)| i).collect()
    }

    #[test]
    fn single_point_index() {
        let design = design_from_points(&[vec![0.5, 0.5]]);
        let index = build_index(&design);
        let n = neighborhood(&index, &design, &DVector::from_vec(vec![9.0, -3.0]), 1).unwrap();
        assert_eq!(n.indices, vec![0]);
    }

    #[test]
    fn grid_query_at_node_returns_node_first() {
        let pts: Vec<Vec<f64>> = (0..10)
            .flat_map(|i| (0..10).map(move |j| vec![i as f64, j as f64]))
            .collect();
        let design = design_from_points(&pts);
        let index = build_index(&design);
        let q = design.row(37);
        let got = index.knn(&q, 5).unwrap();
        assert_eq!(got[0].0, 37);
        assert_eq!(got[0].1, 0.0);
    }

    #[test]
    fn random_queries_match_brute_force() {
        let mut rng = stream(17, "knn-test", &[]);
        let pts: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let design = design_from_points(&pts);
        let index = build_index(&design);
        // compression reorders rows lexicographically; compare in design order
        let dpts: Vec<Vec<f64>> = (0..design.n_unique()).map(|i| design.row(i)).collect();
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            let k = rng.random_range(1usize..40);
            let got: Vec<usize> = index.knn(&q, k).unwrap().iter().map(|&(i, _)| i).collect();
            assert_eq!(got, brute_force(&dpts, &q, k));
        }
    }

    #[test]
    fn ties_break_by_row_index_and_replay() {
        // four corners equidistant from the center
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ];
        let design = design_from_points(&pts);
        let index = build_index(&design);
        let q = DVector::from_vec(vec![0.5, 0.5]);
        let first = neighborhood(&index, &design, &q, 2).unwrap();
        assert_eq!(first.indices, vec![0, 1]);
        for _ in 0..5 {
            let again = neighborhood(&index, &design, &q, 2).unwrap();
            assert_eq!(again.indices, first.indices);
        }
    }

    #[test]
    fn neighborhoods_nest_as_prefixes() {
        let mut rng = stream(21, "nesting", &[]);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let design = design_from_points(&pts);
        let index = build_index(&design);
        let q = DVector::from_vec(vec![0.4, 0.6]);
        let mut previous: Vec<usize> = Vec::new();
        for nbar in 1..=40 {
            let nb = neighborhood(&index, &design, &q, nbar).unwrap();
            assert_eq!(&nb.indices[..previous.len()], previous.as_slice());
            previous = nb.indices;
        }
    }

    #[test]
    fn n_local_totals_replicates() {
        // SIR-style: replicated unique sites, n_local sums the multiplicities
        let mut rng = stream(5, "nlocal", &[]);
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for _ in 0..300 {
            let pt: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let reps = rng.random_range(1usize..=20);
            for _ in 0..reps {
                rows.push((pt.clone(), rng.random()));
            }
        }
        let x = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i].0[j]);
        let y = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        let design = compress(&RawDesign::new(x, y).unwrap(), 0.0).unwrap();
        let index = build_index(&design);
        let nb = neighborhood(&index, &design, &DVector::from_vec(vec![0.47, 0.2]), 100).unwrap();
        let expected: usize = nb
            .indices
            .iter()
            .map(|&i| design.multiplicities()[i] as usize)
            .sum();
        assert_eq!(nb.n_local, expected);
        assert!(nb.n_local >= 100);
    }

    #[test]
    fn whole_design_neighborhood() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let design = design_from_points(&pts);
        let index = build_index(&design);
        let nb = neighborhood(&index, &design, &DVector::from_vec(vec![3.2]), 7).unwrap();
        assert_eq!(nb.indices.len(), 7);
        assert!(neighborhood(&index, &design, &DVector::from_vec(vec![3.2]), 8).is_err());
    }
}
