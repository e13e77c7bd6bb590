//! Oriented object point clouds, exact nearest-neighbor queries and
//! PCA normal estimation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Tolerance on normal length, both for clouds and for `signed_distance`.
pub const NORMAL_TOL: f64 = 1e-6;

pub const DEFAULT_K_NEIGHBORS: usize = 16;

/// Object surface samples with outward unit normals, in the object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if normals.len() != points.len() {
            return Err(Error::Dimension {
                what: "cloud normals",
                expected: points.len(),
                actual: normals.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("cloud point {i}")));
        }
        if let Some(i) = normals.iter().position(|n| !((n.norm() - 1.0).abs() <= NORMAL_TOL)) {
            return Err(Error::invalid(
                "cloud normals",
                format!("normal {i} has norm {}", normals[i].norm()),
            ));
        }
        Ok(Self { points, normals })
    }

    /// Builds a cloud from raw points, estimating normals oriented away from
    /// the centroid. Degenerate neighborhoods are an error here.
    pub fn with_estimated_normals(points: Vec<Vector3<f64>>, k_neighbors: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let est = estimate_normals(&points, k_neighbors, &centroid)?;
        if let Some(i) = est.degenerate.iter().position(|&d| d) {
            return Err(Error::invalid(
                "cloud normals",
                format!("degenerate neighborhood around point {i}"),
            ));
        }
        Self::new(points, est.normals)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Same normals, displaced points.
    pub fn with_points(&self, points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::new(points, self.normals.clone())
    }
}

/// The closest cloud sample to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub index: usize,
    pub distance_sq: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const LEAF_SIZE: usize = 8;

/// KD-tree over a cloud. Queries are exact; equidistant candidates resolve
/// to the lowest stored index.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    /// Permutation of point indices; leaves own contiguous ranges of it.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// (squared distance, index) ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl NeighborIndex {
    pub fn build(cloud: &OrientedPointCloud) -> Result<Self> {
        Self::from_parts(cloud.points.clone(), cloud.normals.clone())
    }

    fn from_parts(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut index = Self {
            order: (0..points.len()).collect(),
            points,
            normals,
            nodes: Vec::new(),
        };
        index.build_node(0, index.points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] == 0.0 {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let points = &self.points;
        self.order[start..end].sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let mid = start + (end - start) / 2;
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split { axis, value, left: 0, right: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest stored point to `x` (lowest index among exact ties).
    pub fn nearest(&self, x: &Vector3<f64>) -> Neighbor {
        let mut best = Candidate(f64::INFINITY, usize::MAX);
        self.search_nearest(0, x, &mut best);
        let i = best.1;
        Neighbor {
            point: self.points[i],
            normal: self.normals[i],
            index: i,
            distance_sq: best.0,
        }
    }

    fn search_nearest(&self, node: usize, x: &Vector3<f64>, best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate((self.points[i] - x).norm_squared(), i);
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = x[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_nearest(near, x, best);
                // `<=` keeps equidistant points in play for the index tie-break.
                if diff * diff <= best.0 {
                    self.search_nearest(far, x, best);
                }
            }
        }
    }

    /// The `k` nearest stored points ordered by (distance, index).
    pub fn k_nearest(&self, x: &Vector3<f64>, k: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search_k(0, x, k, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.1).collect()
    }

    fn search_k(&self, node: usize, x: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate((self.points[i] - x).norm_squared(), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = x[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_k(near, x, k, heap);
                let bound = if heap.len() < k { f64::INFINITY } else { heap.peek().expect("non-empty").0 };
                if diff * diff <= bound {
                    self.search_k(far, x, k, heap);
                }
            }
        }
    }
}

/// Estimated normals plus a per-point flag for rank-deficient neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEstimates {
    pub normals: Vec<Vector3<f64>>,
    pub degenerate: Vec<bool>,
}

/// PCA normals from the `k_neighbors` nearest points (the query point
/// included), flipped so that `n·(p − orient_ref) ≥ 0`.
pub fn estimate_normals(
    points: &[Vector3<f64>],
    k_neighbors: usize,
    orient_ref: &Vector3<f64>,
) -> Result<NormalEstimates> {
    if k_neighbors < 3 {
        return Err(Error::invalid("k_neighbors", format!("must be at least 3, got {k_neighbors}")));
    }
    if points.len() < k_neighbors {
        return Err(Error::InsufficientPoints {
            needed: k_neighbors,
            got: points.len(),
        });
    }
    let index = NeighborIndex::from_parts(points.to_vec(), vec![Vector3::z(); points.len()])?;
    let mut normals = Vec::with_capacity(points.len());
    let mut degenerate = Vec::with_capacity(points.len());
    for p in points {
        let nbrs = index.k_nearest(p, k_neighbors);
        let mean = nbrs.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / nbrs.len() as f64;
        let mut cov = Matrix3::zeros();
        for &i in &nbrs {
            let d = points[i] - mean;
            cov += d * d.transpose();
        }
        cov /= nbrs.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (small, mid, large) = (idx[0], idx[1], idx[2]);
        let scale = eig.eigenvalues[large].max(0.0);
        degenerate.push(scale == 0.0 || eig.eigenvalues[mid] <= 1e-12 * scale);
        let mut n: Vector3<f64> = eig.eigenvectors.column(small).into_owned();
        n /= n.norm();
        if n.dot(&(p - orient_ref)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(NormalEstimates { normals, degenerate })
}

/// `nᵀ(x − p)`: positive outside the surface for outward normals.
pub fn signed_distance(x: &Vector3<f64>, p: &Vector3<f64>, n: &Vector3<f64>) -> Result<f64> {
    if (n.norm() - 1.0).abs() > NORMAL_TOL {
        return Err(Error::invalid("normal", format!("expected unit norm, got {}", n.norm())));
    }
    Ok(n.dot(&(x - p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::clouds;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vector3<f64>], x: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p - x).norm_squared();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn cloud_of(points: Vec<Vector3<f64>>) -> OrientedPointCloud {
        let n = points.len();
        OrientedPointCloud::new(points, vec![Vector3::z(); n]).unwrap()
    }

    #[test]
    fn single_point_index() {
        let idx = NeighborIndex::build(&cloud_of(vec![Vector3::new(1.0, 2.0, 3.0)])).unwrap();
        for q in random_points(10, 3) {
            assert_eq!(idx.nearest(&q).index, 0);
        }
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(OrientedPointCloud::new(vec![], vec![]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn matches_brute_force() {
        let pts = random_points(1000, 11);
        let idx = NeighborIndex::build(&cloud_of(pts.clone())).unwrap();
        for q in random_points(100, 12) {
            assert_eq!(idx.nearest(&q).index, brute_nearest(&pts, &q));
        }
        let hit = idx.nearest(&pts[417]);
        assert_eq!(hit.index, 417);
        assert_eq!(hit.distance_sq, 0.0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut pts = random_points(40, 5);
        let dup = pts[30];
        pts[7] = dup;
        pts[22] = dup;
        let idx = NeighborIndex::build(&cloud_of(pts.clone())).unwrap();
        assert_eq!(idx.nearest(&dup).index, 7);

        // equidistant pair 3 and 7 on either side of the query
        let mut pts: Vec<Vector3<f64>> = (0..12).map(|i| Vector3::new(10.0 + i as f64, 5.0, 5.0)).collect();
        pts[3] = Vector3::new(-1.0, 0.0, 0.0);
        pts[7] = Vector3::new(1.0, 0.0, 0.0);
        let idx = NeighborIndex::build(&cloud_of(pts)).unwrap();
        assert_eq!(idx.nearest(&Vector3::zeros()).index, 3);
    }

    #[test]
    fn k_nearest_matches_sorting() {
        let pts = random_points(500, 21);
        let idx = NeighborIndex::build(&cloud_of(pts.clone())).unwrap();
        for q in random_points(20, 22) {
            let mut all: Vec<Candidate> = pts.iter().enumerate().map(|(i, p)| Candidate((p - q).norm_squared(), i)).collect();
            all.sort();
            let expected: Vec<usize> = all.iter().take(16).map(|c| c.1).collect();
            assert_eq!(idx.k_nearest(&q, 16), expected);
        }
    }

    #[test]
    fn planar_normals_follow_reference() {
        let pts: Vec<Vector3<f64>> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0)))
            .collect();
        let below = estimate_normals(&pts, 8, &Vector3::new(0.45, 0.45, -1.0)).unwrap();
        let above = estimate_normals(&pts, 8, &Vector3::new(0.45, 0.45, 1.0)).unwrap();
        for (b, a) in below.normals.iter().zip(&above.normals) {
            assert!((b - Vector3::z()).norm() < 1e-9);
            assert!((a + Vector3::z()).norm() < 1e-9);
        }
        assert!(below.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vector3<f64>> = (0..2000)
            .map(|_| {
                let v = Vector3::new(
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                );
                v / v.norm()
            })
            .collect();
        let est = estimate_normals(&pts, DEFAULT_K_NEIGHBORS, &Vector3::zeros()).unwrap();
        let good = pts
            .iter()
            .zip(&est.normals)
            .filter(|(p, n)| n.dot(p).clamp(-1.0, 1.0).acos().to_degrees() < 10.0)
            .count();
        assert!(good as f64 >= 0.95 * pts.len() as f64, "only {good} within 10°");
        for n in &est.normals {
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_neighborhood_is_degenerate() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0];
        let est = estimate_normals(&pts, 3, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!(est.degenerate.iter().all(|&d| d));
        assert!(matches!(
            estimate_normals(&pts, 4, &Vector3::zeros()),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn signed_distance_examples() {
        let p = Vector3::new(0.3, -0.2, 0.5);
        let n = Vector3::z();
        assert_eq!(signed_distance(&p, &p, &n).unwrap(), 0.0);
        assert!((signed_distance(&(p + Vector3::new(0.0, 0.0, 0.02)), &p, &n).unwrap() - 0.02).abs() < 1e-15);
        assert!((signed_distance(&(p + Vector3::new(0.05, 0.0, -0.01)), &p, &n).unwrap() + 0.01).abs() < 1e-15);
        assert!(signed_distance(&p, &p, &(n * 1.1)).is_err());
    }

    #[test]
    fn sphere_fixture_is_exact() {
        let cloud = clouds::unit_sphere(2000);
        for (p, n) in cloud.points().iter().zip(cloud.normals()) {
            assert!((p.norm() - 1.0).abs() <= 1e-9);
            assert!((p - n).norm() <= 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn nearest_is_brute_force(seed in any::<u64>(), n in 1usize..300) {
                let pts = random_points(n, seed);
                let idx = NeighborIndex::build(&cloud_of(pts.clone())).unwrap();
                for q in random_points(20, seed ^ 0xabc) {
                    prop_assert_eq!(idx.nearest(&q).index, brute_nearest(&pts, &q));
                }
            }

            #[test]
            fn signed_distance_is_linear(a in prop::array::uniform3(-1.0f64..1.0),
                                         b in prop::array::uniform3(-1.0f64..1.0),
                                         s in -3.0f64..3.0) {
                let p = Vector3::new(0.1, 0.2, 0.3);
                let n = Vector3::new(1.0, 2.0, 2.0) / 3.0;
                let (a, b) = (Vector3::from(a), Vector3::from(b));
                let lhs = signed_distance(&(a * s + b * (1.0 - s)), &p, &n).unwrap();
                let rhs = s * signed_distance(&a, &p, &n).unwrap() + (1.0 - s) * signed_distance(&b, &p, &n).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
