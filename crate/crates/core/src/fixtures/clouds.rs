//! Analytic surface samples with exact normals.

use nalgebra::Vector3;

use crate::pointcloud::OrientedPointCloud;

/// `n` points on the unit sphere from a Fibonacci lattice, normals radial.
pub fn unit_sphere(n: usize) -> OrientedPointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let points: Vec<Vector3<f64>> = (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            Vector3::new(r * theta.cos(), r * theta.sin(), z).normalize()
        })
        .collect();
    OrientedPointCloud::new(points.clone(), points).expect("sphere samples are valid")
}

/// Axis-aligned box centered at the origin, each face sampled on a
/// `per_side × per_side` grid, normals along the face axis.
pub fn box_surface(half_extents: Vector3<f64>, per_side: usize) -> OrientedPointCloud {
    let mut points = Vec::with_capacity(6 * per_side * per_side);
    let mut normals = Vec::with_capacity(points.capacity());
    let t = |i: usize| (i as f64 + 0.5) / per_side as f64 * 2.0 - 1.0;
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [-1.0, 1.0] {
            for i in 0..per_side {
                for j in 0..per_side {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half_extents[axis];
                    p[u] = t(i) * half_extents[u];
                    p[v] = t(j) * half_extents[v];
                    let mut n = Vector3::zeros();
                    n[axis] = sign;
                    points.push(p);
                    normals.push(n);
                }
            }
        }
    }
    OrientedPointCloud::new(points, normals).expect("box samples are valid")
}
