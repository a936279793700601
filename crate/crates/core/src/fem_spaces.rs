//! BDM1 velocity space, piecewise-constant scalar spaces and quadrature.
//!
//! Each cell carries six velocity basis functions, two per edge. The degrees
//! of freedom of edge `e` are the moments
//! `int_e v . n_e q(s) ds` for `q = 1` and `q = 2s - 1`, where `n_e` is the
//! fixed facet normal and `s` runs from the lower to the higher global vertex.
//! Global dofs of facet `e` are `2e` and `2e + 1`.
//!
//! Basis functions are built on the physical cell by inverting the dof
//! functionals over linear vector fields. Since BDM1 is the full space of
//! linear vector fields, this gives the same functions as mapping a reference
//! basis with the contravariant Piola transform.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{DenseLu, DenseMatrix};
use crate::mesh::{Mesh, Point};

/// Quadrature on the reference triangle: barycentric points and weights that
/// sum to 1/2.
pub fn cell_quadrature(degree: usize) -> Result<Vec<([f64; 3], f64)>> {
    // (orbit type, coordinates, weight) with weights normalized to 1
    let raw: Vec<([f64; 3], f64)> = match degree {
        0 | 1 => vec![([1.0 / 3.0; 3], 1.0)],
        2 => orbit_21(1.0 / 6.0, 1.0 / 3.0),
        3 | 4 => {
            let mut r = orbit_21(0.445948490915965, 0.223381589678011);
            r.extend(orbit_21(0.091576213509771, 0.109951743655322));
            r
        }
        5 => {
            let mut r = vec![([1.0 / 3.0; 3], 0.225)];
            r.extend(orbit_21(0.470142064105115, 0.132394152788506));
            r.extend(orbit_21(0.101286507323456, 0.125939180544827));
            r
        }
        6 => {
            let mut r = orbit_21(0.249286745170910, 0.116786275726379);
            r.extend(orbit_21(0.063089014491502, 0.050844906370207));
            r.extend(orbit_111(0.053145049844817, 0.310352451033784, 0.082851075618374));
            r
        }
        _ => return Err(Error::InvalidArgument(format!("no cell quadrature of degree {degree}"))),
    };
    let total: f64 = raw.iter().map(|p| p.1).sum();
    Ok(raw.into_iter().map(|(b, w)| (b, 0.5 * w / total)).collect())
}

fn orbit_21(a: f64, w: f64) -> Vec<([f64; 3], f64)> {
    let b = 1.0 - 2.0 * a;
    vec![([a, a, b], w), ([a, b, a], w), ([b, a, a], w)]
}

fn orbit_111(a: f64, b: f64, w: f64) -> Vec<([f64; 3], f64)> {
    let c = 1.0 - a - b;
    vec![([a, b, c], w), ([a, c, b], w), ([b, a, c], w), ([b, c, a], w), ([c, a, b], w), ([c, b, a], w)]
}

/// Three-point Gauss-Legendre rule on `[0, 1]`, exact to degree 5.
pub fn facet_quadrature() -> [(f64, f64); 3] {
    let d = 0.5 * (3.0f64 / 5.0).sqrt();
    [(0.5 - d, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + d, 5.0 / 18.0)]
}

/// Physical point of barycentric coordinates `bary` in `cell`.
pub fn map_point(mesh: &Mesh, cell: usize, bary: [f64; 3]) -> Point {
    let v = mesh.cell_vertices(cell);
    [
        bary[0] * v[0][0] + bary[1] * v[1][0] + bary[2] * v[2][0],
        bary[0] * v[0][1] + bary[1] * v[1][1] + bary[2] * v[2][1],
    ]
}

/// Point at parameter `s` along facet `facet`, from its lower to its higher
/// vertex.
pub fn facet_point(mesh: &Mesh, facet: usize, s: f64) -> Point {
    let f = &mesh.facets[facet];
    let a = mesh.vertices[f.vertices[0]];
    let b = mesh.vertices[f.vertices[1]];
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Edge moment weights `q_0 = 1`, `q_1 = 2s - 1`.
pub fn moment_weights(s: f64) -> [f64; 2] {
    [1.0, 2.0 * s - 1.0]
}

/// A linear vector field `v(x) = value + gradient (x - centroid)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisFunction {
    pub value: [f64; 2],
    /// `gradient[i][j] = d v_i / d x_j`
    pub gradient: [[f64; 2]; 2],
}

impl BasisFunction {
    pub fn eval(&self, centroid: Point, x: Point) -> [f64; 2] {
        let d = [x[0] - centroid[0], x[1] - centroid[1]];
        let g = &self.gradient;
        [self.value[0] + g[0][0] * d[0] + g[0][1] * d[1], self.value[1] + g[1][0] * d[0] + g[1][1] * d[1]]
    }

    pub fn divergence(&self) -> f64 {
        self.gradient[0][0] + self.gradient[1][1]
    }
}

/// Prescribed boundary velocity.
pub type VelocityField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;

/// The BDM1 space on a mesh.
#[derive(Clone)]
pub struct VelocitySpace {
    mesh: Arc<Mesh>,
    centroids: Vec<Point>,
    basis: Vec<[BasisFunction; 6]>,
}

impl fmt::Debug for VelocitySpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocitySpace").field("cells", &self.mesh.num_cells()).field("dim", &self.dim()).finish()
    }
}

impl VelocitySpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let centroids: Vec<Point> = (0..mesh.num_cells()).map(|c| mesh.centroid(c)).collect();
        let basis = (0..mesh.num_cells()).map(|c| cell_basis(&mesh, c, centroids[c])).collect();
        Self { mesh, centroids, basis }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        2 * self.mesh.num_facets()
    }

    /// Global dofs of `cell`, local dof `2k + m` being moment `m` on local
    /// facet `k`.
    pub fn cell_dofs(&self, cell: usize) -> [usize; 6] {
        let f = self.mesh.cell_facets[cell];
        [2 * f[0], 2 * f[0] + 1, 2 * f[1], 2 * f[1] + 1, 2 * f[2], 2 * f[2] + 1]
    }

    pub fn cell_basis(&self, cell: usize) -> &[BasisFunction; 6] {
        &self.basis[cell]
    }

    pub fn centroid(&self, cell: usize) -> Point {
        self.centroids[cell]
    }

    /// Restriction of a coefficient vector to `cell`, as a linear field.
    pub fn local_field(&self, coeffs: &[f64], cell: usize) -> BasisFunction {
        let mut out = BasisFunction { value: [0.0; 2], gradient: [[0.0; 2]; 2] };
        for (phi, &dof) in self.basis[cell].iter().zip(&self.cell_dofs(cell)) {
            let c = coeffs[dof];
            for i in 0..2 {
                out.value[i] += c * phi.value[i];
                for j in 0..2 {
                    out.gradient[i][j] += c * phi.gradient[i][j];
                }
            }
        }
        out
    }

    pub fn eval(&self, coeffs: &[f64], cell: usize, x: Point) -> [f64; 2] {
        self.local_field(coeffs, cell).eval(self.centroids[cell], x)
    }

    pub fn cell_divergence(&self, coeffs: &[f64], cell: usize) -> f64 {
        self.local_field(coeffs, cell).divergence()
    }

    /// Edge-moment interpolant of `f`, integrated with `pieces` composite
    /// Gauss rules per edge.
    pub fn interpolate(&self, f: &dyn Fn(Point) -> [f64; 2], pieces: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for e in 0..self.mesh.num_facets() {
            let m = edge_moments(&self.mesh, e, f, pieces);
            out[2 * e] = m[0];
            out[2 * e + 1] = m[1];
        }
        out
    }

    /// Flags the dofs living on boundary facets.
    pub fn boundary_dofs(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dim()];
        for (e, f) in self.mesh.facets.iter().enumerate() {
            if f.is_boundary() {
                mask[2 * e] = true;
                mask[2 * e + 1] = true;
            }
        }
        mask
    }
}

/// Both edge moments of `f . n_e` on facet `e`.
fn edge_moments(mesh: &Mesh, e: usize, f: &dyn Fn(Point) -> [f64; 2], pieces: usize) -> [f64; 2] {
    let facet = &mesh.facets[e];
    let n = facet.normal;
    let pieces = pieces.max(1);
    let h = 1.0 / pieces as f64;
    let mut m = [0.0; 2];
    for k in 0..pieces {
        for (t, w) in facet_quadrature() {
            let s = (k as f64 + t) * h;
            let v = f(facet_point(mesh, e, s));
            let vn = v[0] * n[0] + v[1] * n[1];
            let q = moment_weights(s);
            let scale = w * h * facet.length;
            m[0] += scale * vn * q[0];
            m[1] += scale * vn * q[1];
        }
    }
    m
}

// Linear vector fields on the cell, in scaled coordinates around the centroid.
fn monomial(k: usize, d: [f64; 2], scale: f64) -> [f64; 2] {
    let (x, y) = (d[0] / scale, d[1] / scale);
    match k {
        0 => [1.0, 0.0],
        1 => [0.0, 1.0],
        2 => [x, 0.0],
        3 => [y, 0.0],
        4 => [0.0, x],
        _ => [0.0, y],
    }
}

fn cell_basis(mesh: &Mesh, cell: usize, centroid: Point) -> [BasisFunction; 6] {
    let scale = mesh.areas[cell].sqrt();
    // vandermonde[(dof, monomial)]
    let mut vandermonde = DenseMatrix::zeros(6, 6);
    for (k, &e) in mesh.cell_facets[cell].iter().enumerate() {
        let facet = &mesh.facets[e];
        for (s, w) in facet_quadrature() {
            let x = facet_point(mesh, e, s);
            let d = [x[0] - centroid[0], x[1] - centroid[1]];
            let q = moment_weights(s);
            for m in 0..6 {
                let p = monomial(m, d, scale);
                let pn = p[0] * facet.normal[0] + p[1] * facet.normal[1];
                for (r, qr) in q.iter().enumerate() {
                    vandermonde[(2 * k + r, m)] += w * facet.length * pn * qr;
                }
            }
        }
    }
    let lu = DenseLu::factor(&vandermonde).expect("BDM1 dof functionals are unisolvent on a valid cell");
    std::array::from_fn(|j| {
        let mut rhs = [0.0; 6];
        rhs[j] = 1.0;
        let c = lu.solve(&rhs);
        BasisFunction {
            value: [c[0], c[1]],
            gradient: [[c[2] / scale, c[3] / scale], [c[4] / scale, c[5] / scale]],
        }
    })
}

/// Piecewise-constant scalars, one dof per cell.
#[derive(Debug, Clone)]
pub struct Dg0Space {
    mesh: Arc<Mesh>,
}

impl Dg0Space {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        Self { mesh }
    }

    pub fn dim(&self) -> usize {
        self.mesh.num_cells()
    }

    /// Diagonal of the mass matrix.
    pub fn mass(&self) -> &[f64] {
        &self.mesh.areas
    }

    /// Cell averages of `f`.
    pub fn interpolate(&self, f: &dyn Fn(Point) -> f64) -> Vec<f64> {
        let quad = cell_quadrature(4).expect("supported degree");
        (0..self.dim())
            .map(|c| quad.iter().map(|(b, w)| 2.0 * w * f(map_point(&self.mesh, c, *b))).sum())
            .collect()
    }
}

/// Strongly imposed normal data plus the full boundary velocity, whose
/// tangential part enters weakly.
#[derive(Clone)]
pub struct BoundaryData {
    pub g: VelocityField,
    /// Per velocity dof: is it fixed by the normal boundary condition.
    pub constrained: Vec<bool>,
    /// Values of the constrained dofs; zero elsewhere.
    pub values: Vec<f64>,
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryData").field("constrained", &self.constrained.iter().filter(|c| **c).count()).finish()
    }
}

/// Subintervals per edge when integrating boundary data, which may only be
/// piecewise smooth.
pub const BOUNDARY_PIECES: usize = 24;

pub fn interpolate_boundary(g: VelocityField, space: &VelocitySpace) -> BoundaryData {
    let constrained = space.boundary_dofs();
    let mut values = vec![0.0; space.dim()];
    for (e, f) in space.mesh().facets.iter().enumerate() {
        if f.is_boundary() {
            let m = edge_moments(space.mesh(), e, g.as_ref(), BOUNDARY_PIECES);
            values[2 * e] = m[0];
            values[2 * e + 1] = m[1];
        }
    }
    BoundaryData { g, constrained, values }
}
