//! Structured triangulations of rectangles and their uniform refinements.
//!
//! Cells are counter-clockwise vertex triples. Local facet `k` of a cell is the
//! edge opposite local vertex `k`. Every facet carries a fixed unit normal:
//! the outward normal on the boundary, and on interior facets the outward
//! normal of the lower-indexed adjacent cell.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// A mesh edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    /// Endpoint vertex indices, lower index first.
    pub vertices: [usize; 2],
    /// Adjacent cells; the first is the lower-indexed one.
    pub cells: (usize, Option<usize>),
    /// Fixed unit normal `n_F`.
    pub normal: [f64; 2],
    /// Facet diameter `h_F`.
    pub length: f64,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.cells.1.is_none()
    }

    pub fn midpoint(&self, mesh: &Mesh) -> Point {
        let a = mesh.vertices[self.vertices[0]];
        let b = mesh.vertices[self.vertices[1]];
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }
}

/// Conforming triangulation with facet classification and vertex stars.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    /// Global facet index of each local facet of each cell.
    pub cell_facets: Vec<[usize; 3]>,
    pub areas: Vec<f64>,
    vertex_cells: Vec<Vec<usize>>,
    vertex_facets: Vec<Vec<usize>>,
}

impl Mesh {
    /// Builds the facet topology of a triangulation given by vertices and
    /// counter-clockwise cells.
    pub fn from_cells(vertices: Vec<Point>, cells: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        let mut areas = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            if cell.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidArgument(format!("cell {c} references a missing vertex")));
            }
            let area = signed_area(vertices[cell[0]], vertices[cell[1]], vertices[cell[2]]);
            if area <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cell {c} is degenerate or clockwise (signed area {area:e})"
                )));
            }
            areas.push(area);
        }

        let mut edge_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut facets: Vec<Facet> = Vec::new();
        let mut cell_facets = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let mut local = [0usize; 3];
            for (k, slot) in local.iter_mut().enumerate() {
                let a = cell[(k + 1) % 3];
                let b = cell[(k + 2) % 3];
                let key = (a.min(b), a.max(b));
                let idx = match edge_index.get(&key) {
                    Some(&idx) => {
                        let facet = &mut facets[idx];
                        if facet.cells.1.is_some() {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({}, {}) shared by more than two cells",
                                key.0, key.1
                            )));
                        }
                        facet.cells.1 = Some(c);
                        idx
                    }
                    None => {
                        let idx = facets.len();
                        let pa = vertices[key.0];
                        let pb = vertices[key.1];
                        let t = [pb[0] - pa[0], pb[1] - pa[1]];
                        let length = t[0].hypot(t[1]);
                        let mut normal = [t[1] / length, -t[0] / length];
                        let opp = vertices[cell[k]];
                        if normal[0] * (opp[0] - pa[0]) + normal[1] * (opp[1] - pa[1]) > 0.0 {
                            normal = [-normal[0], -normal[1]];
                        }
                        facets.push(Facet { vertices: [key.0, key.1], cells: (c, None), normal, length });
                        edge_index.insert(key, idx);
                        idx
                    }
                };
                *slot = idx;
            }
            cell_facets.push(local);
        }

        let mut vertex_cells = vec![Vec::new(); nv];
        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                vertex_cells[v].push(c);
            }
        }
        let mut vertex_facets = vec![Vec::new(); nv];
        for (f, facet) in facets.iter().enumerate() {
            vertex_facets[facet.vertices[0]].push(f);
            vertex_facets[facet.vertices[1]].push(f);
        }

        Ok(Self { vertices, cells, facets, cell_facets, areas, vertex_cells, vertex_facets })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn num_boundary_facets(&self) -> usize {
        self.facets.iter().filter(|f| f.is_boundary()).count()
    }

    pub fn cell_vertices(&self, cell: usize) -> [Point; 3] {
        let c = self.cells[cell];
        [self.vertices[c[0]], self.vertices[c[1]], self.vertices[c[2]]]
    }

    pub fn centroid(&self, cell: usize) -> Point {
        let [a, b, c] = self.cell_vertices(cell);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Outward unit normal of `cell` on `facet`.
    pub fn outward_normal(&self, cell: usize, facet: usize) -> [f64; 2] {
        let f = &self.facets[facet];
        if f.cells.0 == cell {
            f.normal
        } else {
            [-f.normal[0], -f.normal[1]]
        }
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// First cell containing `x`, up to a relative tolerance on the
    /// barycentric coordinates. Linear scan.
    pub fn locate(&self, x: Point) -> Option<usize> {
        (0..self.num_cells()).find(|&c| {
            let [a, b, d] = self.cell_vertices(c);
            let tol = 1e-12 * self.areas[c];
            signed_area(x, b, d) >= -tol && signed_area(a, x, d) >= -tol && signed_area(a, b, x) >= -tol
        })
    }

    /// Cells incident to `vertex`.
    pub fn vertex_star_cells(&self, vertex: usize) -> Result<&[usize]> {
        self.vertex_cells
            .get(vertex)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("vertex {vertex} out of range")))
    }

    /// Facets incident to `vertex`.
    pub fn vertex_star_facets(&self, vertex: usize) -> Result<&[usize]> {
        self.vertex_facets
            .get(vertex)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("vertex {vertex} out of range")))
    }
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Triangulates `[0, width] x [0, height]` with `nx * ny` quads, each split
/// along its lower-left to upper-right diagonal.
pub fn build_rect_mesh(width: f64, height: f64, nx: usize, ny: usize) -> Result<Mesh> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::InvalidArgument(format!("rectangle {width} x {height} must have positive size")));
    }
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!("grid {nx} x {ny} must have at least one cell per side")));
    }
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            cells.push([v00, v10, v11]);
            cells.push([v00, v11, v01]);
        }
    }
    Mesh::from_cells(vertices, cells)
}

/// Red refinement: every triangle is split into four congruent children
/// through its edge midpoints. Returns the fine mesh and, for every fine
/// cell, its coarse parent.
///
/// Coarse vertices keep their indices; the midpoint of coarse facet `e`
/// becomes fine vertex `num_vertices + e`.
pub fn refine_uniform(mesh: &Mesh) -> (Mesh, Vec<usize>) {
    let nv = mesh.num_vertices();
    let mut vertices = mesh.vertices.clone();
    vertices.extend(mesh.facets.iter().map(|f| f.midpoint(mesh)));
    let mut cells = Vec::with_capacity(4 * mesh.num_cells());
    let mut parent = Vec::with_capacity(4 * mesh.num_cells());
    for (c, cell) in mesh.cells.iter().enumerate() {
        let [a, b, d] = *cell;
        let lf = mesh.cell_facets[c];
        // local facet k is opposite local vertex k
        let m_bd = nv + lf[0];
        let m_da = nv + lf[1];
        let m_ab = nv + lf[2];
        cells.push([a, m_ab, m_da]);
        cells.push([m_ab, b, m_bd]);
        cells.push([m_da, m_bd, d]);
        cells.push([m_bd, m_da, m_ab]);
        parent.extend([c; 4]);
    }
    let fine = Mesh::from_cells(vertices, cells).expect("refinement of a valid mesh is valid");
    (fine, parent)
}

/// Nested sequence of meshes, coarse to fine.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    pub levels: Vec<Arc<Mesh>>,
    /// `parent_maps[l][f]` is the level-`l` parent of level-`l+1` cell `f`.
    pub parent_maps: Vec<Vec<usize>>,
}

impl MeshHierarchy {
    pub const CHILDREN_PER_PARENT: usize = 4;

    pub fn new(coarse: Mesh, refinements: usize) -> Self {
        let mut levels = vec![Arc::new(coarse)];
        let mut parent_maps = Vec::with_capacity(refinements);
        for _ in 0..refinements {
            let (fine, parent) = refine_uniform(levels.last().expect("non-empty"));
            levels.push(Arc::new(fine));
            parent_maps.push(parent);
        }
        Self { levels, parent_maps }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &Arc<Mesh> {
        self.levels.last().expect("non-empty hierarchy")
    }

    /// Children of each level-`level` cell in level `level + 1`.
    pub fn children(&self, level: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::with_capacity(Self::CHILDREN_PER_PARENT); self.levels[level].num_cells()];
        for (f, &p) in self.parent_maps[level].iter().enumerate() {
            out[p].push(f);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(m: &Mesh) -> (usize, usize, usize, usize, usize) {
        let nb = m.num_boundary_facets();
        (m.num_cells(), m.num_facets(), m.num_vertices(), nb, m.num_facets() - nb)
    }

    #[test]
    fn locate_finds_the_enclosing_cell() {
        let m = build_rect_mesh(1.5, 1.0, 6, 4).unwrap();
        for c in 0..m.num_cells() {
            let x = m.centroid(c);
            assert_eq!(m.locate(x), Some(c));
        }
        assert!(m.locate([0.0, 0.0]).is_some());
        assert_eq!(m.locate([1.6, 0.5]), None);
    }

    #[test]
    fn single_quad_counts() {
        let m = build_rect_mesh(1.0, 1.0, 1, 1).unwrap();
        assert_eq!(counts(&m), (2, 5, 4, 4, 1));
    }

    #[test]
    fn two_by_two_counts_satisfy_euler() {
        let m = build_rect_mesh(1.0, 1.0, 2, 2).unwrap();
        assert_eq!(counts(&m), (8, 16, 9, 8, 8));
        assert_eq!(m.num_vertices() as i64 - m.num_facets() as i64 + m.num_cells() as i64, 1);
    }

    #[test]
    fn cell_areas_on_stretched_grid() {
        let m = build_rect_mesh(1.5, 1.0, 3, 2).unwrap();
        assert_eq!(m.num_cells(), 12);
        for a in &m.areas {
            assert!((a - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(build_rect_mesh(0.0, 1.0, 1, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_rect_mesh(1.0, -1.0, 1, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_rect_mesh(1.0, 1.0, 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn facet_classification_and_normals() {
        let m = build_rect_mesh(1.5, 1.0, 3, 2).unwrap();
        for f in &m.facets {
            assert!(f.length > 0.0);
            let mid = f.midpoint(&m);
            match f.cells {
                (c, None) => {
                    let cen = m.centroid(c);
                    let d = f.normal[0] * (mid[0] - cen[0]) + f.normal[1] * (mid[1] - cen[1]);
                    assert!(d > 0.0, "boundary normal must point outward");
                }
                (lo, Some(hi)) => {
                    assert!(lo < hi);
                    let a = m.centroid(lo);
                    let b = m.centroid(hi);
                    let d = f.normal[0] * (b[0] - a[0]) + f.normal[1] * (b[1] - a[1]);
                    assert!(d > 0.0, "interior normal must point from lower to higher cell");
                }
            }
        }
    }

    #[test]
    fn vertex_star_sizes() {
        let m = build_rect_mesh(1.0, 1.0, 1, 1).unwrap();
        // lower-left and upper-right corners lie on the diagonal
        assert_eq!(m.vertex_star_cells(0).unwrap().len(), 2);
        assert_eq!(m.vertex_star_cells(1).unwrap().len(), 1);
        assert_eq!(m.vertex_star_cells(2).unwrap().len(), 1);
        assert_eq!(m.vertex_star_cells(3).unwrap().len(), 2);
        assert!(m.vertex_star_cells(4).is_err());

        let m = build_rect_mesh(1.0, 1.0, 4, 4).unwrap();
        let id = |i: usize, j: usize| j * 5 + i;
        assert_eq!(m.vertex_star_cells(id(2, 2)).unwrap().len(), 6);
        assert_eq!(m.vertex_star_cells(id(2, 0)).unwrap().len(), 3);
        assert_eq!(m.vertex_star_cells(id(0, 2)).unwrap().len(), 3);
        assert_eq!(m.vertex_star_cells(id(4, 1)).unwrap().len(), 3);
        assert_eq!(m.vertex_star_facets(id(2, 2)).unwrap().len(), 6);
    }

    #[test]
    fn refinement_structure() {
        let m = build_rect_mesh(1.0, 1.0, 1, 1).unwrap();
        let (fine, parent) = refine_uniform(&m);
        assert_eq!(fine.num_cells(), 8);
        let mut count = vec![0; m.num_cells()];
        for (f, &p) in parent.iter().enumerate() {
            count[p] += 1;
            assert!((fine.areas[f] - m.areas[p] / 4.0).abs() < 1e-15);
        }
        assert!(count.iter().all(|&c| c == 4));

        let m = build_rect_mesh(1.0, 1.0, 2, 2).unwrap();
        let (fine, _) = refine_uniform(&m);
        assert_eq!(fine.num_cells(), 32);
        for (v, p) in m.vertices.iter().enumerate() {
            assert_eq!(fine.vertices[v], *p);
        }
        for f in m.facets.iter().filter(|f| !f.is_boundary()) {
            let mid = f.midpoint(&m);
            assert!(fine.vertices.iter().any(|q| (q[0] - mid[0]).abs() < 1e-15 && (q[1] - mid[1]).abs() < 1e-15));
        }
    }

    #[test]
    fn refinement_reproduces_structured_mesh_geometry() {
        let coarse = build_rect_mesh(1.5, 1.0, 3, 2).unwrap();
        let (fine, _) = refine_uniform(&coarse);
        let direct = build_rect_mesh(1.5, 1.0, 6, 4).unwrap();
        assert_eq!(fine.num_facets(), direct.num_facets());
        assert_eq!(fine.num_vertices(), direct.num_vertices());
        assert!((fine.total_area() - 1.5).abs() < 1e-14);
    }

    #[test]
    fn hierarchy_children() {
        let h = MeshHierarchy::new(build_rect_mesh(1.0, 1.0, 2, 1).unwrap(), 2);
        assert_eq!(h.num_levels(), 3);
        assert_eq!(h.finest().num_cells(), 4 * 4 * 4);
        for level in 0..2 {
            assert!(h.children(level).iter().all(|c| c.len() == MeshHierarchy::CHILDREN_PER_PARENT));
        }
    }
}
