//! Field and table writers: legacy ASCII VTK, the iteration CSV and a JSON
//! manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use flowtopo::assembly::{IterateState, Problem};
use flowtopo::deflated_barrier::BranchArchive;
use serde::{Deserialize, Serialize};

/// Renders the cell fields of `state` as an unstructured-grid VTK file.
/// Scalars are printed with the shortest representation that parses back to
/// the same `f64`, so [`read_cell_scalar`] recovers them exactly.
pub fn vtk_string(problem: &Problem, state: &IterateState, title: &str) -> String {
    let mesh = problem.mesh();
    let space = problem.velocity_space();
    let (nv, nc) = (mesh.num_vertices(), mesh.num_cells());
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {nv} double");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} 0", v[0], v[1]);
    }
    let _ = writeln!(s, "CELLS {nc} {}", 4 * nc);
    for c in &mesh.cells {
        let _ = writeln!(s, "3 {} {} {}", c[0], c[1], c[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nc}");
    for _ in 0..nc {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "CELL_DATA {nc}");
    for (name, values) in [("rho", &state.rho), ("p", &state.p)] {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for v in values.iter() {
            let _ = writeln!(s, "{v}");
        }
    }
    // Velocity averaged over the facet midpoints of each cell.
    let _ = writeln!(s, "VECTORS u double");
    for c in 0..nc {
        let mut avg = [0.0; 2];
        for &f in &mesh.cell_facets[c] {
            let v = space.eval(&state.u, c, mesh.facets[f].midpoint(mesh));
            avg[0] += v[0] / 3.0;
            avg[1] += v[1] / 3.0;
        }
        let _ = writeln!(s, "{} {} 0", avg[0], avg[1]);
    }
    s
}

pub fn write_vtk(path: &Path, problem: &Problem, state: &IterateState, title: &str) -> Result<()> {
    fs::write(path, vtk_string(problem, state, title)).with_context(|| format!("writing {}", path.display()))
}

/// Reads back the cell scalar `name` from a file produced by [`vtk_string`].
pub fn read_cell_scalar(text: &str, name: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    let count: usize = lines
        .find_map(|l| l.strip_prefix("CELL_DATA "))
        .ok_or_else(|| anyhow!("no CELL_DATA section"))?
        .trim()
        .parse()?;
    let header = format!("SCALARS {name} ");
    lines.find(|l| l.starts_with(&header)).ok_or_else(|| anyhow!("no cell scalar {name:?}"))?;
    if lines.next().map(str::trim) != Some("LOOKUP_TABLE default") {
        bail!("missing lookup table for {name:?}");
    }
    lines.take(count).map(|l| l.trim().parse::<f64>().map_err(Into::into)).collect::<Result<Vec<_>>>().and_then(
        |v| {
            if v.len() == count {
                Ok(v)
            } else {
                Err(anyhow!("{name:?} has {} of {count} values", v.len()))
            }
        },
    )
}

/// One row of the iteration table: a converged subproblem on one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub branch: usize,
    pub mu: f64,
    pub bm_iters: usize,
    pub outer_krylov: usize,
    pub inner_krylov: usize,
    pub residual: f64,
}

pub fn iteration_rows(archive: &BranchArchive) -> Vec<IterationRow> {
    archive
        .branches
        .iter()
        .flat_map(|b| {
            b.history.iter().map(move |e| IterationRow {
                branch: b.id,
                mu: e.mu,
                bm_iters: e.bm_iterations,
                outer_krylov: e.outer_iterations,
                inner_krylov: e.inner_iterations,
                residual: e.residual,
            })
        })
        .collect()
}

pub fn iteration_csv(rows: &[IterationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn read_iteration_csv(text: &str) -> Result<Vec<IterationRow>> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().map(|r| r.map_err(Into::into)).collect()
}
