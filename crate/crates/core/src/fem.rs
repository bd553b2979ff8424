//! Piecewise-linear finite elements for the quasi-static potential
//! `-div(sigma grad u) = -div(J)` with an insulated outer boundary, and the
//! lead fields built from it.
//!
//! Lead fields are computed by reciprocity. For every electrode `k` the
//! transfer row `u_k = K^+ b_k` is solved once, where `b_k` is the
//! average-referenced indicator load of that electrode. The average-referenced
//! potential of any source load `f` at electrode `k` is then `u_k . f`.
//!
//! Dipoles are turned into nodal loads either by partial integration
//! (`q . grad(phi_j)(x0)`, area-averaged over the elements touching `x0`) or,
//! by default, by a moment-matching load on the surrounding nodes; see
//! [`DipoleModel`].

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};
use crate::headmesh::{signed_area, Compartment, Mesh, Point, SourceSpace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conductivity {
    pub brain: f64,
    pub skull: f64,
    pub scalp: f64,
}

impl Conductivity {
    pub fn new(brain: f64, skull: f64, scalp: f64) -> Result<Self> {
        let c = Self { brain, skull, scalp };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("brain", self.brain), ("skull", self.skull), ("scalp", self.scalp)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Input(format!("{name} conductivity must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_skull(self, skull: f64) -> Self {
        Self { skull, ..self }
    }

    pub fn of(&self, c: Compartment) -> f64 {
        match c {
            Compartment::Brain => self.brain,
            Compartment::Skull => self.skull,
            Compartment::Scalp => self.scalp,
        }
    }
}

/// P1 basis gradients of a triangle and its signed area.
pub fn element_gradients(p: [Point; 3]) -> ([[f64; 2]; 3], f64) {
    let area = signed_area(p[0], p[1], p[2]);
    let mut g = [[0.0; 2]; 3];
    for a in 0..3 {
        let b = (a + 1) % 3;
        let c = (a + 2) % 3;
        g[a] = [(p[b][1] - p[c][1]) / (2.0 * area), (p[c][0] - p[b][0]) / (2.0 * area)];
    }
    (g, area)
}

/// `sigma * area * grad(phi_a) . grad(phi_b)`.
pub fn local_stiffness(p: [Point; 3], sigma: f64) -> Option<[[f64; 3]; 3]> {
    let (g, area) = element_gradients(p);
    if !(area > 0.0) {
        return None;
    }
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            k[a][b] = sigma * area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
        }
    }
    Some(k)
}

fn triangle_points(mesh: &Mesh, t: usize) -> [Point; 3] {
    let [a, b, c] = mesh.triangles[t];
    [mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]]
}

fn assemble_triplets(mesh: &Mesh, cond: &Conductivity, ground: Option<usize>) -> Result<CsMat<f64>> {
    cond.validate()?;
    let n = mesh.node_count();
    let index = |i: usize| -> Option<usize> {
        match ground {
            Some(g) if i == g => None,
            Some(g) if i > g => Some(i - 1),
            _ => Some(i),
        }
    };
    let dim = if ground.is_some() { n - 1 } else { n };
    let mut tri = TriMat::with_capacity((dim, dim), 9 * mesh.triangles.len());
    for (t, nodes) in mesh.triangles.iter().enumerate() {
        let sigma = cond.of(mesh.compartments[t]);
        let p = triangle_points(mesh, t);
        let k = local_stiffness(p, sigma).ok_or(Error::DegenerateElement {
            element: t,
            area: signed_area(p[0], p[1], p[2]),
        })?;
        for a in 0..3 {
            let Some(i) = index(nodes[a]) else { continue };
            for b in 0..3 {
                let Some(j) = index(nodes[b]) else { continue };
                tri.add_triplet(i, j, k[a][b]);
            }
        }
    }
    Ok(tri.to_csr())
}

/// Global stiffness matrix `K_ij = sum_e sigma_e int grad(phi_i) . grad(phi_j)`.
/// Singular: constants span its null space.
pub fn assemble_stiffness(mesh: &Mesh, cond: &Conductivity) -> Result<CsMat<f64>> {
    assemble_triplets(mesh, cond, None)
}

/// Rows are the reciprocal potential fields of the average-referenced
/// electrode loads, each shifted to zero mean over the mesh nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub matrix: DMatrix<f64>,
    pub electrodes: Vec<usize>,
}

/// Average-referenced indicator load of electrode `k`: `1 - 1/m` at the
/// electrode and `-1/m` at the others.
pub fn electrode_load(node_count: usize, electrodes: &[usize], k: usize) -> DVector<f64> {
    let m = electrodes.len() as f64;
    let mut b = DVector::zeros(node_count);
    for &e in electrodes {
        b[e] = -1.0 / m;
    }
    b[electrodes[k]] += 1.0;
    b
}

/// Factorization of the stiffness matrix with one node grounded.
struct GroundedSolver {
    ground: usize,
    ldl: LdlNumeric<f64, usize>,
    n: usize,
}

impl GroundedSolver {
    fn new(k: &CsMat<f64>, ground: usize) -> Result<Self> {
        let n = k.rows();
        let keep: Vec<usize> = (0..n).filter(|&i| i != ground).collect();
        let mut tri = TriMat::with_capacity((n - 1, n - 1), k.nnz());
        for (row_pos, &i) in keep.iter().enumerate() {
            let row = k.outer_view(i).expect("row in range");
            for (j, &v) in row.iter() {
                if j == ground {
                    continue;
                }
                let col = if j > ground { j - 1 } else { j };
                tri.add_triplet(row_pos, col, v);
            }
        }
        let reduced: CsMat<f64> = tri.to_csr();
        Self::from_reduced(&reduced, ground)
    }

    fn from_reduced(reduced: &CsMat<f64>, ground: usize) -> Result<Self> {
        let ldl = Ldl::new()
            .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .numeric(reduced.view())
            .map_err(|e| Error::Numerical(format!("stiffness factorization failed: {e:?}")))?;
        Ok(Self {
            ground,
            ldl,
            n: reduced.rows() + 1,
        })
    }

    /// Solves `K u = b` for a zero-sum `b`; returns the zero-mean solution.
    fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs: Vec<f64> = (0..self.n).filter(|&i| i != self.ground).map(|i| b[i]).collect();
        let x: Vec<f64> = self.ldl.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite potential after grounded solve".into()));
        }
        let mut u = DVector::zeros(self.n);
        let mut it = x.into_iter();
        for i in 0..self.n {
            if i != self.ground {
                u[i] = it.next().expect("reduced solution length");
            }
        }
        let mean = u.mean();
        u.add_scalar_mut(-mean);
        Ok(u)
    }
}

fn ground_node(n: usize, electrodes: &[usize]) -> usize {
    (0..n)
        .find(|i| !electrodes.contains(i))
        .expect("mesh has non-electrode nodes")
}

fn validate_electrodes(n: usize, electrodes: &[usize]) -> Result<()> {
    if electrodes.len() < 2 {
        return Err(Error::Input("at least two electrodes are required".into()));
    }
    for (k, &e) in electrodes.iter().enumerate() {
        if e >= n {
            return Err(Error::Input(format!("electrode node {e} out of range")));
        }
        if electrodes[..k].contains(&e) {
            return Err(Error::Input(format!("electrode node {e} listed twice")));
        }
    }
    Ok(())
}

pub fn compute_transfer_matrix(k: &CsMat<f64>, electrodes: &[usize]) -> Result<TransferMatrix> {
    let n = k.rows();
    validate_electrodes(n, electrodes)?;
    let solver = GroundedSolver::new(k, ground_node(n, electrodes))?;
    transfer_from_solver(&solver, electrodes)
}

fn transfer_from_solver(solver: &GroundedSolver, electrodes: &[usize]) -> Result<TransferMatrix> {
    let m = electrodes.len();
    let mut matrix = DMatrix::zeros(m, solver.n);
    for k in 0..m {
        let u = solver.solve(&electrode_load(solver.n, electrodes, k))?;
        matrix.set_row(k, &u.transpose());
    }
    Ok(TransferMatrix {
        matrix,
        electrodes: electrodes.to_vec(),
    })
}

/// How a point dipole is turned into a nodal load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DipoleModel {
    /// `q . grad(phi_j)(x0)`: exact dipole moment, but the load carries an
    /// O(h) quadrupole moment.
    PartialIntegration,
    /// Minimum-norm load on the nodes around `x0` whose monopole and
    /// quadrupole moments vanish and whose dipole moment is exactly `q`.
    #[default]
    Venant,
}

/// Node weights of a unit dipole: the load of moment `q` is
/// `sum_j (q . w_j) e_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleStencil {
    pub entries: Vec<(usize, [f64; 2])>,
}

/// Triangles incident to each node.
fn node_elements(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); mesh.node_count()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &a in tri {
            out[a].push(t);
        }
    }
    out
}

fn containing_elements(mesh: &Mesh, p: Point) -> Vec<usize> {
    let tol = 1e-10;
    (0..mesh.triangles.len())
        .filter(|&t| {
            let pts = triangle_points(mesh, t);
            let area = signed_area(pts[0], pts[1], pts[2]);
            // Barycentric coordinates via sub-triangle areas.
            let l0 = signed_area(p, pts[1], pts[2]) / area;
            let l1 = signed_area(pts[0], p, pts[2]) / area;
            let l2 = signed_area(pts[0], pts[1], p) / area;
            l0 >= -tol && l1 >= -tol && l2 >= -tol
        })
        .collect()
}

impl DipoleStencil {
    pub fn at(mesh: &Mesh, p: Point, model: DipoleModel) -> Result<Self> {
        Self::with_topology(mesh, &node_elements(mesh), p, model)
    }

    fn with_topology(mesh: &Mesh, incident: &[Vec<usize>], p: Point, model: DipoleModel) -> Result<Self> {
        let elements = containing_elements(mesh, p);
        if elements.is_empty() {
            return Err(Error::SourceOutsideMesh { x: p[0], y: p[1] });
        }
        match model {
            DipoleModel::PartialIntegration => Ok(Self::partial_integration(mesh, &elements)),
            DipoleModel::Venant => Ok(Self::venant(mesh, incident, &elements, p)
                .unwrap_or_else(|| Self::partial_integration(mesh, &elements))),
        }
    }

    /// Area-weighted average of basis gradients over the given elements.
    fn partial_integration(mesh: &Mesh, elements: &[usize]) -> Self {
        let mut acc: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
        let mut weight = 0.0;
        for &t in elements {
            let pts = triangle_points(mesh, t);
            let (g, area) = element_gradients(pts);
            for a in 0..3 {
                let w = acc.entry(mesh.triangles[t][a]).or_insert([0.0, 0.0]);
                w[0] += area * g[a][0];
                w[1] += area * g[a][1];
            }
            weight += area;
        }
        Self {
            entries: acc
                .into_iter()
                .map(|(j, w)| (j, [w[0] / weight, w[1] / weight]))
                .collect(),
        }
    }

    /// Moment-matching load on the element nodes and their neighbours.
    /// `None` when too few usable nodes exist.
    fn venant(mesh: &Mesh, incident: &[Vec<usize>], elements: &[usize], p: Point) -> Option<Self> {
        let compartment = mesh.compartments[elements[0]];
        let mut candidates = std::collections::BTreeSet::new();
        for &t in elements {
            for &a in &mesh.triangles[t] {
                for &u in &incident[a] {
                    candidates.extend(mesh.triangles[u]);
                }
            }
        }
        // Prefer nodes strictly inside the source compartment; next to an
        // interface, also admit nodes lying on it.
        let inside: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| incident[j].iter().all(|&t| mesh.compartments[t] == compartment))
            .collect();
        let nodes = if inside.len() >= 8 {
            inside
        } else {
            candidates
                .into_iter()
                .filter(|&j| incident[j].iter().any(|&t| mesh.compartments[t] == compartment))
                .collect()
        };
        if nodes.len() < 8 {
            return None;
        }
        let h = nodes
            .iter()
            .map(|&j| (mesh.nodes[j][0] - p[0]).hypot(mesh.nodes[j][1] - p[1]))
            .fold(0.0, f64::max);
        // Constraint rows: monopole, dipole (x, y), quadrupole (xx, xy, yy),
        // in coordinates scaled by h.
        let k = nodes.len();
        let mut moments = DMatrix::zeros(6, k);
        let mut inv_weight = DVector::zeros(k);
        for (c, &j) in nodes.iter().enumerate() {
            let dx = (mesh.nodes[j][0] - p[0]) / h;
            let dy = (mesh.nodes[j][1] - p[1]) / h;
            for (r, v) in [1.0, dx, dy, dx * dx, dx * dy, dy * dy].into_iter().enumerate() {
                moments[(r, c)] = v;
            }
            inv_weight[c] = 1.0 / (1.0 + dx * dx + dy * dy);
        }
        // b = W^-1 M^T (M W^-1 M^T)^-1 c for c = e_x / h and e_y / h.
        let mw = &moments * DMatrix::from_diagonal(&inv_weight);
        let gram = &mw * moments.transpose();
        let chol = gram.cholesky()?;
        let mut targets = DMatrix::zeros(6, 2);
        targets[(1, 0)] = 1.0 / h;
        targets[(2, 1)] = 1.0 / h;
        let loads = mw.transpose() * chol.solve(&targets);
        if loads.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self {
            entries: nodes
                .iter()
                .enumerate()
                .map(|(c, &j)| (j, [loads[(c, 0)], loads[(c, 1)]]))
                .collect(),
        })
    }

    pub fn load(&self, node_count: usize, moment: [f64; 2]) -> DVector<f64> {
        let mut b = DVector::zeros(node_count);
        for &(j, w) in &self.entries {
            b[j] += moment[0] * w[0] + moment[1] * w[1];
        }
        b
    }
}

/// Lead field `A` (m x 2n): columns `2i` and `2i+1` are the electrode
/// potentials of unit x- and y-moments at source `i`, average referenced.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadField {
    pub matrix: DMatrix<f64>,
    pub electrodes: Vec<usize>,
    pub source_nodes: Vec<usize>,
    pub source_positions: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dipole {
    pub location: usize,
    pub moment: [f64; 2],
}

const LEADFIELD_MAGIC: &[u8; 8] = b"SKBAE-LF";
const LEADFIELD_VERSION: u32 = 1;

impl LeadField {
    pub fn electrode_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn source_count(&self) -> usize {
        self.matrix.ncols() / 2
    }

    /// The m x 2 block of source `i`.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        self.matrix.columns(2 * i, 2).clone_owned()
    }

    /// Potentials of a unit dipole at source `i` pointing along `dir`.
    pub fn oriented_response(&self, i: usize, dir: [f64; 2]) -> DVector<f64> {
        self.matrix.column(2 * i) * dir[0] + self.matrix.column(2 * i + 1) * dir[1]
    }

    /// Binary layout, all integers and floats little-endian:
    ///
    /// ```text
    /// offset  size        field
    /// 0       8           magic "SKBAE-LF"
    /// 8       4           version (u32) = 1
    /// 12      4           m, electrode count (u32)
    /// 16      8           n, source count (u64)
    /// 24      8*m*2n      matrix, row-major f64
    /// ...     8*m         electrode node indices (u64)
    /// ...     8*n         source node indices (u64)
    /// ...     16*n        source positions, x then y (f64)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.electrode_count();
        let n = self.source_count();
        let mut out = Vec::with_capacity(24 + 8 * (2 * m * n + m + 3 * n));
        out.extend_from_slice(LEADFIELD_MAGIC);
        out.extend_from_slice(&LEADFIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for r in 0..m {
            for c in 0..2 * n {
                out.extend_from_slice(&self.matrix[(r, c)].to_le_bytes());
            }
        }
        for &e in &self.electrodes {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &s in &self.source_nodes {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for p in &self.source_positions {
            out.extend_from_slice(&p[0].to_le_bytes());
            out.extend_from_slice(&p[1].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(8)? != LEADFIELD_MAGIC {
            return Err(Error::format(path, "not a lead-field file (bad magic)"));
        }
        let version = r.u32()?;
        if version != LEADFIELD_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: LEADFIELD_VERSION,
            });
        }
        let m = r.u32()? as usize;
        let n = r.u64()? as usize;
        let expected = 24 + 8 * (2 * m * n + m + 3 * n);
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for m={m}, n={n}, found {}", bytes.len()),
            ));
        }
        let mut matrix = DMatrix::zeros(m, 2 * n);
        for row in 0..m {
            for col in 0..2 * n {
                matrix[(row, col)] = r.f64()?;
            }
        }
        let electrodes = (0..m).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let source_nodes = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let source_positions = (0..n).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<_>>()?;
        Ok(Self {
            matrix,
            electrodes,
            source_nodes,
            source_positions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized lead field, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn seek(&mut self, pos: usize) {
        self.pos = pos;
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Everything about a (mesh, electrodes, source positions) triple that does
/// not depend on conductivity.
#[derive(Clone, Debug)]
pub struct LeadFieldBuilder {
    mesh: Mesh,
    electrodes: Vec<usize>,
    stencils: Vec<DipoleStencil>,
    source_nodes: Vec<usize>,
    source_positions: Vec<Point>,
    ground: usize,
}

impl LeadFieldBuilder {
    /// `sources` may come from a different mesh: positions are located in
    /// `mesh` and `sources.nodes` is kept only as the source map.
    pub fn new(mesh: &Mesh, electrodes: &[usize], sources: &SourceSpace) -> Result<Self> {
        Self::with_model(mesh, electrodes, sources, DipoleModel::default())
    }

    pub fn with_model(mesh: &Mesh, electrodes: &[usize], sources: &SourceSpace, model: DipoleModel) -> Result<Self> {
        validate_electrodes(mesh.node_count(), electrodes)?;
        let incident = node_elements(mesh);
        let stencils = sources
            .positions
            .iter()
            .map(|&p| DipoleStencil::with_topology(mesh, &incident, p, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mesh: mesh.clone(),
            electrodes: electrodes.to_vec(),
            stencils,
            source_nodes: sources.nodes.clone(),
            source_positions: sources.positions.clone(),
            ground: ground_node(mesh.node_count(), electrodes),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn electrodes(&self) -> &[usize] {
        &self.electrodes
    }

    fn solver(&self, cond: &Conductivity) -> Result<GroundedSolver> {
        let reduced = assemble_triplets(&self.mesh, cond, Some(self.ground))?;
        GroundedSolver::from_reduced(&reduced, self.ground)
    }

    pub fn transfer(&self, cond: &Conductivity) -> Result<TransferMatrix> {
        transfer_from_solver(&self.solver(cond)?, &self.electrodes)
    }

    pub fn build(&self, cond: &Conductivity) -> Result<LeadField> {
        let t = self.transfer(cond)?;
        Ok(self.from_transfer(&t))
    }

    pub fn from_transfer(&self, t: &TransferMatrix) -> LeadField {
        let m = self.electrodes.len();
        let n = self.stencils.len();
        let mut matrix = DMatrix::zeros(m, 2 * n);
        for (i, stencil) in self.stencils.iter().enumerate() {
            for k in 0..m {
                let (mut x, mut y) = (0.0, 0.0);
                for &(j, w) in &stencil.entries {
                    let u = t.matrix[(k, j)];
                    x += u * w[0];
                    y += u * w[1];
                }
                matrix[(k, 2 * i)] = x;
                matrix[(k, 2 * i + 1)] = y;
            }
        }
        for mut col in matrix.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        LeadField {
            matrix,
            electrodes: self.electrodes.clone(),
            source_nodes: self.source_nodes.clone(),
            source_positions: self.source_positions.clone(),
        }
    }

    /// Average-referenced electrode potentials of one dipole by a direct
    /// volume solve, bypassing the transfer matrix.
    pub fn direct_potentials(&self, cond: &Conductivity, source: usize, moment: [f64; 2]) -> Result<DVector<f64>> {
        let solver = self.solver(cond)?;
        let b = self.stencils[source].load(self.mesh.node_count(), moment);
        let u = solver.solve(&b)?;
        let mut v = DVector::from_iterator(self.electrodes.len(), self.electrodes.iter().map(|&e| u[e]));
        crate::linalg::average_reference(&mut v);
        Ok(v)
    }
}

pub fn build_lead_field(
    mesh: &Mesh,
    cond: &Conductivity,
    sources: &SourceSpace,
    electrodes: &[usize],
) -> Result<LeadField> {
    LeadFieldBuilder::new(mesh, electrodes, sources)?.build(cond)
}

pub fn forward_map(lead_field: &LeadField, dipole: &Dipole) -> Result<DVector<f64>> {
    if dipole.location >= lead_field.source_count() {
        return Err(Error::Dimension(format!(
            "dipole location {} outside source space of size {}",
            dipole.location,
            lead_field.source_count()
        )));
    }
    Ok(lead_field.oriented_response(dipole.location, dipole.moment))
}
