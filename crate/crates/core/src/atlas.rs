//! Deformable tetrahedral probabilistic atlas.
//!
//! Each tetrahedron carries a hyperelastic deformation penalty relative to a
//! reference configuration; label probabilities live on the nodes and are
//! interpolated barycentrically onto voxel centres. Node coordinates are in
//! voxel units: voxel `(x, y, z)` has its centre at `(x, y, z)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volio::VoxelGrid;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Barycentric coordinates at least this negative still count as inside.
pub const INSIDE_TOLERANCE: f64 = 1e-9;

/// Node coordinates of a mesh (a value of x, x₀ or x_t).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshPositions(pub Vec<Vec3>);

impl MeshPositions {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Mean Euclidean distance between corresponding nodes.
    pub fn mean_distance(&self, other: &MeshPositions) -> f64 {
        let total: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| norm(sub(*a, *b)))
            .sum();
        total / self.len().max(1) as f64
    }

    pub fn max_distance(&self, other: &MeshPositions) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessConfig {
    /// Stiffness of each time point's mesh around its reference.
    pub kappa: f64,
    /// Stiffness of the subject-specific mesh around the atlas reference.
    pub kappa0: f64,
}

impl StiffnessConfig {
    pub fn new(kappa: f64, kappa0: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite() && kappa0 > 0.0 && kappa0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "stiffness constants must be positive (kappa {kappa}, kappa0 {kappa0})"
            )));
        }
        Ok(Self { kappa, kappa0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetrahedralMesh {
    pub reference: MeshPositions,
    pub tets: Vec<[usize; 4]>,
    pub n_classes: usize,
    /// Node-major label probabilities `alphas[node * n_classes + k]`.
    pub alphas: Vec<f64>,
}

impl TetrahedralMesh {
    pub fn new(
        reference: MeshPositions,
        tets: Vec<[usize; 4]>,
        n_classes: usize,
        alphas: Vec<f64>,
    ) -> Result<Self> {
        let mesh = Self {
            reference,
            tets,
            n_classes,
            alphas,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.reference.len()
    }

    pub fn node_alphas(&self, node: usize) -> &[f64] {
        &self.alphas[node * self.n_classes..(node + 1) * self.n_classes]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.n_classes == 0 {
            return Err(Error::Validation("atlas needs at least one class".into()));
        }
        if self.alphas.len() != n * self.n_classes {
            return Err(Error::Shape(format!(
                "alpha table has {} entries, expected {}",
                self.alphas.len(),
                n * self.n_classes
            )));
        }
        for node in 0..n {
            let row = self.node_alphas(node);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "alphas of node {node} are not a simplex (sum {sum})"
                )));
            }
        }
        if self.reference.0.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite reference position".into()));
        }
        for (m, tet) in self.tets.iter().enumerate() {
            if let Some(&bad) = tet.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "tetrahedron {m} references node {bad} of {n}"
                )));
            }
            let det = det3(&edge_matrix(&self.reference.0, tet));
            if !(det > 0.0) {
                return Err(Error::Validation(format!(
                    "tetrahedron {m} has non-positive reference volume {}",
                    det / 6.0
                )));
            }
        }
        Ok(())
    }

    /// Per node and axis, whether the reference coordinate lies on the
    /// bounding box of the reference mesh. Those coordinates stay fixed during
    /// deformation so the mesh keeps covering its box.
    pub fn boundary_coordinates(&self) -> Vec<[bool; 3]> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.reference.0 {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        self.reference
            .0
            .iter()
            .map(|p| [0, 1, 2].map(|d| p[d] == lo[d] || p[d] == hi[d]))
            .collect()
    }

    fn check_len(&self, x: &MeshPositions, what: &str) -> Result<()> {
        if x.len() != self.n_nodes() {
            return Err(Error::Shape(format!(
                "{what} has {} nodes, mesh has {}",
                x.len(),
                self.n_nodes()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Small dense helpers

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub(crate) fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate; `det` must be non-zero.
#[inline]
pub(crate) fn inv3(m: &Mat3, det: f64) -> Mat3 {
    let d = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
        ],
    ]
}

#[inline]
fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
fn transpose(a: &Mat3) -> Mat3 {
    [
        [a[0][0], a[1][0], a[2][0]],
        [a[0][1], a[1][1], a[2][1]],
        [a[0][2], a[1][2], a[2][2]],
    ]
}

/// Columns are the edges p1-p0, p2-p0, p3-p0.
#[inline]
pub(crate) fn edge_matrix(pos: &[Vec3], tet: &[usize; 4]) -> Mat3 {
    let p0 = pos[tet[0]];
    let e1 = sub(pos[tet[1]], p0);
    let e2 = sub(pos[tet[2]], p0);
    let e3 = sub(pos[tet[3]], p0);
    [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ]
}

// ---------------------------------------------------------------------------
// Deformation penalty

/// Penalty of one tetrahedron deformed by Jacobian `J` with reference volume `v`:
/// `v * (|J|_F^2 det(J)^(-2/3) - 3 + det J + 1/det J - 2)`.
struct TetTerm {
    energy: f64,
    /// d energy / d deformed edge matrix.
    grad_x: Mat3,
    /// d energy / d reference edge matrix.
    grad_ref: Mat3,
}

fn tet_term(x_edges: &Mat3, ref_edges: &Mat3, with_grad: bool) -> Option<TetTerm> {
    let det_r = det3(ref_edges);
    if !(det_r > 0.0) {
        return None;
    }
    let r_inv = inv3(ref_edges, det_r);
    let j = matmul(x_edges, &r_inv);
    let det_j = det3(&j);
    if !(det_j > 0.0) {
        return None;
    }
    let volume = det_r / 6.0;
    let frob2: f64 = j.iter().flatten().map(|v| v * v).sum();
    let iso = det_j.powf(-2.0 / 3.0);
    let f = frob2 * iso - 3.0 + det_j + 1.0 / det_j - 2.0;
    let energy = volume * f;
    if !with_grad {
        return Some(TetTerm {
            energy,
            grad_x: [[0.0; 3]; 3],
            grad_ref: [[0.0; 3]; 3],
        });
    }
    // dF/dJ = 2 iso J - (2/3) frob2 iso J^-T + (det - 1/det) J^-T
    let j_inv_t = transpose(&inv3(&j, det_j));
    let c = -(2.0 / 3.0) * frob2 * iso + det_j - 1.0 / det_j;
    let mut df = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            df[a][b] = 2.0 * iso * j[a][b] + c * j_inv_t[a][b];
        }
    }
    let r_inv_t = transpose(&r_inv);
    let mut grad_x = matmul(&df, &r_inv_t);
    // d/dR of v(R) f(X R^-1) = v (f I - J^T dF) R^-T
    let mut inner = matmul(&transpose(&j), &df);
    for (a, row) in inner.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = if a == b { f - *v } else { -*v };
        }
    }
    let mut grad_ref = matmul(&inner, &r_inv_t);
    for row in grad_x.iter_mut().chain(grad_ref.iter_mut()) {
        for v in row.iter_mut() {
            *v *= volume;
        }
    }
    Some(TetTerm {
        energy,
        grad_x,
        grad_ref,
    })
}

#[inline]
fn scatter_edge_grad(grad: &mut [Vec3], tet: &[usize; 4], g: &Mat3, scale: f64) {
    for a in 0..3 {
        for d in 0..3 {
            let v = scale * g[d][a];
            grad[tet[a + 1]][d] += v;
            grad[tet[0]][d] -= v;
        }
    }
}

/// Total deformation penalty of `x` relative to `reference`; +∞ when any
/// tetrahedron is inverted or collapsed.
pub fn deformation_energy(
    x: &MeshPositions,
    reference: &MeshPositions,
    mesh: &TetrahedralMesh,
) -> Result<f64> {
    mesh.check_len(x, "positions")?;
    mesh.check_len(reference, "reference")?;
    let mut total = 0.0;
    for tet in &mesh.tets {
        match tet_term(
            &edge_matrix(&x.0, tet),
            &edge_matrix(&reference.0, tet),
            false,
        ) {
            Some(term) => total += term.energy,
            None => return Ok(f64::INFINITY),
        }
    }
    Ok(total)
}

/// Gradient of [`deformation_energy`] with respect to the deformed positions.
pub fn deformation_energy_gradient(
    x: &MeshPositions,
    reference: &MeshPositions,
    mesh: &TetrahedralMesh,
) -> Result<Vec<Vec3>> {
    let (_, gx, _) = energy_and_gradients(x, reference, mesh, 1.0, true, false)?;
    Ok(gx)
}

/// `scale * energy` together with its gradients with respect to the deformed
/// positions and (optionally) the reference positions.
pub(crate) fn energy_and_gradients(
    x: &MeshPositions,
    reference: &MeshPositions,
    mesh: &TetrahedralMesh,
    scale: f64,
    want_x: bool,
    want_ref: bool,
) -> Result<(f64, Vec<Vec3>, Vec<Vec3>)> {
    mesh.check_len(x, "positions")?;
    mesh.check_len(reference, "reference")?;
    let n = mesh.n_nodes();
    let mut gx = vec![[0.0; 3]; if want_x { n } else { 0 }];
    let mut gr = vec![[0.0; 3]; if want_ref { n } else { 0 }];
    let mut total = 0.0;
    for (m, tet) in mesh.tets.iter().enumerate() {
        let term = tet_term(
            &edge_matrix(&x.0, tet),
            &edge_matrix(&reference.0, tet),
            want_x || want_ref,
        )
        .ok_or(Error::InfiniteEnergy { tet: m })?;
        total += term.energy;
        if want_x {
            scatter_edge_grad(&mut gx, tet, &term.grad_x, scale);
        }
        if want_ref {
            scatter_edge_grad(&mut gr, tet, &term.grad_ref, scale);
        }
    }
    Ok((scale * total, gx, gr))
}

/// Smallest ratio of deformed to reference tetrahedron volume.
pub fn min_volume_ratio(
    x: &MeshPositions,
    reference: &MeshPositions,
    mesh: &TetrahedralMesh,
) -> f64 {
    mesh.tets
        .iter()
        .map(|tet| det3(&edge_matrix(&x.0, tet)) / det3(&edge_matrix(&reference.0, tet)))
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Rasterization

/// Containing tetrahedron and barycentric coordinates of every voxel centre.
#[derive(Debug, Clone)]
pub struct Rasterization {
    /// Owning tetrahedron per voxel, `u32::MAX` outside the mesh.
    pub owner: Vec<u32>,
    pub bary: Vec<[f64; 4]>,
    /// Per tetrahedron, the spatial gradients of barycentric coordinates 1..3
    /// (rows of the inverse edge matrix).
    pub bary_grad: Vec<Mat3>,
}

pub const OUTSIDE: u32 = u32::MAX;

/// Locates every voxel centre of `grid` in the mesh deformed to `x`. The
/// lowest-index containing tetrahedron wins.
pub fn locate(
    x: &MeshPositions,
    mesh: &TetrahedralMesh,
    grid: &VoxelGrid,
) -> Result<Rasterization> {
    mesh.check_len(x, "positions")?;
    let n = grid.n_voxels();
    let mut owner = vec![OUTSIDE; n];
    let mut bary = vec![[0.0; 4]; n];
    let mut bary_grad = Vec::with_capacity(mesh.tets.len());
    let [dx, dy, dz] = grid.dims;
    for (m, tet) in mesh.tets.iter().enumerate() {
        let e = edge_matrix(&x.0, tet);
        let det = det3(&e);
        if !(det > 0.0) {
            return Err(Error::InfiniteEnergy { tet: m });
        }
        let inv = inv3(&e, det);
        bary_grad.push(inv);
        let p0 = x.0[tet[0]];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &node in tet {
            for d in 0..3 {
                lo[d] = lo[d].min(x.0[node][d]);
                hi[d] = hi[d].max(x.0[node][d]);
            }
        }
        let range = |d: usize, extent: usize| -> Option<(usize, usize)> {
            let a = (lo[d] - 1e-6).ceil().max(0.0);
            let b = (hi[d] + 1e-6).floor().min(extent as f64 - 1.0);
            (a <= b).then_some((a as usize, b as usize))
        };
        let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) =
            (range(0, dx), range(1, dy), range(2, dz))
        else {
            continue;
        };
        for vz in z0..=z1 {
            for vy in y0..=y1 {
                let base = grid.index(0, vy, vz);
                for vx in x0..=x1 {
                    let idx = base + vx;
                    if owner[idx] != OUTSIDE {
                        continue;
                    }
                    let r = [vx as f64 - p0[0], vy as f64 - p0[1], vz as f64 - p0[2]];
                    let l1 = inv[0][0] * r[0] + inv[0][1] * r[1] + inv[0][2] * r[2];
                    let l2 = inv[1][0] * r[0] + inv[1][1] * r[1] + inv[1][2] * r[2];
                    let l3 = inv[2][0] * r[0] + inv[2][1] * r[1] + inv[2][2] * r[2];
                    let l0 = 1.0 - l1 - l2 - l3;
                    if l0 >= -INSIDE_TOLERANCE
                        && l1 >= -INSIDE_TOLERANCE
                        && l2 >= -INSIDE_TOLERANCE
                        && l3 >= -INSIDE_TOLERANCE
                    {
                        owner[idx] = m as u32;
                        bary[idx] = [l0, l1, l2, l3];
                    }
                }
            }
        }
    }
    Ok(Rasterization {
        owner,
        bary,
        bary_grad,
    })
}

/// Prior probability of every class at `voxel`, written into `out`.
/// Voxels outside the mesh put all mass on class 1.
#[inline]
pub(crate) fn prior_at(mesh: &TetrahedralMesh, ras: &Rasterization, voxel: usize, out: &mut [f64]) {
    let k = mesh.n_classes;
    let m = ras.owner[voxel];
    out.fill(0.0);
    if m == OUTSIDE {
        out[0] = 1.0;
        return;
    }
    let tet = &mesh.tets[m as usize];
    let lambda = &ras.bary[voxel];
    for (j, &node) in tet.iter().enumerate() {
        // Clamp tolerance-sized negatives so rows stay inside [0, 1].
        let w = lambda[j].max(0.0);
        let alphas = &mesh.alphas[node * k..(node + 1) * k];
        for c in 0..k {
            out[c] += w * alphas[c];
        }
    }
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
}

/// Voxel-major prior `p(l_i = k | x)` over the whole grid (`dims × K`).
pub fn rasterize_prior(
    x: &MeshPositions,
    mesh: &TetrahedralMesh,
    grid: &VoxelGrid,
) -> Result<Vec<f64>> {
    let ras = locate(x, mesh, grid)?;
    let k = mesh.n_classes;
    let mut prior = vec![0.0; grid.n_voxels() * k];
    for (v, row) in prior.chunks_exact_mut(k).enumerate() {
        prior_at(mesh, &ras, v, row);
    }
    Ok(prior)
}

// ---------------------------------------------------------------------------
// Construction

/// Regular lattice atlas covering `grid`: nodes every `spacing` voxels
/// starting half a voxel outside the first voxel centre, each cube split into
/// five tetrahedra with alternating diagonals so that faces conform.
pub fn build_grid_atlas(
    grid: &VoxelGrid,
    spacing: usize,
    n_classes: usize,
    alpha_init: &[f64],
) -> Result<TetrahedralMesh> {
    if spacing == 0 || grid.dims.iter().any(|&d| spacing > d) {
        return Err(Error::InvalidArgument(format!(
            "node spacing {spacing} does not fit grid {:?}",
            grid.dims
        )));
    }
    if alpha_init.len() != n_classes {
        return Err(Error::Shape(format!(
            "alpha_init has {} entries for {n_classes} classes",
            alpha_init.len()
        )));
    }
    let cells = grid.dims.map(|d| d.div_ceil(spacing));
    let nodes_per = cells.map(|c| c + 1);
    let node_index = |i: usize, j: usize, k: usize| i + nodes_per[0] * (j + nodes_per[1] * k);
    let mut reference = Vec::with_capacity(nodes_per.iter().product());
    for k in 0..nodes_per[2] {
        for j in 0..nodes_per[1] {
            for i in 0..nodes_per[0] {
                reference.push([
                    i as f64 * spacing as f64 - 0.5,
                    j as f64 * spacing as f64 - 0.5,
                    k as f64 * spacing as f64 - 0.5,
                ]);
            }
        }
    }
    const EVEN: [[[usize; 3]; 4]; 5] = [
        [[0, 0, 0], [1, 1, 0], [1, 0, 1], [0, 1, 1]],
        [[1, 0, 0], [0, 0, 0], [1, 1, 0], [1, 0, 1]],
        [[0, 1, 0], [0, 0, 0], [1, 1, 0], [0, 1, 1]],
        [[0, 0, 1], [0, 0, 0], [1, 0, 1], [0, 1, 1]],
        [[1, 1, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]],
    ];
    let mut tets = Vec::with_capacity(cells.iter().product::<usize>() * 5);
    for ck in 0..cells[2] {
        for cj in 0..cells[1] {
            for ci in 0..cells[0] {
                let odd = (ci + cj + ck) % 2 == 1;
                for corners in EVEN {
                    let mut tet = corners.map(|[a, b, c]| {
                        // Odd cubes use the mirror image along x.
                        let a = if odd { 1 - a } else { a };
                        node_index(ci + a, cj + b, ck + c)
                    });
                    if det3(&edge_matrix(&reference, &tet)) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    let n_nodes = reference.len();
    let alphas = alpha_init.repeat(n_nodes);
    TetrahedralMesh::new(MeshPositions(reference), tets, n_classes, alphas)
}

// ---------------------------------------------------------------------------
// File formats

fn next_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    what: &str,
) -> Result<(usize, &'a str)> {
    lines
        .next()
        .ok_or_else(|| Error::format(what, "unexpected end of file"))
}

fn parse_num<T: std::str::FromStr>(s: &str, field: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(field, format!("line {}: cannot parse `{s}`", line + 1)))
}

pub fn write_atlas(mesh: &TetrahedralMesh, path: impl AsRef<Path>) -> Result<()> {
    mesh.validate()?;
    let mut out = String::new();
    let k = mesh.n_classes;
    writeln!(out, "TETATLAS 1").unwrap();
    writeln!(out, "NODES {} {k}", mesh.n_nodes()).unwrap();
    for (node, p) in mesh.reference.0.iter().enumerate() {
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        for a in mesh.node_alphas(node) {
            write!(out, " {a}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "TETS {}", mesh.tets.len()).unwrap();
    for t in &mesh.tets {
        writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
    }
    out.push_str("END\n");
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_atlas(path: impl AsRef<Path>) -> Result<TetrahedralMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_atlas(&text)
}

pub fn parse_atlas(text: &str) -> Result<TetrahedralMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, magic) = next_line(&mut lines, "TETATLAS")?;
    if magic.trim() != "TETATLAS 1" {
        return Err(Error::format(
            "TETATLAS",
            format!("bad magic line `{magic}`"),
        ));
    }
    let (ln, nodes_line) = next_line(&mut lines, "NODES")?;
    let tokens: Vec<&str> = nodes_line.split_whitespace().collect();
    if tokens.len() != 3 || tokens[0] != "NODES" {
        return Err(Error::format(
            "NODES",
            format!("line {}: expected `NODES n K`", ln + 1),
        ));
    }
    let n: usize = parse_num(tokens[1], "NODES", ln)?;
    let k: usize = parse_num(tokens[2], "NODES", ln)?;
    let mut reference = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n * k);
    for _ in 0..n {
        let (ln, line) = next_line(&mut lines, "NODES")?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|s| parse_num(s, "NODES", ln))
            .collect::<Result<_>>()?;
        if values.len() != 3 + k {
            return Err(Error::format(
                "NODES",
                format!(
                    "line {}: expected {} values, found {}",
                    ln + 1,
                    3 + k,
                    values.len()
                ),
            ));
        }
        reference.push([values[0], values[1], values[2]]);
        alphas.extend_from_slice(&values[3..]);
    }
    let (ln, tets_line) = next_line(&mut lines, "TETS")?;
    let tokens: Vec<&str> = tets_line.split_whitespace().collect();
    if tokens.len() != 2 || tokens[0] != "TETS" {
        return Err(Error::format(
            "TETS",
            format!("line {}: expected `TETS M`", ln + 1),
        ));
    }
    let m: usize = parse_num(tokens[1], "TETS", ln)?;
    let mut tets = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, line) = next_line(&mut lines, "TETS")?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|s| parse_num(s, "TETS", ln))
            .collect::<Result<_>>()?;
        let tet: [usize; 4] = idx
            .try_into()
            .map_err(|_| Error::format("TETS", format!("line {}: expected 4 indices", ln + 1)))?;
        tets.push(tet);
    }
    let (_, end) = next_line(&mut lines, "END")?;
    if end.trim() != "END" {
        return Err(Error::format("END", format!("expected END, found `{end}`")));
    }
    TetrahedralMesh::new(MeshPositions(reference), tets, k, alphas)
}

/// Writes node positions as `POS 1`, one `x y z` line per node, `END`.
pub fn write_positions(x: &MeshPositions, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("POS 1\n");
    for p in &x.0 {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    out.push_str("END\n");
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_positions(path: impl AsRef<Path>) -> Result<MeshPositions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, magic) = next_line(&mut lines, "POS")?;
    if magic.trim() != "POS 1" {
        return Err(Error::format("POS", format!("bad magic line `{magic}`")));
    }
    let mut positions = Vec::new();
    for (ln, line) in lines {
        if line.trim() == "END" {
            return Ok(MeshPositions(positions));
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| parse_num(s, "POS", ln))
            .collect::<Result<_>>()?;
        let p: [f64; 3] = v.try_into().map_err(|_| {
            Error::format("POS", format!("line {}: expected 3 coordinates", ln + 1))
        })?;
        positions.push(p);
    }
    Err(Error::format("END", "missing END line"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn regular_tet() -> TetrahedralMesh {
        let s = 1.0 / 2f64.sqrt();
        let reference = vec![
            [1.0, 0.0, -s],
            [-1.0, 0.0, -s],
            [0.0, 1.0, s],
            [0.0, -1.0, s],
        ];
        let mut tet = [0, 1, 2, 3];
        if det3(&edge_matrix(&reference, &tet)) < 0.0 {
            tet.swap(2, 3);
        }
        TetrahedralMesh::new(
            MeshPositions(reference),
            vec![tet],
            2,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap()
    }

    fn tet_volume(mesh: &TetrahedralMesh) -> f64 {
        det3(&edge_matrix(&mesh.reference.0, &mesh.tets[0])) / 6.0
    }

    #[test]
    fn identity_has_zero_energy_and_gradient() {
        let mesh = build_grid_atlas(&VoxelGrid::cube(8), 4, 2, &[0.5, 0.5]).unwrap();
        let e = deformation_energy(&mesh.reference, &mesh.reference, &mesh).unwrap();
        assert_eq!(e, 0.0);
        let g = deformation_energy_gradient(&mesh.reference, &mesh.reference, &mesh).unwrap();
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_doubling_costs_6_125_volumes() {
        let mesh = regular_tet();
        let x = MeshPositions(
            mesh.reference
                .0
                .iter()
                .map(|p| p.map(|c| 2.0 * c))
                .collect(),
        );
        let e = deformation_energy(&x, &mesh.reference, &mesh).unwrap();
        let expected =
            tet_volume(&mesh) * (12.0 * 8f64.powf(-2.0 / 3.0) - 3.0 + (8.0 + 0.125 - 2.0));
        assert!((e - expected).abs() < 1e-12 * expected.abs());
        assert!((e / tet_volume(&mesh) - 6.125).abs() < 1e-12);
    }

    #[test]
    fn collapsed_or_inverted_tetrahedron_is_infinite() {
        let mesh = regular_tet();
        let mut x = mesh.reference.clone();
        x.0[3] = x.0[2];
        assert_eq!(
            deformation_energy(&x, &mesh.reference, &mesh).unwrap(),
            f64::INFINITY
        );
        assert!(matches!(
            deformation_energy_gradient(&x, &mesh.reference, &mesh),
            Err(Error::InfiniteEnergy { tet: 0 })
        ));
        let x = MeshPositions(
            mesh.reference
                .0
                .iter()
                .map(|p| [p[0], p[1], -p[2]])
                .collect(),
        );
        assert_eq!(
            deformation_energy(&x, &mesh.reference, &mesh).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn mismatched_node_count_is_an_error() {
        let mesh = regular_tet();
        let x = MeshPositions(vec![[0.0; 3]; 3]);
        assert!(matches!(
            deformation_energy(&x, &mesh.reference, &mesh),
            Err(Error::Shape(_))
        ));
    }

    fn perturbed(mesh: &TetrahedralMesh, rng: &mut SplitMix64, amp: f64) -> MeshPositions {
        MeshPositions(
            mesh.reference
                .0
                .iter()
                .map(|p| p.map(|c| c + rng.uniform(-amp, amp)))
                .collect(),
        )
    }

    #[test]
    fn gradients_match_central_differences() {
        let mesh = build_grid_atlas(&VoxelGrid::cube(6), 3, 1, &[1.0]).unwrap();
        let mut rng = SplitMix64::new(11);
        let x = perturbed(&mesh, &mut rng, 0.4);
        let r = perturbed(&mesh, &mut rng, 0.3);
        let (_, gx, gr) = energy_and_gradients(&x, &r, &mesh, 1.0, true, true).unwrap();
        let h = 1e-6;
        for node in [0, 5, 13, 26] {
            for d in 0..3 {
                let fd = |which: u8| {
                    let (mut a, mut b) = (x.clone(), r.clone());
                    let (mut a2, mut b2) = (x.clone(), r.clone());
                    if which == 0 {
                        a.0[node][d] += h;
                        a2.0[node][d] -= h;
                    } else {
                        b.0[node][d] += h;
                        b2.0[node][d] -= h;
                    }
                    (deformation_energy(&a, &b, &mesh).unwrap()
                        - deformation_energy(&a2, &b2, &mesh).unwrap())
                        / (2.0 * h)
                };
                let (fx, fr) = (fd(0), fd(1));
                assert!(
                    (fx - gx[node][d]).abs() < 1e-5 * (1.0 + fx.abs()),
                    "x {node} {d}: {fx} vs {}",
                    gx[node][d]
                );
                assert!(
                    (fr - gr[node][d]).abs() < 1e-5 * (1.0 + fr.abs()),
                    "ref {node} {d}: {fr} vs {}",
                    gr[node][d]
                );
            }
        }
    }

    #[test]
    fn grid_atlas_counts_and_orientation() {
        let mesh = build_grid_atlas(&VoxelGrid::cube(8), 4, 3, &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(mesh.n_nodes(), 27);
        assert_eq!(mesh.tets.len(), 40);
        for tet in &mesh.tets {
            assert!(det3(&edge_matrix(&mesh.reference.0, tet)) > 0.0);
        }
        // The five tetrahedra of each cube tile it exactly.
        let total: f64 = mesh
            .tets
            .iter()
            .map(|t| det3(&edge_matrix(&mesh.reference.0, t)) / 6.0)
            .sum();
        assert!((total - 512.0).abs() < 1e-9);
        assert!(build_grid_atlas(&VoxelGrid::cube(8), 9, 3, &[0.2, 0.3, 0.5]).is_err());
    }

    #[test]
    fn faces_conform_between_cubes() {
        use std::collections::HashMap;
        let mesh = build_grid_atlas(&VoxelGrid::cube(9), 3, 1, &[1.0]).unwrap();
        let mut faces: HashMap<[usize; 3], usize> = HashMap::new();
        for t in &mesh.tets {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| t[i]).collect();
                f.sort();
                *faces.entry([f[0], f[1], f[2]]).or_default() += 1;
            }
        }
        assert!(faces.values().all(|&c| c <= 2));
        // Interior faces are shared; boundary faces = 6 sides * 9 cells * 2 triangles.
        let boundary = faces.values().filter(|&&c| c == 1).count();
        assert_eq!(boundary, 6 * 9 * 2);
    }

    #[test]
    fn rasterized_prior_of_constant_atlas_is_constant() {
        let grid = VoxelGrid::new([8, 7, 5], [1.0; 3]).unwrap();
        let alpha = [0.1, 0.6, 0.3];
        let mesh = build_grid_atlas(&grid, 3, 3, &alpha).unwrap();
        let prior = rasterize_prior(&mesh.reference, &mesh, &grid).unwrap();
        for row in prior.chunks_exact(3) {
            for (p, a) in row.iter().zip(alpha) {
                assert!((p - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_and_barycenter_interpolation() {
        // A single tetrahedron with nodes on voxel centres.
        let grid = VoxelGrid::cube(5);
        let reference = vec![
            [0.0, 0.0, 0.0],
            [4.0, 0.0, 0.0],
            [0.0, 4.0, 0.0],
            [0.0, 0.0, 4.0],
        ];
        let alphas = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let mesh =
            TetrahedralMesh::new(MeshPositions(reference), vec![[0, 1, 2, 3]], 3, alphas).unwrap();
        let prior = rasterize_prior(&mesh.reference, &mesh, &grid).unwrap();
        let at = |x, y, z| &prior[grid.index(x, y, z) * 3..grid.index(x, y, z) * 3 + 3];
        assert_eq!(at(4, 0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(at(0, 4, 0), &[0.0, 1.0, 0.0]);
        // Barycenter (1,1,1): equal weights 1/4 on e1, e1, e2, e2.
        let b = at(1, 1, 1);
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12 && b[2] == 0.0);
        // Outside voxels fall back to class 1.
        assert_eq!(at(4, 4, 4), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn atlas_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.atlas");
        let mut mesh = build_grid_atlas(&VoxelGrid::cube(4), 2, 3, &[0.1, 0.2, 0.7]).unwrap();
        mesh.reference.0[4][1] += 0.123_456_789_012_345;
        write_atlas(&mesh, &path).unwrap();
        assert_eq!(read_atlas(&path).unwrap(), mesh);

        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replacen(" 0.1 0.2 0.7\n", " 0.1 0.2 0.8\n", 1);
        assert!(matches!(parse_atlas(&broken), Err(Error::Validation(_))));

        let t = mesh.tets[0];
        let flipped = text.replacen(
            &format!("{} {} {} {}\n", t[0], t[1], t[2], t[3]),
            &format!("{} {} {} {}\n", t[0], t[1], t[3], t[2]),
            1,
        );
        assert!(matches!(parse_atlas(&flipped), Err(Error::Validation(_))));
    }

    #[test]
    fn positions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = MeshPositions(vec![[0.1, -2.5, 1e-17], [3.0, 4.0, 5.0]]);
        write_positions(&x, dir.path().join("x.pos")).unwrap();
        assert_eq!(read_positions(dir.path().join("x.pos")).unwrap(), x);
    }

    proptest! {
        #[test]
        fn energy_is_translation_invariant_and_gradient_sums_to_zero(
            seed in any::<u64>(), shift in -5.0f64..5.0
        ) {
            let mesh = build_grid_atlas(&VoxelGrid::cube(6), 3, 1, &[1.0]).unwrap();
            let mut rng = SplitMix64::new(seed);
            let x = perturbed(&mesh, &mut rng, 0.3);
            let e = deformation_energy(&x, &mesh.reference, &mesh).unwrap();
            let xs = MeshPositions(x.0.iter().map(|p| [p[0] + shift, p[1] - shift, p[2]]).collect());
            let rs = MeshPositions(mesh.reference.0.iter().map(|p| [p[0] + shift, p[1] - shift, p[2]]).collect());
            let e2 = deformation_energy(&xs, &rs, &mesh).unwrap();
            prop_assert!((e - e2).abs() <= 1e-9 * (1.0 + e.abs()));
            let e3 = deformation_energy(&xs, &mesh.reference, &mesh).unwrap();
            prop_assert!((e - e3).abs() <= 1e-9 * (1.0 + e.abs()));
            let g = deformation_energy_gradient(&x, &mesh.reference, &mesh).unwrap();
            for d in 0..3 {
                let s: f64 = g.iter().map(|v| v[d]).sum();
                prop_assert!(s.abs() < 1e-9 * (1.0 + e.abs()));
            }
        }

        #[test]
        fn prior_rows_are_simplexes(seed in any::<u64>()) {
            let grid = VoxelGrid::cube(7);
            let mut rng = SplitMix64::new(seed);
            let mut mesh = build_grid_atlas(&grid, 3, 3, &[1.0, 0.0, 0.0]).unwrap();
            for node in 0..mesh.n_nodes() {
                let a = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                let s: f64 = a.iter().sum();
                mesh.alphas[node * 3..node * 3 + 3].copy_from_slice(&a.map(|v| v / s));
            }
            let x = perturbed(&mesh, &mut rng, 0.6);
            prop_assume!(min_volume_ratio(&x, &mesh.reference, &mesh) > 0.0);
            let prior = rasterize_prior(&x, &mesh, &grid).unwrap();
            for row in prior.chunks_exact(3) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
