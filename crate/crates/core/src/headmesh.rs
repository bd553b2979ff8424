//! Concentric-disk head meshes.
//!
//! The head is a disk of three nested compartments (brain, skull, scalp).
//! Meshes are structured polar ring meshes: a center node surrounded by
//! circles of equally spaced nodes, with every compartment interface lying
//! exactly on one of the circles. Adjacent circles are stitched into a strip
//! of triangles, so no element straddles an interface.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadGeometry {
    /// Outer radius of the brain compartment (m).
    pub brain_radius: f64,
    /// Outer radius of the skull (m).
    pub skull_radius: f64,
    /// Outer radius of the scalp, i.e. of the whole head (m).
    pub scalp_radius: f64,
    /// Inner and outer radius of the gray-matter annulus holding the sources (m).
    pub gray_matter: (f64, f64),
    pub electrode_count: usize,
}

impl Default for HeadGeometry {
    fn default() -> Self {
        Self {
            brain_radius: 0.079,
            skull_radius: 0.086,
            scalp_radius: 0.092,
            gray_matter: (0.060, 0.075),
            electrode_count: 32,
        }
    }
}

impl HeadGeometry {
    pub fn validate(&self) -> Result<()> {
        let radii = [self.brain_radius, self.skull_radius, self.scalp_radius];
        if radii.iter().any(|r| !r.is_finite()) {
            return Err(Error::Geometry("radii must be finite".into()));
        }
        if !(0.0 < self.brain_radius && self.brain_radius < self.skull_radius && self.skull_radius < self.scalp_radius)
        {
            return Err(Error::Geometry(format!(
                "radii must satisfy 0 < brain < skull < scalp, got {:?}",
                radii
            )));
        }
        let (inner, outer) = self.gray_matter;
        if !(0.0 <= inner && inner < outer && outer < self.brain_radius) {
            return Err(Error::Geometry(format!(
                "gray-matter band ({inner}, {outer}) must lie strictly inside the brain (radius {})",
                self.brain_radius
            )));
        }
        if self.electrode_count == 0 {
            return Err(Error::Geometry("electrode_count must be positive".into()));
        }
        Ok(())
    }

    pub fn compartment_at_radius(&self, r: f64) -> Compartment {
        if r <= self.brain_radius {
            Compartment::Brain
        } else if r <= self.skull_radius {
            Compartment::Skull
        } else {
            Compartment::Scalp
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compartment {
    Brain,
    Skull,
    Scalp,
}

impl Compartment {
    pub fn name(self) -> &'static str {
        match self {
            Compartment::Brain => "brain",
            Compartment::Skull => "skull",
            Compartment::Scalp => "scalp",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "brain" => Some(Compartment::Brain),
            "skull" => Some(Compartment::Skull),
            "scalp" => Some(Compartment::Scalp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    /// Counter-clockwise node triplets.
    pub triangles: Vec<[usize; 3]>,
    pub compartments: Vec<Compartment>,
    /// Nodes on the outer circle, in increasing angle.
    pub boundary_nodes: Vec<usize>,
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn compartment_area(&self, compartment: Compartment) -> f64 {
        (0..self.triangles.len())
            .filter(|&t| self.compartments[t] == compartment)
            .map(|t| self.triangle_area(t))
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Longest edge on the outer boundary.
    pub fn max_boundary_edge(&self) -> f64 {
        let b = &self.boundary_nodes;
        (0..b.len())
            .map(|k| dist(self.nodes[b[k]], self.nodes[b[(k + 1) % b.len()]]))
            .fold(0.0, f64::max)
    }

    /// Writes the mesh as text. Layout:
    ///
    /// ```text
    /// # skullbae mesh v1
    /// nodes <N>
    /// <x> <y>                      (N lines, metres)
    /// triangles <T>
    /// <a> <b> <c> <compartment>    (T lines, 0-based, counter-clockwise)
    /// boundary <B>
    /// <node>                       (B lines)
    /// ```
    ///
    /// Coordinates are written with 17 significant digits so the file
    /// reloads bit-exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * (self.nodes.len() + self.triangles.len()));
        s.push_str("# skullbae mesh v1\n");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for (t, c) in self.triangles.iter().zip(&self.compartments) {
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], c.name());
        }
        let _ = writeln!(s, "boundary {}", self.boundary_nodes.len());
        for b in &self.boundary_nodes {
            let _ = writeln!(s, "{b}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Mesh> {
        let bad = |msg: String| Error::format(path, msg);
        let body: Vec<&str> = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
            .collect();
        let mut pos = 0usize;
        let header = |name: &str, pos: &mut usize| -> Result<usize> {
            let line = body.get(*pos).ok_or_else(|| bad(format!("missing `{name}` section")))?;
            *pos += 1;
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(|c| c.parse().ok())) {
                (Some(n), Some(count)) if n == name => Ok(count),
                _ => Err(bad(format!("expected `{name} <count>`, found `{line}`"))),
            }
        };

        let n_nodes = header("nodes", &mut pos)?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = body.get(pos).ok_or_else(|| bad("truncated node list".into()))?;
            pos += 1;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad node line `{line}`: {e}")))?;
            if v.len() != 2 {
                return Err(bad(format!("bad node line `{line}`")));
            }
            nodes.push([v[0], v[1]]);
        }

        let n_tri = header("triangles", &mut pos)?;
        let mut triangles = Vec::with_capacity(n_tri);
        let mut compartments = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let line = body.get(pos).ok_or_else(|| bad("truncated triangle list".into()))?;
            pos += 1;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 4 {
                return Err(bad(format!("bad triangle line `{line}`")));
            }
            let mut t = [0usize; 3];
            for k in 0..3 {
                t[k] = tok[k]
                    .parse()
                    .ok()
                    .filter(|&i: &usize| i < n_nodes)
                    .ok_or_else(|| bad(format!("bad node index in `{line}`")))?;
            }
            let c = Compartment::parse(tok[3]).ok_or_else(|| bad(format!("unknown compartment in `{line}`")))?;
            triangles.push(t);
            compartments.push(c);
        }

        let n_bnd = header("boundary", &mut pos)?;
        let mut boundary_nodes = Vec::with_capacity(n_bnd);
        for _ in 0..n_bnd {
            let line = body.get(pos).ok_or_else(|| bad("truncated boundary list".into()))?;
            pos += 1;
            let i: usize = line
                .trim()
                .parse()
                .ok()
                .filter(|&i| i < n_nodes)
                .ok_or_else(|| bad(format!("bad boundary index `{line}`")))?;
            boundary_nodes.push(i);
        }
        Ok(Mesh {
            nodes,
            triangles,
            compartments,
            boundary_nodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_text(&text, path)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Radius and node count of every circle, innermost first.
fn ring_layout(geometry: &HeadGeometry, h: f64) -> Vec<(f64, usize)> {
    let layers = |thickness: f64, min: usize| ((thickness / h).round() as usize).max(min);
    let n_brain = layers(geometry.brain_radius, 3);
    let n_skull = layers(geometry.skull_radius - geometry.brain_radius, 2);
    let n_scalp = layers(geometry.scalp_radius - geometry.skull_radius, 2);

    let mut radii = Vec::with_capacity(n_brain + n_skull + n_scalp);
    let mut shell = |inner: f64, outer: f64, n: usize| {
        for k in 1..=n {
            radii.push(if k == n {
                outer
            } else {
                inner + (outer - inner) * k as f64 / n as f64
            });
        }
    };
    shell(0.0, geometry.brain_radius, n_brain);
    shell(geometry.brain_radius, geometry.skull_radius, n_skull);
    shell(geometry.skull_radius, geometry.scalp_radius, n_scalp);

    // Counts are multiples of 4 so that every circle has nodes on both axes
    // and the quadrant triangulation can be mirrored.
    let last = radii.len() - 1;
    let boundary_multiple = lcm(4, geometry.electrode_count);
    radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let multiple = if i == last { boundary_multiple } else { 4 };
            let raw = 2.0 * PI * r / h;
            let count = ((raw / multiple as f64).round() as usize).max(1) * multiple;
            (r, count.max(8))
        })
        .collect()
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

fn layout_node_count(layout: &[(f64, usize)]) -> usize {
    1 + layout.iter().map(|&(_, n)| n).sum::<usize>()
}

/// Builds the ring mesh whose node count is closest to `target_nodes`.
///
/// The element size is swept over a fixed geometric grid, so the result is a
/// pure function of the inputs.
pub fn build_head_mesh(geometry: &HeadGeometry, target_nodes: usize) -> Result<Mesh> {
    geometry.validate()?;
    if target_nodes < 100 {
        return Err(Error::Resolution(format!(
            "target_nodes must be at least 100, got {target_nodes}"
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    let mut h = geometry.scalp_radius;
    let mut best_count = usize::MAX;
    while h > geometry.scalp_radius * 1e-4 {
        let count = layout_node_count(&ring_layout(geometry, h));
        let err = count.abs_diff(target_nodes);
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, h));
            best_count = count;
        }
        if count > 2 * target_nodes {
            break;
        }
        h *= 0.998;
    }
    let (_, h) = best.expect("sweep visits at least one size");
    let tolerance = 0.15 * target_nodes as f64;
    if (best_count as f64 - target_nodes as f64).abs() > tolerance {
        return Err(Error::Resolution(format!(
            "cannot resolve three compartments with about {target_nodes} nodes (closest mesh has {best_count})"
        )));
    }
    Ok(mesh_from_layout(geometry, &ring_layout(geometry, h)))
}

fn mesh_from_layout(geometry: &HeadGeometry, layout: &[(f64, usize)]) -> Mesh {
    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = Vec::with_capacity(layout.len());
    for &(r, n) in layout {
        ring_start.push(nodes.len());
        for j in 0..n {
            let theta = 2.0 * PI * j as f64 / n as f64;
            nodes.push([r * theta.cos(), r * theta.sin()]);
        }
    }

    // Triangulate the first quadrant, then reflect it across both axes. On a
    // circle with `n` nodes, x -> -x maps node j to n/2 - j and y -> -y maps
    // it to n - j, so the mesh is exactly mirror symmetric.
    let mut quadrant: Vec<[(usize, usize); 3]> = Vec::new();
    let n1 = layout[0].1;
    for j in 0..n1 / 4 {
        quadrant.push([(usize::MAX, 0), (0, j), (0, j + 1)]);
    }
    for ring in 1..layout.len() {
        let qa = layout[ring - 1].1 / 4;
        let qb = layout[ring].1 / 4;
        let (mut i, mut j) = (0usize, 0usize);
        while i < qa || j < qb {
            // Advance whichever circle has the smaller next angle, comparing
            // (i + 1) / qa with (j + 1) / qb exactly in integers.
            let advance_inner = if i == qa {
                false
            } else if j == qb {
                true
            } else {
                (i + 1) * qb < (j + 1) * qa
            };
            if advance_inner {
                quadrant.push([(ring - 1, i), (ring, j), (ring - 1, i + 1)]);
                i += 1;
            } else {
                quadrant.push([(ring - 1, i), (ring, j), (ring, j + 1)]);
                j += 1;
            }
        }
    }

    let node = |(ring, j): (usize, usize)| -> usize {
        if ring == usize::MAX {
            0
        } else {
            ring_start[ring] + j % layout[ring].1
        }
    };
    let mirrors: [fn(usize, usize) -> usize; 4] = [
        |j, _| j,
        |j, n| (n / 2 + n - j) % n,
        |j, n| (n / 2 + j) % n,
        |j, n| (n - j) % n,
    ];
    let mut triangles = Vec::with_capacity(4 * quadrant.len());
    let mut compartments = Vec::with_capacity(4 * quadrant.len());
    for mirror in mirrors {
        for tri in &quadrant {
            let [a, b, c] = tri.map(|(ring, j)| {
                if ring == usize::MAX {
                    (ring, 0)
                } else {
                    (ring, mirror(j, layout[ring].1))
                }
            });
            let idx = [node(a), node(b), node(c)];
            let idx = if signed_area(nodes[idx[0]], nodes[idx[1]], nodes[idx[2]]) < 0.0 {
                [idx[0], idx[2], idx[1]]
            } else {
                idx
            };
            let outer = layout[tri[1].0].0;
            let inner = if tri[0].0 == usize::MAX {
                0.0
            } else {
                layout[tri[0].0].0
            };
            triangles.push(idx);
            compartments.push(geometry.compartment_at_radius(0.5 * (outer + inner)));
        }
    }

    let last = layout.len() - 1;
    let boundary_nodes = (0..layout[last].1).map(|j| ring_start[last] + j).collect();
    Mesh {
        nodes,
        triangles,
        compartments,
        boundary_nodes,
    }
}

fn wrapped_angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Snaps `count` electrodes to the boundary nodes nearest to the uniform
/// angles `2 pi k / count`.
pub fn place_electrodes(mesh: &Mesh, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Input("electrode count must be positive".into()));
    }
    if count > mesh.boundary_nodes.len() {
        return Err(Error::Resolution(format!(
            "{count} electrodes requested but the mesh has only {} boundary nodes",
            mesh.boundary_nodes.len()
        )));
    }
    let mut chosen = Vec::with_capacity(count);
    for k in 0..count {
        let target = 2.0 * PI * k as f64 / count as f64;
        let mut best = (f64::INFINITY, usize::MAX);
        for &b in &mesh.boundary_nodes {
            let [x, y] = mesh.nodes[b];
            let gap = wrapped_angle_gap(y.atan2(x), target);
            if gap < best.0 {
                best = (gap, b);
            }
        }
        if chosen.contains(&best.1) {
            return Err(Error::Resolution(format!(
                "electrodes {k} and another share boundary node {}; refine the mesh",
                best.1
            )));
        }
        chosen.push(best.1);
    }
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpace {
    /// Node indices in the mesh the source space was built on.
    pub nodes: Vec<usize>,
    pub positions: Vec<Point>,
    /// Outward unit normals, `position / |position|`.
    pub radial_dirs: Vec<Point>,
}

impl SourceSpace {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Source-space index whose position is closest to `p` (ties: lowest index).
    pub fn nearest(&self, p: Point) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, &q) in self.positions.iter().enumerate() {
            let d = dist(p, q);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

pub fn radial_direction(p: Point) -> Point {
    let r = p[0].hypot(p[1]);
    [p[0] / r, p[1] / r]
}

/// Selects every mesh node inside the gray-matter band.
pub fn build_source_space(mesh: &Mesh, geometry: &HeadGeometry) -> Result<SourceSpace> {
    geometry.validate()?;
    let (inner, outer) = geometry.gray_matter;
    let slack = 1e-12 * geometry.scalp_radius;
    let nodes: Vec<usize> = (0..mesh.nodes.len())
        .filter(|&i| {
            let r = mesh.nodes[i][0].hypot(mesh.nodes[i][1]);
            r > 0.0 && r >= inner - slack && r <= outer + slack
        })
        .collect();
    if nodes.is_empty() {
        return Err(Error::Geometry(format!(
            "no mesh nodes inside the gray-matter band ({inner}, {outer})"
        )));
    }
    let positions: Vec<Point> = nodes.iter().map(|&i| mesh.nodes[i]).collect();
    let radial_dirs = positions.iter().map(|&p| radial_direction(p)).collect();
    Ok(SourceSpace {
        nodes,
        positions,
        radial_dirs,
    })
}
