#![allow(dead_code)]

pub mod analytic;

use skullbae::fem::Conductivity;
use skullbae::headmesh::{HeadGeometry, Mesh};

pub fn standard_conductivity() -> Conductivity {
    Conductivity::new(0.33, 0.0085, 0.43).unwrap()
}

pub fn disk_for(geometry: &HeadGeometry, cond: &Conductivity) -> analytic::LayeredDisk {
    analytic::LayeredDisk {
        radii: [geometry.brain_radius, geometry.skull_radius, geometry.scalp_radius],
        sigma: [cond.brain, cond.skull, cond.scalp],
    }
}

pub fn node_angles(mesh: &Mesh, nodes: &[usize]) -> Vec<f64> {
    nodes
        .iter()
        .map(|&i| mesh.nodes[i][1].atan2(mesh.nodes[i][0]))
        .collect()
}
