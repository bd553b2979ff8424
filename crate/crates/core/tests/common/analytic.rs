//! Closed-form potentials of a 2D current dipole in a disk made of three
//! concentric conductive annuli with an insulated outer boundary.
//!
//! Each angular Fourier mode of the free-space dipole potential is matched
//! across the two interfaces (continuity of potential and normal current) and
//! the Neumann condition on the outer circle. The radial basis in every layer
//! is scaled so that all coefficients of the 5x5 mode system are bounded by one.

use nalgebra::{Matrix5, Vector5};
use std::f64::consts::PI;

pub struct LayeredDisk {
    /// Brain, skull and scalp outer radii.
    pub radii: [f64; 3],
    /// Brain, skull and scalp conductivities.
    pub sigma: [f64; 3],
}

impl LayeredDisk {
    /// Potential on the outer circle at angle `theta` due to a dipole at
    /// `position` (inside the innermost layer) with moment `moment`.
    pub fn boundary_potential(&self, position: [f64; 2], moment: [f64; 2], theta: f64) -> f64 {
        let [r1, r2, r3] = self.radii;
        let [s1, s2, s3] = self.sigma;
        let r0 = position[0].hypot(position[1]);
        assert!(r0 > 0.0 && r0 < r1);
        let theta0 = position[1].atan2(position[0]);
        let (sin0, cos0) = theta0.sin_cos();
        let q_r = moment[0] * cos0 + moment[1] * sin0;
        let q_t = -moment[0] * sin0 + moment[1] * cos0;

        let rho0 = r0 / r3;
        let rho1 = r1 / r3;
        let rho2 = r2 / r3;
        let phi = theta - theta0;

        let mut total = 0.0;
        for n in 1..=2000u32 {
            let decay = (rho0 / rho1).powi(n as i32);
            if decay < 1e-18 {
                break;
            }
            let g = self.mode_gain(n, rho1, rho2, s1, s2, s3);
            let nf = n as f64;
            total += g * decay * (q_r * (nf * phi).cos() + q_t * (nf * phi).sin());
        }
        total / (rho0 * 2.0 * PI * s1 * r3)
    }

    /// Outer-circle value of mode `n` when the primary brain term is
    /// `(rho1 / x)^n` with unit coefficient.
    fn mode_gain(&self, n: u32, rho1: f64, rho2: f64, s1: f64, s2: f64, s3: f64) -> f64 {
        let n = n as i32;
        let t12 = (rho1 / rho2).powi(n);
        let t2 = rho2.powi(n);
        // Unknowns: B (brain, (x/rho1)^n), C (skull, (x/rho2)^n),
        // D (skull, (rho1/x)^n), E (scalp, x^n), F (scalp, (rho2/x)^n).
        #[rustfmt::skip]
        let m = Matrix5::new(
            1.0, -t12,      -1.0,      0.0,       0.0,
            s1,  -s2 * t12, s2,        0.0,       0.0,
            0.0, 1.0,       t12,       -t2,       -1.0,
            0.0, s2,        -s2 * t12, -s3 * t2,  s3,
            0.0, 0.0,       0.0,       1.0,       -t2,
        );
        let rhs = Vector5::new(-1.0, s1, 0.0, 0.0, 0.0);
        let x = m.lu().solve(&rhs).expect("mode system is regular");
        x[3] + x[4] * t2
    }

    /// Average-referenced potentials at `angles` on the outer circle.
    pub fn electrode_potentials(&self, position: [f64; 2], moment: [f64; 2], angles: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = angles
            .iter()
            .map(|&t| self.boundary_potential(position, moment, t))
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        v
    }
}

/// Insulated homogeneous disk: on the boundary the Neumann Green's function is
/// twice the free-space one, so the dipole potential is `q.(x - x0) / (pi sigma |x - x0|^2)`.
pub fn homogeneous_boundary_potential(
    radius: f64,
    sigma: f64,
    position: [f64; 2],
    moment: [f64; 2],
    theta: f64,
) -> f64 {
    let dx = radius * theta.cos() - position[0];
    let dy = radius * theta.sin() - position[1];
    (moment[0] * dx + moment[1] * dy) / (PI * sigma * (dx * dx + dy * dy))
}

pub fn relative_l2(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = reference.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
