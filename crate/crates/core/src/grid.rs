//! Uniform vertex-centered grids on box domains (n = 1 or 2).
//!
//! Nodes sit on the box boundary, so homogeneous Dirichlet data lives on
//! actual grid points.  Quadrature weights are the volumes of the
//! node-centered dual cells (h inside, h/2 at the ends, tensor products in
//! two dimensions), which makes a constant density integrate to the exact
//! box volume.  All interior nodes carry the same weight; only boundary
//! nodes get the halved cells.
//!
//! Flat indexing is x-fastest: `flat = ix + iy * counts[0]`.

use crate::error::{BhjbError, Result};
use crate::problem::SpatialDomain;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub dim: usize,
    /// Nodes per axis; `counts[1] == 1` when `dim == 1`.
    pub counts: [usize; 2],
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub spacing: [f64; 2],
}

impl SpatialGrid {
    pub fn new(domain: &SpatialDomain, counts: &[usize]) -> Result<Self> {
        if counts.len() != domain.dim {
            return Err(BhjbError::Dimension(format!(
                "grid counts has {} axes, domain has {}",
                counts.len(),
                domain.dim
            )));
        }
        let mut c = [1usize; 2];
        let mut lo = [0.0f64; 2];
        let mut up = [1.0f64; 2];
        let mut h = [1.0f64; 2];
        for ax in 0..domain.dim {
            if counts[ax] < 3 {
                return Err(BhjbError::Config(format!(
                    "grid: axis {ax} needs at least 3 nodes, got {}",
                    counts[ax]
                )));
            }
            c[ax] = counts[ax];
            lo[ax] = domain.lower[ax];
            up[ax] = domain.upper[ax];
            h[ax] = (up[ax] - lo[ax]) / (counts[ax] - 1) as f64;
        }
        Ok(SpatialGrid { dim: domain.dim, counts: c, lower: lo, upper: up, spacing: h })
    }

    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi(&self, flat: usize) -> [usize; 2] {
        [flat % self.counts[0], flat / self.counts[0]]
    }

    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        ix + iy * self.counts[0]
    }

    pub fn point(&self, flat: usize) -> [f64; 2] {
        let m = self.multi(flat);
        [
            self.lower[0] + m[0] as f64 * self.spacing[0],
            self.lower[1] + m[1] as f64 * self.spacing[1],
        ]
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let m = self.multi(flat);
        for ax in 0..self.dim {
            if m[ax] == 0 || m[ax] == self.counts[ax] - 1 {
                return true;
            }
        }
        false
    }

    /// Flat indices of interior nodes, ascending.
    pub fn interior(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_boundary(i)).collect()
    }

    pub fn interior_len(&self) -> usize {
        let mut n = self.counts[0] - 2;
        if self.dim == 2 {
            n *= self.counts[1] - 2;
        }
        n
    }

    /// Dual-cell quadrature weight of a node.
    pub fn quad_weight(&self, flat: usize) -> f64 {
        let m = self.multi(flat);
        let mut w = 1.0;
        for ax in 0..self.dim {
            let full = self.spacing[ax];
            w *= if m[ax] == 0 || m[ax] == self.counts[ax] - 1 { full / 2.0 } else { full };
        }
        w
    }

    /// Common weight of every interior node (h, or hx*hy).
    pub fn interior_weight(&self) -> f64 {
        let mut w = self.spacing[0];
        if self.dim == 2 {
            w *= self.spacing[1];
        }
        w
    }

    /// Quadrature of a full-grid slice.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        crate::linalg::kahan_sum((0..self.len()).map(|i| self.quad_weight(i) * values[i]))
    }

    /// Multilinear interpolation weights at `x`: up to 2^dim (flat, weight)
    /// pairs summing to 1.  Errors when `x` leaves the box.
    pub fn interp_weights(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for ax in 0..self.dim {
            let rel = (x[ax] - self.lower[ax]) / self.spacing[ax];
            if rel < -1e-12 || rel > (self.counts[ax] - 1) as f64 + 1e-12 {
                return Err(BhjbError::Config(format!(
                    "point coordinate {} outside grid axis {ax}",
                    x[ax]
                )));
            }
            let i = (rel.floor().max(0.0) as usize).min(self.counts[ax] - 2);
            base[ax] = i;
            frac[ax] = (rel - i as f64).clamp(0.0, 1.0);
        }
        let mut out = Vec::with_capacity(1 << self.dim);
        if self.dim == 1 {
            out.push((self.flat(base[0], 0), 1.0 - frac[0]));
            out.push((self.flat(base[0] + 1, 0), frac[0]));
        } else {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let w = (if dx == 0 { 1.0 - frac[0] } else { frac[0] })
                        * (if dy == 0 { 1.0 - frac[1] } else { frac[1] });
                    out.push((self.flat(base[0] + dx, base[1] + dy), w));
                }
            }
        }
        Ok(out)
    }

    /// Nearest grid node to `x` (ties to the lower index).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; 2];
        for ax in 0..self.dim {
            let rel = (x[ax] - self.lower[ax]) / self.spacing[ax];
            let i = rel.round();
            let i = if rel - i.floor() == 0.5 { rel.floor() } else { i };
            idx[ax] = (i.max(0.0) as usize).min(self.counts[ax] - 1);
        }
        self.flat(idx[0], idx[1])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|ax| x[ax] > self.lower[ax] && x[ax] < self.upper[ax])
    }
}
