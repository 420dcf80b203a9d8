//! Procedural voxel shapes. Hollow variants keep the solid variant's outer
//! hull, so their axis silhouettes are identical while their occupancy
//! differs; only audio can tell them apart.

use crate::error::{Error, Result};
use crate::voxel::{VoxelGrid, GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    SolidBox,
    HollowBox,
    Sphere,
    ShellSphere,
    LBeam,
    TableLike,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::SolidBox,
        ShapeKind::HollowBox,
        ShapeKind::Sphere,
        ShapeKind::ShellSphere,
        ShapeKind::LBeam,
        ShapeKind::TableLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::SolidBox => "solid_box",
            ShapeKind::HollowBox => "hollow_box",
            ShapeKind::Sphere => "sphere",
            ShapeKind::ShellSphere => "shell_sphere",
            ShapeKind::LBeam => "l_beam",
            ShapeKind::TableLike => "table_like",
        }
    }

    pub fn parse(s: &str) -> Result<ShapeKind> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown shape kind '{s}'")))
    }

    /// The same outer hull with an interior cavity, where one exists.
    pub fn hollow_variant(self) -> Option<ShapeKind> {
        match self {
            ShapeKind::SolidBox => Some(ShapeKind::HollowBox),
            ShapeKind::Sphere => Some(ShapeKind::ShellSphere),
            _ => None,
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Deterministic binary grid for a shape at `size_scale` in `(0.3, 1]`.
pub fn gen_shape(kind: ShapeKind, size_scale: f64) -> Result<VoxelGrid> {
    if !(size_scale > 0.3 && size_scale <= 1.0) {
        return Err(Error::config(format!(
            "size_scale must lie in (0.3, 1], got {size_scale}"
        )));
    }
    let side = ((GRID as f64 * size_scale).round() as usize).clamp(1, GRID);
    let lo = (GRID - side) / 2;
    let hi = lo + side;
    let mut grid = VoxelGrid::empty();
    match kind {
        ShapeKind::SolidBox => {
            fill_box(&mut grid, lo, hi, lo, hi, lo, hi);
        }
        ShapeKind::HollowBox => {
            fill_box(&mut grid, lo, hi, lo, hi, lo, hi);
            let wall = box_wall(side);
            carve_box(&mut grid, lo + wall, hi - wall);
        }
        ShapeKind::Sphere => {
            fill_ball(&mut grid, radius(size_scale), 0.0);
        }
        ShapeKind::ShellSphere => {
            let r_out = radius(size_scale);
            let r_in = r_out - (0.2 * r_out).max(2.0);
            fill_ball(&mut grid, r_out, r_in.max(0.0));
        }
        ShapeKind::LBeam => {
            let t = (side as f64 / 3.0).round().max(2.0) as usize;
            for x in lo..hi {
                for y in lo..hi {
                    let vertical = x - lo < t;
                    let horizontal = y >= hi - t;
                    if vertical || horizontal {
                        for z in lo..hi {
                            grid.set(x, y, z, 1.0);
                        }
                    }
                }
            }
        }
        ShapeKind::TableLike => {
            let t = (side as f64 / 6.0).round().max(2.0) as usize;
            // Top slab.
            fill_box(&mut grid, lo, hi, lo, lo + t, lo, hi);
            // Four corner legs.
            for (x0, z0) in [(lo, lo), (lo, hi - t), (hi - t, lo), (hi - t, hi - t)] {
                fill_box(&mut grid, x0, x0 + t, lo, hi, z0, z0 + t);
            }
        }
    }
    Ok(grid)
}

fn radius(size_scale: f64) -> f64 {
    GRID as f64 / 2.0 * size_scale
}

fn box_wall(side: usize) -> usize {
    let wall = ((side as f64 / 8.0).round() as usize).max(2);
    wall.min((side - 1) / 2)
}

fn fill_box(g: &mut VoxelGrid, x0: usize, x1: usize, y0: usize, y1: usize, z0: usize, z1: usize) {
    for x in x0..x1 {
        for y in y0..y1 {
            for z in z0..z1 {
                g.set(x, y, z, 1.0);
            }
        }
    }
}

fn carve_box(g: &mut VoxelGrid, lo: usize, hi: usize) {
    for x in lo..hi {
        for y in lo..hi {
            for z in lo..hi {
                g.set(x, y, z, 0.0);
            }
        }
    }
}

/// Occupies voxels whose centers satisfy `r_in < dist <= r_out` from the
/// grid center (`r_in = 0` gives a solid ball).
fn fill_ball(g: &mut VoxelGrid, r_out: f64, r_in: f64) {
    let c = (GRID as f64 - 1.0) / 2.0;
    let (ro2, ri2) = (r_out * r_out, r_in * r_in);
    for x in 0..GRID {
        for y in 0..GRID {
            for z in 0..GRID {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                if d2 <= ro2 && d2 > ri2 {
                    g.set(x, y, z, 1.0);
                }
            }
        }
    }
}
