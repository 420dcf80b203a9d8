//! 30x30x30 occupancy grids: thresholding, IoU, silhouette projection,
//! and the "VXG1" file format.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::material::Material;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Fixed grid resolution per axis.
pub const GRID: usize = 30;
pub const GRID_VOLUME: usize = GRID * GRID * GRID;

/// Projection direction for silhouette rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View {
    /// Looking along +z; image axes are (x, y).
    Front,
    /// Looking along +x; image axes are (z, y).
    Side,
    /// Looking along +y; image axes are (x, z).
    Top,
    /// Grid rotated about the vertical (y) axis by this angle in radians,
    /// then front-projected; sampling is nearest-voxel.
    Rotated(f64),
}

/// Occupancy values in `[0, 1]` plus an optional single material label.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    occupancy: Vec<f64>,
    pub material: Option<Material>,
}

impl VoxelGrid {
    pub fn new(occupancy: Vec<f64>, material: Option<Material>) -> Result<Self> {
        if occupancy.len() != GRID_VOLUME {
            return Err(Error::dimension(format!(
                "voxel grid needs {GRID_VOLUME} values, got {}",
                occupancy.len()
            )));
        }
        if occupancy.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::validation("occupancy values must lie in [0, 1]"));
        }
        Ok(VoxelGrid {
            occupancy,
            material,
        })
    }

    pub fn empty() -> Self {
        VoxelGrid {
            occupancy: vec![0.0; GRID_VOLUME],
            material: None,
        }
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    #[inline]
    pub fn index(x: usize, y: usize, z: usize) -> usize {
        (x * GRID + y) * GRID + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.occupancy[Self::index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        self.occupancy[Self::index(x, y, z)] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.occupancy.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied_count(&self, threshold: f64) -> usize {
        self.occupancy.iter().filter(|&&v| v > threshold).count()
    }
}

/// Thresholds occupancy with a strict `>` comparison.
pub fn binarize(pred: &VoxelGrid, threshold: f64) -> VoxelGrid {
    VoxelGrid {
        occupancy: pred
            .occupancy
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
        material: pred.material,
    }
}

/// Jaccard index of `{pred > t}` against binary ground truth, with the
/// empty-vs-empty case defined as a perfect 1.0.
pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid, threshold: f64) -> Result<f64> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::validation(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if !gt.is_binary() {
        return Err(Error::validation(
            "ground-truth grid must be binary for IoU",
        ));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &y) in pred.occupancy.iter().zip(&gt.occupancy) {
        let p_in = p > threshold;
        let y_in = y == 1.0;
        if p_in && y_in {
            intersection += 1;
        }
        if p_in || y_in {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// Orthographic max-projection of a binary grid at its native resolution.
pub(crate) fn project_axis(grid: &VoxelGrid, view: View) -> GrayImage {
    let rotated;
    let (grid, view) = match view {
        View::Rotated(angle) => {
            rotated = rotate_about_y(grid, angle);
            (&rotated, View::Front)
        }
        v => (grid, v),
    };
    let mut img = GrayImage::new(GRID, GRID);
    for u in 0..GRID {
        for v in 0..GRID {
            let mut hit = false;
            for d in 0..GRID {
                let occ = match view {
                    View::Front => grid.get(u, v, d),
                    View::Side => grid.get(d, v, u),
                    View::Top => grid.get(u, d, v),
                    View::Rotated(_) => unreachable!(),
                };
                if occ > 0.5 {
                    hit = true;
                    break;
                }
            }
            if hit {
                img.set(u, v, 1.0);
            }
        }
    }
    img
}

fn rotate_about_y(grid: &VoxelGrid, angle: f64) -> VoxelGrid {
    let mut out = VoxelGrid::empty();
    out.material = grid.material;
    let c = (GRID as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    for x in 0..GRID {
        for z in 0..GRID {
            // Inverse rotation back into source coordinates.
            let dx = x as f64 - c;
            let dz = z as f64 - c;
            let sx = (cos * dx + sin * dz + c).round();
            let sz = (-sin * dx + cos * dz + c).round();
            if sx < 0.0 || sx >= GRID as f64 || sz < 0.0 || sz >= GRID as f64 {
                continue;
            }
            let (sx, sz) = (sx as usize, sz as usize);
            for y in 0..GRID {
                let v = grid.get(sx, y, sz);
                if v > 0.5 {
                    out.set(x, y, z, 1.0);
                }
            }
        }
    }
    out
}

/// Foreground-1.0 silhouette of a binary grid, scaled to
/// `out_size x out_size` (aspect preserved, zero padding).
pub fn project_silhouette(grid: &VoxelGrid, view: View, out_size: usize) -> GrayImage {
    project_axis(grid, view).resize_square(out_size)
}

const VXG_MAGIC: &[u8; 4] = b"VXG1";
const NO_MATERIAL: u8 = 255;

/// Writes magic, one material byte (0-3 or 255 = none), then 27000 f32
/// little-endian occupancies.
pub fn write_voxel_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VXG_MAGIC)?;
    w.write_all(&[grid.material.map(Material::to_byte).unwrap_or(NO_MATERIAL)])?;
    for &v in &grid.occupancy {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_voxel_grid(path: &Path) -> Result<VoxelGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("VXG1 file too short for magic"))?;
    if &magic != VXG_MAGIC {
        return Err(Error::format(format!("bad VXG1 magic {magic:?}")));
    }
    let mut mat = [0u8; 1];
    r.read_exact(&mut mat)
        .map_err(|_| Error::format("VXG1 missing material byte"))?;
    let material = if mat[0] == NO_MATERIAL {
        None
    } else {
        Some(Material::from_byte(mat[0])?)
    };
    let mut occupancy = Vec::with_capacity(GRID_VOLUME);
    let mut buf = [0u8; 4];
    for _ in 0..GRID_VOLUME {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("VXG1 occupancy payload truncated"))?;
        occupancy.push(f32::from_le_bytes(buf) as f64);
    }
    VoxelGrid::new(occupancy, material)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solid_cube(lo: usize, hi: usize) -> VoxelGrid {
        let mut g = VoxelGrid::empty();
        for x in lo..hi {
            for y in lo..hi {
                for z in lo..hi {
                    g.set(x, y, z, 1.0);
                }
            }
        }
        g
    }

    fn hollow_cube(lo: usize, hi: usize, wall: usize) -> VoxelGrid {
        let mut g = solid_cube(lo, hi);
        for x in lo + wall..hi - wall {
            for y in lo + wall..hi - wall {
                for z in lo + wall..hi - wall {
                    g.set(x, y, z, 0.0);
                }
            }
        }
        g
    }

    /// Brute-force oracle building explicit occupied index sets.
    fn iou_oracle(pred: &VoxelGrid, gt: &VoxelGrid, t: f64) -> f64 {
        let p_set: Vec<usize> = (0..GRID_VOLUME)
            .filter(|&i| pred.occupancy()[i] > t)
            .collect();
        let y_set: Vec<usize> = (0..GRID_VOLUME)
            .filter(|&i| gt.occupancy()[i] == 1.0)
            .collect();
        let inter = p_set.iter().filter(|i| y_set.contains(i)).count();
        let union = p_set.len() + y_set.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn identical_grids_have_unit_iou() {
        let g = solid_cube(5, 20);
        for t in [0.3, 0.4, 0.5] {
            assert_eq!(iou(&g, &g, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn disjoint_grids_have_zero_iou() {
        let a = solid_cube(0, 10);
        let b = solid_cube(15, 25);
        assert_eq!(iou(&a, &b, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn counted_overlap_example() {
        // pred occupies 8 voxels, gt occupies 8, overlap 4 -> 4/12.
        let mut pred = VoxelGrid::empty();
        let mut gt = VoxelGrid::empty();
        for i in 0..8 {
            pred.set(i, 0, 0, 1.0);
            gt.set(i + 4, 0, 0, 1.0);
        }
        let got = iou(&pred, &gt, 0.5).unwrap();
        assert!((got - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn non_binary_gt_is_rejected() {
        let pred = VoxelGrid::empty();
        let mut gt = VoxelGrid::empty();
        gt.set(1, 1, 1, 0.7);
        assert!(matches!(iou(&pred, &gt, 0.4), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_vs_empty_is_perfect() {
        let e = VoxelGrid::empty();
        assert_eq!(iou(&e, &e, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn iou_matches_enumeration_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let pred = VoxelGrid::new(
                (0..GRID_VOLUME).map(|_| rng.gen::<f64>()).collect(),
                None,
            )
            .unwrap();
            let gt = VoxelGrid::new(
                (0..GRID_VOLUME)
                    .map(|_| if rng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 })
                    .collect(),
                None,
            )
            .unwrap();
            let t = rng.gen_range(0.05..0.95);
            assert_eq!(iou(&pred, &gt, t).unwrap(), iou_oracle(&pred, &gt, t));
        }
    }

    #[test]
    fn iou_is_symmetric_for_binary_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                VoxelGrid::new(
                    (0..GRID_VOLUME)
                        .map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 })
                        .collect(),
                    None,
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = iou(&a, &b, 0.5).unwrap();
            let ba = iou(&b, &a, 0.5).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn iou_is_piecewise_constant_between_prediction_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pred = VoxelGrid::new(
            (0..GRID_VOLUME)
                .map(|_| [0.2, 0.45, 0.7][rng.gen_range(0..3)])
                .collect(),
            None,
        )
        .unwrap();
        let gt = VoxelGrid::new(
            (0..GRID_VOLUME)
                .map(|_| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 })
                .collect(),
            None,
        )
        .unwrap();
        // Thresholds between the same pair of prediction values agree.
        let a = iou(&pred, &gt, 0.25).unwrap();
        let b = iou(&pred, &gt, 0.44).unwrap();
        assert_eq!(a, b);
        let c = iou(&pred, &gt, 0.5).unwrap();
        let d = iou(&pred, &gt, 0.69).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn binarize_uses_strict_inequality() {
        let mut g = VoxelGrid::empty();
        g.set(0, 0, 0, 0.31);
        g.set(0, 0, 1, 0.30);
        let b = binarize(&g, 0.3);
        assert_eq!(b.get(0, 0, 0), 1.0);
        assert_eq!(b.get(0, 0, 1), 0.0);
    }

    #[test]
    fn binarize_is_idempotent_on_binary_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let g = VoxelGrid::new(
            (0..GRID_VOLUME).map(|_| rng.gen::<f64>()).collect(),
            None,
        )
        .unwrap();
        let once = binarize(&g, 0.3);
        let twice = binarize(&once, 0.7);
        assert_eq!(once, twice);
        assert_eq!(binarize(&VoxelGrid::empty(), 0.3), VoxelGrid::empty());
    }

    #[test]
    fn full_cube_projects_to_filled_square() {
        let g = solid_cube(0, GRID);
        let img = project_silhouette(&g, View::Front, 88);
        assert_eq!(img.width, 88);
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_grid_projects_to_background() {
        let img = project_silhouette(&VoxelGrid::empty(), View::Top, 88);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    /// The designed audio-needed ambiguity: a hollow cube and a solid cube
    /// share every axis silhouette while occupying different volumes.
    #[test]
    fn hollow_and_solid_cubes_share_silhouettes() {
        let solid = solid_cube(4, 26);
        let hollow = hollow_cube(4, 26, 3);
        assert!(hollow.occupied_count(0.5) < solid.occupied_count(0.5));
        for view in [View::Front, View::Side, View::Top] {
            let a = project_axis(&solid, view);
            let b = project_axis(&hollow, view);
            assert_eq!(a, b, "{view:?}");
        }
    }

    #[test]
    fn rotated_projection_of_centered_ball_is_stable() {
        let mut ball = VoxelGrid::empty();
        let c = (GRID as f64 - 1.0) / 2.0;
        for x in 0..GRID {
            for y in 0..GRID {
                for z in 0..GRID {
                    let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if d2 <= 8.0 * 8.0 {
                        ball.set(x, y, z, 1.0);
                    }
                }
            }
        }
        let front = project_axis(&ball, View::Front);
        let rot = project_axis(&ball, View::Rotated(std::f64::consts::FRAC_PI_2));
        assert_eq!(front, rot);
    }

    #[test]
    fn vxg_roundtrip_preserves_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let dir = tempfile::tempdir().unwrap();
        // f32-representable values so the f64 -> f32 -> f64 trip is exact.
        let grid = VoxelGrid::new(
            (0..GRID_VOLUME).map(|_| rng.gen::<f32>() as f64).collect(),
            Some(Material::Slate),
        )
        .unwrap();
        let p1 = dir.path().join("g.vxg");
        let p2 = dir.path().join("h.vxg");
        write_voxel_grid(&p1, &grid).unwrap();
        let back = read_voxel_grid(&p1).unwrap();
        assert_eq!(back, grid);
        write_voxel_grid(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_vxg_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vxg");
        write_voxel_grid(&p, &VoxelGrid::empty()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_voxel_grid(&p), Err(Error::Format(_))));
    }

    #[test]
    fn material_byte_three_reads_as_marble() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vxg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VXG1");
        bytes.push(3);
        bytes.extend(std::iter::repeat_n(0u8, GRID_VOLUME * 4));
        std::fs::write(&p, &bytes).unwrap();
        let grid = read_voxel_grid(&p).unwrap();
        assert_eq!(grid.material, Some(Material::Marble));
    }
}
