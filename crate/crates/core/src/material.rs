//! Object material labels shared by the audio tables, voxel grids, and the
//! classifier head.

use crate::error::{Error, Result};

pub const MATERIAL_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Material {
    Granite,
    Slate,
    Oak,
    Marble,
}

impl Material {
    pub const ALL: [Material; MATERIAL_COUNT] = [
        Material::Granite,
        Material::Slate,
        Material::Oak,
        Material::Marble,
    ];

    /// Stable byte used by the VXG1 file format (255 = no material).
    pub fn to_byte(self) -> u8 {
        match self {
            Material::Granite => 0,
            Material::Slate => 1,
            Material::Oak => 2,
            Material::Marble => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Material> {
        match b {
            0 => Ok(Material::Granite),
            1 => Ok(Material::Slate),
            2 => Ok(Material::Oak),
            3 => Ok(Material::Marble),
            _ => Err(Error::format(format!("unknown material byte {b}"))),
        }
    }

    pub fn index(self) -> usize {
        self.to_byte() as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Granite => "granite",
            Material::Slate => "slate",
            Material::Oak => "oak",
            Material::Marble => "marble",
        }
    }

    pub fn parse(s: &str) -> Result<Material> {
        match s {
            "granite" => Ok(Material::Granite),
            "slate" => Ok(Material::Slate),
            "oak" => Ok(Material::Oak),
            "marble" => Ok(Material::Marble),
            _ => Err(Error::validation(format!("unknown material '{s}'"))),
        }
    }
}

impl std::fmt::Display for Material {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
