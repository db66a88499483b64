//! Explicit voxel scenes: density and color grids with a binary file format.

use std::io::{Read, Write};
use std::path::Path;

use gradtape::{Scalar, Tensor};

use crate::error::{param_err, Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// A `G^3` grid of non-negative density and RGB color in `[0, 1]`, covering
/// the cube `[-extent, extent]^3`.
///
/// Cell `(ix, iy, iz)` is stored at `(ix * G + iy) * G + iz`; its center is
/// `-extent + (i + 0.5) * 2 * extent / G` along each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene3D {
    grid: usize,
    extent: f32,
    density: Vec<f32>,
    color: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SceneStats {
    pub density_min: f32,
    pub density_max: f32,
    pub density_mean: f32,
    pub occupied_fraction: f32,
    pub color_mean: f32,
}

impl Scene3D {
    pub fn new(grid: usize, extent: f32, density: Vec<f32>, color: Vec<f32>) -> Result<Self> {
        let cells = grid * grid * grid;
        if grid == 0 || !(extent > 0.0) {
            return Err(param_err!("scene needs G >= 1 and extent > 0"));
        }
        if density.len() != cells || color.len() != 3 * cells {
            return Err(param_err!(
                "scene grids must hold {cells} densities and {} colors, got {} and {}",
                3 * cells,
                density.len(),
                color.len()
            ));
        }
        if let Some(v) = density.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(param_err!("density must be finite and non-negative, found {v}"));
        }
        if let Some(v) = color.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err!("color must lie in [0, 1], found {v}"));
        }
        Ok(Scene3D { grid, extent, density, color })
    }

    pub fn empty(grid: usize, extent: f32) -> Self {
        let cells = grid * grid * grid;
        Scene3D { grid, extent, density: vec![0.0; cells], color: vec![0.0; 3 * cells] }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn extent(&self) -> f32 {
        self.extent
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid * self.grid
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }

    pub fn color(&self) -> &[f32] {
        &self.color
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.grid + iy) * self.grid + iz
    }

    pub fn cell_center(&self, i: usize) -> f32 {
        -self.extent + (i as f32 + 0.5) * 2.0 * self.extent / self.grid as f32
    }

    /// Rows of `[sigma, r, g, b]` per cell, the layout the renderer consumes.
    pub fn to_rows<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(4 * self.cells());
        for i in 0..self.cells() {
            data.push(T::of(self.density[i] as f64));
            for c in 0..3 {
                data.push(T::of(self.color[3 * i + c] as f64));
            }
        }
        Tensor::new(vec![self.cells(), 4], data)
    }

    /// Inverse of [`Scene3D::to_rows`] for one scene's rows.
    pub fn from_rows<T: Scalar>(grid: usize, extent: f32, rows: &[T]) -> Result<Self> {
        let cells = grid * grid * grid;
        if rows.len() != 4 * cells {
            return Err(param_err!("expected {} scene rows values, got {}", 4 * cells, rows.len()));
        }
        let mut density = Vec::with_capacity(cells);
        let mut color = Vec::with_capacity(3 * cells);
        for r in rows.chunks_exact(4) {
            density.push(r[0].f64() as f32);
            color.extend(r[1..].iter().map(|v| v.f64() as f32));
        }
        Scene3D::new(grid, extent, density, color)
    }

    pub fn stats(&self) -> SceneStats {
        let n = self.density.len() as f32;
        SceneStats {
            density_min: self.density.iter().copied().fold(f32::INFINITY, f32::min),
            density_max: self.density.iter().copied().fold(0.0, f32::max),
            density_mean: self.density.iter().sum::<f32>() / n,
            occupied_fraction: self.density.iter().filter(|&&d| d > 1.0).count() as f32 / n,
            color_mean: self.color.iter().sum::<f32>() / (3.0 * n),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&SCENE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.grid as u32).to_le_bytes())?;
        w.write_all(&self.extent.to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * (self.density.len() + self.color.len()));
        for v in self.density.iter().chain(&self.color) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 {
            return Err("truncated scene header".into());
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let version = u32::from_le_bytes(word(0));
        if version != SCENE_FORMAT_VERSION {
            return Err(format!("unsupported scene version {version}"));
        }
        let grid = u32::from_le_bytes(word(4)) as usize;
        let extent = f32::from_le_bytes(word(8));
        let cells = grid * grid * grid;
        if bytes.len() != 12 + 16 * cells {
            return Err(format!("expected {} bytes for G={grid}, got {}", 12 + 16 * cells, bytes.len()));
        }
        let vals: Vec<f32> =
            bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let color = vals[cells..].to_vec();
        let mut density = vals;
        density.truncate(cells);
        Scene3D::new(grid, extent, density, color).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_exact() {
        let g = 3;
        let density: Vec<f32> = (0..27).map(|i| i as f32 * 0.37).collect();
        let color: Vec<f32> = (0..81).map(|i| (i as f32 / 81.0).sqrt()).collect();
        let s = Scene3D::new(g, 1.25, density, color).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 16 * 27);
        assert_eq!(Scene3D::decode(&buf).unwrap(), s);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Scene3D::new(1, 1.0, vec![-1.0], vec![0.0; 3]).is_err());
        assert!(Scene3D::new(1, 1.0, vec![0.0], vec![0.0, 1.5, 0.0]).is_err());
        assert!(Scene3D::new(2, 1.0, vec![0.0], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let s = Scene3D::new(2, 1.0, (0..8).map(|i| i as f32).collect(), vec![0.5; 24]).unwrap();
        let rows = s.to_rows::<f32>();
        assert_eq!(rows.shape(), &[8, 4]);
        assert_eq!(Scene3D::from_rows(2, 1.0, rows.data()).unwrap(), s);
    }
}
