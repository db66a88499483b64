//! Procedural primitive scenes, ground-truth renders and the on-disk dataset.

use std::path::{Path, PathBuf};

use gradtape::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{make_pose_set, CameraPose, CameraPoseSet, DEFAULT_AZIMUTHS};
use crate::error::{param_err, Error, Result};
use crate::render::{render, render_multiview, RenderConfig};
use crate::scene::Scene3D;
use crate::seed;
use crate::views::{MultiViewBatch, Role};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Sphere,
}

/// A solid primitive. `size` holds box half-widths per axis; spheres use
/// `size[0]` as radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: [f64; 3],
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Box => (0..3).all(|a| d[a].abs() <= self.size[a]),
            Shape::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= self.size[0] * self.size[0],
        }
    }

    fn half_extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Box => self.size,
            Shape::Sphere => [self.size[0]; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

/// Voxelization parameters for ground-truth scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGridConfig {
    pub grid: usize,
    pub extent: f64,
    pub density: f64,
    /// Primitives are drawn inside a ball of this radius.
    pub content_radius: f64,
}

impl Default for SceneGridConfig {
    fn default() -> Self {
        SceneGridConfig { grid: 16, extent: 1.0, density: 50.0, content_radius: 0.8 }
    }
}

/// Draws 1 to 4 random primitives.
pub fn sample_spec(scene_seed: u64, cfg: &SceneGridConfig) -> SceneSpec {
    let mut rng = seed::rng(scene_seed);
    let count = rng.random_range(1..=4);
    let lim = cfg.content_radius;
    let primitives = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) { Shape::Box } else { Shape::Sphere };
            let size = match shape {
                Shape::Box => [0; 3].map(|_| rng.random_range(0.15..0.4) * lim),
                Shape::Sphere => [rng.random_range(0.25..0.45) * lim; 3],
            };
            let center = [0; 3].map(|_| rng.random_range(-0.35..0.35) * lim);
            let color = [0; 3].map(|_| rng.random_range(0.05..0.95));
            Primitive { shape, center, size, color }
        })
        .collect();
    SceneSpec { seed: scene_seed, primitives }
}

/// Voxelizes a spec: cells whose centers fall inside a primitive are opaque
/// with that primitive's color (later primitives win). Colors of occupied
/// cells are then copied one ring outward so trilinear lookups at surfaces do
/// not blend toward black.
pub fn generate_scene(spec: &SceneSpec, cfg: &SceneGridConfig) -> Result<Scene3D> {
    for (i, p) in spec.primitives.iter().enumerate() {
        let h = p.half_extent();
        if (0..3).any(|a| (p.center[a].abs() + h[a]) > cfg.extent || !(h[a] > 0.0)) {
            return Err(param_err!("primitive {i} does not fit inside the grid extent {}", cfg.extent));
        }
        if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(param_err!("primitive {i} color outside [0, 1]"));
        }
    }
    let g = cfg.grid;
    let cells = g * g * g;
    let center = |i: usize| -cfg.extent + (i as f64 + 0.5) * 2.0 * cfg.extent / g as f64;
    let mut density = vec![0f32; cells];
    let mut color = vec![0f32; 3 * cells];
    for ix in 0..g {
        for iy in 0..g {
            for iz in 0..g {
                let idx = (ix * g + iy) * g + iz;
                let p = [center(ix), center(iy), center(iz)];
                for prim in &spec.primitives {
                    if prim.contains(p) {
                        density[idx] = cfg.density as f32;
                        for c in 0..3 {
                            color[3 * idx + c] = prim.color[c] as f32;
                        }
                    }
                }
            }
        }
    }
    let dilated = dilate_colors(&density, &color, g);
    Scene3D::new(g, cfg.extent as f32, density, dilated)
}

fn dilate_colors(density: &[f32], color: &[f32], g: usize) -> Vec<f32> {
    let mut out = color.to_vec();
    let gi = g as i64;
    for ix in 0..gi {
        for iy in 0..gi {
            for iz in 0..gi {
                let idx = ((ix * gi + iy) * gi + iz) as usize;
                if density[idx] > 0.0 {
                    continue;
                }
                let mut acc = [0f64; 3];
                let mut n = 0;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let (x, y, z) = (ix + dx, iy + dy, iz + dz);
                            if x < 0 || y < 0 || z < 0 || x >= gi || y >= gi || z >= gi {
                                continue;
                            }
                            let j = ((x * gi + y) * gi + z) as usize;
                            if density[j] > 0.0 {
                                for c in 0..3 {
                                    acc[c] += color[3 * j + c] as f64;
                                }
                                n += 1;
                            }
                        }
                    }
                }
                if n > 0 {
                    for c in 0..3 {
                        out[3 * idx + c] = (acc[c] / n as f64) as f32;
                    }
                }
            }
        }
    }
    out
}

/// Everything that determines a dataset besides `(count, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub camera_radius: f64,
    pub azimuths: Vec<f64>,
    pub elevation: f64,
    pub cond_azimuth: f64,
    pub cond_elevation: f64,
    pub test_count: usize,
    pub scene: SceneGridConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            resolution: 32,
            camera_radius: 2.2,
            azimuths: DEFAULT_AZIMUTHS.to_vec(),
            elevation: 0.0,
            cond_azimuth: 30.0,
            cond_elevation: 20.0,
            test_count: 32,
            scene: SceneGridConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn poses(&self) -> Result<CameraPoseSet> {
        make_pose_set(&self.azimuths, self.elevation, self.camera_radius)
    }

    pub fn cond_pose(&self) -> CameraPose {
        CameraPose::new(self.cond_azimuth, self.cond_elevation, self.camera_radius)
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::bracketing(self.resolution, self.camera_radius, self.scene.extent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: usize,
    pub seed: u64,
    pub cond: String,
    pub views: Vec<String>,
    pub scene: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
    pub poses: CameraPoseSet,
    pub cond_pose: CameraPose,
    pub render: RenderConfig,
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(param_err!("unknown split {s:?} (expected train, test or all)")),
        }
    }
}

impl DatasetManifest {
    /// Scene indices of a split; the last `test_count` scenes are held out.
    pub fn split(&self, split: Split) -> Vec<usize> {
        let test = self.config.test_count.min(self.count);
        match split {
            Split::Train => (0..self.count - test).collect(),
            Split::Test => (self.count - test..self.count).collect(),
            Split::All => (0..self.count).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// A rendered ground-truth scene: condition image, GT views and the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `(R, R, 3)` in `[0, 1]`.
    pub x_c: Tensor<f32>,
    pub views: MultiViewBatch,
    pub scene: Scene3D,
}

/// Generates scene `index` of a dataset in memory.
pub fn make_sample(index: usize, master_seed: u64, cfg: &DatasetConfig) -> Result<Sample> {
    let scene_seed = seed::derive(master_seed, "scene", index as u64);
    let spec = sample_spec(scene_seed, &cfg.scene);
    let scene = generate_scene(&spec, &cfg.scene)?;
    let rc = cfg.render_config();
    let (views, _) = render_multiview(&scene, &cfg.poses()?, &rc)?;
    let views = MultiViewBatch::new(views.into_views(), cfg.poses()?, Role::GroundTruth)?;
    let x_c = render(&scene, cfg.cond_pose(), &rc)?;
    Ok(Sample { id: index, x_c, views, scene })
}

fn write_image(dir: &Path, stem: &str, img: &Tensor<f32>) -> Result<()> {
    let r = img.shape()[0];
    let raw: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw_path = dir.join(format!("{stem}.raw"));
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let png_path = dir.join(format!("{stem}.png"));
    image::save_buffer(&png_path, &bytes, r as u32, r as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::format(&png_path, e.to_string()))
}

fn read_raw(path: &Path, r: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * r * r * 3 {
        return Err(Error::format(path, format!("expected {} bytes for a {r}x{r} image", 12 * r * r)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(vec![r, r, 3], data))
}

/// Writes `count` scenes under `out_dir`. The manifest is written last via a
/// temporary file and rename, so an interrupted build leaves none.
pub fn build_dataset(count: usize, master_seed: u64, out_dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let n = cfg.azimuths.len();
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let sample = make_sample(i, master_seed, cfg)?;
        let name = format!("scene_{i:05}");
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_image(&dir, "cond", &sample.x_c)?;
        for v in 0..n {
            write_image(&dir, &format!("view_{v}"), &sample.views.view(v))?;
        }
        sample.scene.save(&dir.join("scene.s3d"))?;
        scenes.push(SceneEntry {
            id: i,
            seed: seed::derive(master_seed, "scene", i as u64),
            cond: format!("{name}/cond"),
            views: (0..n).map(|v| format!("{name}/view_{v}")).collect(),
            scene: format!("{name}/scene.s3d"),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        count,
        seed: master_seed,
        resolution: cfg.resolution,
        poses: cfg.poses()?,
        cond_pose: cfg.cond_pose(),
        render: cfg.render_config(),
        config: cfg.clone(),
        scenes,
    };
    let tmp = out_dir.join("manifest.json.tmp");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let manifest = DatasetManifest::load(&file)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(&file, format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(Dataset { manifest, root })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    /// Loads the given scenes; with `shuffle` the order is a seeded
    /// permutation of `indices`.
    pub fn load_batch(&self, indices: &[usize], shuffle: Option<u64>) -> Result<Vec<Sample>> {
        let mut order = indices.to_vec();
        if let Some(s) = shuffle {
            order.shuffle(&mut seed::rng(s));
        }
        order.iter().map(|&i| self.load_scene(i)).collect()
    }

    pub fn load_scene(&self, index: usize) -> Result<Sample> {
        let m = &self.manifest;
        let entry = m
            .scenes
            .get(index)
            .ok_or_else(|| param_err!("scene index {index} out of range (dataset has {})", m.count))?;
        let r = m.resolution;
        let x_c = read_raw(&self.root.join(format!("{}.raw", entry.cond)), r)?;
        let views: Vec<Tensor<f32>> = entry
            .views
            .iter()
            .map(|v| read_raw(&self.root.join(format!("{v}.raw")), r))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = views.iter().collect();
        let stacked = Tensor::concat_rows(&refs).reshape(vec![views.len(), r, r, 3]);
        let batch = MultiViewBatch::new(stacked, m.poses.clone(), Role::GroundTruth)?;
        let scene = Scene3D::load(&self.root.join(&entry.scene))?;
        Ok(Sample { id: index, x_c, views: batch, scene })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.load_batch(&self.manifest.split(split), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_gives_empty_grid() {
        let s = generate_scene(&SceneSpec { seed: 0, primitives: vec![] }, &SceneGridConfig::default()).unwrap();
        assert!(s.density().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn centered_box_fills_its_voxel_volume() {
        let cfg = SceneGridConfig::default();
        let prim = Primitive { shape: Shape::Box, center: [0.0; 3], size: [0.25, 0.375, 0.125], color: [0.2, 0.4, 0.6] };
        let s = generate_scene(&SceneSpec { seed: 0, primitives: vec![prim] }, &cfg).unwrap();
        // Cell size 0.125: half-widths cover 4, 6 and 2 cells per axis.
        assert_eq!(s.density().iter().filter(|&&d| d > 0.0).count(), 4 * 6 * 2);
    }

    #[test]
    fn out_of_bounds_primitive_is_rejected() {
        let prim = Primitive { shape: Shape::Sphere, center: [0.9, 0.0, 0.0], size: [0.2; 3], color: [0.5; 3] };
        assert!(generate_scene(&SceneSpec { seed: 0, primitives: vec![prim] }, &SceneGridConfig::default()).is_err());
    }

    #[test]
    fn specs_are_seed_deterministic_and_fit() {
        let cfg = SceneGridConfig::default();
        for s in 0..50 {
            let a = sample_spec(s, &cfg);
            assert_eq!(a, sample_spec(s, &cfg));
            assert!((1..=4).contains(&a.primitives.len()));
            generate_scene(&a, &cfg).unwrap();
        }
    }
}
