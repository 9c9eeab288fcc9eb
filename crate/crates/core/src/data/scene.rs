//! Procedural tabletop scenes: a ground plane with a few primitive shapes on it.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_cloud, save_cloud, ClassSplit, LabeledCloud, PointCloud, Primitive, BACKGROUND};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub points_per_object: usize,
    pub background_points: usize,
    /// Objects per scene are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    /// Minimum xy distance between object anchors, in scene units.
    pub min_separation: f64,
    /// Standard deviation of the additive coordinate noise.
    pub noise_sigma: f64,
    /// Half side length of the square ground plane.
    pub plane_half_extent: f64,
    /// Centre the scene and scale it into a unit bounding box.
    pub normalize: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points_per_object: 256,
            background_points: 512,
            max_objects: 3,
            min_separation: 1.3,
            noise_sigma: 0.01,
            plane_half_extent: 2.0,
            normalize: true,
        }
    }
}

/// Where an object was placed, in scene units before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedObject {
    pub primitive: Primitive,
    pub anchor: [f64; 2],
    pub yaw: f64,
    pub scale: f64,
}

/// Generates one labeled scene. Identical arguments give a bit-identical cloud.
pub fn generate_scene(seed: u64, class_pool: &BTreeSet<u32>, config: &SceneConfig) -> Result<LabeledCloud<f32>> {
    generate_scene_with_layout(seed, class_pool, config).map(|(c, _)| c)
}

pub fn generate_scene_with_layout(
    seed: u64,
    class_pool: &BTreeSet<u32>,
    config: &SceneConfig,
) -> Result<(LabeledCloud<f32>, Vec<PlacedObject>)> {
    if class_pool.is_empty() {
        return Err(Error::InvalidInput("class pool is empty".into()));
    }
    let pool: Vec<Primitive> = class_pool.iter().map(|&id| Primitive::from_id(id)).collect::<Result<_>>()?;
    if config.points_per_object == 0 || config.background_points == 0 {
        return Err(Error::InvalidInput("point counts must be positive".into()));
    }
    if config.max_objects == 0 {
        return Err(Error::InvalidInput("max_objects must be positive".into()));
    }
    if !(config.noise_sigma >= 0.0) || !(config.plane_half_extent > 0.0) || !(config.min_separation >= 0.0) {
        return Err(Error::InvalidInput("scene geometry parameters out of range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object_count = rng.random_range(1..=config.max_objects);
    let anchors = place_anchors(&mut rng, object_count, config)?;

    let mut objects = Vec::with_capacity(object_count);
    for anchor in anchors {
        let primitive = *pool.choose(&mut rng).expect("pool non-empty");
        objects.push(PlacedObject {
            primitive,
            anchor,
            yaw: rng.random_range(0.0..2.0 * PI),
            scale: rng.random_range(0.8..1.2),
        });
    }

    let total = config.background_points + object_count * config.points_per_object;
    let mut xyz: Vec<[f64; 3]> = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);

    let h = config.plane_half_extent;
    for _ in 0..config.background_points {
        xyz.push([rng.random_range(-h..h), rng.random_range(-h..h), 0.0]);
        labels.push(BACKGROUND);
    }
    for obj in &objects {
        let (s, c) = obj.yaw.sin_cos();
        for _ in 0..config.points_per_object {
            let [x, y, z] = sample_surface(obj.primitive, &mut rng);
            let (x, y, z) = (x * obj.scale, y * obj.scale, z * obj.scale);
            xyz.push([c * x - s * y + obj.anchor[0], s * x + c * y + obj.anchor[1], z]);
            labels.push(obj.primitive.id());
        }
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
        for p in &mut xyz {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    if config.normalize {
        normalize_unit_box(&mut xyz);
    }

    let rows: Vec<Vec<f32>> = xyz.iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect();
    let cloud = PointCloud::new(Matrix::from_rows(&rows))?;
    Ok((LabeledCloud::new(cloud, labels)?, objects))
}

fn place_anchors(rng: &mut ChaCha8Rng, count: usize, config: &SceneConfig) -> Result<Vec<[f64; 2]>> {
    let lim = (config.plane_half_extent - 0.6).max(0.1);
    let margin2 = config.min_separation * config.min_separation;
    for _ in 0..64 {
        let mut anchors: Vec<[f64; 2]> = Vec::with_capacity(count);
        for _ in 0..1000 {
            if anchors.len() == count {
                break;
            }
            let cand = [rng.random_range(-lim..lim), rng.random_range(-lim..lim)];
            let ok = anchors.iter().all(|a| {
                let dx = a[0] - cand[0];
                let dy = a[1] - cand[1];
                dx * dx + dy * dy >= margin2
            });
            if ok {
                anchors.push(cand);
            }
        }
        if anchors.len() == count {
            return Ok(anchors);
        }
    }
    Err(Error::InvalidInput(format!(
        "cannot place {count} objects with separation {} on the plane",
        config.min_separation
    )))
}

/// Zero-centres the bounding box and scales its largest side to 1.
fn normalize_unit_box(xyz: &mut [[f64; 3]]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in xyz.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let centre: Vec<f64> = (0..3).map(|k| 0.5 * (lo[k] + hi[k])).collect();
    for p in xyz.iter_mut() {
        for k in 0..3 {
            p[k] = (p[k] - centre[k]) * scale;
        }
    }
}

/// Uniform sample on the primitive's surface, in its local frame (base at z = 0).
fn sample_surface(primitive: Primitive, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match primitive {
        Primitive::Sphere => {
            // cap of a radius-0.5 sphere centred at z = 0.3, polar angle up to 0.7π
            let r = 0.5;
            let zmin = (0.7 * PI).cos();
            let u = rng.random_range(zmin..1.0);
            let phi = rng.random_range(0.0..2.0 * PI);
            let rho = (1.0 - u * u).sqrt();
            [r * rho * phi.cos(), r * rho * phi.sin(), 0.3 + r * u]
        }
        Primitive::Cuboid => {
            let (a, b, c) = (0.8, 0.55, 0.5);
            let faces = [a * b, a * c, a * c, b * c, b * c];
            match pick_weighted(rng, &faces) {
                0 => [rng.random_range(-a / 2.0..a / 2.0), rng.random_range(-b / 2.0..b / 2.0), c],
                1 => [rng.random_range(-a / 2.0..a / 2.0), -b / 2.0, rng.random_range(0.0..c)],
                2 => [rng.random_range(-a / 2.0..a / 2.0), b / 2.0, rng.random_range(0.0..c)],
                3 => [-a / 2.0, rng.random_range(-b / 2.0..b / 2.0), rng.random_range(0.0..c)],
                _ => [a / 2.0, rng.random_range(-b / 2.0..b / 2.0), rng.random_range(0.0..c)],
            }
        }
        Primitive::Cylinder => {
            let (r, h) = (0.32, 0.9);
            let side = 2.0 * PI * r * h;
            let top = PI * r * r;
            let phi = rng.random_range(0.0..2.0 * PI);
            if pick_weighted(rng, &[side, top]) == 0 {
                [r * phi.cos(), r * phi.sin(), rng.random_range(0.0..h)]
            } else {
                let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                [rho * phi.cos(), rho * phi.sin(), h]
            }
        }
        Primitive::Cone => {
            let (r, h) = (0.5, 0.9);
            let rho = r * rng.random_range(0.0f64..1.0).sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            [rho * phi.cos(), rho * phi.sin(), h * (1.0 - rho / r)]
        }
        Primitive::Torus => {
            let (big, small) = (0.42, 0.14);
            loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let w = (big + small * theta.cos()) / (big + small);
                if rng.random_range(0.0..1.0) <= w {
                    let phi = rng.random_range(0.0..1.5 * PI);
                    let rho = big + small * theta.cos();
                    break [rho * phi.cos(), rho * phi.sin(), small + small * theta.sin()];
                }
            }
        }
        Primitive::Ridge => {
            // two sloped faces meeting along the x axis at height 0.45
            let (len, half_w, h) = (1.0, 0.35, 0.45);
            let x = rng.random_range(-len / 2.0..len / 2.0);
            let t = rng.random_range(0.0..1.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            [x, side * half_w * t, h * (1.0 - t)]
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// A generated scene collection together with its class split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clouds: Vec<LabeledCloud<f32>>,
    pub split: ClassSplit,
    pub scene: SceneConfig,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    scene_count: usize,
    train_classes: Vec<String>,
    test_classes: Vec<String>,
    scene: SceneConfig,
}

const MANIFEST: &str = "dataset.toml";

fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Generates `scene_count` scenes. The first two thirds draw objects from the
/// train classes only; the rest from the test classes only.
pub fn generate_dataset(scene_count: usize, seed: u64, split: &ClassSplit, scene: &SceneConfig) -> Result<Dataset> {
    if scene_count < 2 {
        return Err(Error::InvalidInput("need at least two scenes".into()));
    }
    let train_count = (scene_count * 2).div_ceil(3).min(scene_count - 1);
    let clouds = (0..scene_count)
        .into_par_iter()
        .map(|i| {
            let pool = if i < train_count {
                split.train_classes()
            } else {
                split.test_classes()
            };
            generate_scene(scene_seed(seed, i), pool, scene)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        clouds,
        split: split.clone(),
        scene: scene.clone(),
        seed,
    })
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let scenes = dir.join("scenes");
        fs::create_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        for (i, c) in self.clouds.iter().enumerate() {
            save_cloud(&scenes.join(format!("scene_{i:05}.fspc")), c)?;
        }
        let names = |s: &BTreeSet<u32>| s.iter().map(|&c| super::class_name(c)).collect();
        let manifest = DatasetManifest {
            seed: self.seed,
            scene_count: self.clouds.len(),
            train_classes: names(self.split.train_classes()),
            test_classes: names(self.split.test_classes()),
            scene: self.scene.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let ids = |names: &[String]| {
            names
                .iter()
                .map(|n| Primitive::from_name(n).map(Primitive::id))
                .collect::<Result<Vec<u32>>>()
        };
        let split = ClassSplit::new(ids(&manifest.train_classes)?, ids(&manifest.test_classes)?)?;
        let clouds = (0..manifest.scene_count)
            .map(|i| load_cloud(&dir.join("scenes").join(format!("scene_{i:05}.fspc"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clouds,
            split,
            scene: manifest.scene,
            seed: manifest.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn point_count_follows_arguments() {
        let cfg = SceneConfig {
            points_per_object: 256,
            background_points: 512,
            ..SceneConfig::default()
        };
        let (scene, objects) = generate_scene_with_layout(7, &pool(&[1]), &cfg).unwrap();
        assert_eq!(scene.cloud.len(), 256 * objects.len() + 512);
        assert!(scene.labels.iter().all(|&l| l == 0 || l == 1));
        assert_eq!(scene.labels.iter().filter(|&&l| l == 0).count(), 512);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &pool(&[1, 2, 3]), &cfg).unwrap();
        let b = generate_scene(7, &pool(&[1, 2, 3]), &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &pool(&[1, 2, 3]), &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_pools() {
        let cfg = SceneConfig::default();
        assert!(generate_scene(7, &pool(&[]), &cfg).is_err());
        assert!(generate_scene(7, &pool(&[9]), &cfg).is_err());
    }

    #[test]
    fn objects_are_separated_and_scene_is_normalized() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let (scene, objects) = generate_scene_with_layout(seed, &pool(&[1, 2, 3, 4, 5, 6]), &cfg).unwrap();
            for (i, a) in objects.iter().enumerate() {
                for b in &objects[i + 1..] {
                    let d = ((a.anchor[0] - b.anchor[0]).powi(2) + (a.anchor[1] - b.anchor[1]).powi(2)).sqrt();
                    assert!(d >= cfg.min_separation);
                }
            }
            let pts = scene.cloud.points();
            for k in 0..3 {
                let col: Vec<f32> = (0..pts.rows()).map(|r| pts[(r, k)]).collect();
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                assert!(hi - lo <= 1.0 + 1e-5);
                assert!((hi + lo).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dataset_scenes_respect_split() {
        let split = ClassSplit::standard();
        let cfg = SceneConfig {
            points_per_object: 16,
            background_points: 16,
            ..SceneConfig::default()
        };
        let ds = generate_dataset(30, 1, &split, &cfg).unwrap();
        let train = ds.clouds.iter().filter(|c| c.classes().iter().all(|k| *k == 0 || split.train_classes().contains(k)));
        let test = ds.clouds.iter().filter(|c| c.classes().iter().all(|k| *k == 0 || split.test_classes().contains(k)));
        assert_eq!(train.count() + test.count(), 30);
    }
}
