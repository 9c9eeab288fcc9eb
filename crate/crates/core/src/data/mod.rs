//! Point clouds, labels, class splits and few-shot episodes.

mod episode;
mod io;
mod scene;

pub use episode::{sample_episode, sample_episode_for_classes, Episode, SamplingMode, SupportShot};
pub use io::{load_cloud, read_cloud, save_cloud, write_cloud, write_ply, CLOUD_MAGIC};
pub use scene::{generate_dataset, generate_scene, generate_scene_with_layout, Dataset, PlacedObject, SceneConfig};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Class id used for background points.
pub const BACKGROUND: u32 = 0;

/// `M × f` point matrix; the first three columns are xyz.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Matrix<T>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Matrix<T>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::InvalidInput("point cloud must contain at least one point".into()));
        }
        if points.cols() < 3 {
            return Err(Error::InvalidInput(format!(
                "point cloud needs at least 3 channels, got {}",
                points.cols()
            )));
        }
        if !points.is_finite() {
            return Err(Error::InvalidInput("point cloud contains non-finite values".into()));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(xyz: &[[T; 3]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = xyz.iter().map(|p| p.to_vec()).collect();
        Self::new(Matrix::from_rows(&rows))
    }

    /// Number of points `M`.
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Channel count `f`.
    pub fn channels(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Matrix<T> {
        &self.points
    }

    pub fn xyz(&self, i: usize) -> [T; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    /// The xyz columns as an `M × 3` matrix.
    pub fn xyz_matrix(&self) -> Matrix<T> {
        self.points.col_range(0, 3)
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.cast(),
        }
    }

    /// Same cloud with xyz shifted by `offset`.
    pub fn translated(&self, offset: [T; 3]) -> Self {
        let mut points = self.points.clone();
        for i in 0..points.rows() {
            let row = points.row_mut(i);
            for k in 0..3 {
                row[k] += offset[k];
            }
        }
        Self { points }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(perm),
        }
    }
}

/// A cloud with one class id per point; `0` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud<T> {
    pub cloud: PointCloud<T>,
    pub labels: Vec<u32>,
}

impl<T: Scalar> LabeledCloud<T> {
    pub fn new(cloud: PointCloud<T>, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        Ok(Self { cloud, labels })
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn contains_class(&self, class: u32) -> bool {
        self.labels.contains(&class)
    }

    pub fn cast<U: Scalar>(&self) -> LabeledCloud<U> {
        LabeledCloud {
            cloud: self.cloud.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Synthetic foreground shape families. The discriminant is the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere = 1,
    Cuboid = 2,
    Cylinder = 3,
    Cone = 4,
    Torus = 5,
    Ridge = 6,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::Sphere,
        Primitive::Cuboid,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
        Primitive::Ridge,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown primitive id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cuboid => "cuboid",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::Ridge => "ridge",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown primitive name {name:?}")))
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Human-readable name for a class id (background included).
pub fn class_name(id: u32) -> String {
    if id == BACKGROUND {
        "background".to_string()
    } else {
        Primitive::from_id(id).map_or_else(|_| format!("class{id}"), |p| p.name().to_string())
    }
}

/// Disjoint train/test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    train: BTreeSet<u32>,
    test: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn new(train: impl IntoIterator<Item = u32>, test: impl IntoIterator<Item = u32>) -> Result<Self> {
        let train: BTreeSet<u32> = train.into_iter().collect();
        let test: BTreeSet<u32> = test.into_iter().collect();
        if train.contains(&BACKGROUND) || test.contains(&BACKGROUND) {
            return Err(Error::InvalidInput("background cannot be a split class".into()));
        }
        if let Some(c) = train.intersection(&test).next() {
            return Err(Error::InvalidInput(format!("class {} is in both train and test splits", class_name(*c))));
        }
        Ok(Self { train, test })
    }

    /// Four train primitives and two held-out test primitives.
    pub fn standard() -> Self {
        Self::new(
            [Primitive::Sphere, Primitive::Cuboid, Primitive::Cylinder, Primitive::Cone].map(Primitive::id),
            [Primitive::Torus, Primitive::Ridge].map(Primitive::id),
        )
        .expect("standard split is disjoint")
    }

    pub fn train_classes(&self) -> &BTreeSet<u32> {
        &self.train
    }

    pub fn test_classes(&self) -> &BTreeSet<u32> {
        &self.test
    }
}
