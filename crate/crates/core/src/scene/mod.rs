//! Point clouds, labels, input featurization and the synthetic room
//! generator.

mod generator;
pub mod io;

pub use generator::{generate_scene, SceneSpec};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Per-point input width: xyz, rgb and room-normalized xyz.
pub const NUM_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum SemanticClass {
    Floor = 0,
    Wall = 1,
    Ceiling = 2,
    Table = 3,
    Chair = 4,
    Sofa = 5,
    Board = 6,
    Clutter = 7,
}

impl SemanticClass {
    pub const COUNT: usize = 8;
    pub const ALL: [SemanticClass; 8] = [
        SemanticClass::Floor,
        SemanticClass::Wall,
        SemanticClass::Ceiling,
        SemanticClass::Table,
        SemanticClass::Chair,
        SemanticClass::Sofa,
        SemanticClass::Board,
        SemanticClass::Clutter,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Floor => "floor",
            SemanticClass::Wall => "wall",
            SemanticClass::Ceiling => "ceiling",
            SemanticClass::Table => "table",
            SemanticClass::Chair => "chair",
            SemanticClass::Sofa => "sofa",
            SemanticClass::Board => "board",
            SemanticClass::Clutter => "clutter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Base surface colour used by the generator.
    pub fn color(self) -> [f64; 3] {
        match self {
            SemanticClass::Floor => [0.55, 0.45, 0.35],
            SemanticClass::Wall => [0.85, 0.85, 0.80],
            SemanticClass::Ceiling => [0.95, 0.95, 0.95],
            SemanticClass::Table => [0.60, 0.30, 0.10],
            SemanticClass::Chair => [0.15, 0.35, 0.75],
            SemanticClass::Sofa => [0.70, 0.15, 0.20],
            SemanticClass::Board => [0.20, 0.60, 0.30],
            SemanticClass::Clutter => [0.90, 0.75, 0.10],
        }
    }

    pub fn is_structure(self) -> bool {
        matches!(
            self,
            SemanticClass::Floor | SemanticClass::Wall | SemanticClass::Ceiling
        )
    }
}

/// Axis-aligned room extent used for coordinate normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RoomBounds {
    /// Bounding box of the xyz columns of a row-major `N×stride` buffer.
    pub fn of_points(xyz_rows: &[f64], stride: usize) -> Option<Self> {
        let mut rows = xyz_rows.chunks(stride);
        let first = rows.next()?;
        let mut min = [first[0], first[1], first[2]];
        let mut max = min;
        for r in rows {
            for a in 0..3 {
                min[a] = min[a].min(r[a]);
                max[a] = max[a].max(r[a]);
            }
        }
        Some(Self { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

/// `N × 9` point features plus optional ground truth and optional
/// network outputs carried by inference files.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    features: Vec<f64>,
    pub gt_semantic: Option<Vec<u32>>,
    pub gt_instance: Option<Vec<u32>>,
    /// `N × D` predicted instance features.
    pub instance_features: Option<Tensor>,
    /// `N × K` predicted semantic logits.
    pub semantic_logits: Option<Tensor>,
}

impl PointCloud {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if !features.len().is_multiple_of(NUM_FEATURES) {
            return Err(Error::shape(
                "point_cloud",
                format!("{} values is not a multiple of {NUM_FEATURES}", features.len()),
            ));
        }
        Ok(Self {
            features,
            gt_semantic: None,
            gt_instance: None,
            instance_features: None,
            semantic_logits: None,
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty is valid")
    }

    pub fn with_labels(mut self, semantic: Vec<u32>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != self.len() || instance.len() != self.len() {
            return Err(Error::shape(
                "point_cloud",
                format!(
                    "{} points but {} semantic / {} instance labels",
                    self.len(),
                    semantic.len(),
                    instance.len()
                ),
            ));
        }
        self.gt_semantic = Some(semantic);
        self.gt_instance = Some(instance);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.len() / NUM_FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.features[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[3], p[4], p[5]]
    }

    pub fn bounds(&self) -> Option<RoomBounds> {
        RoomBounds::of_points(&self.features, NUM_FEATURES)
    }

    pub fn has_labels(&self) -> bool {
        self.gt_semantic.is_some() && self.gt_instance.is_some()
    }

    pub fn labeling(&self) -> Option<Labeling> {
        Some(Labeling {
            semantic: self.gt_semantic.clone()?,
            instance: self.gt_instance.clone()?,
        })
    }

    /// Keep the points at `indices` (in that order), carrying all channels.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut features = Vec::with_capacity(indices.len() * NUM_FEATURES);
        for &i in indices {
            features.extend_from_slice(self.point(i));
        }
        let pick_u32 = |v: &Option<Vec<u32>>| v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect());
        let pick_rows = |t: &Option<Tensor>| {
            t.as_ref().map(|t| {
                let c = t.last_dim();
                let mut d = Vec::with_capacity(indices.len() * c);
                for &i in indices {
                    d.extend_from_slice(t.row(i));
                }
                Tensor::new(vec![indices.len(), c], d).expect("rows")
            })
        };
        PointCloud {
            features,
            gt_semantic: pick_u32(&self.gt_semantic),
            gt_instance: pick_u32(&self.gt_instance),
            instance_features: pick_rows(&self.instance_features),
            semantic_logits: pick_rows(&self.semantic_logits),
        }
    }
}

/// Per-point semantic class and instance id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

impl Labeling {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        let mut ids = self.instance.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Renumber ids to `0..I` in order of first appearance.
pub fn canonicalize_instances(ids: &[u32]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|&id| {
            let next = map.len() as u32;
            *map.entry(id).or_insert(next)
        })
        .collect()
}

/// Append room-normalized coordinates to raw `N × 6` xyzrgb rows.
pub fn featurize(raw_xyzrgb: &[f64], bounds: &RoomBounds) -> Result<PointCloud> {
    if !raw_xyzrgb.len().is_multiple_of(6) {
        return Err(Error::shape(
            "featurize",
            format!("{} values is not a multiple of 6", raw_xyzrgb.len()),
        ));
    }
    let extent = bounds.extent();
    if let Some(axis) = (0..3).find(|&a| !(extent[a] > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "room extent along axis {axis} is {}",
            extent[axis]
        )));
    }
    let mut features = Vec::with_capacity(raw_xyzrgb.len() / 6 * NUM_FEATURES);
    for (i, row) in raw_xyzrgb.chunks(6).enumerate() {
        features.extend_from_slice(row);
        for a in 0..3 {
            if row[a] < bounds.min[a] || row[a] > bounds.max[a] {
                return Err(Error::InvalidArgument(format!(
                    "point {i} lies outside the room bounds on axis {a}"
                )));
            }
            features.push((row[a] - bounds.min[a]) / extent[a]);
        }
    }
    PointCloud::new(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bounds() -> RoomBounds {
        RoomBounds {
            min: [1.0, 2.0, 0.0],
            max: [5.0, 4.0, 3.0],
        }
    }

    #[test]
    fn corners_and_midpoint_normalize() {
        let raw = [
            1.0, 2.0, 0.0, 0.1, 0.2, 0.3, //
            5.0, 4.0, 3.0, 0.1, 0.2, 0.3, //
            3.0, 3.0, 1.5, 0.1, 0.2, 0.3,
        ];
        let pc = featurize(&raw, &unit_bounds()).unwrap();
        assert_eq!(&pc.point(0)[6..], &[0.0, 0.0, 0.0]);
        assert_eq!(&pc.point(1)[6..], &[1.0, 1.0, 1.0]);
        assert_eq!(&pc.point(2)[6..], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_extent_rejected() {
        let b = RoomBounds {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
        };
        assert!(featurize(&[0.0; 6], &b).is_err());
    }

    #[test]
    fn featurize_idempotent_on_normalized_channels() {
        let raw = [2.0, 2.5, 1.0, 0.5, 0.5, 0.5, 4.0, 3.5, 2.0, 0.1, 0.9, 0.4];
        let a = featurize(&raw, &unit_bounds()).unwrap();
        let again: Vec<f64> = (0..a.len()).flat_map(|i| a.point(i)[..6].to_vec()).collect();
        let b = featurize(&again, &unit_bounds()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_ids_have_no_gaps() {
        assert_eq!(canonicalize_instances(&[7, 7, 3, 9, 3]), vec![0, 0, 1, 2, 1]);
    }
}
