//! Scene point clouds: ingestion, voxel downsampling, sphere culling and the
//! nearest-neighbor index used for correspondence search.

mod kdtree;
mod pcd;

use std::collections::HashMap;

use thiserror::Error;

use crate::geom::Point3;

pub use kdtree::{NearestCache, Neighbor, SpatialIndex};
pub use pcd::{load_pcd, read_pcd, write_pcd, PcdEncoding, PcdLoad};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("malformed PCD header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PCD encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("PCD data section is truncated or unparsable: {0}")]
    MalformedData(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// Scene geometry. Colors, when present, are parallel to `points` and only
/// used for display.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    /// Builds a cloud, dropping non-finite points. Returns the number dropped.
    pub fn from_points_filtered(points: Vec<Point3>) -> (Self, usize) {
        let before = points.len();
        let points: Vec<_> = points.into_iter().filter(is_finite_point).collect();
        let dropped = before - points.len();
        (Self::new(points), dropped)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Little-endian `f32` triples, the wire format served to viewers.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 12);
        for p in &self.points {
            for c in p.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out
    }
}

pub(crate) fn is_finite_point(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}

/// Replaces the points of every occupied cubic cell of side `leaf` by their
/// centroid. Output order follows the first point seen in each cell.
///
/// Panics if `leaf` is not strictly positive.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> PointCloud {
    assert!(leaf > 0.0 && leaf.is_finite(), "voxel leaf must be positive");
    struct Cell {
        sum: Point3,
        rgb: [u64; 3],
        count: usize,
    }
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(cloud.len() / 4);
    let mut cells: Vec<Cell> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        );
        let slot = *slots.entry(key).or_insert_with(|| {
            cells.push(Cell {
                sum: Point3::zeros(),
                rgb: [0; 3],
                count: 0,
            });
            cells.len() - 1
        });
        let cell = &mut cells[slot];
        cell.sum += p;
        cell.count += 1;
        if let Some(colors) = &cloud.colors {
            for (acc, c) in cell.rgb.iter_mut().zip(colors[i]) {
                *acc += u64::from(c);
            }
        }
    }
    let points = cells.iter().map(|c| c.sum / c.count as f64).collect();
    let colors = cloud.colors.as_ref().map(|_| {
        cells
            .iter()
            .map(|c| c.rgb.map(|v| (v / c.count as u64) as u8))
            .collect()
    });
    PointCloud { points, colors }
}

/// Points with `‖p − center‖ ≤ radius`, in their original order.
pub fn cull_sphere(cloud: &PointCloud, center: &Point3, radius: f64) -> PointCloud {
    let r2 = radius * radius;
    let keep: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| (*p - center).norm_squared() <= r2)
        .map(|(i, _)| i)
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        colors: cloud
            .colors
            .as_ref()
            .map(|c| keep.iter().map(|&i| c[i]).collect()),
    }
}
