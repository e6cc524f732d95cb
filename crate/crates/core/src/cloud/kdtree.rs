use super::{CloudError, PointCloud};
use crate::geom::Point3;

const LEAF_SIZE: usize = 8;

/// Result of a nearest-neighbor query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Index into the cloud the index was built from.
    pub index: usize,
    pub point: Point3,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Static k-d tree over a point cloud.
///
/// Queries are exact: [`SpatialIndex::nearest`] returns the point of minimum
/// Euclidean distance, breaking ties by the lowest original index.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    coords: Vec<[f64; 3]>,
    ids: Vec<u32>,
    /// Inverse of `ids`: slot of each original index.
    slots: Vec<u32>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(&cloud.points)
    }

    pub fn from_points(points: &[Point3]) -> Self {
        assert!(points.len() < u32::MAX as usize, "cloud too large for index");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build_node(points, &mut order, 0, &mut nodes);
        }
        let coords = order
            .iter()
            .map(|&i| {
                let p = &points[i as usize];
                [p.x, p.y, p.z]
            })
            .collect();
        let mut slots = vec![0u32; order.len()];
        for (slot, &id) in order.iter().enumerate() {
            slots[id as usize] = slot as u32;
        }
        Self {
            coords,
            ids: order,
            slots,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn nearest(&self, p: &Point3) -> Result<Neighbor, CloudError> {
        if self.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let q = [p.x, p.y, p.z];
        let best = Best {
            dist2: f64::INFINITY,
            slot: usize::MAX,
            id: u32::MAX,
        };
        Ok(self.finish(&q, best))
    }

    /// Same result as [`SpatialIndex::nearest`]; the point with original
    /// index `hint`, when valid, seeds the search bound. A hint near the
    /// answer (such as the previous match of a slowly moving query) prunes
    /// most of the tree.
    pub fn nearest_with_hint(&self, p: &Point3, hint: usize) -> Result<Neighbor, CloudError> {
        if self.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let Some(&slot) = self.slots.get(hint) else {
            return self.nearest(p);
        };
        let q = [p.x, p.y, p.z];
        let c = &self.coords[slot as usize];
        let (dx, dy, dz) = (q[0] - c[0], q[1] - c[1], q[2] - c[2]);
        let best = Best {
            dist2: dx * dx + dy * dy + dz * dz,
            slot: slot as usize,
            id: hint as u32,
        };
        Ok(self.finish(&q, best))
    }

    fn finish(&self, q: &[f64; 3], mut best: Best) -> Neighbor {
        self.search(0, q, &mut best, &mut [0.0; 3]);
        let c = self.coords[best.slot];
        Neighbor {
            index: best.id as usize,
            point: Point3::new(c[0], c[1], c[2]),
            distance: best.dist2.sqrt(),
        }
    }

    /// Slots of all points with squared distance to `q` at most `r2`.
    fn within(&self, node: usize, q: &[f64; 3], r2: f64, off: &mut [f64; 3], out: &mut Vec<u32>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let c = &self.coords[slot as usize];
                    let (dx, dy, dz) = (q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                    if dx * dx + dy * dy + dz * dz <= r2 {
                        out.push(slot);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let a = axis as usize;
                let diff = q[a] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.within(near as usize, q, r2, off, out);
                let old = off[a];
                off[a] = diff;
                if off[0] * off[0] + off[1] * off[1] + off[2] * off[2] <= r2 {
                    self.within(far as usize, q, r2, off, out);
                }
                off[a] = old;
            }
        }
    }

    /// `off[a]` is the offset from `q` to the cell of `node` along axis `a`.
    fn search(&self, node: usize, q: &[f64; 3], best: &mut Best, off: &mut [f64; 3]) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let c = &self.coords[slot];
                    let (dx, dy, dz) = (q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if d2 > best.dist2 {
                        continue;
                    }
                    let id = self.ids[slot];
                    if d2 < best.dist2 || id < best.id {
                        *best = Best {
                            dist2: d2,
                            slot,
                            id,
                        };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let a = axis as usize;
                let diff = q[a] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, q, best, off);
                let old = off[a];
                off[a] = diff;
                // Summed afresh rather than updated from `rd`: rounding is
                // monotone, so the bound never exceeds the computed distance
                // of a point inside the cell. Equality still descends so that
                // equidistant points with a lower index are found.
                let far_rd = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                if far_rd <= best.dist2 {
                    self.search(far as usize, q, best, off);
                }
                off[a] = old;
            }
        }
    }
}

struct Best {
    dist2: f64,
    slot: usize,
    id: u32,
}

/// Repeated nearest-neighbor queries for a fixed set of slowly moving
/// points, answered exactly from per-point candidate lists.
///
/// Each list holds every index point within `radius` of the location it was
/// built at. A query that moved by `δ` from there and finds a candidate at
/// distance `d` with `d + δ < radius` cannot have a closer or equidistant
/// point outside the list, so the answer matches [`SpatialIndex::nearest`].
/// Otherwise the list is rebuilt with radius `d + margin`.
pub struct NearestCache<'a> {
    index: &'a SpatialIndex,
    margin: f64,
    entries: Vec<CacheEntry>,
}

#[derive(Default)]
struct CacheEntry {
    center: [f64; 3],
    radius: f64,
    hint: usize,
    slots: Vec<u32>,
}

impl<'a> NearestCache<'a> {
    pub fn new(index: &'a SpatialIndex, margin: f64) -> Self {
        Self {
            index,
            margin: margin.max(0.0),
            entries: Vec::new(),
        }
    }

    pub fn index(&self) -> &'a SpatialIndex {
        self.index
    }

    /// Nearest neighbor of `p`, the current location of tracked point `i`.
    pub fn nearest(&mut self, i: usize, p: &Point3) -> Result<Neighbor, CloudError> {
        let index = self.index;
        if index.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        if i >= self.entries.len() {
            self.entries.resize_with(i + 1, || CacheEntry {
                hint: usize::MAX,
                ..CacheEntry::default()
            });
        }
        let e = &mut self.entries[i];
        let q = [p.x, p.y, p.z];
        if !e.slots.is_empty() {
            let mut best = Best {
                dist2: f64::INFINITY,
                slot: usize::MAX,
                id: u32::MAX,
            };
            for &slot in &e.slots {
                let c = &index.coords[slot as usize];
                let (dx, dy, dz) = (q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                let d2 = dx * dx + dy * dy + dz * dz;
                let id = index.ids[slot as usize];
                if d2 < best.dist2 || (d2 == best.dist2 && id < best.id) {
                    best = Best {
                        dist2: d2,
                        slot: slot as usize,
                        id,
                    };
                }
            }
            let (mx, my, mz) = (q[0] - e.center[0], q[1] - e.center[1], q[2] - e.center[2]);
            let moved = (mx * mx + my * my + mz * mz).sqrt();
            // The relative slack absorbs rounding in the distances.
            if (best.dist2.sqrt() + moved) * (1.0 + 1e-9) < e.radius {
                let c = index.coords[best.slot];
                e.hint = best.id as usize;
                return Ok(Neighbor {
                    index: best.id as usize,
                    point: Point3::new(c[0], c[1], c[2]),
                    distance: best.dist2.sqrt(),
                });
            }
        }
        let nb = index.nearest_with_hint(p, e.hint)?;
        e.hint = nb.index;
        e.center = q;
        e.radius = nb.distance + self.margin;
        e.slots.clear();
        if self.margin > 0.0 {
            index.within(0, &q, e.radius * e.radius, &mut [0.0; 3], &mut e.slots);
        }
        Ok(nb)
    }
}

/// Left subtree holds coordinates `<= value`, right holds `>= value`.
fn build_node(points: &[Point3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let me = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return me;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    let value = points[order[mid] as usize][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(points, l, offset, nodes);
    let right = build_node(points, r, offset + mid, nodes);
    nodes[me as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    me
}
