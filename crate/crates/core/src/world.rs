//! Voxel occupancy map, pillar-forest generation and sliding-window queries.

use std::fmt;
use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Result of a map query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Occupancy {
    Free,
    Occupied,
    Unknown,
}

/// Dense 3-D occupancy grid with a sliding knowledge window.
///
/// The grid itself is shared and immutable; moving the window produces a new
/// value that reuses the same storage.
#[derive(Clone)]
pub struct VoxelMap {
    origin: Vector3<f64>,
    resolution: f64,
    dims: [usize; 3],
    occupancy: Arc<Vec<u64>>,
    // Squared distance (voxel units) from each voxel center to the nearest
    // occupied voxel center. Built on first use.
    sq_clearance: Arc<OnceLock<Vec<f32>>>,
    window_center: Vector3<f64>,
    window_half_extent: Vector3<f64>,
}

impl fmt::Debug for VoxelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VoxelMap")
            .field("origin", &self.origin)
            .field("resolution", &self.resolution)
            .field("dims", &self.dims)
            .field("window_center", &self.window_center)
            .field("window_half_extent", &self.window_half_extent)
            .finish_non_exhaustive()
    }
}

impl VoxelMap {
    /// An all-free map whose window covers the whole extent.
    pub fn empty(origin: Vector3<f64>, resolution: f64, dims: [usize; 3]) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::invalid("resolution must be positive"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("map dimensions must be nonzero"));
        }
        let n: usize = dims.iter().product();
        let mut map = Self {
            origin,
            resolution,
            dims,
            occupancy: Arc::new(vec![0; n.div_ceil(64)]),
            sq_clearance: Arc::new(OnceLock::new()),
            window_center: Vector3::zeros(),
            window_half_extent: Vector3::zeros(),
        };
        map.reset_window();
        Ok(map)
    }

    /// Builds a map from a list of occupied voxel indices `(ix, iy, iz)`.
    pub fn from_occupied(
        origin: Vector3<f64>,
        resolution: f64,
        dims: [usize; 3],
        occupied: impl IntoIterator<Item = [usize; 3]>,
    ) -> Result<Self> {
        let mut map = Self::empty(origin, resolution, dims)?;
        let bits = Arc::get_mut(&mut map.occupancy).expect("fresh map");
        for v in occupied {
            if v.iter().zip(dims.iter()).any(|(&i, &d)| i >= d) {
                return Err(Error::invalid(format!("voxel {v:?} outside dims {dims:?}")));
            }
            let idx = v[0] + dims[0] * (v[1] + dims[1] * v[2]);
            bits[idx / 64] |= 1 << (idx % 64);
        }
        Ok(map)
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.resolution
    }

    pub fn upper_corner(&self) -> Vector3<f64> {
        self.origin + self.extent()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn window_center(&self) -> Vector3<f64> {
        self.window_center
    }

    pub fn window_half_extent(&self) -> Vector3<f64> {
        self.window_half_extent
    }

    /// Window covering the whole map.
    pub fn reset_window(&mut self) {
        let half = 0.5 * self.extent();
        self.window_center = self.origin + half;
        self.window_half_extent = half;
    }

    pub fn with_window(mut self, center: Vector3<f64>, half_extent: Vector3<f64>) -> Self {
        self.window_center = center;
        self.window_half_extent = half_extent;
        self
    }

    /// Moves the knowledge window; the underlying grid is shared.
    pub fn recenter_window(&self, center: Vector3<f64>) -> VoxelMap {
        let mut next = self.clone();
        next.window_center = center;
        next
    }

    #[inline]
    pub fn linear_index(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let rel = (p - self.origin) / self.resolution;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            if !(f >= 0.0) || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                v[0] as f64 + 0.5,
                v[1] as f64 + 0.5,
                v[2] as f64 + 0.5,
            ) * self.resolution
    }

    #[inline]
    pub fn is_voxel_occupied(&self, v: [usize; 3]) -> bool {
        let idx = self.linear_index(v);
        self.occupancy[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.voxel_of(p).is_some()
    }

    pub fn in_window(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| (p[a] - self.window_center[a]).abs() <= self.window_half_extent[a])
    }

    /// Tri-state query: occupied when any occupied voxel center lies within
    /// `inflate` of the center of the voxel containing `p`.
    pub fn is_free(&self, p: &Vector3<f64>, inflate: f64) -> Occupancy {
        let Some(v) = self.voxel_of(p) else {
            return Occupancy::Unknown;
        };
        if !self.in_window(p) {
            return Occupancy::Unknown;
        }
        if self.voxel_blocked(v, inflate) {
            Occupancy::Occupied
        } else {
            Occupancy::Free
        }
    }

    /// Ground-truth test ignoring the window; `None` outside the map.
    #[inline]
    pub fn blocked_truth(&self, p: &Vector3<f64>, inflate: f64) -> Option<bool> {
        self.voxel_of(p).map(|v| self.voxel_blocked(v, inflate))
    }

    #[inline]
    pub fn voxel_blocked(&self, v: [usize; 3], inflate: f64) -> bool {
        let d2 = self.sq_clearance()[self.linear_index(v)] as f64;
        let r = inflate / self.resolution;
        d2 <= r * r + 1e-9
    }

    /// Distance (m) from the voxel containing `p` to the nearest occupied voxel center.
    pub fn clearance(&self, p: &Vector3<f64>) -> Option<f64> {
        self.voxel_of(p)
            .map(|v| (self.sq_clearance()[self.linear_index(v)] as f64).sqrt() * self.resolution)
    }

    fn sq_clearance(&self) -> &[f32] {
        self.sq_clearance
            .get_or_init(|| squared_distance_transform(self))
    }

    /// Serializes to the flat binary layout: little-endian header
    /// (origin ×3 f64, resolution f64, dims ×3 u64) then the row-major bitset.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for a in 0..3 {
            w.write_all(&self.origin[a].to_le_bytes())?;
        }
        w.write_all(&self.resolution.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let n = self.voxel_count();
        let mut bytes = vec![0u8; n.div_ceil(8)];
        for (i, byte) in bytes.iter_mut().enumerate() {
            let word = self.occupancy[i / 8];
            *byte = (word >> ((i % 8) * 8)) as u8;
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut f64_at = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        };
        let origin = Vector3::new(f64_at(&mut r)?, f64_at(&mut r)?, f64_at(&mut r)?);
        let resolution = f64_at(&mut r)?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Parse("map dimension overflow".into()))?;
        }
        let mut map = Self::empty(origin, resolution, dims)?;
        let n = map.voxel_count();
        let mut bytes = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let bits = Arc::get_mut(&mut map.occupancy).expect("fresh map");
        for (i, &b) in bytes.iter().enumerate() {
            bits[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        // stray bits past the last voxel are ignored
        if n % 64 != 0 {
            let last = bits.len() - 1;
            bits[last] &= (1u64 << (n % 64)) - 1;
        }
        Ok(map)
    }
}

/// Exact Euclidean distance transform (lower envelope of parabolas, one axis
/// at a time) over voxel centers.
fn squared_distance_transform(map: &VoxelMap) -> Vec<f32> {
    let [nx, ny, nz] = map.dims;
    let n = nx * ny * nz;
    let mut grid = vec![f64::INFINITY; n];
    for (w, &word) in map.occupancy.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let b = bits.trailing_zeros() as usize;
            let idx = w * 64 + b;
            if idx < n {
                grid[idx] = 0.0;
            }
            bits &= bits - 1;
        }
    }
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::new(longest);
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let len = map.dims[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..map.dims[oa] {
            for b in 0..map.dims[ob] {
                let base = a * strides[oa] + b * strides[ob];
                for i in 0..len {
                    line[i] = grid[base + i * stride];
                }
                scratch.transform(&line[..len], &mut out[..len]);
                for i in 0..len {
                    grid[base + i * stride] = out[i];
                }
            }
        }
    }
    grid.into_iter().map(|d| d as f32).collect()
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let mut k: isize = -1;
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            let fq = f[q] + (q * q) as f64;
            loop {
                if k < 0 {
                    k = 0;
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                let p = self.v[k as usize];
                let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= self.z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k as usize] = q;
                self.z[k as usize] = s;
                self.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            d.fill(f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, dq) in d.iter_mut().enumerate() {
            while self.z[j + 1] < q as f64 {
                j += 1;
            }
            let p = self.v[j];
            let dx = q as f64 - p as f64;
            *dq = dx * dx + f[p];
        }
    }
}

/// A vertical pillar obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

impl Cylinder {
    pub fn contains(&self, p: &Vector3<f64>, base_z: f64) -> bool {
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius && p.z - base_z <= self.height
    }
}

/// Parameters of a procedurally generated pillar forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSpec {
    /// Map size (m) along x, y, z; the map origin is the world origin.
    pub extent: [f64; 3],
    pub resolution: f64,
    pub n_obstacles: usize,
    pub obstacle_radius_range: [f64; 2],
    /// Pillar heights; defaults to the full map height.
    pub obstacle_height_range: [f64; 2],
    pub seed: u64,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// Horizontal clearance kept around start and goal.
    pub clear_radius: f64,
    /// Real-world meters per map unit (metadata only).
    pub real_scale: f64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            extent: [40.0, 40.0, 5.0],
            resolution: 0.1,
            n_obstacles: 499,
            obstacle_radius_range: [0.3, 0.6],
            obstacle_height_range: [5.0, 5.0],
            seed: 0,
            start: [2.0, 20.0, 2.5],
            goal: [38.0, 20.0, 2.5],
            clear_radius: 1.5,
            real_scale: 0.15,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid("forest extent must be positive"));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::invalid("resolution must be positive"));
        }
        let [rlo, rhi] = self.obstacle_radius_range;
        let [hlo, hhi] = self.obstacle_height_range;
        if !(rlo > 0.0 && rhi >= rlo && hlo > 0.0 && hhi >= hlo) {
            return Err(Error::invalid("bad obstacle radius/height range"));
        }
        if self.clear_radius < 0.0 {
            return Err(Error::invalid("clear_radius must be nonnegative"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = |e: f64| (e / self.resolution).round().max(1.0) as usize;
        [d(self.extent[0]), d(self.extent[1]), d(self.extent[2])]
    }
}

/// Samples the pillar list for `spec` (deterministic per seed).
pub fn forest_cylinders(spec: &ForestSpec) -> Result<Vec<Cylinder>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, 0x000f_0e57).rng();
    let keep = [spec.start, spec.goal];
    let max_tries = 1000 * spec.n_obstacles.max(1);
    let mut cylinders = Vec::with_capacity(spec.n_obstacles);
    let mut tries = 0;
    while cylinders.len() < spec.n_obstacles {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Generation(format!(
                "placed {} of {} obstacles before giving up",
                cylinders.len(),
                spec.n_obstacles
            )));
        }
        let cx = rng.random::<f64>() * spec.extent[0];
        let cy = rng.random::<f64>() * spec.extent[1];
        let [rlo, rhi] = spec.obstacle_radius_range;
        let radius = rlo + rng.random::<f64>() * (rhi - rlo);
        let [hlo, hhi] = spec.obstacle_height_range;
        let height = hlo + rng.random::<f64>() * (hhi - hlo);
        let blocks_keep = keep.iter().any(|k| {
            let d = ((k[0] - cx).powi(2) + (k[1] - cy).powi(2)).sqrt();
            d < radius + spec.clear_radius
        });
        if blocks_keep {
            continue;
        }
        cylinders.push(Cylinder {
            center: [cx, cy],
            radius,
            height,
        });
    }
    Ok(cylinders)
}

/// Rasterizes pillars: a voxel is occupied when its center lies inside one.
pub fn rasterize(spec: &ForestSpec, cylinders: &[Cylinder]) -> Result<VoxelMap> {
    let dims = spec.dims();
    let res = spec.resolution;
    let mut occupied = Vec::new();
    for c in cylinders {
        let lo = |v: f64| ((v / res - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64, n: usize| (((v / res - 0.5).ceil()).max(0.0) as usize).min(n - 1);
        let (x0, x1) = (lo(c.center[0] - c.radius), hi(c.center[0] + c.radius, dims[0]));
        let (y0, y1) = (lo(c.center[1] - c.radius), hi(c.center[1] + c.radius, dims[1]));
        for iz in 0..dims[2] {
            let z = (iz as f64 + 0.5) * res;
            if z > c.height {
                break;
            }
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let x = (ix as f64 + 0.5) * res;
                    let y = (iy as f64 + 0.5) * res;
                    let dx = x - c.center[0];
                    let dy = y - c.center[1];
                    if dx * dx + dy * dy <= c.radius * c.radius {
                        occupied.push([ix, iy, iz]);
                    }
                }
            }
        }
    }
    VoxelMap::from_occupied(Vector3::zeros(), res, dims, occupied)
}

pub fn generate_forest(spec: &ForestSpec) -> Result<VoxelMap> {
    let cylinders = forest_cylinders(spec)?;
    rasterize(spec, &cylinders)
}
