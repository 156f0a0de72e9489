//! Dense scalar fields on voxel grids, multi-channel stacks, point clouds, and
//! their on-disk formats.
//!
//! Coordinates are voxel indices: voxel `(i, j, k)` sits at exactly `(i, j, k)`
//! with unit spacing and the origin at the corner voxel. Linearised storage is
//! x-fastest, i.e. `index = i + nx * (j + ny * k)`, and every module in the
//! crate relies on that order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Regular voxel grid with unit spacing and corner origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(dims));
        }
        Ok(Self { dims })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n, n, n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// `|Ω|`, the number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Coordinate of the voxel at linear `index`.
    #[inline]
    pub fn coordinate(&self, index: usize) -> Vec3 {
        let [i, j, k] = self.voxel(index);
        Vec3::new(i as f64, j as f64, k as f64)
    }

    /// Every voxel coordinate in storage order.
    pub fn coordinates(&self) -> Vec<Vec3> {
        (0..self.len()).map(|n| self.coordinate(n)).collect()
    }

    /// Geometric centre of the grid's bounding box.
    pub fn center(&self) -> Vec3 {
        Vec3::new(
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= -tol && p[a] <= (self.dims[a] - 1) as f64 + tol)
    }
}

/// Free-function form of [`Grid::coordinates`].
pub fn coordinates(grid: &Grid) -> Vec<Vec3> {
    grid.coordinates()
}

/// Scalar intensity field on a grid. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::SizeMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Vec3) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|n| f(grid.coordinate(n))).collect();
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// `K` scalar maps sharing one grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("FeatureStack", "zero channels"));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::SizeMismatch {
                expected: channels * grid.len(),
                found: data.len(),
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.grid.len())
    }
}

/// Ordered keypoint locations; index `k` in one cloud corresponds to index `k`
/// in its partner cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n
    }

    /// Row-major `[K, 3]` flattening used by the differentiation graph.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    dtype: String,
    order: String,
}

fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

/// Reads a `<name>.json` + `<name>.raw` pair. `path` may name either file or
/// the bare stem.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, raw_path) = pair_paths(path.as_ref());
    let header_text =
        fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::Format {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
    if header.dtype != "f32" || header.order != "x-fastest" {
        return Err(Error::Format {
            path: header_path,
            reason: format!(
                "unsupported dtype/order {}/{}",
                header.dtype, header.order
            ),
        });
    }
    let grid = Grid::new(header.dims)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != grid.len() {
        return Err(Error::SizeMismatch {
            expected: grid.len(),
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Volume::new(grid, data)
}

/// Writes the header and the little-endian `f32` payload. Values are rounded
/// to 32-bit precision.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, raw_path) = pair_paths(path.as_ref());
    let header = VolumeHeader {
        dims: volume.grid.dims(),
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    fs::write(&header_path, serde_json::to_string(&header)?)
        .map_err(|e| Error::io(&header_path, e))?;
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for &v in &volume.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

/// CSV with header `k,x,y,z`.
pub fn save_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("k,x,y,z\n");
    for (k, p) in cloud.points.iter().enumerate() {
        out.push_str(&format!("{k},{},{},{}\n", p.x, p.y, p.z));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "k,x,y,z" => {}
        other => return Err(bad(format!("expected header `k,x,y,z`, got {other:?}"))),
    }
    let mut points = Vec::new();
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("row {row}: expected 4 fields")));
        }
        let k: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("row {row}: bad index")))?;
        if k != row {
            return Err(bad(format!("row {row}: index {k} out of order")));
        }
        let mut xyz = [0.0; 3];
        for (a, f) in fields[1..].iter().enumerate() {
            xyz[a] = f
                .parse()
                .map_err(|_| bad(format!("row {row}: bad coordinate {f:?}")))?;
        }
        points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud::new(points))
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    matrix: [[f64; 4]; 4],
}

/// JSON `{"matrix": [[..4], ..4]}`, row-major.
pub fn save_matrix_json(matrix: &[[f64; 4]; 4], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&MatrixFile { matrix: *matrix })?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_matrix_json(path: impl AsRef<Path>) -> Result<[[f64; 4]; 4]> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: MatrixFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(file.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coordinates_small_grids() {
        let g = Grid::new([1, 1, 1]).unwrap();
        assert_eq!(coordinates(&g), vec![Vec3::zeros()]);
        let g = Grid::new([2, 1, 1]).unwrap();
        assert_eq!(
            coordinates(&g),
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]
        );
        let g = Grid::cube(2).unwrap();
        let c = coordinates(&g);
        assert_eq!(c.len(), 8);
        let mean = c.iter().fold(Vec3::zeros(), |a, p| a + p) / 8.0;
        assert_eq!(mean, Vec3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn x_is_fastest() {
        let g = Grid::new([3, 4, 5]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        assert_eq!(g.voxel(g.index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(Grid::new([2, 0, 2]), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn volume_rejects_nan() {
        let g = Grid::cube(2).unwrap();
        let mut data = vec![0.0; 8];
        data[5] = f64::NAN;
        assert!(matches!(
            Volume::new(g, data),
            Err(Error::NonFinite { index: 5 })
        ));
    }

    #[test]
    fn load_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("zero");
        fs::write(
            stem.with_extension("json"),
            r#"{"dims":[2,2,2],"dtype":"f32","order":"x-fastest"}"#,
        )
        .unwrap();
        fs::write(stem.with_extension("raw"), vec![0u8; 32]).unwrap();
        let v = load_volume(&stem).unwrap();
        assert_eq!(v.grid().dims(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn load_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("short");
        fs::write(
            stem.with_extension("json"),
            r#"{"dims":[3,3,3],"dtype":"f32","order":"x-fastest"}"#,
        )
        .unwrap();
        fs::write(stem.with_extension("raw"), vec![0u8; 26 * 4]).unwrap();
        assert!(matches!(
            load_volume(&stem),
            Err(Error::SizeMismatch {
                expected: 27,
                found: 26
            })
        ));
    }

    #[test]
    fn load_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_rejects_nonfinite_payload() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("inf");
        fs::write(
            stem.with_extension("json"),
            r#"{"dims":[2,1,1],"dtype":"f32","order":"x-fastest"}"#,
        )
        .unwrap();
        let mut raw = 1.0f32.to_le_bytes().to_vec();
        raw.extend_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(stem.with_extension("raw"), raw).unwrap();
        assert!(matches!(
            load_volume(&stem),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn volume_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Grid::new([5, 4, 3]).unwrap();
        let data: Vec<f64> = (0..g.len())
            .map(|_| rng.random_range(-10.0f32..10.0) as f64)
            .collect();
        let v = Volume::new(g, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vol");
        save_volume(&v, &stem).unwrap();
        let back = load_volume(stem.with_extension("json")).unwrap();
        assert_eq!(back.grid(), v.grid());
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_volume_payload_is_zero() {
        let v = Volume::zeros(Grid::new([3, 2, 1]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("z");
        save_volume(&v, &stem).unwrap();
        let raw = fs::read(stem.with_extension("raw")).unwrap();
        assert_eq!(raw.len(), 24);
        assert!(raw.iter().all(|&b| b == 0));
    }

    #[test]
    fn point_cloud_csv_round_trip() {
        let cloud = PointCloud::new(vec![
            Vec3::new(0.1, -2.0, 3.25),
            Vec3::new(1.0 / 3.0, 4.0, 1e-17),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        save_point_cloud(&cloud, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("k,x,y,z\n"));
        assert_eq!(load_point_cloud(&p).unwrap(), cloud);
    }

    #[test]
    fn matrix_json_round_trip() {
        let m = [
            [1.0, 0.0, 0.0, 1.5],
            [0.0, 0.5, 0.0, -2.0],
            [0.0, 0.0, 2.0, 0.1],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        save_matrix_json(&m, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"matrix\""));
        assert_eq!(load_matrix_json(&p).unwrap(), m);
    }
}
