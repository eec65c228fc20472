//! On-disk formats: binary point clouds, CSV fixtures, raw tensors with JSON
//! sidecars, camera models, and PGM dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, LidarPoint};
use crate::grid::{BevFeatureMap, Grid2};
use crate::occupancy::OccupancyGrid;

/// Magic prefix of the binary point-cloud format (8 bytes).
pub const POINT_CLOUD_MAGIC: &[u8; 8] = b"OCFPTS\x00\x01";

/// Writes a point cloud as the 8-byte magic, a u64 LE count, and per-point
/// little-endian f32 records (x, y, z, class_id).
pub fn save_point_cloud(path: &Path, points: &[LidarPoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(POINT_CLOUD_MAGIC)?;
    w.write_u64::<LittleEndian>(points.len() as u64)?;
    for p in points {
        w.write_f32::<LittleEndian>(p.position.x as f32)?;
        w.write_f32::<LittleEndian>(p.position.y as f32)?;
        w.write_f32::<LittleEndian>(p.position.z as f32)?;
        w.write_f32::<LittleEndian>(p.class as f32)?;
    }
    Ok(())
}

pub fn load_point_cloud(path: &Path) -> Result<Vec<LidarPoint>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != POINT_CLOUD_MAGIC {
        return Err(Error::data(format!(
            "{} is not a point cloud file (bad magic)",
            path.display()
        )));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = r.read_f32::<LittleEndian>()? as f64;
        let y = r.read_f32::<LittleEndian>()? as f64;
        let z = r.read_f32::<LittleEndian>()? as f64;
        let class = r.read_f32::<LittleEndian>()?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::data("non-finite point coordinates"));
        }
        if class < 0.0 || class.fract() != 0.0 || class > u16::MAX as f32 {
            return Err(Error::data(format!("bad class id {class}")));
        }
        points.push(LidarPoint {
            position: Point3::new(x, y, z),
            class: class as u16,
        });
    }
    Ok(points)
}

/// CSV ingest for hand-made fixtures; expects an `x,y,z,class_id` header.
pub fn load_point_cloud_csv(path: &Path) -> Result<Vec<LidarPoint>> {
    #[derive(Deserialize)]
    struct Row {
        x: f64,
        y: f64,
        z: f64,
        class_id: u16,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        if !(row.x.is_finite() && row.y.is_finite() && row.z.is_finite()) {
            return Err(Error::data("non-finite point coordinates in CSV"));
        }
        points.push(LidarPoint {
            position: Point3::new(row.x, row.y, row.z),
            class: row.class_id,
        });
    }
    Ok(points)
}

pub fn save_point_cloud_csv(path: &Path, points: &[LidarPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z", "class_id"])?;
    for p in points {
        w.write_record([
            p.position.x.to_string(),
            p.position.y.to_string(),
            p.position.z.to_string(),
            p.class.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Element type of a raw tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F32,
    F64,
    U8,
    U16,
}

/// Sidecar metadata stored next to each `.bin` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: TensorDtype,
    pub shape: Vec<usize>,
    /// Axis names, outermost first (e.g. ["c", "h", "w"]).
    pub dims: Vec<String>,
    pub layout: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_count: Option<usize>,
}

/// Raw little-endian tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> TensorDtype {
        match self {
            TensorData::F32(_) => TensorDtype::F32,
            TensorData::F64(_) => TensorDtype::F64,
            TensorData::U8(_) => TensorDtype::U8,
            TensorData::U16(_) => TensorDtype::U16,
        }
    }
}

/// A tensor plus its metadata, as written to `<base>.bin` / `<base>.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub meta: TensorMeta,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(data: TensorData, shape: Vec<usize>, dims: &[&str]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dim(format!(
                "tensor payload has {} elements, shape implies {expect}",
                data.len()
            )));
        }
        if dims.len() != shape.len() {
            return Err(Error::dim("dimension names do not match the shape rank"));
        }
        Ok(Self {
            meta: TensorMeta {
                dtype: data.dtype(),
                shape,
                dims: dims.iter().map(|s| s.to_string()).collect(),
                layout: "row_major".to_string(),
                class_count: None,
            },
            data,
        })
    }
}

fn bin_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn sidecar_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

/// Writes `<base>.bin` (raw little-endian payload) and `<base>.json` (sidecar).
pub fn save_tensor(base: &Path, tensor: &Tensor) -> Result<()> {
    let json = serde_json::to_string_pretty(&tensor.meta)?;
    std::fs::write(sidecar_path(base), json)?;
    let mut w = BufWriter::new(File::create(bin_path(base))?);
    match &tensor.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_f32::<LittleEndian>(*x)?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        TensorData::U8(v) => w.write_all(v)?,
        TensorData::U16(v) => {
            for x in v {
                w.write_u16::<LittleEndian>(*x)?;
            }
        }
    }
    Ok(())
}

pub fn load_tensor(base: &Path) -> Result<Tensor> {
    let meta: TensorMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(base))?)?;
    let count: usize = meta.shape.iter().product();
    let mut r = BufReader::new(File::open(bin_path(base))?);
    let data = match meta.dtype {
        TensorDtype::F32 => {
            let mut v = vec![0f32; count];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            TensorData::F32(v)
        }
        TensorDtype::F64 => {
            let mut v = vec![0f64; count];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            TensorData::F64(v)
        }
        TensorDtype::U8 => {
            let mut v = vec![0u8; count];
            r.read_exact(&mut v)?;
            TensorData::U8(v)
        }
        TensorDtype::U16 => {
            let mut v = vec![0u16; count];
            r.read_u16_into::<LittleEndian>(&mut v)?;
            TensorData::U16(v)
        }
    };
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::data(format!(
            "{} has {} trailing bytes",
            bin_path(base).display(),
            trailing.len()
        )));
    }
    Ok(Tensor { meta, data })
}

/// Depth maps are stored as f32 [h, w].
pub fn depth_map_to_tensor(map: &Grid2<f64>) -> Tensor {
    Tensor::new(
        TensorData::F32(map.data().iter().map(|&d| d as f32).collect()),
        vec![map.height(), map.width()],
        &["h", "w"],
    )
    .expect("shape matches data")
}

pub fn tensor_to_depth_map(tensor: &Tensor) -> Result<Grid2<f64>> {
    let [h, w] = tensor.meta.shape[..] else {
        return Err(Error::data("depth map tensor must be rank 2"));
    };
    let TensorData::F32(values) = &tensor.data else {
        return Err(Error::data("depth map tensor must be f32"));
    };
    Grid2::from_vec(h, w, values.iter().map(|&v| v as f64).collect())
}

/// Semantic masks are stored as u16 [h, w].
pub fn semantic_mask_to_tensor(mask: &Grid2<u16>) -> Tensor {
    Tensor::new(
        TensorData::U16(mask.data().to_vec()),
        vec![mask.height(), mask.width()],
        &["h", "w"],
    )
    .expect("shape matches data")
}

pub fn tensor_to_semantic_mask(tensor: &Tensor) -> Result<Grid2<u16>> {
    let [h, w] = tensor.meta.shape[..] else {
        return Err(Error::data("mask tensor must be rank 2"));
    };
    let TensorData::U16(values) = &tensor.data else {
        return Err(Error::data("mask tensor must be u16"));
    };
    Grid2::from_vec(h, w, values.clone())
}

/// BEV features are stored as f32 [c, h, w].
pub fn bev_to_tensor(map: &BevFeatureMap) -> Tensor {
    Tensor::new(
        TensorData::F32(map.data().iter().map(|&v| v as f32).collect()),
        vec![map.channels(), map.height(), map.width()],
        &["c", "h", "w"],
    )
    .expect("shape matches data")
}

pub fn tensor_to_bev(tensor: &Tensor) -> Result<BevFeatureMap> {
    let [c, h, w] = tensor.meta.shape[..] else {
        return Err(Error::data("BEV tensor must be rank 3"));
    };
    let TensorData::F32(values) = &tensor.data else {
        return Err(Error::data("BEV tensor must be f32"));
    };
    BevFeatureMap::from_vec(c, h, w, values.iter().map(|&v| v as f64).collect())
}

/// Occupancy labels are stored as u8 [y, x, z] with `class_count` in the sidecar.
pub fn occupancy_to_tensor(grid: &OccupancyGrid) -> Result<Tensor> {
    if grid.class_count() > u8::MAX as usize + 1 {
        return Err(Error::data("more than 256 classes cannot be stored as u8"));
    }
    let (ny, nx, nz) = grid.dims();
    let mut tensor = Tensor::new(
        TensorData::U8(grid.labels().data().iter().map(|&l| l as u8).collect()),
        vec![ny, nx, nz],
        &["y", "x", "z"],
    )?;
    tensor.meta.class_count = Some(grid.class_count());
    Ok(tensor)
}

pub fn tensor_to_occupancy(tensor: &Tensor) -> Result<OccupancyGrid> {
    let [ny, nx, nz] = tensor.meta.shape[..] else {
        return Err(Error::data("occupancy tensor must be rank 3"));
    };
    let TensorData::U8(values) = &tensor.data else {
        return Err(Error::data("occupancy tensor must be u8"));
    };
    let class_count = tensor
        .meta
        .class_count
        .ok_or_else(|| Error::data("occupancy sidecar is missing class_count"))?;
    let mut grid = crate::grid::Grid3::filled(ny, nx, nz, 0u16);
    for (slot, &v) in grid.data_mut().iter_mut().zip(values) {
        *slot = v as u16;
    }
    OccupancyGrid::from_labels(class_count, grid)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttentionParamsManifest {
    window: usize,
    scale: crate::fusion::AttentionScale,
    query_proj: String,
    key_proj: String,
    value_proj: String,
    rel_bias: String,
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(TensorData::F64(data), vec![m.nrows(), m.ncols()], &["row", "col"])
        .expect("shape matches data")
}

fn tensor_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let [rows, cols] = t.meta.shape[..] else {
        return Err(Error::data("projection tensor must be rank 2"));
    };
    let TensorData::F64(values) = &t.data else {
        return Err(Error::data("projection tensor must be f64"));
    };
    Ok(DMatrix::from_fn(rows, cols, |r, c| {
        values[r * cols + c]
    }))
}

/// Serializes attention parameters as one manifest JSON plus four raw tensors
/// (`<name>.json`, `<name>_query.bin`, ...), all under `dir`.
pub fn save_attention_params(
    dir: &Path,
    name: &str,
    params: &crate::fusion::AttentionParams,
) -> Result<()> {
    let (q, k, v) = params.projections();
    let pieces = [
        ("query", matrix_tensor(q)),
        ("key", matrix_tensor(k)),
        ("value", matrix_tensor(v)),
        (
            "rel_bias",
            Tensor::new(
                TensorData::F64(params.rel_bias().data().to_vec()),
                vec![params.rel_bias().height(), params.rel_bias().width()],
                &["drow", "dcol"],
            )?,
        ),
    ];
    let mut names = Vec::new();
    for (suffix, tensor) in &pieces {
        let base = format!("{name}_{suffix}");
        save_tensor(&dir.join(&base), tensor)?;
        names.push(base);
    }
    let manifest = AttentionParamsManifest {
        window: params.window(),
        scale: params.scale(),
        query_proj: names[0].clone(),
        key_proj: names[1].clone(),
        value_proj: names[2].clone(),
        rel_bias: names[3].clone(),
    };
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_attention_params(dir: &Path, name: &str) -> Result<crate::fusion::AttentionParams> {
    let manifest: AttentionParamsManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let query = tensor_matrix(&load_tensor(&dir.join(&manifest.query_proj))?)?;
    let key = tensor_matrix(&load_tensor(&dir.join(&manifest.key_proj))?)?;
    let value = tensor_matrix(&load_tensor(&dir.join(&manifest.value_proj))?)?;
    let bias_t = load_tensor(&dir.join(&manifest.rel_bias))?;
    let [h, w] = bias_t.meta.shape[..] else {
        return Err(Error::data("relative bias tensor must be rank 2"));
    };
    let TensorData::F64(values) = &bias_t.data else {
        return Err(Error::data("relative bias tensor must be f64"));
    };
    let rel_bias = Grid2::from_vec(h, w, values.clone())?;
    crate::fusion::AttentionParams::new(
        query,
        key,
        value,
        rel_bias,
        manifest.window,
        manifest.scale,
    )
}

/// Serializes gate parameters as a weight tensor plus a bias tensor.
pub fn save_gate_params(dir: &Path, name: &str, gate: &crate::fusion::GateParams) -> Result<()> {
    save_tensor(&dir.join(format!("{name}_weights")), &matrix_tensor(&gate.gate_weights))?;
    let bias = Tensor::new(
        TensorData::F64(gate.bias.iter().cloned().collect()),
        vec![gate.bias.len()],
        &["c"],
    )?;
    save_tensor(&dir.join(format!("{name}_bias")), &bias)?;
    Ok(())
}

pub fn load_gate_params(dir: &Path, name: &str) -> Result<crate::fusion::GateParams> {
    let weights = tensor_matrix(&load_tensor(&dir.join(format!("{name}_weights")))?)?;
    let bias_t = load_tensor(&dir.join(format!("{name}_bias")))?;
    let TensorData::F64(values) = &bias_t.data else {
        return Err(Error::data("gate bias tensor must be f64"));
    };
    crate::fusion::GateParams::new(weights, DVector::from_vec(values.clone()))
}

/// Writes one PGM per height slice (`<stem>_z00.pgm`, ...), with labels
/// spread over the gray range for quick visual inspection.
pub fn write_occupancy_slices(dir: &Path, stem: &str, grid: &OccupancyGrid) -> Result<()> {
    let (ny, nx, nz) = grid.dims();
    let max_label = (grid.class_count() - 1).max(1) as f64;
    for z in 0..nz {
        let mut slice = Grid2::filled(ny, nx, 0.0);
        for y in 0..ny {
            for x in 0..nx {
                let label = grid.label(y, x, z);
                // Empty renders black; classes spread over the gray range.
                let v = if label == grid.empty_class() {
                    0.0
                } else {
                    (label as f64 + 1.0) / (max_label + 1.0)
                };
                slice.set(y, x, v);
            }
        }
        write_pgm(&dir.join(format!("{stem}_z{z:02}.pgm")), &slice)?;
    }
    Ok(())
}

pub fn save_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cameras)?)?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Binary PGM (P5) dump of a scalar grid, normalized to its maximum.
pub fn write_pgm(path: &Path, grid: &Grid2<f64>) -> Result<()> {
    let max = grid.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", grid.width(), grid.height())?;
    for &v in grid.data() {
        let byte = (v * scale).round().clamp(0.0, 255.0) as u8;
        w.write_all(&[byte])?;
    }
    Ok(())
}
