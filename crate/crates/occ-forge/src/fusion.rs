//! Cross-modal BEV fusion: windowed neighborhood attention from cross features
//! into source features, refined by a per-channel gated attention.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BevFeatureMap, Grid2};

/// Which dimension the attention logits are scaled by.
///
/// The reference formulation divides by √v (the value dimension); the
/// conventional choice is √q. Both are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    ValueDim,
    QueryDim,
}

/// Projections and relative positional bias for neighborhood attention.
///
/// `query_proj` maps source channels (m) to the query dimension q; `key_proj`
/// and `value_proj` map cross channels to q and v. The bias grid is indexed by
/// window offset as (Δrow + k − 1, Δcol + k − 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    query_proj: DMatrix<f64>,
    key_proj: DMatrix<f64>,
    value_proj: DMatrix<f64>,
    rel_bias: Grid2<f64>,
    window: usize,
    scale: AttentionScale,
}

impl AttentionParams {
    pub fn new(
        query_proj: DMatrix<f64>,
        key_proj: DMatrix<f64>,
        value_proj: DMatrix<f64>,
        rel_bias: Grid2<f64>,
        window: usize,
        scale: AttentionScale,
    ) -> Result<Self> {
        if window.is_multiple_of(2) || window == 0 {
            return Err(Error::config("attention window must be odd and >= 1"));
        }
        if query_proj.ncols() != key_proj.ncols() {
            return Err(Error::dim(
                "query and key projections must share an output dimension",
            ));
        }
        let expect = 2 * window - 1;
        if rel_bias.height() != expect || rel_bias.width() != expect {
            return Err(Error::dim(format!(
                "relative bias must be {expect}x{expect} for window {window}"
            )));
        }
        Ok(Self {
            query_proj,
            key_proj,
            value_proj,
            rel_bias,
            window,
            scale,
        })
    }

    /// Identity projections (m = q = v = `channels`) with zero bias.
    pub fn identity(channels: usize, window: usize) -> Result<Self> {
        Self::new(
            DMatrix::identity(channels, channels),
            DMatrix::identity(channels, channels),
            DMatrix::identity(channels, channels),
            Grid2::filled(2 * window - 1, 2 * window - 1, 0.0),
            window,
            AttentionScale::ValueDim,
        )
    }

    #[inline]
    pub fn window(&self) -> usize {
        self.window
    }

    /// Output channel count of the attention stage.
    #[inline]
    pub fn value_dim(&self) -> usize {
        self.value_proj.ncols()
    }

    /// The query, key, and value projection matrices, in that order.
    pub fn projections(&self) -> (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>) {
        (&self.query_proj, &self.key_proj, &self.value_proj)
    }

    pub fn scale(&self) -> AttentionScale {
        self.scale
    }

    pub fn rel_bias(&self) -> &Grid2<f64> {
        &self.rel_bias
    }

    pub fn rel_bias_mut(&mut self) -> &mut Grid2<f64> {
        &mut self.rel_bias
    }

    fn scale_denominator(&self) -> f64 {
        let dim = match self.scale {
            AttentionScale::ValueDim => self.value_proj.ncols(),
            AttentionScale::QueryDim => self.query_proj.ncols(),
        };
        (dim as f64).sqrt()
    }
}

/// Per-channel gate computed from the globally pooled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// 1×1 convolution over channels: v×v matrix.
    pub gate_weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl GateParams {
    pub fn new(gate_weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if gate_weights.nrows() != gate_weights.ncols() || gate_weights.nrows() != bias.len() {
            return Err(Error::dim("gate weights must be square and match the bias"));
        }
        Ok(Self { gate_weights, bias })
    }

    /// Zero weights with a constant bias (gate = sigmoid(bias) per channel).
    pub fn constant_bias(channels: usize, bias: f64) -> Self {
        Self {
            gate_weights: DMatrix::zeros(channels, channels),
            bias: DVector::from_element(channels, bias),
        }
    }
}

/// Source/cross assignment for [`fuse_bev`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseDirection {
    /// Camera queries gather LiDAR neighborhoods (the fusion path).
    CameraSource,
    /// LiDAR queries gather camera neighborhoods (the distillation path).
    LidarSource,
}

fn project_positions(map: &BevFeatureMap, proj: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (h, w) = (map.height(), map.width());
    let out_dim = proj.ncols();
    (0..h * w)
        .map(|idx| {
            let (y, x) = (idx / w, idx % w);
            let f = map.feature(y, x);
            (0..out_dim)
                .map(|o| (0..proj.nrows()).map(|c| f[c] * proj[(c, o)]).sum())
                .collect()
        })
        .collect()
}

/// Softmax attention weights for one query position over its clamped window,
/// in window scan order. Exposed for diagnostics and tests.
pub fn attention_weights(
    source: &BevFeatureMap,
    cross: &BevFeatureMap,
    p: &AttentionParams,
    row: usize,
    col: usize,
) -> Result<Vec<((usize, usize), f64)>> {
    check_attention_inputs(source, cross, p)?;
    let queries = project_positions(source, &p.query_proj);
    let keys = project_positions(cross, &p.key_proj);
    let (h, w) = (source.height(), source.width());
    let idx = row * w + col;
    let (coords, logits) = window_logits(p, &queries[idx], &keys, h, w, row, col);
    let weights = crate::numeric::softmax(&logits);
    Ok(coords.into_iter().zip(weights).collect())
}

fn window_logits(
    p: &AttentionParams,
    query: &[f64],
    keys: &[Vec<f64>],
    h: usize,
    w: usize,
    row: usize,
    col: usize,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let half = (p.window as isize - 1) / 2;
    let k = p.window as isize;
    let denom = p.scale_denominator();
    let mut coords = Vec::new();
    let mut logits = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            let nr = row as isize + dr;
            let nc = col as isize + dc;
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let key = &keys[nr as usize * w + nc as usize];
            let dot: f64 = query.iter().zip(key).map(|(a, b)| a * b).sum();
            let bias = *p
                .rel_bias
                .get((dr + k - 1) as usize, (dc + k - 1) as usize);
            coords.push((nr as usize, nc as usize));
            logits.push((dot + bias) / denom);
        }
    }
    (coords, logits)
}

fn check_attention_inputs(
    source: &BevFeatureMap,
    cross: &BevFeatureMap,
    p: &AttentionParams,
) -> Result<()> {
    if !source.same_plane(cross) {
        return Err(Error::dim("source and cross maps must share H x W"));
    }
    if source.channels() != p.query_proj.nrows() {
        return Err(Error::dim(format!(
            "source has {} channels, query projection expects {}",
            source.channels(),
            p.query_proj.nrows()
        )));
    }
    if cross.channels() != p.key_proj.nrows() || cross.channels() != p.value_proj.nrows() {
        return Err(Error::dim(format!(
            "cross has {} channels, key/value projections expect {}/{}",
            cross.channels(),
            p.key_proj.nrows(),
            p.value_proj.nrows()
        )));
    }
    Ok(())
}

/// Neighborhood attention: every source position queries the k×k window of the
/// cross map centered at the same position.
///
/// The window is truncated at borders and the softmax is taken over in-bounds
/// neighbors only. Output has the value-projection channel count.
pub fn neighborhood_attention(
    source: &BevFeatureMap,
    cross: &BevFeatureMap,
    p: &AttentionParams,
) -> Result<BevFeatureMap> {
    check_attention_inputs(source, cross, p)?;
    let (h, w) = (source.height(), source.width());
    let v_dim = p.value_dim();

    let queries = project_positions(source, &p.query_proj);
    let keys = project_positions(cross, &p.key_proj);
    let values = project_positions(cross, &p.value_proj);

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0; v_dim * w];
            for col in 0..w {
                let (coords, logits) =
                    window_logits(p, &queries[row * w + col], &keys, h, w, row, col);
                let weights = crate::numeric::softmax(&logits);
                for ((nr, nc), wgt) in coords.iter().zip(weights) {
                    let val = &values[nr * w + nc];
                    for c in 0..v_dim {
                        out[c * w + col] += wgt * val[c];
                    }
                }
            }
            out
        })
        .collect();

    let mut map = BevFeatureMap::zeros(v_dim, h, w);
    for (row, chunk) in rows.iter().enumerate() {
        for c in 0..v_dim {
            for col in 0..w {
                *map.at_mut(c, row, col) = chunk[c * w + col];
            }
        }
    }
    Ok(map)
}

/// Gated attention refinement: a per-channel scalar gate from the globally
/// average-pooled features, broadcast spatially.
pub fn gated_fuse(neighbor: &BevFeatureMap, g: &GateParams) -> Result<BevFeatureMap> {
    if neighbor.channels() != g.bias.len() {
        return Err(Error::dim(format!(
            "gate expects {} channels, map has {}",
            g.bias.len(),
            neighbor.channels()
        )));
    }
    let cells = (neighbor.height() * neighbor.width()) as f64;
    let pooled: Vec<f64> = neighbor
        .channel_sums()
        .into_iter()
        .map(|s| s / cells)
        .collect();
    let gate: Vec<f64> = (0..neighbor.channels())
        .map(|c| {
            let z: f64 = (0..neighbor.channels())
                .map(|i| g.gate_weights[(c, i)] * pooled[i])
                .sum::<f64>()
                + g.bias[c];
            1.0 / (1.0 + (-z).exp())
        })
        .collect();

    let mut out = neighbor.clone();
    let plane = neighbor.height() * neighbor.width();
    for (c, gv) in gate.iter().enumerate() {
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v *= gv;
        }
    }
    Ok(out)
}

/// Composes neighborhood attention and gated fusion with the requested
/// source/cross assignment.
pub fn fuse_bev(
    camera: &BevFeatureMap,
    lidar: &BevFeatureMap,
    p: &AttentionParams,
    g: &GateParams,
    direction: FuseDirection,
) -> Result<BevFeatureMap> {
    let (source, cross) = match direction {
        FuseDirection::CameraSource => (camera, lidar),
        FuseDirection::LidarSource => (lidar, camera),
    };
    let neighbor = neighborhood_attention(source, cross, p)?;
    gated_fuse(&neighbor, g)
}
