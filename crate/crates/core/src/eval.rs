//! Thresholding, morphological clean-up, overlap and surface-distance metrics,
//! orientation ensembles, and report files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::serialize::read_u32;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::volume::{assemble, crop_depth, embed_depth, slices_of, Direction, Orientation, VolumeSample};

/// Binary `[X, Y, Z]` volume, `z` fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    dims: [usize; 3],
    voxels: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != voxels.len() {
            return Err(Error::param(format!("{} voxels do not fill {dims:?}", voxels.len())));
        }
        Ok(BinaryVolume { dims, voxels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        BinaryVolume {
            dims,
            voxels: vec![false; dims.iter().product()],
        }
    }

    /// Voxels of a `[X, Y, Z]` tensor above one half.
    pub fn from_mask(t: &Tensor<f32>) -> Result<Self> {
        let mut b = threshold(t, 0.5)?;
        for (v, &m) in b.voxels.iter_mut().zip(t.data()) {
            *v = m > 0.5;
        }
        Ok(b)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.dims, self.voxels.iter().map(|&v| v as u8 as f32).collect()).expect("non-empty grid")
    }

    fn check_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        for (k, axis) in ["x", "y", "z"].into_iter().enumerate() {
            if self.dims[k] != other.dims[k] {
                return Err(Error::Dimension {
                    op,
                    axis,
                    expected: self.dims[k],
                    actual: other.dims[k],
                });
            }
        }
        Ok(())
    }

    /// Face neighbours of voxel `i`; `None` for positions outside the grid.
    fn face_neighbours(&self, x: usize, y: usize, z: usize) -> [Option<usize>; 6] {
        let [nx, ny, nz] = self.dims;
        [
            (x > 0).then(|| self.index(x - 1, y, z)),
            (x + 1 < nx).then(|| self.index(x + 1, y, z)),
            (y > 0).then(|| self.index(x, y - 1, z)),
            (y + 1 < ny).then(|| self.index(x, y + 1, z)),
            (z > 0).then(|| self.index(x, y, z - 1)),
            (z + 1 < nz).then(|| self.index(x, y, z + 1)),
        ]
    }
}

/// `prob >= tau` voxelwise, for a `[X, Y, Z]` probability volume.
pub fn threshold(prob: &Tensor<f32>, tau: f64) -> Result<BinaryVolume> {
    prob.expect_rank("threshold", 3)?;
    let s = prob.shape();
    Ok(BinaryVolume {
        dims: [s[0], s[1], s[2]],
        voxels: prob.data().iter().map(|&p| p as f64 >= tau).collect(),
    })
}

/// Dilation with the 6-connected cross; outside the grid counts as background.
pub fn dilate(b: &BinaryVolume) -> BinaryVolume {
    morph(b, true)
}

/// Erosion with the 6-connected cross; outside the grid counts as foreground,
/// so the grid border does not erode.
pub fn erode(b: &BinaryVolume) -> BinaryVolume {
    morph(b, false)
}

fn morph(b: &BinaryVolume, grow: bool) -> BinaryVolume {
    let [nx, ny, nz] = b.dims;
    let mut out = b.clone();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = b.index(x, y, z);
                let n = b.face_neighbours(x, y, z);
                out.voxels[i] = if grow {
                    b.voxels[i] || n.iter().any(|j| j.is_some_and(|j| b.voxels[j]))
                } else {
                    b.voxels[i] && n.iter().all(|j| j.is_none_or(|j| b.voxels[j]))
                };
            }
        }
    }
    out
}

/// 26-connected component labels (0 = background, components from 1) and
/// the size of each component (index 0 unused).
pub fn components(b: &BinaryVolume) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = b.dims;
    let mut labels = vec![0u32; b.voxels.len()];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..b.voxels.len() {
        if !b.voxels[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dz in -1isize..=1 {
                        let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                            continue;
                        }
                        let j = b.index(xx as usize, yy as usize, zz as usize);
                        if b.voxels[j] && labels[j] == 0 {
                            labels[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    /// Run one dilation followed by one erosion.
    pub closing: bool,
    /// Components smaller than this fraction of the largest are removed...
    pub min_fraction: f64,
    /// ...and never keep components below this many voxels.
    pub min_voxels: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            closing: true,
            min_fraction: 0.01,
            min_voxels: 27,
        }
    }
}

/// Morphological closing, then removal of small 26-connected components.
pub fn postprocess(b: &BinaryVolume, cfg: &PostprocessConfig) -> BinaryVolume {
    let closed = if cfg.closing { erode(&dilate(b)) } else { b.clone() };
    let (labels, sizes) = components(&closed);
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let min_size = ((cfg.min_fraction * largest as f64).ceil() as usize).max(cfg.min_voxels);
    BinaryVolume {
        dims: closed.dims,
        voxels: labels.iter().map(|&l| l != 0 && sizes[l as usize] >= min_size).collect(),
    }
}

/// Dice index restricted to `mask`; 1 when both restricted sets are empty.
pub fn dsi(a: &BinaryVolume, b: &BinaryVolume, mask: Option<&BinaryVolume>) -> Result<f64> {
    a.check_dims(b, "dsi")?;
    if let Some(m) = mask {
        a.check_dims(m, "dsi")?;
    }
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.voxels.len() {
        if mask.is_some_and(|m| !m.voxels[i]) {
            continue;
        }
        na += a.voxels[i] as usize;
        nb += b.voxels[i] as usize;
        both += (a.voxels[i] && b.voxels[i]) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background face neighbour (outside
/// the grid is background).
pub fn surface(b: &BinaryVolume) -> BinaryVolume {
    let [nx, ny, nz] = b.dims;
    let mut out = BinaryVolume::empty(b.dims);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = b.index(x, y, z);
                if b.voxels[i] && b.face_neighbours(x, y, z).iter().any(|j| j.is_none_or(|j| !b.voxels[j])) {
                    out.voxels[i] = true;
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance of every voxel to the nearest set voxel,
/// by separable lower envelopes of parabolas. Infinite if `b` is empty.
pub fn squared_distance_transform(b: &BinaryVolume) -> Vec<f64> {
    let [nx, ny, nz] = b.dims;
    let mut d: Vec<f64> = b.voxels.iter().map(|&v| if v { 0.0 } else { f64::INFINITY }).collect();
    let strides = [ny * nz, nz, 1];
    let lens = [nx, ny, nz];
    let mut f = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = lens[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..lens[oa] {
            for j in 0..lens[ob] {
                let base = i * strides[oa] + j * strides[ob];
                f.clear();
                f.extend((0..n).map(|k| d[base + k * stride]));
                envelope(&f, &mut out);
                for k in 0..n {
                    d[base + k * stride] = out[k];
                }
            }
        }
    }
    d
}

/// 1D squared distance transform of sampled function `f`.
fn envelope(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let cross = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &sites[1..] {
        let mut s = cross(q, *v.last().expect("non-empty"));
        while s <= *z.last().expect("non-empty") {
            v.pop();
            z.pop();
            s = cross(q, *v.last().expect("non-empty"));
        }
        v.push(q);
        z.push(s);
        if v.len() == 1 {
            z[0] = f64::NEG_INFINITY;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

/// Symmetric mean surface distance and Hausdorff distance, in voxels.
pub fn surface_distances(a: &BinaryVolume, b: &BinaryVolume) -> Result<(f64, f64)> {
    a.check_dims(b, "surface_distances")?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance of an empty segmentation"));
    }
    let (sa, sb) = (surface(a), surface(b));
    let (da, db) = (squared_distance_transform(&sa), squared_distance_transform(&sb));
    let directed = |from: &BinaryVolume, to_dist: &[f64]| -> (f64, f64, usize) {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        let mut n = 0;
        for (i, &on) in from.voxels.iter().enumerate() {
            if on {
                let d = to_dist[i].sqrt();
                sum += d;
                max = max.max(d);
                n += 1;
            }
        }
        (sum, max, n)
    };
    let (sum_ab, max_ab, n_a) = directed(&sa, &db);
    let (sum_ba, max_ba, n_b) = directed(&sb, &da);
    let mad = (sum_ab / n_a as f64 + sum_ba / n_b as f64) / 2.0;
    Ok((mad, max_ab.max(max_ba)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleMode {
    #[default]
    Mean,
    Sum,
}

/// Voxelwise mean (or sum) of exactly three orientation probability maps,
/// zeroed outside `fov` when given.
pub fn ensemble(maps: &[Tensor<f32>], fov: Option<&Tensor<f32>>, mode: EnsembleMode) -> Result<Tensor<f32>> {
    if maps.len() != 3 {
        return Err(Error::param(format!("ensemble needs exactly 3 maps, got {}", maps.len())));
    }
    for m in &maps[1..] {
        if m.shape() != maps[0].shape() {
            return Err(Error::param(format!(
                "ensemble maps differ in shape: {:?} vs {:?}",
                maps[0].shape(),
                m.shape()
            )));
        }
    }
    let scale = match mode {
        EnsembleMode::Mean => 1.0 / 3.0,
        EnsembleMode::Sum => 1.0,
    };
    let mut out = Tensor::zeros(maps[0].shape());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let s: f64 = maps.iter().map(|m| m.data()[i] as f64).sum();
        let inside = fov.is_none_or(|f| f.data()[i] > 0.5);
        *o = if inside { (s * scale) as f32 } else { 0.0 };
    }
    Ok(out)
}

/// Probability volume `[X, Y, Z]` of one network over one image. For
/// coronal and sagittal slicing, an image deeper than the network's slice
/// width is cropped to its central slices and the prediction re-embedded
/// with zeros.
pub fn predict_volume(
    model: &Model,
    image: &Tensor<f32>,
    orientation: Orientation,
    direction: Direction,
) -> Result<Tensor<f32>> {
    image.expect_rank("predict_volume", 3)?;
    let dims = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let expected = model.spec().input_size;
    let crop = orientation != Orientation::Axial && dims[2] > expected.1;
    let work = if crop { crop_depth(image, expected.1)? } else { image.clone() };
    let wd = [work.shape()[0], work.shape()[1], work.shape()[2]];
    let got = orientation.slice_shape(wd);
    if got != expected {
        let canonical = match orientation {
            Orientation::Axial => format!("{}x{}xZ", expected.0, expected.1),
            Orientation::Coronal => format!("{}xYx{}", expected.0, expected.1),
            Orientation::Sagittal => format!("Xx{}x{}", expected.0, expected.1),
        };
        return Err(Error::config(format!(
            "volume of size {}x{}x{} gives {orientation} slices of {}x{}, but the network needs {}x{}; pad or crop the volume to {canonical}",
            dims[0], dims[1], dims[2], got.0, got.1, expected.0, expected.1
        )));
    }
    let slices = slices_of(&work, orientation, direction);
    let pred = model.forward_volume(&slices, false, 0)?;
    let vol = assemble(&pred, orientation, direction, wd)?;
    if crop {
        embed_depth(&vol, dims[2])
    } else {
        Ok(vol)
    }
}

const PROB_MAGIC: &[u8; 8] = b"RUNETPRB";
const PROB_VERSION: u32 = 1;

pub fn write_probability(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.numel() * 4 + 64);
    buf.extend_from_slice(PROB_MAGIC);
    buf.extend_from_slice(&PROB_VERSION.to_le_bytes());
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_probability(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let fail = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != PROB_MAGIC {
        return Err(fail("not a probability volume"));
    }
    let mut r = &bytes[8..];
    let version = read_u32(&mut r)?;
    if version != PROB_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let t = read_tensor(&mut r).map_err(|_| fail("truncated or corrupt tensor"))?;
    if t.rank() != 3 || !r.is_empty() {
        return Err(fail("expected exactly one [X, Y, Z] tensor"));
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Axial,
    Coronal,
    Sagittal,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Axial, Method::Coronal, Method::Sagittal, Method::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Method::Axial => "axial",
            Method::Coronal => "coronal",
            Method::Sagittal => "sagittal",
            Method::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Raw,
    Postprocessed,
}

impl Stage {
    pub const ALL: [Stage; 2] = [Stage::Raw, Stage::Postprocessed];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Postprocessed => "postprocessed",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown stage `{s}`")))
    }
}

/// One row of the metrics table. Distances are `None` when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub volume_id: String,
    pub method: Method,
    pub stage: Stage,
    pub dsi: Option<f64>,
    pub mad: Option<f64>,
    pub hdd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// `(volume, method)` pairs with no prediction.
    pub missing: Vec<(String, Method)>,
}

/// Raw and post-processed metrics of one probability volume.
pub fn evaluate_volume(
    id: &str,
    method: Method,
    prob: &Tensor<f32>,
    sample: &VolumeSample,
    tau: f64,
    post: &PostprocessConfig,
) -> Result<[MetricsRow; 2]> {
    let truth = BinaryVolume::from_mask(&sample.label)?;
    let fov = BinaryVolume::from_mask(&sample.fov)?;
    let raw = threshold(prob, tau)?;
    // nothing outside the imaged cone is a valid prediction
    let raw = BinaryVolume {
        voxels: raw.voxels.iter().zip(&fov.voxels).map(|(&p, &f)| p && f).collect(),
        ..raw
    };
    let cleaned = postprocess(&raw, post);
    let row = |stage, seg: &BinaryVolume| -> Result<MetricsRow> {
        let (mad, hdd) = match surface_distances(seg, &truth) {
            Ok((m, h)) => (Some(m), Some(h)),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(MetricsRow {
            volume_id: id.to_string(),
            method,
            stage,
            dsi: Some(dsi(seg, &truth, Some(&fov))?),
            mad,
            hdd,
        })
    };
    Ok([row(Stage::Raw, &raw)?, row(Stage::Postprocessed, &cleaned)?])
}

/// Metrics for every test volume and method. Missing predictions produce
/// rows with no values and are listed in `missing`.
pub fn evaluate_testset(
    predictions: &BTreeMap<(String, Method), Tensor<f32>>,
    test: &[VolumeSample],
    methods: &[Method],
    tau: f64,
    post: &PostprocessConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for sample in test {
        for &method in methods {
            match predictions.get(&(sample.id.clone(), method)) {
                Some(p) => report.rows.extend(evaluate_volume(&sample.id, method, p, sample, tau, post)?),
                None => {
                    report.missing.push((sample.id.clone(), method));
                    for stage in Stage::ALL {
                        report.rows.push(MetricsRow {
                            volume_id: sample.id.clone(),
                            method,
                            stage,
                            dsi: None,
                            mad: None,
                            hdd: None,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad number `{s}`")))
}

pub const METRICS_HEADER: &str = "volume_id,method,stage,dsi,mad_voxels,hdd_voxels";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.volume_id,
            r.method,
            r.stage.name(),
            opt(r.dsi),
            opt(r.mad),
            opt(r.hdd)
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("metrics row `{l}` needs 6 fields")));
            }
            Ok(MetricsRow {
                volume_id: f[0].to_string(),
                method: f[1].parse()?,
                stage: f[2].parse()?,
                dsi: parse_opt(f[3])?,
                mad: parse_opt(f[4])?,
                hdd: parse_opt(f[5])?,
            })
        })
        .collect()
}

/// Box-plot statistics of one metric for one method and stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub stage: Stage,
    pub metric: &'static str,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Extremes of the values within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub count: usize,
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Option<(f64, f64, f64, f64, f64, Vec<f64>)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    let outliers = v.iter().copied().filter(|x| !(lo..=hi).contains(x)).collect();
    Some((med, q1, q3, inside[0], inside[inside.len() - 1], outliers))
}

pub const METRICS: [&str; 3] = ["dsi", "mad_voxels", "hdd_voxels"];

/// Median, quartiles, whiskers and outliers per method, stage and metric.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for method in Method::ALL {
        for stage in Stage::ALL {
            for metric in METRICS {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.stage == stage)
                    .filter_map(|r| match metric {
                        "dsi" => r.dsi,
                        "mad_voxels" => r.mad,
                        _ => r.hdd,
                    })
                    .collect();
                if let Some((median, q1, q3, whisker_low, whisker_high, outliers)) = box_stats(&values) {
                    out.push(SummaryRow {
                        method,
                        stage,
                        metric,
                        median,
                        q1,
                        q3,
                        whisker_low,
                        whisker_high,
                        outliers,
                        count: values.len(),
                    });
                }
            }
        }
    }
    out
}

pub const SUMMARY_HEADER: &str = "method,stage,metric,median,q1,q3,outlier_count";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.stage.name(),
            r.metric,
            r.median,
            r.q1,
            r.q3,
            r.outliers.len()
        );
    }
    s
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per metric, one box per method and stage.
pub fn boxplot_svg(summary: &[SummaryRow]) -> String {
    let (panel_w, panel_h, pad) = (360.0, 300.0, 40.0);
    let width = panel_w * METRICS.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        panel_h + 60.0
    );
    for (p, metric) in METRICS.iter().enumerate() {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.metric == *metric).collect();
        let x0 = p as f64 * panel_w;
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{metric}</text>"#, x0 + panel_w / 2.0);
        if rows.is_empty() {
            continue;
        }
        let lo = rows.iter().flat_map(|r| r.outliers.iter().copied().chain([r.whisker_low])).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().flat_map(|r| r.outliers.iter().copied().chain([r.whisker_high])).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let y = |v: f64| pad + (panel_h - pad) * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{hi:.3}</text><text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#,
            y(hi),
            y(lo),
            x0 + pad - 4.0,
            y(hi) + 4.0,
            x0 + pad - 4.0,
            y(lo) + 4.0,
            x = x0 + pad
        );
        let slot = (panel_w - pad - 10.0) / rows.len() as f64;
        for (i, r) in rows.iter().enumerate() {
            let cx = x0 + pad + slot * (i as f64 + 0.5);
            let half = slot * 0.3;
            let _ = writeln!(
                s,
                r##"<g><line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/><line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/><rect x="{}" y="{}" width="{}" height="{}" fill="#cfe0f3" stroke="black"/><line x1="{}" y1="{m}" x2="{}" y2="{m}" stroke="#c0392b" stroke-width="2"/></g>"##,
                y(r.whisker_high),
                y(r.q3),
                y(r.q1),
                y(r.whisker_low),
                cx - half,
                y(r.q3),
                2.0 * half,
                (y(r.q1) - y(r.q3)).max(0.5),
                cx - half,
                cx + half,
                m = y(r.median)
            );
            for &o in &r.outliers {
                let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">+</text>"#, y(o) + 4.0);
            }
            let label = svg_escape(&format!("{} {}", r.method, if r.stage == Stage::Raw { "raw" } else { "post" }));
            let _ = writeln!(
                s,
                r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-45 {cx} {})">{label}</text>"#,
                panel_h + 12.0,
                panel_h + 12.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Centred moving average with an odd window of about `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Series drawn by [`line_plot_svg`]: `(name, colour, points)`.
pub type Series<'a> = (&'a str, &'a str, Vec<(f64, f64)>);

/// Line chart of several series sharing one x axis.
pub fn line_plot_svg(title: &str, series: &[Series<'_>]) -> String {
    let (w, h, pad) = (720.0, 360.0, 50.0);
    let pts = series.iter().flat_map(|(_, _, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| pad + (w - 2.0 * pad) * (x - x0) / (x1 - x0);
    let py = |y: f64| h - pad - (h - 2.0 * pad) * (y - y0) / (y1 - y0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, svg_escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text><text x="{}" y="{}" text-anchor="end">{y0:.3}</text><text x="{pad}" y="{}">{x0}</text><text x="{}" y="{}" text-anchor="end">{x1}</text>"#,
        pad - 4.0,
        pad + 4.0,
        pad - 4.0,
        h - pad,
        h - pad + 14.0,
        w - pad,
        h - pad + 14.0
    );
    for (i, (name, colour, p)) in series.iter().enumerate() {
        if !p.is_empty() {
            let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = pad + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{colour}">{}</text>"#,
            w - pad - 150.0,
            svg_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
