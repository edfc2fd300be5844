//! Voxel grids, multi-contrast volumes, label maps and their on-disk formats.
//!
//! Volumes are stored in the MGV format: an ASCII header of `KEY value` lines
//! terminated by `END`, followed by little-endian `f32` samples. Samples are
//! contrast-major and voxels run x-fastest, then y, then z.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    /// Voxel edge lengths in mm.
    pub voxel_size: [f64; 3],
    /// Position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::format(
                    "DIMS",
                    format!("axis {axis} has zero extent"),
                ));
            }
        }
        for (axis, &s) in voxel_size.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::format(
                    "VOXSIZE",
                    format!("axis {axis} has non-positive size {s}"),
                ));
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            origin: [0.0; 3],
        })
    }

    /// Isotropic 1 mm grid.
    pub fn cube(n: usize) -> Self {
        Self::new([n, n, n], [1.0; 3]).expect("positive cube extent")
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.voxel_size == other.voxel_size
    }
}

/// A scan with `n_contrasts` co-registered channels on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiContrastVolume {
    pub grid: VoxelGrid,
    pub n_contrasts: usize,
    /// Contrast-major samples: `data[c * n_voxels + voxel]`.
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
    pub log_transformed: bool,
}

impl MultiContrastVolume {
    /// Volume with every voxel inside the mask.
    pub fn new(grid: VoxelGrid, n_contrasts: usize, data: Vec<f32>) -> Result<Self> {
        let mask = vec![true; grid.n_voxels()];
        Self::with_mask(grid, n_contrasts, data, mask)
    }

    pub fn with_mask(
        grid: VoxelGrid,
        n_contrasts: usize,
        data: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if n_contrasts == 0 {
            return Err(Error::format("NCONTRASTS", "must be at least 1"));
        }
        let n = grid.n_voxels();
        if data.len() != n * n_contrasts {
            return Err(Error::Shape(format!(
                "data has {} samples, grid needs {}",
                data.len(),
                n * n_contrasts
            )));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask has {} voxels, grid has {n}",
                mask.len()
            )));
        }
        Ok(Self {
            grid,
            n_contrasts,
            data,
            mask,
            log_transformed: false,
        })
    }

    #[inline]
    pub fn value(&self, voxel: usize, contrast: usize) -> f32 {
        self.data[contrast * self.grid.n_voxels() + voxel]
    }

    pub fn contrast(&self, contrast: usize) -> &[f32] {
        let n = self.grid.n_voxels();
        &self.data[contrast * n..(contrast + 1) * n]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.grid.n_voxels())
            .filter(|&i| self.mask[i])
            .collect()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks that every masked sample is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_voxels();
        for c in 0..self.n_contrasts {
            for v in 0..n {
                let value = self.data[c * n + v];
                if self.mask[v] && !value.is_finite() {
                    return Err(Error::NonFinite {
                        voxel: v,
                        contrast: c,
                        value: value as f64,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Replaces every sample `v` by `ln(max(v, floor))`.
pub fn log_transform(vol: &MultiContrastVolume, floor: f64) -> Result<MultiContrastVolume> {
    log_transform_with(vol, &vec![floor; vol.n_contrasts])
}

/// Log transform with a per-contrast floor of `fraction` times that
/// contrast's largest masked intensity.
pub fn log_transform_relative(
    vol: &MultiContrastVolume,
    fraction: f64,
) -> Result<MultiContrastVolume> {
    let floors: Vec<f64> = (0..vol.n_contrasts)
        .map(|c| {
            let max = vol
                .contrast(c)
                .iter()
                .zip(&vol.mask)
                .filter(|(v, &m)| m && v.is_finite())
                .fold(0.0f64, |acc, (&v, _)| acc.max(v as f64));
            let floor = fraction * max;
            if floor > 0.0 {
                floor
            } else {
                f64::MIN_POSITIVE
            }
        })
        .collect();
    log_transform_with(vol, &floors)
}

fn log_transform_with(vol: &MultiContrastVolume, floors: &[f64]) -> Result<MultiContrastVolume> {
    if vol.log_transformed {
        return Err(Error::State("volume is already log-transformed".into()));
    }
    if let Some(bad) = floors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "log floor must be positive, got {bad}"
        )));
    }
    let n = vol.grid.n_voxels();
    let mut out = vol.clone();
    for (c, &floor) in floors.iter().enumerate() {
        for v in &mut out.data[c * n..(c + 1) * n] {
            // NaN compares false, so it lands on the floor.
            let raw = *v as f64;
            let clamped = if raw > floor { raw } else { floor };
            *v = clamped.ln() as f32;
        }
    }
    out.log_transformed = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: VoxelGrid,
    /// Number of classes; labels are `1..=n_classes`, 0 outside the mask.
    pub n_classes: usize,
    pub labels: Vec<u32>,
    /// Optional voxel-major posteriors `posteriors[voxel * n_classes + k]`.
    pub posteriors: Option<Vec<f64>>,
}

impl LabelVolume {
    pub fn new(grid: VoxelGrid, n_classes: usize, labels: Vec<u32>) -> Result<Self> {
        let seg = Self {
            grid,
            n_classes,
            labels,
            posteriors: None,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn with_posteriors(mut self, posteriors: Vec<f64>) -> Result<Self> {
        self.posteriors = Some(posteriors);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_voxels();
        if self.labels.len() != n {
            return Err(Error::Shape(format!(
                "label map has {} voxels, grid has {n}",
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize > self.n_classes) {
            return Err(Error::Validation(format!(
                "label {bad} exceeds class count {}",
                self.n_classes
            )));
        }
        if let Some(post) = &self.posteriors {
            let k = self.n_classes;
            if post.len() != n * k {
                return Err(Error::Shape("posterior array size".into()));
            }
            for (v, &label) in self.labels.iter().enumerate() {
                if label == 0 {
                    continue;
                }
                let row = &post[v * k..(v + 1) * k];
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "posterior row at voxel {v} is not a simplex"
                    )));
                }
                let best = argmax(row);
                if row[best] > row[label as usize - 1] {
                    return Err(Error::Validation(format!(
                        "label at voxel {v} is not the posterior argmax"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mask_of(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Volume in mm³ of every label `1..=n_classes` (absent labels map to 0).
pub fn structure_volumes(seg: &LabelVolume) -> BTreeMap<u32, f64> {
    let mut counts = vec![0usize; seg.n_classes + 1];
    for &l in &seg.labels {
        counts[l as usize] += 1;
    }
    let voxel = seg.grid.voxel_volume();
    (1..=seg.n_classes)
        .map(|k| (k as u32, counts[k] as f64 * voxel))
        .collect()
}

/// Conventional structure name for a label.
pub fn structure_name(label: u32) -> String {
    format!("label{label}")
}

// ---------------------------------------------------------------------------
// MGV format

const MAGIC: &str = "MGV";

fn encode(
    grid: &VoxelGrid,
    n_contrasts: usize,
    log: bool,
    samples: impl Iterator<Item = f32>,
) -> Vec<u8> {
    let [dx, dy, dz] = grid.dims;
    let [sx, sy, sz] = grid.voxel_size;
    let header = format!(
        "{MAGIC} 1\nDIMS {dx} {dy} {dz}\nNCONTRASTS {n_contrasts}\nVOXSIZE {sx} {sy} {sz}\nLOG {}\nEND\n",
        u8::from(log)
    );
    let mut bytes = header.into_bytes();
    bytes.reserve(grid.n_voxels() * n_contrasts * 4);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    bytes
}

#[derive(Debug)]
struct Decoded {
    grid: VoxelGrid,
    n_contrasts: usize,
    log: bool,
    data: Vec<f32>,
}

fn parse_fields<T: std::str::FromStr, const N: usize>(key: &str, rest: &[&str]) -> Result<[T; N]> {
    if rest.len() != N {
        return Err(Error::format(
            key,
            format!("expected {N} values, found {}", rest.len()),
        ));
    }
    let parsed: Vec<T> = rest
        .iter()
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::format(key, format!("cannot parse `{s}`")))
        })
        .collect::<Result<_>>()?;
    parsed
        .try_into()
        .map_err(|_| Error::format(key, "wrong value count"))
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..end.0])
        .map_err(|_| Error::format("header", "not valid ASCII"))?;

    let mut version = None;
    let mut dims: Option<[i64; 3]> = None;
    let mut n_contrasts: Option<i64> = None;
    let mut voxel_size: Option<[f64; 3]> = None;
    let mut log = None;
    for line in header.lines() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some((&key, rest)) = tokens.split_first() else {
            continue;
        };
        match key {
            "MGV" => version = Some(parse_fields::<u32, 1>(key, rest)?[0]),
            "DIMS" => dims = Some(parse_fields(key, rest)?),
            "NCONTRASTS" => n_contrasts = Some(parse_fields::<i64, 1>(key, rest)?[0]),
            "VOXSIZE" => voxel_size = Some(parse_fields(key, rest)?),
            "LOG" => {
                log = Some(match parse_fields::<u8, 1>(key, rest)?[0] {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::format("LOG", format!("must be 0 or 1, got {other}")))
                    }
                })
            }
            other => return Err(Error::format(other, "unknown header key")),
        }
    }
    match version {
        Some(1) => {}
        Some(v) => return Err(Error::format("MGV", format!("unsupported version {v}"))),
        None => return Err(Error::format("MGV", "missing magic line")),
    }
    let dims = dims.ok_or_else(|| Error::format("DIMS", "missing"))?;
    if let Some(d) = dims.iter().find(|&&d| d <= 0) {
        return Err(Error::format("DIMS", format!("non-positive extent {d}")));
    }
    let n_contrasts = n_contrasts.ok_or_else(|| Error::format("NCONTRASTS", "missing"))?;
    if n_contrasts <= 0 {
        return Err(Error::format(
            "NCONTRASTS",
            format!("non-positive count {n_contrasts}"),
        ));
    }
    let voxel_size = voxel_size.ok_or_else(|| Error::format("VOXSIZE", "missing"))?;
    let log = log.ok_or_else(|| Error::format("LOG", "missing"))?;

    let grid = VoxelGrid::new(dims.map(|d| d as usize), voxel_size)?;
    let n_contrasts = n_contrasts as usize;
    let payload = &bytes[end.1..];
    let expected = grid.n_voxels() * n_contrasts * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Decoded {
        grid,
        n_contrasts,
        log,
        data,
    })
}

/// Returns (header length excluding the END line, payload offset).
fn find_header_end(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut start = 0;
    while start < bytes.len() {
        let Some(nl) = bytes[start..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[start..start + nl];
        if line == b"END" || line == b"END\r" {
            return Ok((start, start + nl + 1));
        }
        start += nl + 1;
    }
    Err(Error::format("END", "header terminator not found"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads an MGV volume; every voxel starts inside the mask.
pub fn read_volume(path: impl AsRef<Path>) -> Result<MultiContrastVolume> {
    let decoded = decode(&read_bytes(path.as_ref())?)?;
    let mut vol = MultiContrastVolume::new(decoded.grid, decoded.n_contrasts, decoded.data)?;
    vol.log_transformed = decoded.log;
    Ok(vol)
}

pub fn write_volume(vol: &MultiContrastVolume, path: impl AsRef<Path>) -> Result<()> {
    vol.validate()?;
    let bytes = encode(
        &vol.grid,
        vol.n_contrasts,
        vol.log_transformed,
        vol.data.iter().copied(),
    );
    write_bytes(path.as_ref(), &bytes)
}

/// Writes the mask as a single-contrast 0/1 volume.
pub fn write_mask(mask: &[bool], grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    if mask.len() != grid.n_voxels() {
        return Err(Error::Shape("mask size does not match grid".into()));
    }
    let bytes = encode(
        grid,
        1,
        false,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }),
    );
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(VoxelGrid, Vec<bool>)> {
    let decoded = decode(&read_bytes(path.as_ref())?)?;
    if decoded.n_contrasts != 1 {
        return Err(Error::format(
            "NCONTRASTS",
            "mask volumes have one contrast",
        ));
    }
    let mask = decoded
        .data
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::Validation(format!(
                "mask value {other} is not 0 or 1"
            ))),
        })
        .collect::<Result<_>>()?;
    Ok((decoded.grid, mask))
}

pub fn write_labels(seg: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    seg.validate()?;
    let bytes = encode(&seg.grid, 1, false, seg.labels.iter().map(|&l| l as f32));
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a label volume; the class count is the largest label present
/// unless `n_classes` is given.
pub fn read_labels(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<LabelVolume> {
    let decoded = decode(&read_bytes(path.as_ref())?)?;
    if decoded.n_contrasts != 1 {
        return Err(Error::format(
            "NCONTRASTS",
            "label volumes have one contrast",
        ));
    }
    let labels: Vec<u32> = decoded
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                Ok(v as u32)
            } else {
                Err(Error::Validation(format!(
                    "label value {v} is not a non-negative integer"
                )))
            }
        })
        .collect::<Result<_>>()?;
    let k = n_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize);
    LabelVolume::new(decoded.grid, k, labels)
}

// ---------------------------------------------------------------------------
// Volume tables

/// Per-structure volumes of one subject over time.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTimeSeries {
    pub subject_id: String,
    /// (years since baseline, structure name → mm³), strictly increasing in time.
    pub entries: Vec<(f64, BTreeMap<String, f64>)>,
}

impl VolumeTimeSeries {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Self {
            subject_id: subject_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, time_years: f64, volumes: BTreeMap<String, f64>) -> Result<()> {
        match self.entries.last() {
            None if time_years != 0.0 => {
                return Err(Error::Validation(format!(
                    "first time offset must be 0, got {time_years}"
                )))
            }
            Some((last, _)) if time_years <= *last => {
                return Err(Error::Validation(format!(
                    "time offsets must increase strictly ({time_years} after {last})"
                )))
            }
            _ => {}
        }
        if let Some((name, v)) = volumes.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("volume of {name} is {v}")));
        }
        self.entries.push((time_years, volumes));
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// Volumes of one structure at every time point.
    pub fn structure(&self, name: &str) -> Option<Vec<f64>> {
        self.entries
            .iter()
            .map(|(_, table)| table.get(name).copied())
            .collect()
    }

    pub fn structures(&self) -> Vec<String> {
        self.entries
            .first()
            .map(|(_, t)| t.keys().cloned().collect())
            .unwrap_or_default()
    }
}

pub const VOLUME_TABLE_HEADER: [&str; 4] = ["subject", "time_years", "structure", "volume_mm3"];

pub fn write_volume_table(series: &[VolumeTimeSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(VOLUME_TABLE_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for s in series {
        for (t, table) in &s.entries {
            for (name, v) in table {
                writer
                    .write_record([s.subject_id.as_str(), &t.to_string(), name, &v.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads a volume table, grouping rows by subject in order of first appearance.
pub fn read_volume_table(path: impl AsRef<Path>) -> Result<Vec<VolumeTimeSeries>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != VOLUME_TABLE_HEADER {
        return Err(Error::format(
            "header",
            format!("expected `{}`", VOLUME_TABLE_HEADER.join(",")),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<u64, (f64, BTreeMap<String, f64>)>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let subject = record[0].to_string();
        let time: f64 = record[1].parse().map_err(|_| {
            Error::format("time_years", format!("row {}: `{}`", line + 2, &record[1]))
        })?;
        let volume: f64 = record[3].parse().map_err(|_| {
            Error::format("volume_mm3", format!("row {}: `{}`", line + 2, &record[3]))
        })?;
        if !order.contains(&subject) {
            order.push(subject.clone());
        }
        rows.entry(subject)
            .or_default()
            .entry(time.to_bits())
            .or_insert_with(|| (time, BTreeMap::new()))
            .1
            .insert(record[2].to_string(), volume);
    }
    order
        .into_iter()
        .map(|subject| {
            let mut entries: Vec<_> = rows
                .remove(&subject)
                .unwrap_or_default()
                .into_values()
                .collect();
            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut series = VolumeTimeSeries::new(subject);
            for (t, table) in entries {
                series.push(t, table)?;
            }
            Ok(series)
        })
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        field: path.display().to_string(),
        message: e.to_string(),
    }
}
