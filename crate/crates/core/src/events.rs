//! Event streams and their voxel-grid representation.
//!
//! Binary container layout (little-endian):
//!
//! ```text
//! "EVT1" | u16 width | u16 height | u64 count | count × (u16 x, u16 y, u64 t_us, i8 p)
//! ```
//!
//! The CSV alternative has a header row `x,y,t,p`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const VOXEL_MAGIC: &[u8; 4] = b"VOX1";
const EVENT_RECORD_BYTES: usize = 2 + 2 + 8 + 1;

/// Default temporal bin count.
pub const DEFAULT_BINS: usize = 3;
/// Default window for DSEC-format recordings, in microseconds.
pub const DSEC_WINDOW_US: u64 = 25_000;
/// Default window for DDD17-format recordings, in microseconds.
pub const DDD17_WINDOW_US: u64 = 15_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    Csv,
}

impl EventFormat {
    /// Picks the format from a file extension; anything other than `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

/// Asynchronous events in structure-of-arrays form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub xs: Vec<u16>,
    pub ys: Vec<u16>,
    pub ts: Vec<u64>,
    pub ps: Vec<i8>,
    pub width: u16,
    pub height: u16,
}

impl EventStream {
    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            xs: Vec::new(),
            ys: Vec::new(),
            ts: Vec::new(),
            ps: Vec::new(),
            width,
            height,
        }
    }

    /// Builds a stream and checks every invariant.
    pub fn new(
        xs: Vec<u16>,
        ys: Vec<u16>,
        ts: Vec<u64>,
        ps: Vec<i8>,
        width: u16,
        height: u16,
    ) -> Result<Self> {
        let stream = Self {
            xs,
            ys,
            ts,
            ps,
            width,
            height,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn push(&mut self, x: u16, y: u16, t: u64, p: i8) {
        self.xs.push(x);
        self.ys.push(y);
        self.ts.push(t);
        self.ps.push(p);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ts.len();
        if self.xs.len() != n || self.ys.len() != n || self.ps.len() != n {
            return Err(Error::Validation(format!(
                "event arrays differ in length: x={} y={} t={} p={}",
                self.xs.len(),
                self.ys.len(),
                n,
                self.ps.len()
            )));
        }
        for i in 0..n {
            check_record(i, self.xs[i], self.ys[i], self.ps[i], self.width, self.height)?;
            if i > 0 && self.ts[i] < self.ts[i - 1] {
                return Err(Error::Validation(format!(
                    "record {i}: timestamp {} precedes {}",
                    self.ts[i],
                    self.ts[i - 1]
                )));
            }
        }
        Ok(())
    }

    /// Appends `other` after `self`. Both must share geometry.
    pub fn concat(&self, other: &EventStream) -> Result<EventStream> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Validation("cannot concatenate streams of different geometry".into()));
        }
        let mut out = self.clone();
        out.xs.extend_from_slice(&other.xs);
        out.ys.extend_from_slice(&other.ys);
        out.ts.extend_from_slice(&other.ts);
        out.ps.extend_from_slice(&other.ps);
        Ok(out)
    }

    /// Sorts events by timestamp, keeping the relative order of equal timestamps.
    pub fn sort_by_time(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.ts[i]);
        self.xs = order.iter().map(|&i| self.xs[i]).collect();
        self.ys = order.iter().map(|&i| self.ys[i]).collect();
        self.ts = order.iter().map(|&i| self.ts[i]).collect();
        self.ps = order.iter().map(|&i| self.ps[i]).collect();
    }

    pub fn save(&self, path: &Path, format: EventFormat) -> Result<()> {
        let bytes = match format {
            EventFormat::Binary => self.to_binary(),
            EventFormat::Csv => self.to_csv().into_bytes(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * EVENT_RECORD_BYTES);
        out.extend_from_slice(EVENT_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.xs[i].to_le_bytes());
            out.extend_from_slice(&self.ys[i].to_le_bytes());
            out.extend_from_slice(&self.ts[i].to_le_bytes());
            out.push(self.ps[i] as u8);
        }
        out
    }

    /// CSV carries no geometry, so width and height are supplied by the caller on load.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,t,p\n");
        for i in 0..self.len() {
            s.push_str(&format!("{},{},{},{}\n", self.xs[i], self.ys[i], self.ts[i], self.ps[i]));
        }
        s
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!("truncated header: {} bytes", bytes.len())));
        }
        if &bytes[0..4] != EVENT_MAGIC {
            return Err(Error::Format("bad magic, expected EVT1".into()));
        }
        let width = u16::from_le_bytes([bytes[4], bytes[5]]);
        let height = u16::from_le_bytes([bytes[6], bytes[7]]);
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        let expected = count
            .checked_mul(EVENT_RECORD_BYTES)
            .ok_or_else(|| Error::Format("event count overflows".into()))?;
        if payload.len() < expected {
            return Err(Error::Format(format!(
                "truncated payload: {} records declared, {} bytes present",
                count,
                payload.len()
            )));
        }
        let mut stream = EventStream::empty(width, height);
        for (i, rec) in payload[..expected].chunks_exact(EVENT_RECORD_BYTES).enumerate() {
            let x = u16::from_le_bytes([rec[0], rec[1]]);
            let y = u16::from_le_bytes([rec[2], rec[3]]);
            let t = u64::from_le_bytes(rec[4..12].try_into().unwrap());
            let p = rec[12] as i8;
            check_record(i, x, y, p, width, height)?;
            stream.push(x, y, t, p);
        }
        stream.validate()?;
        Ok(stream)
    }

    pub fn from_csv(text: &str, width: u16, height: u16) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["x", "y", "t", "p"] {
            return Err(Error::Format(format!("csv header must be x,y,t,p, got {header:?}")));
        }
        let mut stream = EventStream::empty(width, height);
        for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!("row {row}: expected 4 fields")));
            }
            let bad = |what: &str| Error::Format(format!("row {row}: cannot parse {what}"));
            let x: u16 = fields[0].parse().map_err(|_| bad("x"))?;
            let y: u16 = fields[1].parse().map_err(|_| bad("y"))?;
            let t: u64 = fields[2].parse().map_err(|_| bad("t"))?;
            let p: i8 = fields[3].parse().map_err(|_| bad("p"))?;
            check_record(row, x, y, p, width, height)?;
            stream.push(x, y, t, p);
        }
        stream.validate()?;
        Ok(stream)
    }
}

fn check_record(i: usize, x: u16, y: u16, p: i8, width: u16, height: u16) -> Result<()> {
    if x >= width || y >= height {
        return Err(Error::Validation(format!(
            "record {i}: coordinate ({x}, {y}) outside {width}x{height} sensor"
        )));
    }
    if p != 1 && p != -1 {
        return Err(Error::Validation(format!("record {i}: polarity {p} not in {{-1, +1}}")));
    }
    Ok(())
}

/// Loads a stream from disk. CSV files need the sensor geometry because the
/// format does not carry it.
pub fn load_events(path: &Path, format: EventFormat, geometry: Option<(u16, u16)>) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        EventFormat::Binary => EventStream::from_binary(&bytes),
        EventFormat::Csv => {
            let (w, h) = geometry
                .ok_or_else(|| Error::Config("csv event files need an explicit width and height".into()))?;
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("csv is not utf-8".into()))?;
            EventStream::from_csv(&text, w, h)
        }
    }
}

/// Events with `t_start <= t < t_start + window_us`, order preserved.
pub fn slice_window(stream: &EventStream, t_start: u64, window_us: u64) -> EventStream {
    let end = t_start.saturating_add(window_us);
    let lo = stream.ts.partition_point(|&t| t < t_start);
    let hi = stream.ts.partition_point(|&t| t < end);
    let hi = hi.max(lo);
    EventStream {
        xs: stream.xs[lo..hi].to_vec(),
        ys: stream.ys[lo..hi].to_vec(),
        ts: stream.ts[lo..hi].to_vec(),
        ps: stream.ps[lo..hi].to_vec(),
        width: stream.width,
        height: stream.height,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelConfig {
    pub bins: usize,
    pub window_us: u64,
    pub height: usize,
    pub width: usize,
}

impl VoxelConfig {
    pub fn new(bins: usize, window_us: u64, height: usize, width: usize) -> Result<Self> {
        let cfg = Self {
            bins,
            window_us,
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("voxel bins must be at least 1".into()));
        }
        if self.window_us == 0 {
            return Err(Error::Config("voxel window must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("voxel geometry must be non-empty".into()));
        }
        Ok(())
    }
}

/// `bins × height × width` grid, row-major per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Vec<f32>,
    pub config: VoxelConfig,
    pub t0: u64,
}

impl VoxelGrid {
    pub fn zeros(config: VoxelConfig, t0: u64) -> Self {
        Self {
            data: vec![0.0; config.bins * config.height * config.width],
            config,
            t0,
        }
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.config.height + y) * self.config.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, y, x)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(36 + self.data.len() * 4);
        out.extend_from_slice(VOXEL_MAGIC);
        out.extend_from_slice(&(c.bins as u32).to_le_bytes());
        out.extend_from_slice(&(c.height as u32).to_le_bytes());
        out.extend_from_slice(&(c.width as u32).to_le_bytes());
        out.extend_from_slice(&self.t0.to_le_bytes());
        out.extend_from_slice(&c.window_us.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[0..4] != VOXEL_MAGIC {
            return Err(Error::Format("not a VOX1 voxel file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let config = VoxelConfig::new(u32_at(4), u64_at(24), u32_at(8), u32_at(12))?;
        let t0 = u64_at(16);
        let n = config.bins * config.height * config.width;
        let payload = &bytes[32..];
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "voxel payload has {} bytes, expected {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { data, config, t0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Triangular temporal kernel weight of bin `bin` for normalized time `t_star`.
#[inline]
pub fn kernel_weight(t_star: f64, bin: usize) -> f64 {
    (1.0 - (t_star - bin as f64).abs()).max(0.0)
}

/// Normalized timestamp in bin units, clamped to `[0, bins - 1]`.
#[inline]
pub fn normalized_time(t: u64, t0: u64, window_us: u64, bins: usize) -> f64 {
    let dt = t.saturating_sub(t0) as f64;
    let t_star = (bins as f64 - 1.0) * dt / window_us as f64;
    t_star.clamp(0.0, (bins - 1) as f64)
}

/// Maps a sensor coordinate onto a grid of a different size by nearest-integer scaling.
#[inline]
fn rescale_coord(v: u16, from: usize, to: usize) -> usize {
    if from == to {
        return v as usize;
    }
    let scaled = ((v as f64 + 0.5) * to as f64 / from as f64).floor() as usize;
    scaled.min(to - 1)
}

/// Accumulates a window of events into a voxel grid starting at `t0`.
///
/// The stream should already be sliced to `[t0, t0 + window)`. Events whose
/// sensor geometry differs from the grid are mapped by nearest-integer scaling.
pub fn voxelize_at(stream: &EventStream, cfg: &VoxelConfig, t0: u64) -> Result<VoxelGrid> {
    cfg.validate()?;
    let mut grid = VoxelGrid::zeros(*cfg, t0);
    let plane = cfg.height * cfg.width;
    for j in 0..stream.len() {
        let x = rescale_coord(stream.xs[j], stream.width as usize, cfg.width);
        let y = rescale_coord(stream.ys[j], stream.height as usize, cfg.height);
        let p = stream.ps[j] as f64;
        let t_star = normalized_time(stream.ts[j], t0, cfg.window_us, cfg.bins);
        let lo = t_star.floor() as usize;
        for b in lo..(lo + 2).min(cfg.bins) {
            let w = kernel_weight(t_star, b);
            if w > 0.0 {
                grid.data[b * plane + y * cfg.width + x] += (p * w) as f32;
            }
        }
    }
    Ok(grid)
}

/// Voxelizes a pre-sliced stream, taking the window start from its first event.
pub fn voxelize(stream: &EventStream, cfg: &VoxelConfig) -> Result<VoxelGrid> {
    let t0 = stream.ts.first().copied().unwrap_or(0);
    voxelize_at(stream, cfg, t0)
}

/// Scales a grid by its maximum absolute value so every entry lies in `[-1, 1]`.
pub fn normalize_voxel(grid: &VoxelGrid) -> VoxelGrid {
    let m = grid.max_abs();
    let mut out = grid.clone();
    if m > 0.0 {
        for v in &mut out.data {
            *v /= m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(ts: &[u64]) -> EventStream {
        let n = ts.len();
        EventStream::new(vec![0; n], vec![0; n], ts.to_vec(), vec![1; n], 4, 4).unwrap()
    }

    #[test]
    fn binary_round_trip_two_events() {
        let s = EventStream::new(vec![1, 3], vec![2, 0], vec![5, 9], vec![1, -1], 4, 4).unwrap();
        let back = EventStream::from_binary(&s.to_binary()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn empty_payload_is_valid() {
        let s = EventStream::empty(8, 6);
        let back = EventStream::from_binary(&s.to_binary()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!((back.width, back.height), (8, 6));
    }

    #[test]
    fn csv_x_equal_width_names_row_zero() {
        let err = EventStream::from_csv("x,y,t,p\n4,0,0,1\n", 4, 4).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("record 0"), "{msg}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(EventStream::from_binary(b"NOPE0000000000000000"), Err(Error::Format(_))));
        let mut bytes = stream(&[1, 2]).to_binary();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(EventStream::from_binary(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn binary_bad_polarity_rejected() {
        let mut bytes = stream(&[1]).to_binary();
        let last = bytes.len() - 1;
        bytes[last] = 0;
        assert!(matches!(EventStream::from_binary(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn slice_examples() {
        let s = stream(&[0, 10, 30]);
        assert_eq!(slice_window(&s, 0, 25).ts, vec![0, 10]);
        assert!(slice_window(&s, 100, 25).is_empty());
        let s = stream(&[10, 29, 30]);
        assert_eq!(slice_window(&s, 10, 20).ts, vec![10, 29]);
    }

    #[test]
    fn voxelize_empty_is_zero() {
        let cfg = VoxelConfig::new(3, 25_000, 4, 4).unwrap();
        let g = voxelize_at(&EventStream::empty(4, 4), &cfg, 0).unwrap();
        assert_eq!(g.data.len(), 48);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxelize_single_event_peak() {
        let cfg = VoxelConfig::new(3, DSEC_WINDOW_US, 4, 4).unwrap();
        let s = EventStream::new(vec![1], vec![2], vec![1000], vec![1], 4, 4).unwrap();
        let g = voxelize_at(&s, &cfg, 1000).unwrap();
        assert_eq!(g.get(0, 2, 1), 1.0);
        assert_eq!(g.sum(), 1.0);
    }

    #[test]
    fn voxelize_quarter_window_splits_between_bins() {
        // t* = (B-1) * (ΔT/4) / ΔT = 0.5, so bins 0 and 1 share the weight evenly.
        let cfg = VoxelConfig::new(3, 25_000, 4, 4).unwrap();
        let s = EventStream::new(vec![1], vec![2], vec![6_250], vec![-1], 4, 4).unwrap();
        let g = voxelize_at(&s, &cfg, 0).unwrap();
        assert_eq!(g.get(0, 2, 1), -0.5);
        assert_eq!(g.get(1, 2, 1), -0.5);
        assert_eq!(g.get(2, 2, 1), 0.0);
    }

    #[test]
    fn single_bin_takes_all_weight() {
        let cfg = VoxelConfig::new(1, 100, 2, 2).unwrap();
        let s = EventStream::new(vec![0, 1], vec![0, 1], vec![0, 99], vec![1, 1], 2, 2).unwrap();
        let g = voxelize_at(&s, &cfg, 0).unwrap();
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert_eq!(g.get(0, 1, 1), 1.0);
    }

    #[test]
    fn voxelize_rescales_geometry() {
        let cfg = VoxelConfig::new(1, 100, 2, 2).unwrap();
        let s = EventStream::new(vec![3], vec![0], vec![0], vec![1], 4, 4).unwrap();
        let g = voxelize_at(&s, &cfg, 0).unwrap();
        assert_eq!(g.get(0, 0, 1), 1.0);
    }

    #[test]
    fn normalize_examples() {
        let cfg = VoxelConfig::new(1, 10, 1, 2).unwrap();
        let zero = VoxelGrid::zeros(cfg, 0);
        assert_eq!(normalize_voxel(&zero), zero);
        let g = VoxelGrid {
            data: vec![2.0, -1.0],
            config: cfg,
            t0: 0,
        };
        let n = normalize_voxel(&g);
        assert_eq!(n.data, vec![1.0, -0.5]);
        assert_eq!(normalize_voxel(&n), n);
    }

    #[test]
    fn voxel_file_round_trip() {
        let cfg = VoxelConfig::new(2, 10, 2, 3).unwrap();
        let mut g = VoxelGrid::zeros(cfg, 42);
        g.data[4] = -0.25;
        assert_eq!(VoxelGrid::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn config_rejects_zero_bins() {
        assert!(VoxelConfig::new(0, 10, 1, 1).is_err());
        assert!(VoxelConfig::new(1, 0, 1, 1).is_err());
    }
}
