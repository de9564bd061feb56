//! Normalized correlation estimators over detector count streams.
//!
//! The third-order map follows
//!
//! ```text
//! g3(t12, t13) = < d1(t) * d2(t + t12) * d3(t + t13) > / (<d1> * <d2> * <d3>)
//! ```
//!
//! with the numerator averaged over the overlap window of the three shifted
//! streams (no wrap-around, no zero padding) and the denominator taken over
//! the full record. Integer products are accumulated exactly before the
//! final division, so estimates are reproducible bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::source::DetectionRecord;

const MAP_MAGIC: &[u8; 4] = b"FLG3";
const MAP_VERSION: u16 = 1;

/// Side length of the CNN input; the first 32 delay bins of each map axis.
pub const FEATURE_DIM: usize = 32;

/// Default delay range of the correlation map, in pulse periods.
pub const DEFAULT_TAU_MAX: u8 = 16;

/// A normalized third-order correlation map over the delay grid
/// `t12, t13 in [-tau_max, +tau_max]`.
///
/// Rows run over `t13` ascending, columns over `t12` ascending. `valid` is
/// false when a full-record detector mean was zero, in which case all values
/// are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    values: Array2<f64>,
    tau_max: u8,
    valid: bool,
}

impl CorrelationMap {
    pub fn from_values(values: Array2<f64>, tau_max: u8, valid: bool) -> Self {
        let dim = 2 * tau_max as usize + 1;
        assert_eq!(values.dim(), (dim, dim), "map shape must match tau_max");
        CorrelationMap {
            values,
            tau_max,
            valid,
        }
    }

    pub fn tau_max(&self) -> u8 {
        self.tau_max
    }

    pub fn valid(&self) -> bool {
        self.valid
    }

    /// Axis side length, `2 * tau_max + 1`.
    pub fn dim(&self) -> usize {
        2 * self.tau_max as usize + 1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Value at the given delays (pulse periods).
    pub fn value_at(&self, tau12: i32, tau13: i32) -> f64 {
        let t = self.tau_max as i32;
        assert!(
            tau12.abs() <= t && tau13.abs() <= t,
            "delay out of range: ({tau12}, {tau13})"
        );
        self.values[((tau13 + t) as usize, (tau12 + t) as usize)]
    }

    /// Delay values along either axis, ascending.
    pub fn tau_axis(&self) -> Vec<i32> {
        let t = self.tau_max as i32;
        (-t..=t).collect()
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(MAP_MAGIC).map_err(io_err)?;
        w.write_u16::<LittleEndian>(MAP_VERSION).map_err(io_err)?;
        w.write_u8(self.tau_max).map_err(io_err)?;
        w.write_u8(self.valid as u8).map_err(io_err)?;
        for row in self.values.rows() {
            for &v in row {
                w.write_f64::<LittleEndian>(v).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn read_binary(path: &Path) -> Result<CorrelationMap> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAP_MAGIC {
            return Err(Error::format(path, "not a correlation map file"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(io_err)?;
        if version != MAP_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported map version {version}"),
            ));
        }
        let tau_max = r.read_u8().map_err(io_err)?;
        let valid = r.read_u8().map_err(io_err)? != 0;
        let dim = 2 * tau_max as usize + 1;
        let mut values = Array2::<f64>::zeros((dim, dim));
        for row in 0..dim {
            for col in 0..dim {
                values[(row, col)] = r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(CorrelationMap {
            values,
            tau_max,
            valid,
        })
    }

    /// Delimited grid with delay headers on both axes, for plotting.
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        write!(w, "tau13\\tau12").map_err(io_err)?;
        for tau in self.tau_axis() {
            write!(w, "\t{tau}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
        let t = self.tau_max as i32;
        for tau13 in -t..=t {
            write!(w, "{tau13}").map_err(io_err)?;
            for tau12 in -t..=t {
                write!(w, "\t{:.6}", self.value_at(tau12, tau13)).map_err(io_err)?;
            }
            writeln!(w).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// A 32x32 feature matrix in [0, 1]; the CNN input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f32>);

impl FeatureMatrix {
    pub fn new(values: Array2<f32>) -> Self {
        assert_eq!(
            values.dim(),
            (FEATURE_DIM, FEATURE_DIM),
            "feature matrix must be {FEATURE_DIM}x{FEATURE_DIM}"
        );
        FeatureMatrix(values)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }
}

fn check_record(record: &DetectionRecord, tau_max: u8) -> Result<()> {
    let min_len = 2 * tau_max as usize + 1;
    if record.len() < min_len {
        return Err(Error::InvalidArgument(format!(
            "record has {} pulses but tau_max {} needs at least {}",
            record.len(),
            tau_max,
            min_len
        )));
    }
    Ok(())
}

fn stream_sum(stream: &[u16]) -> u64 {
    stream.iter().map(|&c| c as u64).sum()
}

/// Product of full-record detector means, evaluated from exact integer sums
/// so the result does not depend on detector order.
fn mean_product(sums: &[u64], len: usize) -> f64 {
    let product = sums.iter().fold(1u128, |acc, &s| acc * s as u128);
    product as f64 / (len as f64).powi(sums.len() as i32)
}

/// Overlap window `[lo, hi]` of streams shifted by the given delays.
fn overlap(len: usize, shifts: &[i64]) -> (usize, usize) {
    let fwd = shifts.iter().copied().max().unwrap().max(0);
    let bwd = (-shifts.iter().copied().min().unwrap()).max(0);
    (bwd as usize, len - 1 - fwd as usize)
}

/// Computes the normalized third-order correlation map of a record.
pub fn g3_map(record: &DetectionRecord, tau_max: u8) -> Result<CorrelationMap> {
    check_record(record, tau_max)?;
    let len = record.len();
    let dim = 2 * tau_max as usize + 1;
    let t = tau_max as i64;

    let sums = [
        stream_sum(&record.d1),
        stream_sum(&record.d2),
        stream_sum(&record.d3),
    ];
    let denom = mean_product(&sums, len);
    if denom == 0.0 {
        return Ok(CorrelationMap {
            values: Array2::zeros((dim, dim)),
            tau_max,
            valid: false,
        });
    }

    let mut values = Array2::<f64>::zeros((dim, dim));
    for tau13 in -t..=t {
        for tau12 in -t..=t {
            let (lo, hi) = overlap(len, &[tau12, tau13]);
            let w = hi - lo + 1;
            let a = &record.d1[lo..=hi];
            let b = &record.d2[(lo as i64 + tau12) as usize..][..w];
            let c = &record.d3[(lo as i64 + tau13) as usize..][..w];
            let mut sum: u64 = 0;
            for i in 0..w {
                sum += (a[i] as u32 * b[i] as u32) as u64 * c[i] as u64;
            }
            let numerator = sum as f64 / w as f64;
            values[((tau13 + t) as usize, (tau12 + t) as usize)] = numerator / denom;
        }
    }
    Ok(CorrelationMap {
        values,
        tau_max,
        valid: true,
    })
}

/// Pairwise second-order trace between detectors `i` and `j` (0-based),
/// indexed by the delay `tau in [-tau_max, +tau_max]`.
///
/// Returns all zeros when a full-record detector mean is zero.
pub fn g2_trace(
    record: &DetectionRecord,
    i: usize,
    j: usize,
    tau_max: u8,
) -> Result<Vec<f64>> {
    if i > 2 || j > 2 {
        return Err(Error::InvalidArgument(format!(
            "detector indices must be 0, 1 or 2, got ({i}, {j})"
        )));
    }
    if i == j {
        return Err(Error::InvalidArgument(
            "second-order trace needs two distinct detectors".into(),
        ));
    }
    check_record(record, tau_max)?;

    let len = record.len();
    let di = record.detector(i);
    let dj = record.detector(j);
    let denom = mean_product(&[stream_sum(di), stream_sum(dj)], len);
    let t = tau_max as i64;
    if denom == 0.0 {
        return Ok(vec![0.0; 2 * tau_max as usize + 1]);
    }

    let mut out = Vec::with_capacity(2 * tau_max as usize + 1);
    for tau in -t..=t {
        let (lo, hi) = overlap(len, &[tau]);
        let w = hi - lo + 1;
        let a = &di[lo..=hi];
        let b = &dj[(lo as i64 + tau) as usize..][..w];
        let mut sum: u64 = 0;
        for k in 0..w {
            sum += (a[k] as u32 * b[k] as u32) as u64;
        }
        out.push((sum as f64 / w as f64) / denom);
    }
    Ok(out)
}

/// The two scalar observables read off a map: the triple-coincidence value
/// at zero delay and the mean over every pixel where exactly one of the
/// three delays (`t12`, `t13`, `t23 = t13 - t12`) vanishes, which estimates
/// the second-order zero-delay correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoints {
    pub g3_zero: f64,
    pub g2_zero_est: f64,
}

pub fn critical_points(map: &CorrelationMap) -> Result<CriticalPoints> {
    if !map.valid() {
        return Err(Error::InvalidInput(
            "correlation map is degenerate (zero detector mean)".into(),
        ));
    }
    let t = map.tau_max() as i32;
    let mut sum = 0.0;
    let mut count = 0usize;
    for tau13 in -t..=t {
        for tau12 in -t..=t {
            let zeros = [tau12 == 0, tau13 == 0, tau13 - tau12 == 0]
                .iter()
                .filter(|&&z| z)
                .count();
            if zeros == 1 {
                sum += map.value_at(tau12, tau13);
                count += 1;
            }
        }
    }
    Ok(CriticalPoints {
        g3_zero: map.value_at(0, 0),
        g2_zero_est: sum / count as f64,
    })
}

/// The three single-variable sections of a map, each indexed by `t12`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSections {
    /// Along `t13 = -t12` (main diagonal).
    pub main_diagonal: Vec<f64>,
    /// Along `t13 = 0`.
    pub horizontal: Vec<f64>,
    /// Along `t13 = +t12` (anti-diagonal).
    pub anti_diagonal: Vec<f64>,
}

pub fn cross_sections(map: &CorrelationMap) -> CrossSections {
    let t = map.tau_max() as i32;
    let mut main_diagonal = Vec::with_capacity(map.dim());
    let mut horizontal = Vec::with_capacity(map.dim());
    let mut anti_diagonal = Vec::with_capacity(map.dim());
    for tau12 in -t..=t {
        main_diagonal.push(map.value_at(tau12, -tau12));
        horizontal.push(map.value_at(tau12, 0));
        anti_diagonal.push(map.value_at(tau12, tau12));
    }
    CrossSections {
        main_diagonal,
        horizontal,
        anti_diagonal,
    }
}

/// Truncates a 33x33 map to its first 32 delay bins per axis and rescales by
/// the matrix maximum so every entry lands in [0, 1]. A degenerate all-zero
/// map stays all zero.
pub fn preprocess(map: &CorrelationMap) -> Result<FeatureMatrix> {
    if map.dim() != FEATURE_DIM + 1 {
        return Err(Error::InvalidArgument(format!(
            "preprocess expects a {0}x{0} map, got {1}x{1}",
            FEATURE_DIM + 1,
            map.dim()
        )));
    }
    let truncated = map
        .values()
        .slice(ndarray::s![..FEATURE_DIM, ..FEATURE_DIM]);
    let max = truncated.iter().cloned().fold(0.0_f64, f64::max);
    let out = if max > 0.0 {
        truncated.map(|&v| (v / max) as f32)
    } else {
        Array2::<f32>::zeros((FEATURE_DIM, FEATURE_DIM))
    };
    Ok(FeatureMatrix::new(out))
}
