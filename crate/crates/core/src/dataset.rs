//! Labeled corpus generation over the (Fock level, quantum-light
//! probability, detection events) parameter grid.
//!
//! Every measurement gets a seed derived from the global seed and its own
//! case coordinates, so generation is order-independent: any subset of the
//! grid regenerates byte-identically to the same cases from a full run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::correlator::{g3_map, preprocess, FeatureMatrix, DEFAULT_TAU_MAX, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::source::{bump_seed, derive_case_seed, simulate, SourceSpec};
use crate::PhotonClass;

const DATASET_MAGIC: &[u8; 4] = b"FLDS";
const DATASET_VERSION: u16 = 1;

/// Bound on map regeneration attempts for a single measurement. Degenerate
/// maps need a detector with zero total counts, so hitting this is a bug.
const MAX_RESAMPLE_ATTEMPTS: u32 = 64;

/// One cell of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Case {
    pub fock_n: u8,
    /// Quantum-light probability in milli-units (0..=1000).
    pub qlp_milli: u16,
    pub num_events: u32,
}

impl Case {
    pub fn qlp(&self) -> f64 {
        self.qlp_milli as f64 / 1000.0
    }

    pub fn source_spec(&self) -> Result<SourceSpec> {
        SourceSpec::new(self.fock_n, self.qlp())
    }

    pub fn label(&self) -> PhotonClass {
        label_for(self.fock_n, self.qlp())
    }
}

/// The 21 quantum-light probabilities of the full grid, in milli-units.
pub fn paper_qlp_millis() -> Vec<u16> {
    (0..=20).map(|i| i * 50).collect()
}

/// The 190 detection-event counts of the full grid: 100..10,000 in steps of
/// 100, then 11,000..100,000 in steps of 1,000.
pub fn paper_event_counts() -> Vec<u32> {
    let mut v: Vec<u32> = (1..=100).map(|i| i * 100).collect();
    v.extend((11..=100).map(|i| i * 1000));
    v
}

fn grid_from(fock: &[u8], qlp_millis: &[u16], events: &[u32]) -> Vec<Case> {
    let mut out = Vec::with_capacity(fock.len() * qlp_millis.len() * events.len());
    for &fock_n in fock {
        for &qlp_milli in qlp_millis {
            for &num_events in events {
                out.push(Case {
                    fock_n,
                    qlp_milli,
                    num_events,
                });
            }
        }
    }
    out
}

/// The full simulation grid: 3 Fock levels x 21 probabilities x 190 event
/// counts = 11,970 cases, ordered by Fock level, then probability, then
/// events.
pub fn parameter_grid() -> Vec<Case> {
    grid_from(&[1, 2, 3], &paper_qlp_millis(), &paper_event_counts())
}

/// Reduced grid for desk-scale runs: probabilities {0, 0.25, 0.75, 1.0}
/// (the decision boundary region excluded) and events 1,000..10,000 in
/// steps of 1,000.
pub fn desk_grid() -> Vec<Case> {
    let events: Vec<u32> = (1..=10).map(|i| i * 1000).collect();
    grid_from(&[1, 2, 3], &[0, 250, 750, 1000], &events)
}

/// Desk grid extended downward with events 100..1,000 in steps of 100, for
/// sparse-data accuracy trends.
pub fn desk_extended_grid() -> Vec<Case> {
    let mut events: Vec<u32> = (1..=10).map(|i| i * 100).collect();
    events.extend((2..=10).map(|i| i * 1000));
    grid_from(&[1, 2, 3], &[0, 250, 750, 1000], &events)
}

/// Reads a custom grid: one `fock_n qlp num_events` triple per line, `#`
/// comments and blank lines ignored.
pub fn read_grid_file(path: &Path) -> Result<Vec<Case>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cases = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse_err =
            |what: &str| Error::format(path, format!("line {}: bad {what}", lineno + 1));
        let fock_n: u8 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("fock level"))?;
        let qlp: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("qlp"))?;
        let num_events: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("event count"))?;
        SourceSpec::new(fock_n, qlp)?;
        if num_events == 0 {
            return Err(parse_err("event count"));
        }
        cases.push(Case {
            fock_n,
            qlp_milli: (qlp * 1000.0).round() as u16,
            num_events,
        });
    }
    if cases.is_empty() {
        return Err(Error::format(path, "grid file contains no cases"));
    }
    Ok(cases)
}

/// Class label of a grid cell: sources with a quantum-light probability of
/// at least 0.5 count as their Fock state, everything below as coherent.
pub fn label_for(fock_n: u8, qlp: f64) -> PhotonClass {
    assert!((1..=3).contains(&fock_n), "fock level must be 1..=3");
    assert!((0.0..=1.0).contains(&qlp), "qlp must lie in [0, 1]");
    if qlp >= 0.5 {
        PhotonClass::fock(fock_n).expect("level checked above")
    } else {
        PhotonClass::Coherent
    }
}

/// One preprocessed measurement: a 32x32 feature matrix plus its label and
/// provenance (grid cell, measurement index, RNG seed actually used).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureMatrix,
    pub label: PhotonClass,
    pub case: Case,
    pub measurement_index: u32,
    pub seed: u64,
}

/// Counters reported by generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenStats {
    pub samples: u64,
    /// Measurements whose first map was degenerate and had to be redrawn
    /// with a bumped seed.
    pub resampled: u64,
}

fn generate_measurement(case: &Case, measurement_index: u32, global_seed: u64) -> Result<(Sample, u64)> {
    let spec = case.source_spec()?;
    let base_seed = derive_case_seed(
        global_seed,
        case.fock_n,
        case.qlp_milli,
        case.num_events,
        measurement_index,
    );
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let seed = bump_seed(base_seed, attempt);
        let record = simulate(&spec, case.num_events as usize, seed)?;
        let map = g3_map(&record, DEFAULT_TAU_MAX)?;
        if !map.valid() {
            continue;
        }
        let features = preprocess(&map)?;
        let sample = Sample {
            features,
            label: case.label(),
            case: *case,
            measurement_index,
            seed,
        };
        return Ok((sample, attempt as u64));
    }
    Err(Error::InvalidInput(format!(
        "case (n={}, qlp={}, events={}) produced {} degenerate maps in a row",
        case.fock_n,
        case.qlp(),
        case.num_events,
        MAX_RESAMPLE_ATTEMPTS
    )))
}

fn generate_case(case: &Case, measurements_per_case: u32, global_seed: u64) -> Result<(Vec<Sample>, u64)> {
    let mut samples = Vec::with_capacity(measurements_per_case as usize);
    let mut resampled = 0;
    for mi in 0..measurements_per_case {
        let (sample, bumps) = generate_measurement(case, mi, global_seed)?;
        resampled += bumps;
        samples.push(sample);
    }
    Ok((samples, resampled))
}

/// Generates the full corpus for a grid in memory, parallel over cases.
pub fn generate(
    grid: &[Case],
    measurements_per_case: u32,
    global_seed: u64,
) -> Result<(Vec<Sample>, GenStats)> {
    if measurements_per_case == 0 {
        return Err(Error::InvalidArgument(
            "measurements per case must be >= 1".into(),
        ));
    }
    let per_case: Vec<(Vec<Sample>, u64)> = grid
        .par_iter()
        .map(|case| generate_case(case, measurements_per_case, global_seed))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(grid.len() * measurements_per_case as usize);
    let mut stats = GenStats::default();
    for (case_samples, resampled) in per_case {
        stats.samples += case_samples.len() as u64;
        stats.resampled += resampled;
        samples.extend(case_samples);
    }
    Ok((samples, stats))
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn write_sample<W: Write>(w: &mut W, sample: &Sample) -> std::io::Result<()> {
    w.write_u8(sample.label.index() as u8)?;
    w.write_u8(sample.case.fock_n)?;
    w.write_u16::<LittleEndian>(sample.case.qlp_milli)?;
    w.write_u32::<LittleEndian>(sample.case.num_events)?;
    w.write_u32::<LittleEndian>(sample.measurement_index)?;
    w.write_u64::<LittleEndian>(sample.seed)?;
    for &v in sample.features.values() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Writes samples to a dataset file and returns the file's SHA-256 hex digest.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<String> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    let io_err = |e| Error::io(path, e);
    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_u16::<LittleEndian>(DATASET_VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(samples.len() as u64).map_err(io_err)?;
    w.write_u16::<LittleEndian>(FEATURE_DIM as u16).map_err(io_err)?;
    for sample in samples {
        write_sample(&mut w, sample).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(hex(&w.hasher.finalize()))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(path, "not a dataset file"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(io_err)?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported dataset version {version}"),
        ));
    }
    let count = r.read_u64::<LittleEndian>().map_err(io_err)?;
    let dim = r.read_u16::<LittleEndian>().map_err(io_err)? as usize;
    if dim != FEATURE_DIM {
        return Err(Error::format(path, format!("unsupported matrix dim {dim}")));
    }

    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let label_idx = r.read_u8().map_err(|e| Error::io(path, e))?;
        let label = PhotonClass::from_index(label_idx as usize)
            .ok_or_else(|| Error::format(path, format!("bad class label {label_idx}")))?;
        let fock_n = r.read_u8().map_err(|e| Error::io(path, e))?;
        let qlp_milli = r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let num_events = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let measurement_index = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let seed = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let mut values = Array2::<f32>::zeros((FEATURE_DIM, FEATURE_DIM));
        for row in 0..FEATURE_DIM {
            for col in 0..FEATURE_DIM {
                values[(row, col)] = r.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            }
        }
        samples.push(Sample {
            features: FeatureMatrix::new(values),
            label,
            case: Case {
                fock_n,
                qlp_milli,
                num_events,
            },
            measurement_index,
            seed,
        });
    }
    Ok(samples)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Split bookkeeping carried by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitInfo {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub counts: [u64; 3],
}

/// Reproducibility sidecar for a generated dataset: the inputs that produced
/// it, its size, and checksums of every emitted file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub global_seed: u64,
    pub measurements_per_case: u32,
    pub case_count: u64,
    pub sample_count: u64,
    pub resampled: u64,
    pub checksums: BTreeMap<String, String>,
    pub split: Option<SplitInfo>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        writeln!(w, "global_seed = {}", self.global_seed).map_err(io_err)?;
        writeln!(w, "measurements_per_case = {}", self.measurements_per_case).map_err(io_err)?;
        writeln!(w, "case_count = {}", self.case_count).map_err(io_err)?;
        writeln!(w, "sample_count = {}", self.sample_count).map_err(io_err)?;
        writeln!(w, "resampled = {}", self.resampled).map_err(io_err)?;
        if let Some(split) = &self.split {
            writeln!(w, "split.seed = {}", split.seed).map_err(io_err)?;
            writeln!(
                w,
                "split.fractions = {},{},{}",
                split.fractions[0], split.fractions[1], split.fractions[2]
            )
            .map_err(io_err)?;
            writeln!(w, "split.train_count = {}", split.counts[0]).map_err(io_err)?;
            writeln!(w, "split.validation_count = {}", split.counts[1]).map_err(io_err)?;
            writeln!(w, "split.test_count = {}", split.counts[2]).map_err(io_err)?;
        }
        for (name, digest) in &self.checksums {
            writeln!(w, "sha256.{name} = {digest}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = DatasetManifest::default();
        let mut split_seed = None;
        let mut split_fractions = None;
        let mut split_counts = [0u64; 3];
        let mut has_split_counts = false;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::format(path, format!("bad manifest value for {key}"));
            match key {
                "global_seed" => manifest.global_seed = value.parse().map_err(|_| bad())?,
                "measurements_per_case" => {
                    manifest.measurements_per_case = value.parse().map_err(|_| bad())?
                }
                "case_count" => manifest.case_count = value.parse().map_err(|_| bad())?,
                "sample_count" => manifest.sample_count = value.parse().map_err(|_| bad())?,
                "resampled" => manifest.resampled = value.parse().map_err(|_| bad())?,
                "split.seed" => split_seed = Some(value.parse().map_err(|_| bad())?),
                "split.fractions" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    split_fractions = Some([parts[0], parts[1], parts[2]]);
                }
                "split.train_count" => {
                    split_counts[0] = value.parse().map_err(|_| bad())?;
                    has_split_counts = true;
                }
                "split.validation_count" => {
                    split_counts[1] = value.parse().map_err(|_| bad())?;
                    has_split_counts = true;
                }
                "split.test_count" => {
                    split_counts[2] = value.parse().map_err(|_| bad())?;
                    has_split_counts = true;
                }
                _ if key.starts_with("sha256.") => {
                    manifest
                        .checksums
                        .insert(key["sha256.".len()..].to_string(), value.to_string());
                }
                _ => {}
            }
        }
        if let (Some(seed), Some(fractions)) = (split_seed, split_fractions) {
            if has_split_counts {
                manifest.split = Some(SplitInfo {
                    seed,
                    fractions,
                    counts: split_counts,
                });
            }
        }
        Ok(manifest)
    }
}

/// Generates a grid's corpus straight to disk (chunked, parallel within each
/// chunk) and writes a manifest next to it.
pub fn generate_to_file(
    grid: &[Case],
    measurements_per_case: u32,
    global_seed: u64,
    dataset_path: &Path,
    manifest_path: &Path,
) -> Result<DatasetManifest> {
    if measurements_per_case == 0 {
        return Err(Error::InvalidArgument(
            "measurements per case must be >= 1".into(),
        ));
    }
    let file = File::create(dataset_path).map_err(|e| Error::io(dataset_path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    let io_err = |e| Error::io(dataset_path, e);
    let total = grid.len() as u64 * measurements_per_case as u64;
    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_u16::<LittleEndian>(DATASET_VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(total).map_err(io_err)?;
    w.write_u16::<LittleEndian>(FEATURE_DIM as u16).map_err(io_err)?;

    let mut stats = GenStats::default();
    // Chunking bounds peak memory on the full 11,970-case grid.
    for chunk in grid.chunks(256) {
        let per_case: Vec<(Vec<Sample>, u64)> = chunk
            .par_iter()
            .map(|case| generate_case(case, measurements_per_case, global_seed))
            .collect::<Result<_>>()?;
        for (samples, resampled) in per_case {
            stats.resampled += resampled;
            stats.samples += samples.len() as u64;
            for sample in &samples {
                write_sample(&mut w, sample).map_err(|e| Error::io(dataset_path, e))?;
            }
        }
    }
    w.flush().map_err(io_err)?;
    let digest = hex(&w.hasher.finalize());

    let file_name = dataset_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut checksums = BTreeMap::new();
    checksums.insert(file_name, digest);
    let manifest = DatasetManifest {
        global_seed,
        measurements_per_case,
        case_count: grid.len() as u64,
        sample_count: stats.samples,
        resampled: stats.resampled,
        checksums,
        split: None,
    };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

/// Stratified split into train/validation/test.
///
/// Samples are grouped by grid cell and each group is shuffled and dealt
/// with its own seed derived from `seed` and the cell coordinates, so
/// every cell covers all splits and splitting a subset of a dataset agrees
/// with splitting the full set.
pub fn split(
    samples: &[Sample],
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<Sample>; 3]> {
    if samples.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples; need at least 10 to split",
            samples.len()
        )));
    }
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "split fractions must be non-negative and sum to 1".into(),
        ));
    }

    let mut groups: BTreeMap<Case, Vec<usize>> = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        groups.entry(sample.case).or_default().push(i);
    }

    let mut out: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (case, mut indices) in groups {
        let group_seed = derive_case_seed(
            seed,
            case.fock_n,
            case.qlp_milli,
            case.num_events,
            u32::MAX,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
        indices.shuffle(&mut rng);
        let g = indices.len();
        let n_train = ((fractions[0] * g as f64).round() as usize).min(g);
        let n_val = ((fractions[1] * g as f64).round() as usize).min(g - n_train);
        for (slot, &idx) in indices.iter().enumerate() {
            let bucket = if slot < n_train {
                0
            } else if slot < n_train + n_val {
                1
            } else {
                2
            };
            out[bucket].push(samples[idx].clone());
        }
    }
    Ok(out)
}
