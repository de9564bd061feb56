//! Evaluation surfaces for a trained classifier: per-class accuracy, the
//! confusion matrix, accuracy as a function of quantum-light probability and
//! of detection events, and per-Fock accuracy heatmaps over the grid.
//!
//! Groups with no test samples are reported as absent, never as zero.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::cnn::ModelParams;
use crate::correlator::{critical_points, g3_map, DEFAULT_TAU_MAX};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::render;
use crate::source::simulate;
use crate::theory::baseline_classify;
use crate::PhotonClass;

/// Correct/total counter for one evaluation cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupStat {
    pub correct: u64,
    pub total: u64,
}

impl GroupStat {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.correct as f64 / self.total as f64)
        }
    }
}

/// Anything that maps a sample to a photon class.
pub trait SampleClassifier: Sync {
    fn classify(&self, sample: &Sample) -> PhotonClass;
}

impl<F: Fn(&Sample) -> PhotonClass + Sync> SampleClassifier for F {
    fn classify(&self, sample: &Sample) -> PhotonClass {
        self(sample)
    }
}

/// Classifies via the network on the sample's stored features.
pub struct CnnClassifier<'a>(pub &'a ModelParams);

impl SampleClassifier for CnnClassifier<'_> {
    fn classify(&self, sample: &Sample) -> PhotonClass {
        self.0.forward(&sample.features, false).argmax()
    }
}

/// Analytic threshold baseline: regenerates the sample's detector record
/// from its stored seed, reads the two critical values off the correlation
/// map, and inverts the closed-form model.
pub struct BaselineClassifier;

impl SampleClassifier for BaselineClassifier {
    fn classify(&self, sample: &Sample) -> PhotonClass {
        let spec = sample
            .case
            .source_spec()
            .expect("sample cases are validated at generation");
        let record = simulate(&spec, sample.case.num_events as usize, sample.seed)
            .expect("simulation parameters are valid");
        let map = g3_map(&record, DEFAULT_TAU_MAX).expect("record length fits tau range");
        match critical_points(&map) {
            Ok(cp) => baseline_classify(cp.g2_zero_est, cp.g3_zero).photon_class,
            Err(_) => PhotonClass::Coherent,
        }
    }
}

/// All evaluation surfaces over a test set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub overall: GroupStat,
    pub per_class: [GroupStat; 4],
    /// Raw confusion counts, rows = true class, columns = predicted.
    pub confusion: [[u64; 4]; 4],
    /// Sample-weighted accuracy per quantum-light probability (milli-units).
    pub by_qlp: BTreeMap<u16, GroupStat>,
    /// Sample-weighted accuracy per detection-event count.
    pub by_events: BTreeMap<u32, GroupStat>,
    /// Per-Fock-grid accuracy over (qlp milli-units, events).
    pub heatmaps: [BTreeMap<(u16, u32), GroupStat>; 3],
}

impl Metrics {
    /// Row-normalized confusion matrix; rows without samples are `None`.
    pub fn confusion_normalized(&self) -> [[Option<f64>; 4]; 4] {
        let mut out = [[None; 4]; 4];
        for (r, row) in self.confusion.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (c, &count) in row.iter().enumerate() {
                    out[r][c] = Some(count as f64 / total as f64);
                }
            }
        }
        out
    }

    /// Unweighted mean of the populated per-class accuracies.
    pub fn macro_accuracy(&self) -> Option<f64> {
        let accs: Vec<f64> = self.per_class.iter().filter_map(|s| s.accuracy()).collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    }
}

/// Runs a classifier over the test set and aggregates every surface.
pub fn evaluate(classifier: &dyn SampleClassifier, test_set: &[Sample]) -> Result<Metrics> {
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let predictions: Vec<PhotonClass> = test_set
        .par_iter()
        .map(|sample| classifier.classify(sample))
        .collect();

    let mut metrics = Metrics::default();
    for (sample, &predicted) in test_set.iter().zip(&predictions) {
        let correct = predicted == sample.label;
        metrics.overall.add(correct);
        metrics.per_class[sample.label.index()].add(correct);
        metrics.confusion[sample.label.index()][predicted.index()] += 1;
        metrics
            .by_qlp
            .entry(sample.case.qlp_milli)
            .or_default()
            .add(correct);
        metrics
            .by_events
            .entry(sample.case.num_events)
            .or_default()
            .add(correct);
        metrics.heatmaps[(sample.case.fock_n - 1) as usize]
            .entry((sample.case.qlp_milli, sample.case.num_events))
            .or_default()
            .add(correct);
    }
    Ok(metrics)
}

/// Smallest grid event count whose sample-weighted accuracy reaches the
/// target; `None` when no populated cell does.
pub fn threshold_events(metrics: &Metrics, target: f64) -> Option<u32> {
    metrics
        .by_events
        .iter()
        .find(|(_, stat)| stat.accuracy().is_some_and(|a| a >= target))
        .map(|(&events, _)| events)
}

fn write_tsv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "{header}").map_err(io_err)?;
    for row in rows {
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn fmt_acc(stat: &GroupStat) -> String {
    match stat.accuracy() {
        Some(a) => format!("{a:.6}"),
        None => "NA".into(),
    }
}

/// Writes every metric surface as delimited text plus a raster render.
///
/// Layout under `out_dir`: `per_class.tsv`, `by_qlp.tsv`, `by_events.tsv`,
/// `confusion.tsv`, `heatmap_fock{1,2,3}.tsv` and a `.png` next to each.
/// Output is byte-deterministic for identical metrics.
pub fn export_report(metrics: &Metrics, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    write_tsv(
        &out_dir.join("per_class.tsv"),
        "class\taccuracy\tcorrect\ttotal",
        PhotonClass::ALL.iter().map(|class| {
            let stat = &metrics.per_class[class.index()];
            format!("{class}\t{}\t{}\t{}", fmt_acc(stat), stat.correct, stat.total)
        }),
    )?;
    render::bar_chart(
        &out_dir.join("per_class.png"),
        &PhotonClass::ALL.map(|c| c.code().to_string()),
        &metrics.per_class.map(|s| s.accuracy()),
        "ACCURACY BY CLASS",
    )?;

    write_tsv(
        &out_dir.join("by_qlp.tsv"),
        "qlp\taccuracy\tcorrect\ttotal",
        metrics.by_qlp.iter().map(|(qlp_milli, stat)| {
            format!(
                "{:.3}\t{}\t{}\t{}",
                *qlp_milli as f64 / 1000.0,
                fmt_acc(stat),
                stat.correct,
                stat.total
            )
        }),
    )?;
    render::curve(
        &out_dir.join("by_qlp.png"),
        &metrics
            .by_qlp
            .iter()
            .map(|(q, s)| (format!("{:.2}", *q as f64 / 1000.0), s.accuracy()))
            .collect::<Vec<_>>(),
        "ACCURACY VS QLP",
    )?;

    write_tsv(
        &out_dir.join("by_events.tsv"),
        "events\taccuracy\tcorrect\ttotal",
        metrics.by_events.iter().map(|(events, stat)| {
            format!("{events}\t{}\t{}\t{}", fmt_acc(stat), stat.correct, stat.total)
        }),
    )?;
    render::curve(
        &out_dir.join("by_events.png"),
        &metrics
            .by_events
            .iter()
            .map(|(e, s)| (e.to_string(), s.accuracy()))
            .collect::<Vec<_>>(),
        "ACCURACY VS EVENTS",
    )?;

    let normalized = metrics.confusion_normalized();
    write_tsv(
        &out_dir.join("confusion.tsv"),
        "true\\pred\tCOH\tF1\tF2\tF3",
        PhotonClass::ALL.iter().map(|class| {
            let row = &normalized[class.index()];
            let cells: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Some(x) => format!("{x:.6}"),
                    None => "NA".into(),
                })
                .collect();
            format!("{class}\t{}", cells.join("\t"))
        }),
    )?;
    render::confusion_grid(
        &out_dir.join("confusion.png"),
        &normalized,
        &PhotonClass::ALL.map(|c| c.code().to_string()),
    )?;

    for fock in 1..=3u8 {
        let grid = &metrics.heatmaps[(fock - 1) as usize];
        let qlps: Vec<u16> = grid
            .keys()
            .map(|&(q, _)| q)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let events: Vec<u32> = grid
            .keys()
            .map(|&(_, e)| e)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let header = std::iter::once("qlp\\events".to_string())
            .chain(events.iter().map(|e| e.to_string()))
            .collect::<Vec<_>>()
            .join("\t");
        write_tsv(
            &out_dir.join(format!("heatmap_fock{fock}.tsv")),
            &header,
            qlps.iter().map(|&q| {
                let cells: Vec<String> = events
                    .iter()
                    .map(|&e| match grid.get(&(q, e)) {
                        Some(stat) => fmt_acc(stat),
                        None => "NA".into(),
                    })
                    .collect();
                format!("{:.3}\t{}", q as f64 / 1000.0, cells.join("\t"))
            }),
        )?;

        let mut cells = Vec::with_capacity(qlps.len() * events.len());
        for &q in &qlps {
            for &e in &events {
                cells.push(grid.get(&(q, e)).and_then(|s| s.accuracy()));
            }
        }
        render::heatmap(
            &out_dir.join(format!("heatmap_fock{fock}.png")),
            &cells,
            qlps.len(),
            events.len(),
            &format!("ACCURACY F{fock}"),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Case};

    fn small_set() -> Vec<Sample> {
        let grid = vec![
            Case {
                fock_n: 1,
                qlp_milli: 0,
                num_events: 200,
            },
            Case {
                fock_n: 2,
                qlp_milli: 1000,
                num_events: 200,
            },
            Case {
                fock_n: 3,
                qlp_milli: 750,
                num_events: 300,
            },
        ];
        generate(&grid, 5, 77).unwrap().0
    }

    #[test]
    fn perfect_predictor_gives_identity_confusion() {
        let samples = small_set();
        let metrics = evaluate(&|s: &Sample| s.label, &samples).unwrap();
        assert_eq!(metrics.overall.accuracy(), Some(1.0));
        let normalized = metrics.confusion_normalized();
        for class in [PhotonClass::Coherent, PhotonClass::Fock2, PhotonClass::Fock3] {
            assert_eq!(normalized[class.index()][class.index()], Some(1.0));
        }
        // No Fock-1 samples in this set: its row is absent, not zero.
        assert!(normalized[PhotonClass::Fock1.index()]
            .iter()
            .all(|v| v.is_none()));
    }

    #[test]
    fn constant_predictor_accuracy_profile() {
        let samples = small_set();
        let metrics = evaluate(&|_: &Sample| PhotonClass::Coherent, &samples).unwrap();
        assert_eq!(metrics.per_class[0].accuracy(), Some(1.0));
        assert_eq!(metrics.per_class[2].accuracy(), Some(0.0));
        assert_eq!(metrics.per_class[3].accuracy(), Some(0.0));
        assert_eq!(metrics.per_class[1].accuracy(), None);
    }

    #[test]
    fn overall_equals_weighted_per_class_mean() {
        let samples = small_set();
        // A deliberately imperfect rule exercises mixed counts.
        let metrics = evaluate(
            &|s: &Sample| {
                if s.case.fock_n == 2 {
                    PhotonClass::Fock3
                } else {
                    s.label
                }
            },
            &samples,
        )
        .unwrap();
        let weighted: u64 = metrics.per_class.iter().map(|s| s.correct).sum();
        let total: u64 = metrics.per_class.iter().map(|s| s.total).sum();
        assert_eq!(metrics.overall.correct, weighted);
        assert_eq!(metrics.overall.total, total);

        // Every sample lands in exactly one confusion cell.
        let confusion_total: u64 = metrics.confusion.iter().flatten().sum();
        assert_eq!(confusion_total, samples.len() as u64);
    }

    #[test]
    fn heatmap_cells_match_direct_recount() {
        let samples = small_set();
        let metrics = evaluate(&|s: &Sample| s.label, &samples).unwrap();
        for (fock_idx, grid) in metrics.heatmaps.iter().enumerate() {
            for (&(q, e), stat) in grid {
                let direct = samples
                    .iter()
                    .filter(|s| {
                        s.case.fock_n as usize == fock_idx + 1
                            && s.case.qlp_milli == q
                            && s.case.num_events == e
                    })
                    .count() as u64;
                assert_eq!(stat.total, direct);
            }
        }
    }

    #[test]
    fn threshold_scans_event_axis() {
        let mut metrics = Metrics::default();
        for (events, correct, total) in [(100u32, 50u64, 100u64), (800, 92, 100), (1000, 95, 100)]
        {
            metrics
                .by_events
                .insert(events, GroupStat { correct, total });
        }
        assert_eq!(threshold_events(&metrics, 0.90), Some(800));
        assert_eq!(threshold_events(&metrics, 0.99), None);
        assert_eq!(threshold_events(&metrics, 0.10), Some(100));
    }

    #[test]
    fn baseline_on_clean_extremes_is_exact() {
        let grid = vec![
            Case {
                fock_n: 2,
                qlp_milli: 1000,
                num_events: 5000,
            },
            Case {
                fock_n: 1,
                qlp_milli: 0,
                num_events: 5000,
            },
        ];
        let (samples, _) = generate(&grid, 3, 5).unwrap();
        let metrics = evaluate(&BaselineClassifier, &samples).unwrap();
        assert_eq!(metrics.overall.accuracy(), Some(1.0));
    }

    #[test]
    fn export_is_deterministic() {
        let samples = small_set();
        let metrics = evaluate(&|s: &Sample| s.label, &samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        export_report(&metrics, &out_a).unwrap();
        export_report(&metrics, &out_b).unwrap();
        for name in [
            "per_class.tsv",
            "by_qlp.tsv",
            "by_events.tsv",
            "confusion.tsv",
            "heatmap_fock1.tsv",
            "per_class.png",
            "by_qlp.png",
            "by_events.png",
            "confusion.png",
            "heatmap_fock2.png",
        ] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between exports");
        }
        let confusion = std::fs::read_to_string(out_a.join("confusion.tsv")).unwrap();
        assert_eq!(confusion.lines().count(), 5);
    }
}
