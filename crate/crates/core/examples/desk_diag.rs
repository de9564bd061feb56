//! Diagnostic: intrinsic separability of the desk test set via the analytic
//! baseline, and the critical-point distributions of the Fock-2/Fock-3
//! samples.

use g3class::correlator::{critical_points, g3_map};
use g3class::dataset::{self};
use g3class::eval::{self, BaselineClassifier};
use g3class::source::simulate;
use std::collections::BTreeMap;
use std::path::Path;

fn main() {
    let cache = Path::new("/tmp/desk_probe.flds");
    let all = dataset::read_dataset(cache).unwrap();
    let [_, _, test] = dataset::split(&all, [0.7, 0.2, 0.1], 7).unwrap();

    let metrics = eval::evaluate(&BaselineClassifier, &test).unwrap();
    println!(
        "baseline on desk test: overall {:.4} per-class {:?}",
        metrics.overall.accuracy().unwrap(),
        metrics.per_class.map(|s| s.accuracy().map(|a| (a * 1000.0).round() / 1000.0))
    );
    println!("baseline confusion rows (COH F1 F2 F3):");
    for row in metrics.confusion {
        println!("  {row:?}");
    }

    // Critical-point clusters for the quantum-labeled cells.
    let mut stats: BTreeMap<(u8, u16, u32), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in test.iter().filter(|s| s.case.qlp_milli >= 500) {
        let spec = s.case.source_spec().unwrap();
        let record = simulate(&spec, s.case.num_events as usize, s.seed).unwrap();
        let map = g3_map(&record, 16).unwrap();
        let cp = critical_points(&map).unwrap();
        let entry = stats
            .entry((s.case.fock_n, s.case.qlp_milli, s.case.num_events))
            .or_default();
        entry.0.push(cp.g2_zero_est);
        entry.1.push(cp.g3_zero);
    }
    println!("cell (n, qlp, events): g2_est mean+-sd, g3 mean+-sd");
    for ((n, q, e), (g2s, g3s)) in &stats {
        if *e != 1000 && *e != 10_000 {
            continue;
        }
        let m = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &Vec<f64>| {
            let mu = m(v);
            (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        println!(
            "  n={n} qlp={:.2} events={e}: g2 {:.3}+-{:.3}  g3 {:.3}+-{:.3}",
            *q as f64 / 1000.0,
            m(g2s),
            sd(g2s),
            m(g3s),
            sd(g3s)
        );
    }
}
