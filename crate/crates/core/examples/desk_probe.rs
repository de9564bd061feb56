//! Diagnostic: desk-scale training quality vs learning rate.

use g3class::cnn::{self, layers::BnMode, ModelConfig, ModelParams};
use g3class::dataset::{self, Sample};
use g3class::eval::{self, CnnClassifier};
use std::path::Path;

fn refresh_bn(params: &mut ModelParams, train: &[Sample]) {
    for bn in &mut params.bn {
        bn.running_mean.fill(0.0);
        bn.running_var.fill(1.0);
        bn.updates = 0;
    }
    let momentum = params.config().bn_momentum;
    // Stride across the whole (case-ordered) set for unbiased statistics.
    let stride = (train.len() / 2048).max(1);
    let subset: Vec<&Sample> = train.iter().step_by(stride).collect();
    for chunk in subset.chunks(32) {
        let features: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        let input = cnn::features_to_batch(&features);
        let (_, _, stats) = g3class::cnn::layers::forward_batch(params, &input, BnMode::BatchStats);
        for (layer, stat) in stats.into_iter().enumerate() {
            if let Some((mean, var)) = stat {
                params.bn[layer].update_running(&mean, &var, momentum);
            }
        }
    }
}

fn per_class(metrics: &eval::Metrics) -> [Option<f64>; 4] {
    metrics
        .per_class
        .map(|s| s.accuracy().map(|a| (a * 1000.0).round() / 1000.0))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let cache = Path::new("/tmp/desk_probe.flds");
    let all = if cache.exists() {
        dataset::read_dataset(cache).unwrap()
    } else {
        let (all, _) = dataset::generate(&dataset::desk_grid(), 50, 2026).unwrap();
        dataset::write_dataset(cache, &all).unwrap();
        all
    };
    let [train, val, test] = dataset::split(&all, [0.7, 0.2, 0.1], 7).unwrap();

    let hyper = cnn::Hyper {
        epochs,
        learning_rate: lr,
        ..cnn::Hyper::default()
    };
    let t1 = std::time::Instant::now();
    let (mut params, history) =
        cnn::train(&train, &val, &hyper, &ModelConfig::default(), 11).unwrap();
    eprintln!("trained {epochs} epoch(s) at lr={lr} in {:?}", t1.elapsed());
    let tail: Vec<f64> = history.steps.iter().rev().take(3).map(|s| s.loss).collect();
    println!(
        "lr={lr} epochs={epochs} last losses: {tail:?} val(pre-refresh): {:?}",
        history.epochs.last().unwrap().val_accuracy
    );

    let pre = eval::evaluate(&CnnClassifier(&params), &test).unwrap();
    println!(
        "  pre-refresh:  overall {:.4} per-class {:?}",
        pre.overall.accuracy().unwrap(),
        per_class(&pre)
    );
    refresh_bn(&mut params, &train);
    let post = eval::evaluate(&CnnClassifier(&params), &test).unwrap();
    println!(
        "  post-refresh: overall {:.4} per-class {:?}",
        post.overall.accuracy().unwrap(),
        per_class(&post)
    );
    // Train-subsample accuracy distinguishes undertraining from overfit.
    let train_sub: Vec<Sample> = train.iter().step_by(7).cloned().collect();
    let train_metrics = eval::evaluate(&CnnClassifier(&params), &train_sub).unwrap();
    println!(
        "  train subset: overall {:.4} per-class {:?}",
        train_metrics.overall.accuracy().unwrap(),
        per_class(&train_metrics)
    );
}
