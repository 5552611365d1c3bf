//! End-to-end robustness rehearsal: generate a synthetic weakly-aligned
//! dataset, train a baseline (no alignment machinery) and the full model,
//! then run the directional robustness protocol with bounds taken from the
//! baseline.
//!
//! Run with:
//! `cargo run --release -p wald --example train_demo [scenes] [epochs] [workers]`

use std::time::Instant;

use wald::detector::train::{rfa_shift_mae, train, TrainOptions};
use wald::detector::{DetectorModel, ModelConfig};
use wald::eval::{
    directional_stats, evaluate_shifted, weak_aligned_bound, DirAngle, EvalFilter, MetricKind,
};
use wald::geometry::Extent;
use wald::paired::{generate_dataset, GeneratorParams, ShiftFieldConfig};

fn main() {
    let n_train: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let workers: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let sigma: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let shift_cfg = ShiftFieldConfig {
        base_shift: 3.0,
        edge_gain: 1.5,
        smoothness_scale: 32.0,
        noise_sigma: 0.5,
        unpaired_rate: 0.125,
    };
    let params = GeneratorParams::new(shift_cfg, Extent::new(64, 64));
    let t_all = Instant::now();
    let train_set = generate_dataset(&params, n_train, (1, 3), 42, workers).unwrap();
    let val_set = generate_dataset(&params, 150, (1, 3), 4242, workers).unwrap();
    eprintln!("generated {n_train}+150 scenes in {:?}", t_all.elapsed());

    let mut cfg = ModelConfig::small(vec!["disc".into()]);
    cfg.rfa_enabled = false;
    cfg.caf_enabled = false;
    let mut baseline = DetectorModel::init(cfg, 7).unwrap();
    let opts = TrainOptions {
        epochs,
        jitter_enabled: false,
        asc_enabled: false,
        seed: 1,
        ..Default::default()
    };
    let t0 = Instant::now();
    let log = train(&mut baseline, &train_set, &opts).unwrap();
    eprintln!("baseline trained in {:?}, final loss {:.3}", t0.elapsed(), log.final_loss);

    let cfg = ModelConfig::small(vec!["disc".into()]);
    let mut full = DetectorModel::init(cfg, 7).unwrap();
    let opts = TrainOptions {
        epochs,
        seed: 1,
        jitter: wald::rfa::JitterConfig { sigma0: sigma, sigma1: sigma },
        ..Default::default()
    };
    let t0 = Instant::now();
    let log = train(&mut full, &train_set, &opts).unwrap();
    eprintln!("full model trained in {:?}, final loss {:.3}", t0.elapsed(), log.final_loss);

    let filter = EvalFilter::default();
    let metric = MetricKind::Mr;
    let threshold = 0.01;

    let t0 = Instant::now();
    let base_origin =
        evaluate_shifted(&baseline, &val_set, (0, 0), metric, &filter, threshold, workers)
            .unwrap();
    let full_origin =
        evaluate_shifted(&full, &val_set, (0, 0), metric, &filter, threshold, workers).unwrap();
    eprintln!("origin MR: baseline {base_origin:.4}, full {full_origin:.4}");

    for angle in DirAngle::all() {
        let bounds = weak_aligned_bound(
            &baseline, &val_set, angle, 10, metric, &filter, threshold, workers,
        )
        .unwrap();
        let sb = directional_stats(
            &baseline, &val_set, angle, bounds, metric, &filter, threshold, workers,
        )
        .unwrap();
        let sf = directional_stats(
            &full, &val_set, angle, bounds, metric, &filter, threshold, workers,
        )
        .unwrap();
        eprintln!(
            "S{:>3}: bounds {:?}/{:?}  baseline mu {:.3} sigma {:.4} | full mu {:.3} sigma {:.4}  ratio {:.3}",
            angle.degrees(),
            bounds.0,
            bounds.1,
            sb.mean,
            sb.std_dev,
            sf.mean,
            sf.std_dev,
            if sb.std_dev > 0.0 { sf.std_dev / sb.std_dev } else { f64::NAN },
        );
    }
    eprintln!("protocol in {:?}", t0.elapsed());
    eprintln!("rfa mae: {:.3} px", rfa_shift_mae(&full, &val_set).unwrap());
    eprintln!("total {:?}", t_all.elapsed());
}
