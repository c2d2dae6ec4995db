//! The full estimation path on one sample: simulate a channel, take noisy
//! pilot measurements, and compare interpolation against a (briefly
//! trained) neural correction, side by side.
//!
//!     cargo run --example estimate_channel

use helena::chansim::{generate_dataset, PilotPattern};
use helena::eval::{evaluate, ls_li_estimator, model_estimator, raw_ls_estimator};
use helena::model::{build, ModelConfig};
use helena::stream_rng;
use helena::train::{fit, split_dataset, TrainConfig};

fn main() {
    // Reduced grid so the whole example trains and evaluates in about a
    // minute. The pipeline is identical at full scale.
    let model = ModelConfig {
        n_s: 48,
        n_d: 14,
        kernel1: (4, 2),
        kernel2: (3, 3),
        c1: 4,
        c: 4,
        p: 6,
        d: 16,
        h: 2,
        r: 2,
        dropout_rate: 0.0,
        use_se: true,
    };
    let pattern = PilotPattern::default();
    let ds = generate_dataset(330, 0, &pattern, model.n_s, model.n_d).unwrap();

    let cfg = TrainConfig {
        max_epochs: 40,
        batch_size: 16,
        seed: 0,
        ..TrainConfig::default()
    };
    let split = split_dataset(&ds, &cfg, cfg.seed).unwrap();
    let init = build::<f32, _>(&model, &mut stream_rng(cfg.seed, 201)).unwrap();
    println!(
        "training {} parameters on {} samples...",
        init.count_params(),
        split.train.len()
    );
    let out = fit(init, &ds, &split, &cfg).unwrap();
    println!(
        "best validation loss {:.4e} at epoch {}\n",
        out.best_val_loss, out.best_epoch
    );

    let raw = evaluate(raw_ls_estimator(), &ds, &split.test).unwrap();
    let interp = evaluate(ls_li_estimator(&pattern), &ds, &split.test).unwrap();
    let model_curve = evaluate(model_estimator(&out.weights), &ds, &split.test).unwrap();

    println!("test-split NMSE in dB per SNR:\n");
    println!(
        "{:>8} {:>10} {:>10} {:>10}",
        "SNR dB", "raw LS", "LS + LI", "model"
    );
    for ((r, i), m) in raw.rows.iter().zip(&interp.rows).zip(&model_curve.rows) {
        println!(
            "{:>8} {:>10.2} {:>10.2} {:>10.2}",
            r.snr_db, r.nmse_db, i.nmse_db, m.nmse_db
        );
    }
    println!(
        "{:>8} {:>10.2} {:>10.2} {:>10.2}",
        "overall", raw.aggregate_db, interp.aggregate_db, model_curve.aggregate_db
    );
    println!(
        "\nmodel vs interpolation overall: {:+.2} dB",
        model_curve.aggregate_db - interp.aggregate_db
    );
}
