//! Trains the estimator end to end on a reduced grid and prints the loss
//! curve. Runs in well under a minute; the full-scale recipe is the same
//! call with the default configuration.
//!
//!     cargo run --example train_estimator

use helena::chansim::{generate_dataset, PilotPattern};
use helena::model::{build, ModelConfig};
use helena::stream_rng;
use helena::train::{fit, split_dataset, TrainConfig};

fn main() {
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
    let ds = generate_dataset(110, 0, &pattern, model.n_s, model.n_d).unwrap();

    let cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 16,
        seed: 0,
        ..TrainConfig::default()
    };
    let split = split_dataset(&ds, &cfg, cfg.seed).unwrap();
    println!(
        "{} train / {} val / {} test samples on a {}x{} grid",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        model.n_s,
        model.n_d
    );

    let init = build::<f32, _>(&model, &mut stream_rng(cfg.seed, 201)).unwrap();
    println!("{} parameters\n", init.count_params());

    let out = fit(init, &ds, &split, &cfg).unwrap();
    println!("epoch  train loss    val loss      lr");
    for row in &out.history {
        if row.epoch % 5 == 0 || row.epoch == 1 {
            println!(
                "{:>5}  {:>11.5e}  {:>11.5e}  {:.4}",
                row.epoch, row.train_loss, row.val_loss, row.lr
            );
        }
    }
    println!(
        "\nbest validation loss {:.5e} at epoch {}",
        out.best_val_loss, out.best_epoch
    );

    let first = out.history.first().unwrap().val_loss;
    println!(
        "validation loss shrank by {:.1}x over {} epochs",
        first / out.best_val_loss,
        out.history.len()
    );
}
