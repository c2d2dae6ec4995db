//! Checks the tape's gradients for a small end-to-end model against
//! central finite differences at 64-bit precision.
//!
//!     cargo run --example gradient_check

use helena::gradcheck::{finite_diff_grad, max_rel_error};
use helena::model::{build, ModelConfig};
use helena::stream_rng;
use helena::tape::Tape;
use helena::tensor::Tensor;
use helena::train::mse_loss;
use rand::Rng;

fn main() {
    // Small enough that finite differences over every parameter finish in
    // seconds, but with every layer of the full architecture present.
    let cfg = ModelConfig {
        n_s: 24,
        n_d: 4,
        kernel1: (4, 2),
        kernel2: (3, 3),
        c1: 2,
        c: 2,
        p: 6,
        d: 8,
        h: 2,
        r: 2,
        dropout_rate: 0.0,
        use_se: true,
    };
    let weights = build::<f64, _>(&cfg, &mut stream_rng(5, 0)).unwrap();

    // Dense random probe data: on a sparse pilot grid many conv
    // pre-activations sit exactly on the relu kink (zero kernel support,
    // zero bias), where finite differences measure the half-slope.
    let input = rand_tensor(&[cfg.n_s, cfg.n_d, 2], 70);
    let label = rand_tensor(&[cfg.n_s, cfg.n_d, 2], 71);

    // Analytic gradients from one taped pass.
    let mut rng = stream_rng(0, 0);
    let mut tape = Tape::new();
    let pass = weights
        .forward_on_tape(&mut tape, &input, false, &mut rng, true)
        .unwrap();
    let label_id = tape.input(&label);
    let loss = mse_loss(&mut tape, pass.output, label_id).unwrap();
    let grads = tape.backward(loss).unwrap();

    // Numeric gradients per parameter tensor, worst case reported.
    println!(
        "{:<24} {:>10} {:>12}",
        "parameter", "elements", "max rel err"
    );
    let mut worst: f64 = 0.0;
    for (name, tensor) in weights.entries() {
        let mut probe = weights.clone();
        let numeric = finite_diff_grad(
            |t: &Tensor<f64>| {
                *probe.entries_mut().get_mut(name).unwrap() = t.clone();
                let mut rng = stream_rng(0, 0);
                let pred = probe.forward(&input, false, &mut rng).unwrap();
                mse(&pred, &label)
            },
            tensor,
            1e-5,
        )
        .unwrap();
        let analytic = grads.wrt(pass.params[name]).unwrap();
        let err = max_rel_error(analytic, &numeric);
        worst = worst.max(err);
        println!("{name:<24} {:>10} {err:>12.3e}", tensor.data().len());
    }
    println!("\nworst over all parameters: {worst:.3e}");
    assert!(worst < 1e-4, "gradients disagree with finite differences");
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}
