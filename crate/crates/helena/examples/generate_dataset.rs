//! Generates a small estimation dataset, writes it to disk, reads it
//! back, and prints what one sample looks like.
//!
//!     cargo run --example generate_dataset

use helena::chansim::{generate_dataset, read_dataset, write_dataset, PilotPattern};

fn main() {
    // 22 samples is two per SNR step (0, 2, ..., 20 dB). Sample metadata
    // (profile, delay spread, Doppler, seed) is drawn per index from the
    // master seed, so the same call always builds the same dataset.
    let pattern = PilotPattern::default();
    let ds = generate_dataset(22, 0, &pattern, 612, 14).unwrap();

    println!(
        "{} samples on a {}x{} grid",
        ds.samples.len(),
        ds.n_s,
        ds.n_d
    );
    let s = &ds.samples[0];
    println!(
        "sample 0: profile {}  delay {:.0} ns  Doppler {:.1} Hz  SNR {} dB",
        s.meta.profile.name(),
        s.meta.delay_spread * 1e9,
        s.meta.doppler,
        s.meta.snr_db
    );

    // The input is the least-squares estimate at pilot positions and zero
    // everywhere else; the label is the full channel.
    let nonzero = s.input.data().iter().filter(|v| **v != 0.0).count();
    println!(
        "input grid: {} of {} values nonzero ({} pilot cells x 2 planes)",
        nonzero,
        s.input.data().len(),
        nonzero / 2
    );

    let dir = std::env::temp_dir().join("helena_example_dataset.bin");
    write_dataset(&ds, &dir).unwrap();
    let back = read_dataset(&dir).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    assert_eq!(back.samples[3].label.data(), ds.samples[3].label.data());
    println!(
        "round-trip through {} ok ({} bytes)",
        dir.display(),
        std::fs::metadata(&dir).unwrap().len()
    );
    let _ = std::fs::remove_file(&dir);
}
