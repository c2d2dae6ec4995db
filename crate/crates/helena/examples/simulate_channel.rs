//! Draws one time-varying multipath channel over an OFDM grid and prints
//! how selective it is in frequency and time.
//!
//!     cargo run --example simulate_channel

use helena::chansim::{generate_channel, SampleSpec, TdlProfile};

fn main() {
    let spec = SampleSpec {
        profile: TdlProfile::C,
        delay_spread: 300e-9,
        doppler: 400.0,
        snr_db: 10.0,
        seed: 7,
    };
    spec.validate().unwrap();

    let (n_s, n_d) = (612, 14);
    let h = generate_channel(&spec, n_s, n_d).unwrap();

    println!(
        "profile {}  delay spread {:.0} ns  Doppler {:.0} Hz",
        spec.profile.name(),
        spec.delay_spread * 1e9,
        spec.doppler
    );
    println!("grid {n_s} subcarriers x {n_d} symbols");
    println!("mean power per element: {:.4}", h.mean_power());

    // Selectivity shows up as decorrelation along each axis: subcarriers
    // decorrelate with delay spread, symbols with Doppler. Lag-1 stays
    // near one on both axes; longer lags expose the selectivity.
    let freq_corr = |lag: usize| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n_s - lag {
            for k in 0..n_d {
                num += (h.at(i, k).conj() * h.at(i + lag, k)).re;
                den += h.at(i, k).norm_sqr();
            }
        }
        num / den
    };
    let time_corr = |lag: usize| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n_s {
            for k in 0..n_d - lag {
                num += (h.at(i, k).conj() * h.at(i, k + lag)).re;
                den += h.at(i, k).norm_sqr();
            }
        }
        num / den
    };
    println!(
        "frequency correlation: {:.3} at 1 subcarrier, {:.3} across one RB (12)",
        freq_corr(1),
        freq_corr(12)
    );
    println!(
        "time correlation:      {:.3} at 1 symbol, {:.3} across the slot (13)",
        time_corr(1),
        time_corr(13)
    );

    // A coarse magnitude map of the first resource block: rows are
    // subcarriers, columns are OFDM symbols.
    println!("\n|H| over the first 12 subcarriers:");
    for i in 0..12 {
        let row: String = (0..n_d)
            .map(|k| {
                let mag = h.at(i, k).norm();
                // Four steps, one character each.
                match (mag * 2.0) as usize {
                    0 => ' ',
                    1 => '.',
                    2 => 'o',
                    _ => '#',
                }
            })
            .collect();
        println!("  {i:3} |{row}|");
    }
}
