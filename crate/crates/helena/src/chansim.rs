//! Synthetic 5G-NR channel data: tapped-delay-line fading over an OFDM
//! resource grid, pilot transmission with AWGN, least-squares extraction at
//! the pilots, linear interpolation, and dataset files.
//!
//! The channel is computed directly in the frequency domain as a tap sum of
//! complex exponentials; no time-domain waveform is synthesized. Per-tap
//! fading follows a Jakes-style sum of 32 sinusoids whose complex Gaussian
//! amplitudes make every time sample exactly Rayleigh while the random
//! angles of arrival reproduce the J₀ time autocorrelation in expectation.
//!
//! Everything is a pure function of the seeds: one sample spec fully
//! determines its channel, pilots, and noise through separate ChaCha
//! streams, so datasets are byte-identical across reruns and across thread
//! counts.

mod tdl;

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream_rng;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Subcarrier spacing of the simulated numerology.
pub const SUBCARRIER_SPACING_HZ: f64 = 30e3;

/// OFDM symbol duration: a 0.5 ms slot carries 14 symbols at 30 kHz spacing.
pub const SYMBOL_DURATION_S: f64 = 0.5e-3 / 14.0;

/// Sinusoids per tap in the sum-of-sinusoids fading process.
const SINUSOIDS: usize = 32;

/// ChaCha stream ids deriving independent randomness from one sample seed.
const STREAM_CHANNEL: u64 = 1;
const STREAM_PILOTS: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Error)]
pub enum ChanError {
    #[error("configuration: {field}: {requirement}")]
    Config {
        field: &'static str,
        requirement: &'static str,
    },
    #[error("dataset file: {0}")]
    Format(String),
    #[error("numeric: {0}")]
    Numeric(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The five tapped-delay-line multipath profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TdlProfile {
    A,
    B,
    C,
    D,
    E,
}

impl TdlProfile {
    pub const ALL: [TdlProfile; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn id(self) -> u8 {
        match self {
            Self::A => 0,
            Self::B => 1,
            Self::C => 2,
            Self::D => 3,
            Self::E => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, ChanError> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(ChanError::Config {
                field: "profile",
                requirement: "profile id must be 0..=4 (TDL-A..TDL-E)",
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "TDL-A",
            Self::B => "TDL-B",
            Self::C => "TDL-C",
            Self::D => "TDL-D",
            Self::E => "TDL-E",
        }
    }

    fn taps(self) -> &'static [tdl::Tap] {
        match self {
            Self::A => tdl::TDL_A,
            Self::B => tdl::TDL_B,
            Self::C => tdl::TDL_C,
            Self::D => tdl::TDL_D,
            Self::E => tdl::TDL_E,
        }
    }
}

impl std::str::FromStr for TdlProfile {
    type Err = ChanError;

    fn from_str(s: &str) -> Result<Self, ChanError> {
        match s.to_ascii_uppercase().as_str() {
            "A" | "TDL-A" => Ok(Self::A),
            "B" | "TDL-B" => Ok(Self::B),
            "C" | "TDL-C" => Ok(Self::C),
            "D" | "TDL-D" => Ok(Self::D),
            "E" | "TDL-E" => Ok(Self::E),
            _ => Err(ChanError::Config {
                field: "profile",
                requirement: "must be one of TDL-A..TDL-E",
            }),
        }
    }
}

/// Conditions of one simulated sample.
///
/// [`SampleSpec::validate`] enforces the dataset ranges (delay spread
/// 1-300 ns, Doppler 5-400 Hz, SNR in {0, 2, .., 20} dB). The physics
/// functions themselves accept any finite values so limiting cases can be
/// probed directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub profile: TdlProfile,
    /// RMS delay spread in seconds.
    pub delay_spread: f64,
    /// Maximum Doppler shift in Hz.
    pub doppler: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn validate(&self) -> Result<(), ChanError> {
        if !(1e-9..=300e-9).contains(&self.delay_spread) {
            return Err(ChanError::Config {
                field: "delay_spread",
                requirement: "must lie in [1e-9, 300e-9] seconds",
            });
        }
        if !(5.0..=400.0).contains(&self.doppler) {
            return Err(ChanError::Config {
                field: "doppler",
                requirement: "must lie in [5, 400] Hz",
            });
        }
        let snr_ok = self.snr_db.fract() == 0.0
            && (0.0..=20.0).contains(&self.snr_db)
            && (self.snr_db as i64) % 2 == 0;
        if !snr_ok {
            return Err(ChanError::Config {
                field: "snr_db",
                requirement: "must be one of {0, 2, 4, .., 20} dB",
            });
        }
        Ok(())
    }
}

/// Pilot resource-element layout: which OFDM symbols carry pilots and how
/// densely they populate the frequency axis.
///
/// The default places pilots on symbols 2 and 11 at every sixth subcarrier,
/// four pilot resource elements per 12-subcarrier resource block per slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotPattern {
    /// OFDM symbol indices carrying pilots, strictly increasing.
    pub symbol_indices: Vec<usize>,
    /// Distance between pilot subcarriers.
    pub subcarrier_stride: usize,
    /// First pilot subcarrier.
    pub subcarrier_offset: usize,
}

impl Default for PilotPattern {
    fn default() -> Self {
        Self {
            symbol_indices: vec![2, 11],
            subcarrier_stride: 6,
            subcarrier_offset: 0,
        }
    }
}

impl PilotPattern {
    pub fn validate(&self, n_s: usize, n_d: usize) -> Result<(), ChanError> {
        if self.symbol_indices.is_empty() {
            return Err(ChanError::Config {
                field: "symbol_indices",
                requirement: "at least one pilot symbol is required",
            });
        }
        if self.symbol_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChanError::Config {
                field: "symbol_indices",
                requirement: "must be strictly increasing",
            });
        }
        if self.symbol_indices.iter().any(|&k| k >= n_d) {
            return Err(ChanError::Config {
                field: "symbol_indices",
                requirement: "every index must be inside the grid",
            });
        }
        // Stride at most 12 with the offset inside the stride guarantees at
        // least one pilot per 12-subcarrier resource block.
        if self.subcarrier_stride == 0 || self.subcarrier_stride > 12 {
            return Err(ChanError::Config {
                field: "subcarrier_stride",
                requirement: "must lie in [1, 12]",
            });
        }
        if self.subcarrier_offset >= self.subcarrier_stride {
            return Err(ChanError::Config {
                field: "subcarrier_offset",
                requirement: "must be smaller than the stride",
            });
        }
        if self.subcarrier_offset >= n_s {
            return Err(ChanError::Config {
                field: "subcarrier_offset",
                requirement: "must be inside the grid",
            });
        }
        Ok(())
    }

    /// Pilot subcarrier indices, ascending.
    pub fn pilot_subcarriers(&self, n_s: usize) -> impl Iterator<Item = usize> + '_ {
        (self.subcarrier_offset..n_s).step_by(self.subcarrier_stride)
    }

    pub fn is_pilot(&self, subcarrier: usize, symbol: usize) -> bool {
        self.symbol_indices.contains(&symbol)
            && subcarrier >= self.subcarrier_offset
            && (subcarrier - self.subcarrier_offset).is_multiple_of(self.subcarrier_stride)
    }
}

/// Complex channel frequency response on an `N_S x N_D` grid, row-major by
/// subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGrid {
    n_s: usize,
    n_d: usize,
    data: Vec<Complex64>,
}

impl ChannelGrid {
    pub fn zeros(n_s: usize, n_d: usize) -> Self {
        Self {
            n_s,
            n_d,
            data: vec![Complex64::new(0.0, 0.0); n_s * n_d],
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn at(&self, subcarrier: usize, symbol: usize) -> Complex64 {
        self.data[subcarrier * self.n_d + symbol]
    }

    pub fn at_mut(&mut self, subcarrier: usize, symbol: usize) -> &mut Complex64 {
        &mut self.data[subcarrier * self.n_d + symbol]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Mean of `|H|²` over the grid.
    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum::<f64>() / self.data.len() as f64
    }

    /// Two real planes `[N_S×N_D×2]`, plane 0 real, plane 1 imaginary.
    pub fn to_planes<S: Scalar>(&self) -> Tensor<S> {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for v in &self.data {
            out.push(S::from_f64(v.re));
            out.push(S::from_f64(v.im));
        }
        Tensor::new(vec![self.n_s, self.n_d, 2], out).expect("plane layout is consistent")
    }

    /// Inverse of [`ChannelGrid::to_planes`].
    pub fn from_planes<S: Scalar>(t: &Tensor<S>) -> Result<Self, ChanError> {
        if t.rank() != 3 || t.shape()[2] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "from_planes",
                left: t.shape().to_vec(),
                right: vec![0, 0, 2],
            }
            .into());
        }
        let data = t
            .data()
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0].into_f64(), c[1].into_f64()))
            .collect();
        Ok(Self {
            n_s: t.shape()[0],
            n_d: t.shape()[1],
            data,
        })
    }
}

/// Two independent standard normal draws as one complex value.
fn complex_gaussian<R: Rng>(rng: &mut R) -> Complex64 {
    // Box-Muller on (0, 1] so the logarithm stays finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    Complex64::new(radius * angle.cos(), radius * angle.sin())
}

/// Frequency response of one fading realization.
///
/// `H[i,k] = Σ_t g_t(k)·exp(−j·2π·f_i·τ_t)` with subcarrier frequencies
/// `f_i = i·Δf`, tap delays `τ_t` equal to the profile's normalized delays
/// scaled by the delay spread, and per-tap gains `g_t(k)` from the
/// sum-of-sinusoids process. Tap powers are normalized to sum to 1, so
/// `E[|H|²] = 1` at every grid position.
pub fn generate_channel(
    spec: &SampleSpec,
    n_s: usize,
    n_d: usize,
) -> Result<ChannelGrid, ChanError> {
    if n_s == 0 || n_d == 0 {
        return Err(ChanError::Config {
            field: "grid",
            requirement: "both grid extents must be positive",
        });
    }
    let taps = spec.profile.taps();
    let total: f64 = taps.iter().map(|t| 10f64.powf(t.power_db / 10.0)).sum();
    let mut rng = stream_rng(spec.seed, STREAM_CHANNEL);
    let tau = std::f64::consts::TAU;

    // Per-tap complex gains over the symbols. Scaling by √(p/(2M)) makes
    // each gain zero-mean complex Gaussian with E[|g_t|²] = p_t.
    let mut gains = vec![Complex64::new(0.0, 0.0); taps.len() * n_d];
    for (t, tap) in taps.iter().enumerate() {
        let power = 10f64.powf(tap.power_db / 10.0) / total;
        let scale = (power / (2.0 * SINUSOIDS as f64)).sqrt();
        let mut arrival_cos = [0.0; SINUSOIDS];
        let mut amplitude = [Complex64::new(0.0, 0.0); SINUSOIDS];
        for n in 0..SINUSOIDS {
            arrival_cos[n] = (rng.gen::<f64>() * tau).cos();
            amplitude[n] = complex_gaussian(&mut rng);
        }
        for k in 0..n_d {
            let time = k as f64 * SYMBOL_DURATION_S;
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..SINUSOIDS {
                let phase = tau * spec.doppler * arrival_cos[n] * time;
                acc += amplitude[n] * Complex64::new(phase.cos(), phase.sin());
            }
            gains[t * n_d + k] = scale * acc;
        }
    }

    let mut grid = ChannelGrid::zeros(n_s, n_d);
    for (t, tap) in taps.iter().enumerate() {
        let delay = tap.delay * spec.delay_spread;
        for i in 0..n_s {
            let phase = -tau * (i as f64) * SUBCARRIER_SPACING_HZ * delay;
            let phasor = Complex64::new(phase.cos(), phase.sin());
            for k in 0..n_d {
                *grid.at_mut(i, k) += gains[t * n_d + k] * phasor;
            }
        }
    }
    Ok(grid)
}

/// Pilot constellation: unit-modulus points whose complex division is exact
/// in floating point, keeping noiseless least squares bit-identical to the
/// channel.
const PILOT_POINTS: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

/// Transmits seeded pilots through the channel with AWGN: at every pilot
/// position `Y = H·X + Z` with `Z` complex Gaussian of total variance
/// `10^(−snr_db/10)`; all other grid positions stay zero in both outputs.
pub fn simulate_rx(
    h: &ChannelGrid,
    spec: &SampleSpec,
    pattern: &PilotPattern,
) -> Result<(ChannelGrid, ChannelGrid), ChanError> {
    pattern.validate(h.n_s(), h.n_d())?;
    let mut pilot_rng = stream_rng(spec.seed, STREAM_PILOTS);
    let mut noise_rng = stream_rng(spec.seed, STREAM_NOISE);
    let sigma2 = 10f64.powf(-spec.snr_db / 10.0);
    let noise_scale = (sigma2 / 2.0).sqrt();

    let mut y = ChannelGrid::zeros(h.n_s(), h.n_d());
    let mut x = ChannelGrid::zeros(h.n_s(), h.n_d());
    for &k in &pattern.symbol_indices {
        for i in pattern.pilot_subcarriers(h.n_s()) {
            let symbol = PILOT_POINTS[pilot_rng.gen_range(0..PILOT_POINTS.len())];
            let noise = complex_gaussian(&mut noise_rng) * noise_scale;
            *x.at_mut(i, k) = symbol;
            *y.at_mut(i, k) = h.at(i, k) * symbol + noise;
        }
    }
    Ok((y, x))
}

/// Least-squares estimate at the pilots: `Y/X` there, exactly zero
/// everywhere else.
pub fn ls_at_pilots(
    y: &ChannelGrid,
    x: &ChannelGrid,
    pattern: &PilotPattern,
) -> Result<ChannelGrid, ChanError> {
    if (y.n_s(), y.n_d()) != (x.n_s(), x.n_d()) {
        return Err(TensorError::ShapeMismatch {
            op: "ls_at_pilots",
            left: vec![y.n_s(), y.n_d()],
            right: vec![x.n_s(), x.n_d()],
        }
        .into());
    }
    pattern.validate(y.n_s(), y.n_d())?;
    let mut h_lr = ChannelGrid::zeros(y.n_s(), y.n_d());
    for &k in &pattern.symbol_indices {
        for i in pattern.pilot_subcarriers(y.n_s()) {
            let xv = x.at(i, k);
            if xv.norm_sqr() == 0.0 {
                return Err(ChanError::Numeric("zero pilot symbol in least squares"));
            }
            *h_lr.at_mut(i, k) = y.at(i, k) / xv;
        }
    }
    Ok(h_lr)
}

/// Fills the full grid from pilot least-squares values: linear
/// interpolation along frequency inside each pilot symbol (nearest-edge
/// extension at the band edges), then linear interpolation along time
/// between pilot symbols (constant extension outside them, which also
/// covers single-pilot-symbol patterns).
pub fn linear_interpolate(
    h_lr: &ChannelGrid,
    pattern: &PilotPattern,
) -> Result<ChannelGrid, ChanError> {
    pattern.validate(h_lr.n_s(), h_lr.n_d())?;
    let pilots: Vec<usize> = pattern.pilot_subcarriers(h_lr.n_s()).collect();
    if pilots.len() < 2 {
        return Err(ChanError::Config {
            field: "subcarrier_stride",
            requirement: "at least two pilot subcarriers are needed to interpolate",
        });
    }

    // Frequency pass: one dense column per pilot symbol.
    let n_s = h_lr.n_s();
    let mut columns: Vec<Vec<Complex64>> = Vec::with_capacity(pattern.symbol_indices.len());
    for &k in &pattern.symbol_indices {
        let mut col = vec![Complex64::new(0.0, 0.0); n_s];
        let mut seg = 0;
        for (i, value) in col.iter_mut().enumerate() {
            *value = if i <= pilots[0] {
                h_lr.at(pilots[0], k)
            } else if i >= pilots[pilots.len() - 1] {
                h_lr.at(pilots[pilots.len() - 1], k)
            } else {
                while pilots[seg + 1] < i {
                    seg += 1;
                }
                let (lo, hi) = (pilots[seg], pilots[seg + 1]);
                let a = h_lr.at(lo, k);
                let b = h_lr.at(hi, k);
                let t = (i - lo) as f64 / (hi - lo) as f64;
                a + (b - a) * t
            };
        }
        columns.push(col);
    }

    // Time pass: interpolate between pilot symbols, hold constant outside.
    let syms = &pattern.symbol_indices;
    let mut out = ChannelGrid::zeros(h_lr.n_s(), h_lr.n_d());
    for k in 0..h_lr.n_d() {
        let (left, right, t) = if k <= syms[0] {
            (0, 0, 0.0)
        } else if k >= syms[syms.len() - 1] {
            (syms.len() - 1, syms.len() - 1, 0.0)
        } else {
            let seg = (0..syms.len() - 1)
                .find(|&s| syms[s] <= k && k < syms[s + 1])
                .expect("k lies between the first and last pilot symbols");
            let t = (k - syms[seg]) as f64 / (syms[seg + 1] - syms[seg]) as f64;
            (seg, seg + 1, t)
        };
        for (i, (&a, &b)) in columns[left].iter().zip(&columns[right]).enumerate() {
            *out.at_mut(i, k) = a + (b - a) * t;
        }
    }
    Ok(out)
}

// ── dataset ─────────────────────────────────────────────────────────────

/// One training sample: the zero-filled pilot least-squares grid as model
/// input, the true channel as label, both as `[N_S×N_D×2]` real planes.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub meta: SampleSpec,
    pub input: Tensor<f32>,
    pub label: Tensor<f32>,
}

/// An in-memory dataset; all samples share one grid geometry.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_s: usize,
    pub n_d: usize,
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    /// `(count, N_S, N_D, planes)`, the shape recorded in file headers.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.samples.len(), self.n_s, self.n_d, 2)
    }
}

/// The SNR grid of the dataset: 0 to 20 dB in 2 dB steps.
pub const SNR_STEPS_DB: [f64; 11] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0];

/// Conditions for sample `index` of a dataset: the SNR cycles through
/// [`SNR_STEPS_DB`] while profile, delay spread, and Doppler are drawn
/// uniformly from the dataset ranges by a generator derived from
/// `(master_seed, index)` alone.
pub fn sample_spec_for(master_seed: u64, index: usize) -> SampleSpec {
    let mut rng = stream_rng(master_seed, index as u64);
    let profile = TdlProfile::ALL[rng.gen_range(0..TdlProfile::ALL.len())];
    let delay_spread = 1e-9 + rng.gen::<f64>() * (300e-9 - 1e-9);
    let doppler = 5.0 + rng.gen::<f64>() * (400.0 - 5.0);
    let snr_db = SNR_STEPS_DB[index % SNR_STEPS_DB.len()];
    SampleSpec {
        profile,
        delay_spread,
        doppler,
        snr_db,
        seed: rng.gen::<u64>(),
    }
}

/// Simulates one complete sample: channel, pilots, noise, least squares.
pub fn generate_sample(
    spec: &SampleSpec,
    pattern: &PilotPattern,
    n_s: usize,
    n_d: usize,
) -> Result<DatasetSample, ChanError> {
    let h = generate_channel(spec, n_s, n_d)?;
    let (y, x) = simulate_rx(&h, spec, pattern)?;
    let h_lr = ls_at_pilots(&y, &x, pattern)?;
    Ok(DatasetSample {
        meta: *spec,
        input: h_lr.to_planes(),
        label: h.to_planes(),
    })
}

/// Generates `count` samples in memory, `count/11` per SNR step.
pub fn generate_dataset(
    count: usize,
    master_seed: u64,
    pattern: &PilotPattern,
    n_s: usize,
    n_d: usize,
) -> Result<Dataset, ChanError> {
    if count == 0 || !count.is_multiple_of(SNR_STEPS_DB.len()) {
        return Err(ChanError::Config {
            field: "samples",
            requirement: "must be a positive multiple of 11 (one per SNR step)",
        });
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let spec = sample_spec_for(master_seed, i);
        spec.validate()?;
        samples.push(generate_sample(&spec, pattern, n_s, n_d)?);
    }
    Ok(Dataset { n_s, n_d, samples })
}

// ── dataset file format ─────────────────────────────────────────────────
//
// "HCED1" magic (5 bytes), little-endian header {u32 sample_count, u32 N_S,
// u32 N_D, u8 planes = 2}, then per sample: metadata {u8 profile_id,
// f32 delay_spread_s, f32 doppler_hz, f32 snr_db, u64 seed}, then the input
// planes and the label planes as raw little-endian f32, row-major in
// (subcarrier, symbol, plane) order.

const DATASET_MAGIC: &[u8; 5] = b"HCED1";

/// Encodes the fixed-size dataset file header.
pub fn dataset_header(count: usize, n_s: usize, n_d: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATASET_MAGIC.len() + 13);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(n_s as u32).to_le_bytes());
    out.extend_from_slice(&(n_d as u32).to_le_bytes());
    out.push(2);
    out
}

/// Appends one serialized sample to a writer.
pub fn write_sample<W: Write>(w: &mut W, sample: &DatasetSample) -> Result<(), ChanError> {
    w.write_all(&[sample.meta.profile.id()])?;
    w.write_all(&(sample.meta.delay_spread as f32).to_le_bytes())?;
    w.write_all(&(sample.meta.doppler as f32).to_le_bytes())?;
    w.write_all(&(sample.meta.snr_db as f32).to_le_bytes())?;
    w.write_all(&sample.meta.seed.to_le_bytes())?;
    for plane in [&sample.input, &sample.label] {
        for &v in plane.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a whole dataset to `path`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), ChanError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&dataset_header(ds.samples.len(), ds.n_s, ds.n_d))?;
    for sample in &ds.samples {
        write_sample(&mut w, sample)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back, validating the header and every extent.
pub fn read_dataset(path: &Path) -> Result<Dataset, ChanError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(ChanError::Format(format!(
            "bad magic bytes {magic:02x?}, expected {DATASET_MAGIC:02x?}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let n_s = read_u32(&mut r)? as usize;
    let n_d = read_u32(&mut r)? as usize;
    let mut planes = [0u8; 1];
    read_exact(&mut r, &mut planes)?;
    if planes[0] != 2 {
        return Err(ChanError::Format(format!(
            "{} planes per grid, expected 2",
            planes[0]
        )));
    }
    if n_s == 0 || n_d == 0 {
        return Err(ChanError::Format("zero grid extent in header".into()));
    }

    let plane_len = n_s * n_d * 2;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut id = [0u8; 1];
        read_exact(&mut r, &mut id)?;
        let profile = TdlProfile::from_id(id[0])
            .map_err(|_| ChanError::Format(format!("unknown profile id {}", id[0])))?;
        let delay_spread = read_f32(&mut r)? as f64;
        let doppler = read_f32(&mut r)? as f64;
        let snr_db = read_f32(&mut r)? as f64;
        let mut seed_bytes = [0u8; 8];
        read_exact(&mut r, &mut seed_bytes)?;
        let meta = SampleSpec {
            profile,
            delay_spread,
            doppler,
            snr_db,
            seed: u64::from_le_bytes(seed_bytes),
        };
        let mut grids = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut data = vec![0f32; plane_len];
            for v in &mut data {
                *v = read_f32(&mut r)?;
            }
            grids.push(Tensor::new(vec![n_s, n_d, 2], data)?);
        }
        let label = grids.pop().expect("two grids were read");
        let input = grids.pop().expect("two grids were read");
        samples.push(DatasetSample { meta, input, label });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ChanError::Format("trailing bytes after last sample".into()));
    }
    Ok(Dataset { n_s, n_d, samples })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ChanError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ChanError::Format("unexpected end of file".into())
        } else {
            ChanError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ChanError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, ChanError> {
    Ok(f32::from_bits(read_u32(r)?))
}
