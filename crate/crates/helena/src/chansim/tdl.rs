//! Tapped-delay-line power/delay profiles.
//!
//! Normalized delays (unitless, scaled by the delay spread at use) and tap
//! powers in dB, from 3GPP TR 38.901, Tables 7.7.2-1 through 7.7.2-5.
//! All taps fade as Rayleigh here, including the first taps of TDL-D and
//! TDL-E that TR 38.901 models with a direct component; the published tap
//! powers are kept unchanged.

/// One multipath tap: delay normalized to the delay spread, mean power in dB.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub delay: f64,
    pub power_db: f64,
}

const fn tap(delay: f64, power_db: f64) -> Tap {
    Tap { delay, power_db }
}

pub const TDL_A: &[Tap] = &[
    tap(0.0000, -13.4),
    tap(0.3819, 0.0),
    tap(0.4025, -2.2),
    tap(0.5868, -4.0),
    tap(0.4610, -6.0),
    tap(0.5375, -8.2),
    tap(0.6708, -9.9),
    tap(0.5750, -10.5),
    tap(0.7618, -7.5),
    tap(1.5375, -15.9),
    tap(1.8978, -6.6),
    tap(2.2242, -16.7),
    tap(2.1718, -12.4),
    tap(2.4942, -15.2),
    tap(2.5119, -10.8),
    tap(3.0582, -11.3),
    tap(4.0810, -12.7),
    tap(4.4579, -16.2),
    tap(4.5695, -18.3),
    tap(4.7966, -18.9),
    tap(5.0066, -16.6),
    tap(5.3043, -19.9),
    tap(9.6586, -29.7),
];

pub const TDL_B: &[Tap] = &[
    tap(0.0000, 0.0),
    tap(0.1072, -2.2),
    tap(0.2155, -4.0),
    tap(0.2095, -3.2),
    tap(0.2870, -9.8),
    tap(0.2986, -1.2),
    tap(0.3752, -3.4),
    tap(0.5055, -5.2),
    tap(0.3681, -7.6),
    tap(0.3697, -3.0),
    tap(0.5700, -8.9),
    tap(0.5283, -9.0),
    tap(1.1021, -4.8),
    tap(1.2756, -5.7),
    tap(1.5474, -7.5),
    tap(1.7842, -1.9),
    tap(2.0169, -7.6),
    tap(2.8294, -12.2),
    tap(3.0219, -9.8),
    tap(3.6187, -11.4),
    tap(4.1067, -14.9),
    tap(4.2790, -9.2),
    tap(4.7834, -11.3),
];

// The 0.6366 tap is the published table value; its closeness to 2/pi is
// coincidental.
#[allow(clippy::approx_constant)]
pub const TDL_C: &[Tap] = &[
    tap(0.0000, -4.4),
    tap(0.2099, -1.2),
    tap(0.2219, -3.5),
    tap(0.2329, -5.2),
    tap(0.2176, -2.5),
    tap(0.6366, 0.0),
    tap(0.6448, -2.2),
    tap(0.6560, -3.9),
    tap(0.6584, -7.4),
    tap(0.7935, -7.1),
    tap(0.8213, -10.7),
    tap(0.9336, -11.1),
    tap(1.2285, -5.1),
    tap(1.3083, -6.8),
    tap(2.1704, -8.7),
    tap(2.7105, -13.2),
    tap(4.2589, -13.9),
    tap(4.6003, -13.9),
    tap(5.4902, -15.8),
    tap(5.6077, -17.1),
    tap(6.3065, -16.0),
    tap(6.6374, -15.7),
    tap(7.0427, -21.6),
    tap(8.6523, -22.8),
];

pub const TDL_D: &[Tap] = &[
    tap(0.0000, -0.2),
    tap(0.0350, -18.8),
    tap(0.6120, -21.0),
    tap(1.3630, -22.8),
    tap(1.4050, -17.9),
    tap(1.8040, -20.1),
    tap(2.5960, -21.9),
    tap(1.7750, -22.9),
    tap(4.0420, -27.8),
    tap(7.9370, -23.6),
    tap(9.4240, -24.8),
    tap(9.7080, -30.0),
    tap(12.5250, -27.7),
];

pub const TDL_E: &[Tap] = &[
    tap(0.0000, -0.03),
    tap(0.5133, -15.8),
    tap(0.5440, -18.1),
    tap(0.5630, -19.8),
    tap(0.5440, -22.9),
    tap(0.7112, -22.4),
    tap(1.9092, -18.6),
    tap(1.9293, -20.8),
    tap(1.9589, -22.6),
    tap(2.6426, -22.3),
    tap(3.7136, -25.6),
    tap(5.4524, -20.2),
    tap(12.0034, -29.8),
    tap(20.6419, -29.2),
];
