//! Published parameter tables used as defaults.

use crate::dynamics::{DriveState, RateSet};
use crate::spincore::StrainParams;
use std::f64::consts::PI;

/// Resonant Rabi frequency (MHz) corresponding to 20 nW at 916 nm.
pub const RABI_20_NW: f64 = 4.33;
/// Detector dark-count rate (Hz).
pub const DARK_RATE_HZ: f64 = 7.0;

/// Rabi frequency for another resonant power, assuming Ω² ∝ P.
pub fn rabi_from_power_nw(power_nw: f64) -> f64 {
    RABI_20_NW * (power_nw / 20.0).max(0.0).sqrt()
}

pub fn table2_no_strain() -> RateSet {
    RateSet {
        gamma_r: 56.39,
        gamma_1: 83.11,
        gamma_1p: 26.89,
        gamma_2: 6.70,
        gamma_2p: 27.33,
        gamma_3: 3.81,
        gamma_4: 0.24,
        gamma_3p0: 0.0,
        gamma_4p0: 0.04,
        beta: 0.1358,
    }
}

pub fn table2_strain() -> RateSet {
    RateSet {
        gamma_r: 56.36,
        gamma_1: 84.15,
        gamma_1p: 27.51,
        gamma_2: 6.73,
        gamma_2p: 27.63,
        gamma_3: 1.11,
        gamma_4: 0.09,
        gamma_3p0: 0.0,
        gamma_4p0: 0.02,
        beta: 0.11,
    }
}

pub fn table1_strain() -> StrainParams {
    StrainParams { pi_z: 1.51, pi_1: 3.78, pi_2: 3.68, theta: 0.92 * PI }
}

/// Fitted off-resonant pump: strength and the MS2 deshelling rates that
/// accompany it at that laser power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpPreset {
    pub omega: f64,
    pub gamma_3p: f64,
    pub gamma_4p: f64,
}

impl PumpPreset {
    pub fn drive(&self) -> DriveState {
        DriveState::offres(self.omega).with_deshelling(self.gamma_3p, self.gamma_4p)
    }
}

pub const PUMP_50UW_NO_STRAIN: PumpPreset = PumpPreset { omega: 0.60, gamma_3p: 0.18, gamma_4p: 0.26 };
pub const PUMP_50UW_STRAIN: PumpPreset = PumpPreset { omega: 0.92, gamma_3p: 0.17, gamma_4p: 0.49 };
pub const PUMP_815UW_NO_STRAIN: PumpPreset = PumpPreset { omega: 13.95, gamma_3p: 0.25, gamma_4p: 0.33 };
pub const PUMP_815UW_STRAIN: PumpPreset = PumpPreset { omega: 5.19, gamma_3p: 0.05, gamma_4p: 0.05 };

/// Names accepted wherever a preset is looked up by string.
pub const RATE_PRESETS: [&str; 2] = ["table2_no_strain", "table2_strain"];
pub const PUMP_PRESETS: [&str; 4] =
    ["pump_50uw_no_strain", "pump_50uw_strain", "pump_815uw_no_strain", "pump_815uw_strain"];

pub fn rates_by_name(name: &str) -> Option<RateSet> {
    match name {
        "table2_no_strain" => Some(table2_no_strain()),
        "table2_strain" => Some(table2_strain()),
        _ => None,
    }
}

pub fn pump_by_name(name: &str) -> Option<PumpPreset> {
    match name {
        "pump_50uw_no_strain" => Some(PUMP_50UW_NO_STRAIN),
        "pump_50uw_strain" => Some(PUMP_50UW_STRAIN),
        "pump_815uw_no_strain" => Some(PUMP_815UW_NO_STRAIN),
        "pump_815uw_strain" => Some(PUMP_815UW_STRAIN),
        _ => None,
    }
}
