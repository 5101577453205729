//! Thermophysical constants of the tool and composite, and the resin
//! cure-kinetics rate law.
//!
//! Internal units are SI throughout: seconds, metres, Kelvin. The rate law is
//! an Arrhenius term multiplied by an autocatalytic `α^m (1-α)^n` factor and a
//! diffusion sigmoid that shuts the reaction down as the resin vitrifies:
//!
//! ```text
//! dα/dt = A exp(-ΔE / (R T)) · α^m (1-α)^n / (1 + exp(C (α - (C0 + CT T))))
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest distance from the ends of `[0, 1]` used when evaluating the
/// derivative of the rate law, where `α^(m-1)` or `(1-α)^(n-1)` may blow up.
pub const ALPHA_EPS: f64 = 1e-9;

/// Offset between the Celsius and Kelvin scales.
pub const KELVIN_OFFSET: f64 = 273.15;

pub fn celsius_to_kelvin(t: f64) -> f64 {
    t + KELVIN_OFFSET
}

pub fn kelvin_to_celsius(t: f64) -> f64 {
    t - KELVIN_OFFSET
}

/// Constants of the resin cure-kinetics model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticsConstants {
    /// Pre-exponential factor (1/s).
    #[serde(rename = "A")]
    pub pre_exponential: f64,
    /// Activation energy (J/mol).
    #[serde(rename = "dE")]
    pub activation_energy: f64,
    /// Gas constant (J/mol/K).
    #[serde(rename = "R")]
    pub gas_constant: f64,
    /// Reaction order on `α`.
    pub m: f64,
    /// Reaction order on `1 - α`.
    pub n: f64,
    /// Steepness of the diffusion sigmoid.
    #[serde(rename = "C")]
    pub diffusion_steepness: f64,
    /// Offset of the critical degree of cure.
    #[serde(rename = "C0")]
    pub critical_offset: f64,
    /// Temperature coefficient of the critical degree of cure (1/K).
    #[serde(rename = "CT")]
    pub critical_slope: f64,
}

/// Material constants for the tool and composite pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialCard {
    pub name: String,
    /// Tool thermal diffusivity (m²/s).
    pub a_t: f64,
    /// Composite through-thickness thermal diffusivity (m²/s).
    pub a_c: f64,
    /// Heat-generation coefficient (K): adiabatic temperature rise per unit cure.
    pub b_c: f64,
    /// Tool thermal conductivity (W/m/K).
    pub k_t: f64,
    /// Composite through-thickness thermal conductivity (W/m/K).
    pub k_c: f64,
    pub kinetics: KineticsConstants,
}

impl MaterialCard {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let card: MaterialCard = serde_json::from_str(s)?;
        Ok(card)
    }

    /// Reads a card from a JSON file. The card is not validated here; call
    /// [`validate_card`] when the caller needs a usable card.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json_str(&text)
    }

    /// Volumetric heat capacity of the tool (J/m³/K).
    pub fn tool_heat_capacity(&self) -> f64 {
        self.k_t / self.a_t
    }

    /// Volumetric heat capacity of the composite (J/m³/K).
    pub fn part_heat_capacity(&self) -> f64 {
        self.k_c / self.a_c
    }

    /// SHA-256 of the canonical JSON serialisation; identifies the card in
    /// run manifests and model checkpoints.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("material card serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Synthetic card with unit kinetics, used for deterministic hand checks.
    pub fn test_card() -> Self {
        MaterialCard {
            name: "test-card".to_string(),
            a_t: 1e-6,
            a_c: 1e-6,
            b_c: 0.0,
            k_t: 1.0,
            k_c: 1.0,
            kinetics: KineticsConstants {
                pre_exponential: 1.0,
                activation_energy: 0.0,
                gas_constant: 8.314,
                m: 1.0,
                n: 1.0,
                diffusion_steepness: 0.0,
                critical_offset: 0.0,
                critical_slope: 0.0,
            },
        }
    }

    /// Invar 36 tool with an AS4/8552 laminate. The same values ship as
    /// `data/material/as4-8552-invar.json`.
    pub fn as4_8552_invar() -> Self {
        MaterialCard {
            name: "as4-8552-invar".to_string(),
            a_t: 2.448e-6,
            a_c: 3.1646e-7,
            b_c: 167.4,
            k_t: 10.15,
            k_c: 0.6,
            kinetics: KineticsConstants {
                pre_exponential: 1.528e5,
                activation_energy: 6.65e4,
                gas_constant: 8.314,
                m: 0.8129,
                n: 2.736,
                diffusion_steepness: 43.09,
                critical_offset: -1.684,
                critical_slope: 5.475e-3,
            },
        }
    }

    /// Same card with the exotherm switched off.
    pub fn inert(&self) -> Self {
        MaterialCard {
            name: format!("{}-inert", self.name),
            b_c: 0.0,
            ..self.clone()
        }
    }
}

fn check_domain(alpha: f64, temp: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "degree of cure {alpha} outside [0, 1]"
        )));
    }
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::Domain(format!(
            "absolute temperature {temp} K is not positive"
        )));
    }
    Ok(())
}

/// Cure rate `dα/dt` (1/s) at degree of cure `alpha` and absolute
/// temperature `temp` (K).
pub fn cure_rate(alpha: f64, temp: f64, k: &KineticsConstants) -> Result<f64> {
    check_domain(alpha, temp)?;
    Ok(cure_rate_unchecked(alpha, temp, k))
}

/// Rate law without domain checks. `alpha` is clamped into `[0, 1]`, which is
/// what the network residuals need when an untrained surrogate strays
/// slightly outside the physical range.
pub fn cure_rate_unchecked(alpha: f64, temp: f64, k: &KineticsConstants) -> f64 {
    let a = alpha.clamp(0.0, 1.0);
    let arrhenius = k.pre_exponential * (-k.activation_energy / (k.gas_constant * temp)).exp();
    let orders = a.powf(k.m) * (1.0 - a).powf(k.n);
    let sigmoid = 1.0
        / (1.0 + (k.diffusion_steepness * (a - (k.critical_offset + k.critical_slope * temp))).exp());
    arrhenius * orders * sigmoid
}

/// Partial derivatives `(∂rate/∂α, ∂rate/∂T)`.
pub fn cure_rate_partials(alpha: f64, temp: f64, k: &KineticsConstants) -> Result<(f64, f64)> {
    check_domain(alpha, temp)?;
    Ok(cure_rate_partials_unchecked(alpha, temp, k))
}

/// Partials without domain checks. `alpha` is clamped into
/// `[ALPHA_EPS, 1 - ALPHA_EPS]` so the slopes stay finite at the ends.
pub fn cure_rate_partials_unchecked(alpha: f64, temp: f64, k: &KineticsConstants) -> (f64, f64) {
    let a = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
    let arrhenius = k.pre_exponential * (-k.activation_energy / (k.gas_constant * temp)).exp();
    let orders = a.powf(k.m) * (1.0 - a).powf(k.n);
    let d_orders = orders * (k.m / a - k.n / (1.0 - a));
    let sigmoid = 1.0
        / (1.0 + (k.diffusion_steepness * (a - (k.critical_offset + k.critical_slope * temp))).exp());
    // d(sigmoid)/dx for x = C (α - C0 - CT T)
    let dsig = -sigmoid * (1.0 - sigmoid);
    let d_alpha = arrhenius * (d_orders * sigmoid + orders * dsig * k.diffusion_steepness);
    let rate = arrhenius * orders * sigmoid;
    let d_temp = rate * k.activation_energy / (k.gas_constant * temp * temp)
        + arrhenius * orders * dsig * (-k.diffusion_steepness * k.critical_slope);
    (d_alpha, d_temp)
}

/// Lists every violated invariant of `card`; an empty list means the card is
/// usable.
pub fn validate_card(card: &MaterialCard) -> Vec<String> {
    let mut report = Vec::new();
    let mut positive = |name: &str, v: f64| {
        if !(v > 0.0) || !v.is_finite() {
            report.push(format!("{name} > 0 violated (got {v})"));
        }
    };
    positive("a_t", card.a_t);
    positive("a_c", card.a_c);
    positive("k_t", card.k_t);
    positive("k_c", card.k_c);
    let k = &card.kinetics;
    positive("A", k.pre_exponential);
    positive("R", k.gas_constant);
    positive("m", k.m);
    positive("n", k.n);
    if !(card.b_c >= 0.0) || !card.b_c.is_finite() {
        report.push(format!("b_c >= 0 violated (got {})", card.b_c));
    }
    if !(k.activation_energy >= 0.0) || !k.activation_energy.is_finite() {
        report.push(format!("dE >= 0 violated (got {})", k.activation_energy));
    }
    for (name, v) in [
        ("C", k.diffusion_steepness),
        ("C0", k.critical_offset),
        ("CT", k.critical_slope),
    ] {
        if !v.is_finite() {
            report.push(format!("{name} must be finite (got {v})"));
        }
    }
    report
}
