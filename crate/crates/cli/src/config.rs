//! Run configuration: one JSON document resolved from a shipped preset or a
//! file, with the master seed pushed into every component.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use curedesign_core::cure_cycle::{DesignBounds, DesignVector};
use curedesign_core::design_opt::{GaConfig, GradientConfig, ObjectiveConfig, OptimizerKind, PsoConfig};
use curedesign_core::fd_sim::SimOptions;
use curedesign_core::material::MaterialCard;
use curedesign_core::pidon::{SurrogateProblem, TrainConfig};

pub const PRESETS: [(&str, &str); 3] = [
    ("paper-20mm", include_str!("../../../data/presets/paper-20mm.json")),
    ("paper-30mm", include_str!("../../../data/presets/paper-30mm.json")),
    ("desk-scale", include_str!("../../../data/presets/desk-scale.json")),
];

const BUILTIN_CARDS: [&str; 2] = ["as4-8552-invar", "test-card"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub optimizer: OptimizerKind,
    /// Random initial designs; 0 uses `initial_design`.
    pub starts: usize,
}

/// Limits a verified design is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTolerances {
    pub min_end_alpha: f64,
    pub max_temperature_c: f64,
    pub max_mean_lag_c: f64,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        VerifyTolerances {
            min_end_alpha: 0.84,
            max_temperature_c: 187.0,
            max_mean_lag_c: 21.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in card name or a path to a card JSON (relative to the config file).
    pub material: String,
    pub part_thickness_mm: f64,
    #[serde(default)]
    pub bounds: DesignBounds,
    pub initial_design: DesignVector,
    pub seed: u64,
    pub sim: SimOptions,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub adam: GradientConfig,
    pub nadam: GradientConfig,
    pub pso: PsoConfig,
    pub ga: GaConfig,
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub verify: VerifyTolerances,
}

/// A configuration after resolution, with where it came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub card: MaterialCard,
    /// Preset name or file path.
    pub source: String,
}

impl Resolved {
    pub fn problem(&self) -> SurrogateProblem {
        let mut p = SurrogateProblem::new(self.card.clone(), self.config.bounds.clone(), self.config.sim.part_thickness);
        p.alpha_initial = self.config.sim.alpha_initial;
        p.initial_temp_c = self.config.sim.initial_temp_c;
        p
    }
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn builtin_card(name: &str) -> Option<MaterialCard> {
    match name {
        "as4-8552-invar" => Some(MaterialCard::as4_8552_invar()),
        "test-card" => Some(MaterialCard::test_card()),
        _ => None,
    }
}

/// Loads `spec` (a preset name or a JSON path), applies `seed` and checks it.
pub fn resolve(spec: &str, seed: Option<u64>) -> Result<Resolved> {
    let (text, base, source) = match preset(spec) {
        Some(t) => (t.to_string(), None, spec.to_string()),
        None => {
            let path = PathBuf::from(spec);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let base = path.parent().map(Path::to_path_buf);
            (text, base, path.display().to_string())
        }
    };
    let mut config: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {source}"))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.apply_seed();
    config.sim.part_thickness = config.part_thickness_mm / 1000.0;
    let card = match builtin_card(&config.material) {
        Some(c) => c,
        None => {
            let p = PathBuf::from(&config.material);
            let p = match (&base, p.is_relative()) {
                (Some(b), true) => b.join(p),
                _ => p,
            };
            if !p.exists() {
                bail!(
                    "material card {} not found (built-in cards: {})",
                    p.display(),
                    BUILTIN_CARDS.join(", ")
                );
            }
            MaterialCard::load(&p)?
        }
    };
    let r = Resolved { config, card, source };
    r.validate()?;
    Ok(r)
}

impl RunConfig {
    fn apply_seed(&mut self) {
        self.train.seed = self.seed;
        self.pso.seed = self.seed;
        self.ga.seed = self.seed;
    }
}

impl Resolved {
    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if !(c.part_thickness_mm > 0.0) {
            bail!("part_thickness_mm must be positive");
        }
        self.problem().validate()?;
        c.train.validate()?;
        c.objective.validate()?;
        if !c.bounds.contains(&c.initial_design) {
            log::warn!(
                "initial design outside the bounds ({}); it will be clipped",
                c.bounds.violations(&c.initial_design).join(", ")
            );
        }
        Ok(())
    }
}
