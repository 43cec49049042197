use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// Every training hyperparameter. Config files must contain exactly these
/// keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_total: usize,
    pub burnin_fraction: f64,
    pub batch_size: usize,
    pub label_ratio: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// EMA decay of the teacher.
    pub m: f64,
    pub delta_pl: f64,
    pub delta_gate: f64,
    pub tau: f64,
    pub rho: f64,
    pub lambda_u: f64,
    pub lambda_itcl_sup: f64,
    pub lambda_itcl_unsup: f64,
    pub block_size: usize,
    pub use_ema_ssl: bool,
    pub use_posaug: bool,
    pub use_tpatchmix: bool,
    pub use_itcl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_total: 30,
            burnin_fraction: 0.2,
            batch_size: 32,
            label_ratio: 0.05,
            lr_max: 3e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            m: 0.999,
            delta_pl: 0.9,
            delta_gate: 0.5,
            tau: 0.07,
            rho: 0.5,
            lambda_u: 1.0,
            lambda_itcl_sup: 0.02,
            lambda_itcl_unsup: 0.1,
            block_size: 16,
            use_ema_ssl: true,
            use_posaug: true,
            use_tpatchmix: true,
            use_itcl: true,
        }
    }
}

/// Ablatable components, in ladder order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    EmaSsl,
    PosAug,
    TPatchMix,
    Itcl,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::EmaSsl,
        Component::PosAug,
        Component::TPatchMix,
        Component::Itcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::EmaSsl => "ema",
            Component::PosAug => "posaug",
            Component::TPatchMix => "tpatchmix",
            Component::Itcl => "itcl",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "ema" | "ema_ssl" | "ts_ema" | "t-s-ema" => Ok(Component::EmaSsl),
            "posaug" => Ok(Component::PosAug),
            "tpatchmix" | "t-patchmix" => Ok(Component::TPatchMix),
            "itcl" => Ok(Component::Itcl),
            other => Err(Error::Config(format!("unknown component {other:?}"))),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs_total == 0 {
            return fail("epochs_total must be positive".into());
        }
        if self.batch_size == 0 || self.block_size == 0 {
            return fail("batch_size and block_size must be positive".into());
        }
        let positive = [
            ("label_ratio", self.label_ratio),
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lr_min > self.lr_max {
            return fail("lr_min exceeds lr_max".into());
        }
        let unit = [
            ("burnin_fraction", self.burnin_fraction),
            ("label_ratio", self.label_ratio),
            ("m", self.m),
            ("delta_pl", self.delta_pl),
            ("rho", self.rho),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("delta_gate", self.delta_gate),
            ("lambda_u", self.lambda_u),
            ("lambda_itcl_sup", self.lambda_itcl_sup),
            ("lambda_itcl_unsup", self.lambda_itcl_unsup),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        Ok(())
    }

    /// Number of burn-in epochs, `round(burnin_fraction * epochs_total)`.
    pub fn burnin_epochs(&self) -> usize {
        ((self.burnin_fraction * self.epochs_total as f64).round() as usize).min(self.epochs_total)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_u: self.lambda_u,
            lambda_itcl_sup: self.lambda_itcl_sup,
            lambda_itcl_unsup: self.lambda_itcl_unsup,
        }
    }

    pub fn enabled(&self, c: Component) -> bool {
        match c {
            Component::EmaSsl => self.use_ema_ssl,
            Component::PosAug => self.use_posaug,
            Component::TPatchMix => self.use_tpatchmix,
            Component::Itcl => self.use_itcl,
        }
    }

    pub fn set(&mut self, c: Component, on: bool) {
        match c {
            Component::EmaSsl => self.use_ema_ssl = on,
            Component::PosAug => self.use_posaug = on,
            Component::TPatchMix => self.use_tpatchmix = on,
            Component::Itcl => self.use_itcl = on,
        }
    }

    /// Disables every listed component (comma separated; `all` disables all
    /// four).
    pub fn disable(&mut self, list: &str) -> Result<()> {
        for name in list.split(',').filter(|s| !s.trim().is_empty()) {
            if name.trim().eq_ignore_ascii_case("all") {
                Component::ALL.iter().for_each(|&c| self.set(c, false));
            } else {
                self.set(Component::parse(name)?, false);
            }
        }
        Ok(())
    }
}

/// The cumulative ablation ladder: Baseline, then each component switched
/// on in turn. Everything else comes from `base`.
pub fn ablation_ladder(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let names = ["Baseline", "+T-S EMA", "+PosAug", "+T-PatchMix", "+ITCL"];
    (0..=Component::ALL.len())
        .map(|k| {
            let mut c = base.clone();
            for (i, &comp) in Component::ALL.iter().enumerate() {
                c.set(comp, i < k);
            }
            (names[k], c)
        })
        .collect()
}
