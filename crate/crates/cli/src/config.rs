use std::collections::BTreeSet;
use std::path::Path;

use merton_hjb::dgm::TrainConfig;
use merton_hjb::fdm::Grid3D;
use merton_hjb::model::{ConstantModel, HestonModel, Market, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Heston,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct Selection {
    model: ModelKind,
    mu_const: f64,
    sigma2_const: f64,
    window: Option<[f64; 4]>,
    times: Option<Vec<f64>>,
}

impl Default for Selection {
    fn default() -> Self {
        Self {
            model: ModelKind::Heston,
            mu_const: 0.0,
            sigma2_const: 0.04,
            window: None,
            times: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdmConfig {
    pub nt: usize,
    pub n1: usize,
    pub n2: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            nt: 40,
            n1: 40,
            n2: 40,
            newton_tol: 1e-10,
            newton_max_iter: 20,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "theta1", "theta2", "k1", "k2", "a11", "a12", "a21", "a22", "sigma", "rho1", "rho2", "r", "p", "T",
    "y1_lo", "y1_hi", "y2_lo", "y2_hi", "y2_floor",
];
const SELECTION_KEYS: &[&str] = &["model", "mu_const", "sigma2_const", "window", "times"];
const TRAIN_KEYS: &[&str] = &[
    "n_hidden", "n_interior", "n_terminal", "resample_every", "inner_steps", "lr_init", "lr_decay",
    "lr_decay_every", "adam_beta1", "adam_beta2", "adam_eps", "max_outer_steps", "param_delta_tol",
    "optimizer", "seed",
];
const FDM_KEYS: &[&str] = &["nt", "n1", "n2", "newton_tol", "newton_max_iter"];

/// Flat key-value run configuration: model keys, training keys, grid keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub kind: ModelKind,
    pub mu_const: f64,
    pub sigma2_const: f64,
    pub train: TrainConfig,
    pub fdm: FdmConfig,
    window: Option<[f64; 4]>,
    times: Option<Vec<f64>>,
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = parse(text)?;
        let known: BTreeSet<&str> = MODEL_KEYS
            .iter()
            .chain(SELECTION_KEYS)
            .chain(TRAIN_KEYS)
            .chain(FDM_KEYS)
            .copied()
            .collect();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(CliError::Usage(format!("config: unknown key `{k}`")));
        }
        let model = ModelConfig::from_toml_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let sel: Selection = parse(text)?;
        let train: TrainConfig = parse(text)?;
        train.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let fdm: FdmConfig = parse(text)?;
        let cfg = Self {
            model,
            kind: sel.model,
            mu_const: sel.mu_const,
            sigma2_const: sel.sigma2_const,
            train,
            fdm,
            window: sel.window,
            times: sel.times,
        };
        cfg.market()?;
        cfg.grid()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration, overrides included, as sorted flat
    /// key-value text. Parses back to an equal `RunConfig`.
    pub fn snapshot(&self) -> String {
        let sel = Selection {
            model: self.kind,
            mu_const: self.mu_const,
            sigma2_const: self.sigma2_const,
            window: self.window,
            times: self.times.clone(),
        };
        let mut table = toml::Table::new();
        let parts = [
            toml::Table::try_from(self.model.params),
            toml::Table::try_from(self.model.domain),
            toml::Table::try_from(sel),
            toml::Table::try_from(&self.train),
            toml::Table::try_from(&self.fdm),
        ];
        for part in parts {
            table.extend(part.expect("plain config structs serialize to a table"));
        }
        toml::to_string(&table).expect("a flat table serializes")
    }

    pub fn market(&self) -> Result<Box<dyn Market>, CliError> {
        let ps = &self.model.params;
        let m: Box<dyn Market> = match self.kind {
            ModelKind::Heston => Box::new(HestonModel::from_config(&self.model)?),
            ModelKind::Constant => Box::new(ConstantModel::new(
                ps.p,
                ps.r,
                self.mu_const,
                self.sigma2_const,
                ps.horizon,
            )?),
        };
        Ok(m)
    }

    pub fn grid(&self) -> Result<Grid3D, CliError> {
        Ok(Grid3D::new(self.fdm.nt, self.fdm.n1, self.fdm.n2, &self.model.domain)?)
    }

    /// Plot window `[y1_lo, y1_hi, y2_lo, y2_hi]`: `[0,1]^2` for small `p`,
    /// `[0,5]^2` otherwise, unless configured.
    pub fn window(&self) -> [f64; 4] {
        self.window.unwrap_or(if self.model.params.p < 0.25 {
            [0.0, 1.0, 0.0, 1.0]
        } else {
            [0.0, 5.0, 0.0, 5.0]
        })
    }

    pub fn set_window(&mut self, w: [f64; 4]) {
        self.window = Some(w);
    }

    /// Surface times as fractions of `T`.
    pub fn time_fractions(&self) -> Vec<f64> {
        self.times.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75])
    }

    pub fn set_time_fractions(&mut self, times: Vec<f64>) {
        self.times = Some(times);
    }

    pub fn horizon(&self) -> f64 {
        self.model.params.horizon
    }
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("`{x}` is not a number")))
        })
        .collect()
}

pub fn parse_window(s: &str) -> Result<[f64; 4], CliError> {
    let v = parse_list(s)?;
    let w: [f64; 4] = v
        .try_into()
        .map_err(|_| CliError::Usage("window needs y1_lo,y1_hi,y2_lo,y2_hi".into()))?;
    if !(w[0] < w[1] && w[2] < w[3]) {
        return Err(CliError::Usage("window bounds must be increasing".into()));
    }
    Ok(w)
}

pub const REFERENCE_P0005: &str = include_str!("../configs/reference_p0005.toml");
pub const REFERENCE_P05: &str = include_str!("../configs/reference_p05.toml");
pub const CONSTANT: &str = include_str!("../configs/constant.toml");
