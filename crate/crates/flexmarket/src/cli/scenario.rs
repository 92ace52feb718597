use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{self, ConsumerProfile, GameConstants, StepSizes};
use crate::gne::RunOptions;
use crate::grid::{
    assemble_feasible_set, Attachments, Bus, Direction, DistributionNetwork, FeasibleSet, Line,
    MarketSetup, PowerBase,
};

/// Grid of a seeded efficiency / convergence campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n_values: Vec<usize>,
    pub delta_values: Vec<f64>,
    /// Lipschitz constant used for every cell; defaults to the largest
    /// drawn curvature.
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub network_enabled: bool,
    /// Stopping tolerance of every cell.
    #[serde(default = "default_sweep_tol")]
    pub stop_tol: f64,
    /// Flexibility requested in every cell; defaults to the scenario's.
    #[serde(default)]
    pub x_tot: Option<f64>,
    /// Caps are drawn as `U[lo, hi] * x_tot / N`.
    #[serde(default = "default_cap_range")]
    pub x_hat_range: [f64; 2],
}

fn default_cap_range() -> [f64; 2] {
    [1.0, 2.0]
}

fn default_sweep_tol() -> f64 {
    1e-5
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            n_values: vec![5, 10, 20, 40],
            delta_values: vec![0.25, 0.5, 0.75],
            kappa: Some(0.005),
            network_enabled: false,
            stop_tol: default_sweep_tol(),
            x_tot: None,
            x_hat_range: default_cap_range(),
        }
    }
}

/// Contents of `scenario.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketScenario {
    /// Flexibility the BRP needs, kWh.
    pub x_tot: f64,
    pub direction: Direction,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default = "default_tol")]
    pub stop_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub network_enabled: bool,
    #[serde(default = "default_one")]
    pub interval_hours: f64,
    #[serde(default = "default_one")]
    pub base_mva: f64,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub initial_beta: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_gamma: Option<Vec<f64>>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_tol() -> f64 {
    1e-5
}
fn default_max_iter() -> usize {
    100_000
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}

impl MarketScenario {
    pub fn base(&self) -> PowerBase {
        PowerBase {
            base_mva: self.base_mva,
            interval_hours: self.interval_hours,
        }
    }

    /// Field-level checks that do not need the network or the consumers.
    pub fn validate(&self) -> Result<()> {
        if !(self.x_tot > 0.0 && self.x_tot.is_finite()) {
            return Err(Error::Schema(format!("x_tot must be positive, got {}", self.x_tot)));
        }
        match (self.alpha, self.delta) {
            (Some(_), Some(_)) => {
                return Err(Error::Schema("give exactly one of alpha and delta, not both".into()))
            }
            (None, None) => return Err(Error::Schema("one of alpha and delta is required".into())),
            (Some(a), None) if !(a > 0.0 && a.is_finite()) => {
                return Err(Error::GameCondition(format!("alpha must be positive, got {a}")))
            }
            (None, Some(d)) if !(d > 0.0 && d < 1.0) => {
                return Err(Error::GameCondition(format!("delta must lie in (0, 1), got {d}")))
            }
            _ => {}
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::Schema(format!("stop_tol must be positive, got {}", self.stop_tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Schema("max_iter must be at least 1".into()));
        }
        if self.rho.is_some() != self.nu.is_some() {
            return Err(Error::Schema("rho and nu must be given together".into()));
        }
        self.base().validate()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRow {
    id: usize,
    vmin: f64,
    vmax: f64,
    theta_min: f64,
    theta_max: f64,
    q_injection: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRow {
    from: usize,
    to: usize,
    u: f64,
    w: f64,
    z: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsumerRow {
    id: u32,
    bus: usize,
    active: bool,
    a: f64,
    b_lin: f64,
    x_hat: f64,
    d: f64,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

pub fn load_network(dir: &Path) -> Result<DistributionNetwork> {
    let buses = read_rows::<BusRow>(&dir.join("buses.csv"))?
        .into_iter()
        .map(|r| Bus {
            id: r.id,
            vmin: r.vmin,
            vmax: r.vmax,
            theta_min: r.theta_min,
            theta_max: r.theta_max,
            reactive_injection: r.q_injection,
        })
        .collect();
    let lines = read_rows::<LineRow>(&dir.join("lines.csv"))?
        .into_iter()
        .map(|r| Line {
            from: r.from,
            to: r.to,
            conductance: r.u,
            susceptance: r.w,
            capacity: r.z,
        })
        .collect();
    DistributionNetwork::new(buses, lines)
}

pub fn load_consumers(dir: &Path) -> Result<Vec<ConsumerProfile>> {
    let rows = read_rows::<ConsumerRow>(&dir.join("consumers.csv"))?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        if !ids.insert(r.id) {
            return Err(Error::Schema(format!("duplicate consumer id {}", r.id)));
        }
        let p = if r.active {
            ConsumerProfile {
                d: r.d,
                ..ConsumerProfile::active(r.id, r.bus, r.a, r.b_lin, r.x_hat)
            }
        } else {
            ConsumerProfile::passive(r.id, r.bus, r.d)
        };
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

/// A fully validated scenario directory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dir: PathBuf,
    pub config: MarketScenario,
    pub network: DistributionNetwork,
    /// Active and passive consumers as listed in `consumers.csv`.
    pub consumers: Vec<ConsumerProfile>,
}

impl Scenario {
    /// Reads and cross-checks `scenario.json`, `buses.csv`, `lines.csv` and
    /// `consumers.csv` in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let config: MarketScenario = serde_json::from_reader(open(&dir.join("scenario.json"))?)
            .map_err(|e| Error::Schema(format!("scenario.json: {e}")))?;
        config.validate()?;
        let network = load_network(&dir)?;
        let consumers = load_consumers(&dir)?;
        let scenario = Self {
            dir,
            config,
            network,
            consumers,
        };
        Attachments::new(&scenario.network, &scenario.consumers)?;
        let n = scenario.active_profiles().len();
        if n < 2 {
            return Err(Error::GameCondition(format!("need at least two active consumers, got {n}")));
        }
        for (name, v) in [("initial_beta", &scenario.config.initial_beta), ("initial_gamma", &scenario.config.initial_gamma)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Schema(format!("{name} has {} entries for {n} active consumers", v.len())));
                }
            }
        }
        if !scenario.config.network_enabled {
            scenario.check_caps()?;
        }
        let constants = scenario.constants()?;
        if let Some(steps) = scenario.run_options(None, None).steps {
            game::check_step_sizes(&constants, &steps)?;
        }
        Ok(scenario)
    }

    /// Active consumers in bid-vector order.
    pub fn active_profiles(&self) -> Vec<ConsumerProfile> {
        self.consumers.iter().filter(|c| c.active).cloned().collect()
    }

    pub fn check_caps(&self) -> Result<()> {
        let caps: f64 = self.active_profiles().iter().map(|p| p.x_hat).sum();
        if caps < self.config.x_tot {
            return Err(Error::Infeasible {
                block: format!("flexibility caps: sum of x_hat = {caps} is below x_tot = {}", self.config.x_tot),
            });
        }
        Ok(())
    }

    /// The slope of the supply functions, from `alpha` or from `delta`.
    pub fn alpha(&self) -> Result<f64> {
        let profiles = self.active_profiles();
        match (self.config.alpha, self.config.delta) {
            (Some(a), _) => Ok(a),
            (None, Some(d)) => {
                let kappa = self.config.kappa.unwrap_or_else(|| game::curvature_bound(&profiles));
                game::alpha_from_delta(d, kappa, profiles.len())
            }
            (None, None) => Err(Error::Schema("one of alpha and delta is required".into())),
        }
    }

    pub fn constants(&self) -> Result<GameConstants> {
        GameConstants::new(&self.active_profiles(), self.alpha()?, self.config.kappa)
    }

    pub fn setup(&self, network_enabled: bool) -> MarketSetup {
        MarketSetup {
            x_tot: self.config.x_tot,
            direction: self.config.direction,
            base: self.config.base(),
            network_enabled,
        }
    }

    pub fn feasible_set(&self, network_enabled: bool) -> Result<FeasibleSet> {
        assemble_feasible_set(&self.network, &self.consumers, &self.setup(network_enabled))
    }

    /// Iteration options from the scenario, with optional overrides.
    pub fn run_options(&self, tol: Option<f64>, max_iter: Option<usize>) -> RunOptions {
        let c = &self.config;
        RunOptions {
            stop_tol: tol.unwrap_or(c.stop_tol),
            max_iter: max_iter.unwrap_or(c.max_iter),
            steps: c.rho.zip(c.nu).map(|(rho, nu)| StepSizes { rho, nu }),
            kappa: c.kappa,
            initial_beta: c.initial_beta.clone(),
            initial_gamma: c.initial_gamma.clone(),
            message_history: 0,
        }
    }
}
