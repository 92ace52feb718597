//! Distribution network model.
//!
//! Buses and directed lines, the signed incidence matrix, the linear lossless
//! power-flow relations and the DSO security limits. [`assemble_feasible_set`]
//! turns all of this into the constraint system describing the set of
//! allocations the DSO accepts.
//!
//! Conventions: bus ids are 1-based and contiguous, bus 1 is the slack bus
//! (`v = 1`, `theta = 0`, free slack injections). Network quantities are
//! per-unit; consumer energies are in kWh and converted with a [`PowerBase`].

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::ConsumerProfile;

/// Id of the slack bus.
pub const SLACK_BUS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub vmin: f64,
    pub vmax: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Fixed net reactive injection `q_b` in per-unit.
    pub reactive_injection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Conductance `u` (per-unit).
    pub conductance: f64,
    /// Susceptance `w` (per-unit).
    pub susceptance: f64,
    /// Apparent-power limit `z` (per-unit).
    pub capacity: f64,
}

/// Whether the distribution network is short of energy (consumers inject) or
/// has too much of it (consumers withdraw).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Deficit,
    Surplus,
}

impl Direction {
    /// Sign with which flexibility enters the nodal active injection.
    pub fn injection_sign(self) -> f64 {
        match self {
            Direction::Deficit => 1.0,
            Direction::Surplus => -1.0,
        }
    }
}

/// Conversion between consumer energies (kWh over a market interval) and
/// per-unit power on the network base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBase {
    pub base_mva: f64,
    pub interval_hours: f64,
}

impl Default for PowerBase {
    fn default() -> Self {
        Self {
            base_mva: 1.0,
            interval_hours: 1.0,
        }
    }
}

impl PowerBase {
    /// Per-unit power for one kWh delivered over the interval.
    pub fn pu_per_kwh(&self) -> f64 {
        1.0 / (self.interval_hours * 1000.0 * self.base_mva)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            return Err(Error::Schema(format!("base_mva must be positive, got {}", self.base_mva)));
        }
        if !(self.interval_hours > 0.0 && self.interval_hours.is_finite()) {
            return Err(Error::Schema(format!(
                "interval_hours must be positive, got {}",
                self.interval_hours
            )));
        }
        Ok(())
    }
}

/// A validated radial or meshed distribution network.
#[derive(Debug, Clone)]
pub struct DistributionNetwork {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    incidence: DMatrix<f64>,
}

impl DistributionNetwork {
    /// Validates buses and lines and builds the incidence matrix.
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        if buses.len() < 2 {
            return Err(Error::Structure("a network needs at least two buses".into()));
        }
        for (k, bus) in buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(Error::Structure(format!(
                    "bus ids must be 1..B in order; position {} holds id {}",
                    k + 1,
                    bus.id
                )));
            }
            if !(bus.vmin < bus.vmax) {
                return Err(Error::Structure(format!("bus {}: vmin must be below vmax", bus.id)));
            }
            if !(bus.theta_min < bus.theta_max) {
                return Err(Error::Structure(format!(
                    "bus {}: theta_min must be below theta_max",
                    bus.id
                )));
            }
            if bus.id == SLACK_BUS
                && !(bus.vmin <= 1.0 && 1.0 <= bus.vmax && bus.theta_min <= 0.0 && 0.0 <= bus.theta_max)
            {
                return Err(Error::Structure(
                    "slack bus limits must admit v = 1 and theta = 0".into(),
                ));
            }
        }
        if lines.is_empty() {
            return Err(Error::Structure("a network needs at least one line".into()));
        }
        for line in &lines {
            if !(line.capacity > 0.0) {
                return Err(Error::Structure(format!(
                    "line ({}, {}) must have positive capacity",
                    line.from, line.to
                )));
            }
            if line.conductance == 0.0 && line.susceptance == 0.0 {
                return Err(Error::Structure(format!(
                    "line ({}, {}) has zero conductance and susceptance",
                    line.from, line.to
                )));
            }
        }
        let incidence = build_incidence(buses.len(), &lines)?;
        check_connected(buses.len(), &lines)?;
        Ok(Self {
            buses,
            lines,
            incidence,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// `L x B` signed incidence matrix.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }
}

/// Builds the `L x B` incidence matrix: `+1` where a line leaves a bus, `-1`
/// where it enters, `0` elsewhere.
pub fn build_incidence(bus_count: usize, lines: &[Line]) -> Result<DMatrix<f64>> {
    let mut seen = HashSet::new();
    let mut e = DMatrix::zeros(lines.len(), bus_count);
    for (l, line) in lines.iter().enumerate() {
        for id in [line.from, line.to] {
            if id == 0 || id > bus_count {
                return Err(Error::Reference(format!(
                    "line ({}, {}) references unknown bus {id}",
                    line.from, line.to
                )));
            }
        }
        if line.from == line.to {
            return Err(Error::Structure(format!("self-loop at bus {}", line.from)));
        }
        if !seen.insert((line.from, line.to)) {
            return Err(Error::Structure(format!(
                "duplicate line ({}, {})",
                line.from, line.to
            )));
        }
        e[(l, line.from - 1)] = 1.0;
        e[(l, line.to - 1)] = -1.0;
    }
    Ok(e)
}

fn check_connected(bus_count: usize, lines: &[Line]) -> Result<()> {
    let mut adj = vec![Vec::new(); bus_count];
    for line in lines {
        adj[line.from - 1].push(line.to - 1);
        adj[line.to - 1].push(line.from - 1);
    }
    let mut visited = vec![false; bus_count];
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(b) = queue.pop_front() {
        for &s in &adj[b] {
            if !visited[s] {
                visited[s] = true;
                queue.push_back(s);
            }
        }
    }
    match visited.iter().position(|v| !v) {
        Some(b) => Err(Error::Structure(format!(
            "bus {} is not connected to the slack bus",
            b + 1
        ))),
        None => Ok(()),
    }
}

/// Active and reactive line flows of the linear lossless model for given bus
/// angles and voltage magnitudes.
///
/// Callers normally pass states with `theta[0] = 0` and `v[0] = 1`; the map
/// itself is linear and does not enforce the slack convention.
pub fn line_flows(
    network: &DistributionNetwork,
    theta: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = network.bus_count();
    if theta.len() != b {
        return Err(Error::dim("theta", b, theta.len()));
    }
    if v.len() != b {
        return Err(Error::dim("v", b, v.len()));
    }
    let flows = network
        .lines
        .iter()
        .map(|line| {
            let dtheta = theta[line.from - 1] - theta[line.to - 1];
            let dv = v[line.from - 1] - v[line.to - 1];
            let p = -line.susceptance * dtheta + line.conductance * dv;
            let q = -line.conductance * dtheta - line.susceptance * dv;
            (p, q)
        })
        .unzip();
    Ok(flows)
}

/// Consumers grouped by the bus they are attached to.
#[derive(Debug, Clone, Default)]
pub struct Attachments {
    /// bus id -> indices (into the consumer slice) of active consumers.
    pub active: BTreeMap<usize, Vec<usize>>,
    /// bus id -> indices of passive consumers.
    pub passive: BTreeMap<usize, Vec<usize>>,
    /// For each active consumer in order, its index in the consumer slice.
    pub active_order: Vec<usize>,
}

impl Attachments {
    pub fn new(network: &DistributionNetwork, consumers: &[ConsumerProfile]) -> Result<Self> {
        let mut out = Attachments::default();
        for (k, c) in consumers.iter().enumerate() {
            if c.bus_id == 0 || c.bus_id > network.bus_count() {
                return Err(Error::Reference(format!(
                    "consumer {} is attached to unknown bus {}",
                    c.id, c.bus_id
                )));
            }
            if c.bus_id == SLACK_BUS {
                return Err(Error::Structure(format!(
                    "consumer {} is attached to the slack bus",
                    c.id
                )));
            }
            if c.active {
                out.active.entry(c.bus_id).or_default().push(k);
                out.active_order.push(k);
            } else {
                out.passive.entry(c.bus_id).or_default().push(k);
            }
        }
        Ok(out)
    }

    /// Number of distinct buses carrying at least one consumer.
    pub fn load_bus_count(&self) -> usize {
        self.active
            .keys()
            .chain(self.passive.keys())
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Net active injections `p_b` for buses `2..=B`, in the consumers' energy unit.
///
/// `x` holds the flexibility of the active consumers in the order they appear
/// in `consumers`. Flexibility reduces the net load in a deficit (consumers
/// inject) and increases it in a surplus (consumers withdraw).
pub fn nodal_injections(
    network: &DistributionNetwork,
    consumers: &[ConsumerProfile],
    x: &[f64],
    direction: Direction,
) -> Result<Vec<f64>> {
    let att = Attachments::new(network, consumers)?;
    if x.len() != att.active_order.len() {
        return Err(Error::dim("flexibility vector", att.active_order.len(), x.len()));
    }
    if let Some(bad) = x.iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!("flexibility must be nonnegative, got {bad}")));
    }
    Ok(injections_unchecked(network.bus_count(), consumers, &att, x, direction))
}

fn injections_unchecked(
    bus_count: usize,
    consumers: &[ConsumerProfile],
    att: &Attachments,
    x: &[f64],
    direction: Direction,
) -> Vec<f64> {
    let sign = direction.injection_sign();
    let mut p = vec![0.0; bus_count - 1];
    for c in consumers {
        p[c.bus_id - 2] -= c.d;
    }
    for (n, &k) in att.active_order.iter().enumerate() {
        p[consumers[k].bus_id - 2] += sign * x[n];
    }
    p
}

/// Steady state of the linear lossless model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowState {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    pub p_lines: Vec<f64>,
    pub q_lines: Vec<f64>,
    pub p_slack: f64,
    pub q_slack: f64,
}

impl PowerFlowState {
    /// Bus injections `E^T P_L` and `E^T Q_L` for all buses (slack included).
    pub fn bus_injections(&self, network: &DistributionNetwork) -> (Vec<f64>, Vec<f64>) {
        let et = network.incidence().transpose();
        let p = &et * DVector::from_column_slice(&self.p_lines);
        let q = &et * DVector::from_column_slice(&self.q_lines);
        (p.as_slice().to_vec(), q.as_slice().to_vec())
    }

    /// Line loading `sqrt(p^2 + q^2) / z` per line.
    pub fn line_loading(&self, network: &DistributionNetwork) -> Vec<f64> {
        network
            .lines()
            .iter()
            .zip(self.p_lines.iter().zip(&self.q_lines))
            .map(|(line, (p, q))| p.hypot(*q) / line.capacity)
            .collect()
    }

    /// Largest violation of the voltage, angle and line limits (0 when secure).
    pub fn max_violation(&self, network: &DistributionNetwork) -> f64 {
        let mut worst: f64 = 0.0;
        for (bus, (th, v)) in network.buses().iter().zip(self.theta.iter().zip(&self.v)) {
            worst = worst
                .max(bus.vmin - v)
                .max(v - bus.vmax)
                .max(bus.theta_min - th)
                .max(th - bus.theta_max);
        }
        for (line, (p, q)) in network.lines().iter().zip(self.p_lines.iter().zip(&self.q_lines)) {
            worst = worst.max(p.hypot(*q) - line.capacity);
        }
        worst
    }
}

/// Solves the linear lossless power flow for per-unit injections at buses
/// `2..=B` with the slack bus held at `1∠0`.
pub fn power_flow(
    network: &DistributionNetwork,
    p_injection: &[f64],
    q_injection: &[f64],
) -> Result<PowerFlowState> {
    let nb = network.bus_count();
    if p_injection.len() != nb - 1 {
        return Err(Error::dim("active injections", nb - 1, p_injection.len()));
    }
    if q_injection.len() != nb - 1 {
        return Err(Error::dim("reactive injections", nb - 1, q_injection.len()));
    }
    let e = network.incidence();
    let w = DMatrix::from_diagonal(&DVector::from_iterator(
        network.line_count(),
        network.lines.iter().map(|l| l.susceptance),
    ));
    let u = DMatrix::from_diagonal(&DVector::from_iterator(
        network.line_count(),
        network.lines.iter().map(|l| l.conductance),
    ));
    let lw = e.transpose() * &w * e;
    let lu = e.transpose() * &u * e;

    // Unknowns: theta_2..B then v_2..B.
    let m = nb - 1;
    let mut sys = DMatrix::zeros(2 * m, 2 * m);
    let mut rhs = DVector::zeros(2 * m);
    for r in 0..m {
        let b = r + 1;
        for c in 0..m {
            let s = c + 1;
            sys[(r, c)] = -lw[(b, s)];
            sys[(r, m + c)] = lu[(b, s)];
            sys[(m + r, c)] = -lu[(b, s)];
            sys[(m + r, m + c)] = -lw[(b, s)];
        }
        // Move the slack voltage (v_1 = 1) to the right-hand side.
        rhs[r] = p_injection[r] - lu[(b, 0)];
        rhs[m + r] = q_injection[r] + lw[(b, 0)];
    }
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Structure("power-flow equations are singular".into()))?;
    let mut theta = vec![0.0; nb];
    let mut v = vec![1.0; nb];
    for r in 0..m {
        theta[r + 1] = sol[r];
        v[r + 1] = sol[m + r];
    }
    let (p_lines, q_lines) = line_flows(network, &theta, &v)?;
    let mut state = PowerFlowState {
        theta,
        v,
        p_lines,
        q_lines,
        p_slack: 0.0,
        q_slack: 0.0,
    };
    let (pb, qb) = state.bus_injections(network);
    state.p_slack = pb[0];
    state.q_slack = qb[0];
    Ok(state)
}

/// Network state produced by a flexibility allocation of the active consumers.
pub fn state_for_allocation(
    network: &DistributionNetwork,
    consumers: &[ConsumerProfile],
    x: &[f64],
    direction: Direction,
    base: PowerBase,
) -> Result<PowerFlowState> {
    let att = Attachments::new(network, consumers)?;
    if x.len() != att.active_order.len() {
        return Err(Error::dim("flexibility vector", att.active_order.len(), x.len()));
    }
    let scale = base.pu_per_kwh();
    let p: Vec<f64> = injections_unchecked(network.bus_count(), consumers, &att, x, direction)
        .into_iter()
        .map(|e| e * scale)
        .collect();
    let q: Vec<f64> = network.buses()[1..]
        .iter()
        .map(|b| b.reactive_injection)
        .collect();
    power_flow(network, &p, &q)
}

/// Where each group of variables lives in the stacked decision vector of a
/// [`FeasibleSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    /// Allocated flexibility of the active consumers (kWh).
    pub alloc: Range<usize>,
    pub theta: Range<usize>,
    pub v: Range<usize>,
    pub p_lines: Range<usize>,
    pub q_lines: Range<usize>,
    /// Slack injections `(p_1, q_1)`, present only with the network block.
    pub slack: Option<(usize, usize)>,
    pub len: usize,
}

/// A disk constraint `y_i^2 + y_j^2 <= radius^2` on two decision variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskConstraint {
    pub i: usize,
    pub j: usize,
    pub radius: f64,
}

/// Constraint system describing the DSO-feasible allocations.
///
/// Decision vector: `[x, theta, v, P_L, Q_L, p_1, q_1]` (only `x` when the
/// network block is disabled). The auxiliary network variables are existential:
/// an allocation is feasible when some state satisfies all rows.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    pub layout: VariableLayout,
    /// Flow definitions (2L rows) followed by active and reactive nodal
    /// balance (2B rows, slack rows included).
    pub network_eq: DMatrix<f64>,
    pub network_rhs: DVector<f64>,
    /// Total flexibility `x_tot`; the balance row is `sum(x) = x_tot`.
    pub x_tot: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub disks: Vec<DiskConstraint>,
    /// Bus id of each active consumer.
    pub consumer_bus: Vec<usize>,
}

impl FeasibleSet {
    pub fn active_count(&self) -> usize {
        self.layout.alloc.len()
    }

    pub fn has_network(&self) -> bool {
        self.layout.slack.is_some()
    }

    /// All equality rows: the network block followed by the balance row.
    pub fn equality_block(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.network_eq.nrows();
        let n = self.layout.len;
        let mut a = DMatrix::zeros(rows + 1, n);
        let mut b = DVector::zeros(rows + 1);
        a.rows_mut(0, rows).copy_from(&self.network_eq);
        b.rows_mut(0, rows).copy_from(&self.network_rhs);
        for k in self.layout.alloc.clone() {
            a[(rows, k)] = 1.0;
        }
        b[rows] = self.x_tot;
        (a, b)
    }

    /// Nonnegative allocations adding up to `x_tot`, with no network rows.
    pub fn without_network(consumer_bus: Vec<usize>, x_tot: f64) -> Self {
        let n = consumer_bus.len();
        let layout = VariableLayout {
            alloc: 0..n,
            theta: n..n,
            v: n..n,
            p_lines: n..n,
            q_lines: n..n,
            slack: None,
            len: n,
        };
        FeasibleSet {
            layout,
            network_eq: DMatrix::zeros(0, n),
            network_rhs: DVector::zeros(0),
            x_tot,
            lower: DVector::zeros(n),
            upper: DVector::from_element(n, f64::INFINITY),
            disks: Vec::new(),
            consumer_bus,
        }
    }

    /// Same set with the per-consumer caps `x <= x_hat` added to the box block.
    pub fn with_caps(&self, caps: &[f64]) -> Result<Self> {
        if caps.len() != self.active_count() {
            return Err(Error::dim("flexibility caps", self.active_count(), caps.len()));
        }
        let mut out = self.clone();
        for (k, cap) in self.layout.alloc.clone().zip(caps) {
            out.upper[k] = *cap;
        }
        Ok(out)
    }
}

/// Options of [`assemble_feasible_set`].
#[derive(Debug, Clone, Copy)]
pub struct MarketSetup {
    pub x_tot: f64,
    pub direction: Direction,
    pub base: PowerBase,
    /// When false only nonnegativity and the balance row remain.
    pub network_enabled: bool,
}

/// Assembles the DSO-feasible set: linear lossless flows, nodal balance with
/// the flexibility of the attached consumers, voltage and angle boxes,
/// nonnegative allocations and one disk per line.
pub fn assemble_feasible_set(
    network: &DistributionNetwork,
    consumers: &[ConsumerProfile],
    setup: &MarketSetup,
) -> Result<FeasibleSet> {
    setup.base.validate()?;
    let att = Attachments::new(network, consumers)?;
    let n = att.active_order.len();
    let consumer_bus: Vec<usize> = att.active_order.iter().map(|&k| consumers[k].bus_id).collect();

    if !setup.network_enabled {
        return Ok(FeasibleSet::without_network(consumer_bus, setup.x_tot));
    }

    let nb = network.bus_count();
    let nl = network.line_count();
    let theta = n..n + nb;
    let v = theta.end..theta.end + nb;
    let p_lines = v.end..v.end + nl;
    let q_lines = p_lines.end..p_lines.end + nl;
    let p1 = q_lines.end;
    let q1 = p1 + 1;
    let len = q1 + 1;
    let layout = VariableLayout {
        alloc: 0..n,
        theta: theta.clone(),
        v: v.clone(),
        p_lines: p_lines.clone(),
        q_lines: q_lines.clone(),
        slack: Some((p1, q1)),
        len,
    };

    let e = network.incidence();
    let rows = 2 * nl + 2 * nb;
    let mut a = DMatrix::zeros(rows, len);
    let mut rhs = DVector::zeros(rows);

    // P_L + W E theta - U E v = 0 and Q_L + U E theta + W E v = 0.
    for (l, line) in network.lines().iter().enumerate() {
        let (f, t) = (line.from - 1, line.to - 1);
        a[(l, p_lines.start + l)] = 1.0;
        a[(l, theta.start + f)] += line.susceptance;
        a[(l, theta.start + t)] -= line.susceptance;
        a[(l, v.start + f)] -= line.conductance;
        a[(l, v.start + t)] += line.conductance;

        let r = nl + l;
        a[(r, q_lines.start + l)] = 1.0;
        a[(r, theta.start + f)] += line.conductance;
        a[(r, theta.start + t)] -= line.conductance;
        a[(r, v.start + f)] += line.susceptance;
        a[(r, v.start + t)] -= line.susceptance;
    }

    // E^T P_L = P_B and E^T Q_L = Q_B, one row per bus.
    let scale = setup.base.pu_per_kwh();
    let sign = setup.direction.injection_sign();
    let p_row = 2 * nl;
    let q_row = 2 * nl + nb;
    for l in 0..nl {
        for b in 0..nb {
            let coef = e[(l, b)];
            if coef != 0.0 {
                a[(p_row + b, p_lines.start + l)] = coef;
                a[(q_row + b, q_lines.start + l)] = coef;
            }
        }
    }
    a[(p_row, p1)] = -1.0;
    a[(q_row, q1)] = -1.0;
    for c in consumers {
        rhs[p_row + c.bus_id - 1] -= scale * c.d;
    }
    for (k, &bus) in consumer_bus.iter().enumerate() {
        a[(p_row + bus - 1, k)] -= sign * scale;
    }
    for (b, bus) in network.buses().iter().enumerate().skip(1) {
        rhs[q_row + b] = bus.reactive_injection;
    }

    let mut lower = DVector::from_element(len, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(len, f64::INFINITY);
    for k in 0..n {
        lower[k] = 0.0;
    }
    for (b, bus) in network.buses().iter().enumerate() {
        if b == SLACK_BUS - 1 {
            lower[theta.start + b] = 0.0;
            upper[theta.start + b] = 0.0;
            lower[v.start + b] = 1.0;
            upper[v.start + b] = 1.0;
        } else {
            lower[theta.start + b] = bus.theta_min;
            upper[theta.start + b] = bus.theta_max;
            lower[v.start + b] = bus.vmin;
            upper[v.start + b] = bus.vmax;
        }
    }
    let disks = network
        .lines()
        .iter()
        .enumerate()
        .map(|(l, line)| DiskConstraint {
            i: p_lines.start + l,
            j: q_lines.start + l,
            radius: line.capacity,
        })
        .collect();

    Ok(FeasibleSet {
        layout,
        network_eq: a,
        network_rhs: rhs,
        x_tot: setup.x_tot,
        lower,
        upper,
        disks,
        consumer_bus,
    })
}
