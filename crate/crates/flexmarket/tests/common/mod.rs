#![allow(dead_code)]

use flexmarket::game::ConsumerProfile;
use flexmarket::grid::{
    assemble_feasible_set, Bus, Direction, DistributionNetwork, FeasibleSet, Line, MarketSetup,
    PowerBase,
};

pub fn bus(id: usize, vmin: f64, vmax: f64) -> Bus {
    Bus {
        id,
        vmin,
        vmax,
        theta_min: -0.5,
        theta_max: 0.5,
        reactive_injection: 0.0,
    }
}

/// Line with series impedance `r + jx` (per-unit) and limit `cap`.
pub fn line(from: usize, to: usize, r: f64, x: f64, cap: f64) -> Line {
    let den = r * r + x * x;
    Line {
        from,
        to,
        conductance: r / den,
        susceptance: -x / den,
        capacity: cap,
    }
}

/// Four-bus feeder 1-2-3-4 with consumers on buses 2..4 and line limits `caps`.
pub fn feeder(vmin: f64, caps: [f64; 3]) -> DistributionNetwork {
    let buses = (1..=4).map(|i| bus(i, vmin, 1.1)).collect();
    let lines = vec![
        line(1, 2, 0.02, 0.03, caps[0]),
        line(2, 3, 0.03, 0.04, caps[1]),
        line(3, 4, 0.04, 0.05, caps[2]),
    ];
    DistributionNetwork::new(buses, lines).unwrap()
}

pub fn feeder_consumers() -> Vec<ConsumerProfile> {
    vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 200.0),
        ConsumerProfile::active(2, 3, 0.003, 0.38, 200.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 200.0),
        ConsumerProfile::active(4, 4, 0.0035, 0.36, 200.0),
        ConsumerProfile::passive(5, 3, 60.0),
        ConsumerProfile::passive(6, 4, 40.0),
    ]
}

pub fn feeder_set(direction: Direction, x_tot: f64, vmin: f64, caps: [f64; 3]) -> FeasibleSet {
    let setup = MarketSetup {
        x_tot,
        direction,
        base: PowerBase {
            base_mva: 1.0,
            interval_hours: 1.0,
        },
        network_enabled: true,
    };
    assemble_feasible_set(&feeder(vmin, caps), &feeder_consumers(), &setup).unwrap()
}

pub fn active(profiles: &[ConsumerProfile]) -> Vec<ConsumerProfile> {
    profiles.iter().filter(|p| p.active).cloned().collect()
}
