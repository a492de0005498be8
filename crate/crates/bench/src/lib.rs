//! Fixtures shared by the benchmarks.

use haplap::allocation::{feasible_initializer, AllocationOptions};
use haplap::ao::{initial_placement, AoConfig};
use haplap::cvx::{Program, SmoothFn, Term};
use haplap::experiment::generate_scenario;
use haplap::model::{coverage_sets, decoding_order, gain_matrix};
use haplap::{Allocation, Placement, Scenario, Topology};

/// A generated scenario at its initial placement with the feasible
/// initializer allocation.
pub struct Fixture {
    pub scenario: Scenario,
    pub placement: Placement,
    pub topology: Topology,
    pub allocation: Allocation,
}

pub fn fixture(k: usize, l: usize, seed: u64) -> Fixture {
    let scenario = generate_scenario(k, l, seed).expect("generator");
    let placement = initial_placement(&scenario, seed, AoConfig::default().kmeans_iters).expect("placement");
    let topo = coverage_sets(&scenario, &placement).expect("coverage");
    let p_max: Vec<f64> = scenario.uavs.iter().map(|u| u.p_max).collect();
    let topology = decoding_order(&topo, &gain_matrix(&scenario, &placement).expect("gains"), &p_max);
    let net = haplap::Network::new(&scenario, &placement, &topology).expect("network");
    let allocation = feasible_initializer(&net, AllocationOptions::default().quant_floor).expect("initializer");
    Fixture {
        scenario,
        placement,
        topology,
        allocation,
    }
}

/// Separable convex program of dimension `n`: a linear cost over the
/// intersection of a box and per-coordinate smooth constraints.
pub fn smooth_program(n: usize) -> (Program, Vec<f64>) {
    let mut p = Program::new(n);
    for i in 0..n {
        let mut f = SmoothFn::constant(-4.0);
        f.add_term(Term::Square {
            var: i,
            center: 1.0 + i as f64 / n as f64,
            coef: 1.0,
        })
        .add_term(Term::Ln { var: i, coef: -0.1 });
        p.add_constraint(f);
        p.add_lower_bound(i, 0.0);
        p.add_upper_bound(i, 3.0);
        p.cost[i] = -1.0 / (i + 1) as f64;
    }
    (p, vec![1.0; n])
}
