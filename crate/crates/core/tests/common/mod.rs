//! Random network states shared by the integration tests.
#![allow(dead_code)]

use haplap::ao::separate;
use haplap::experiment::generate_scenario;
use haplap::model::{coverage_sets, decoding_order, gain_matrix};
use haplap::{Allocation, Placement, Point3, Scenario, Topology};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A scenario, an expansion placement `q_r`, a nearby placement `q`, the
/// topology of `q_r` and two random allocations for it.
pub struct State {
    pub scenario: Scenario,
    pub q_r: Placement,
    pub q: Placement,
    pub topology: Topology,
    pub a: Allocation,
    pub b: Allocation,
}

pub fn random_placement(s: &Scenario, rng: &mut ChaCha8Rng) -> Placement {
    let q = s
        .uavs
        .iter()
        .map(|u| {
            let b = &u.xy_box;
            Point3([
                rng.random_range(b.x_min..=b.x_max),
                rng.random_range(b.y_min..=b.y_max),
                rng.random_range(u.z_min..=u.z_max),
            ])
        })
        .collect();
    Placement { q }
}

/// Moves every UAV by a random offset of up to `step` meters per axis and
/// clamps the result to the UAV's bounds.
pub fn perturb(s: &Scenario, q: &Placement, step: f64, rng: &mut ChaCha8Rng) -> Placement {
    let q = q
        .q
        .iter()
        .zip(&s.uavs)
        .map(|(p, u)| {
            let (x, y) = u.xy_box.clamp(
                p.x() + rng.random_range(-step..=step),
                p.y() + rng.random_range(-step..=step),
            );
            let z = (p.z() + rng.random_range(-step..=step)).clamp(u.z_min, u.z_max);
            Point3([x, y, z])
        })
        .collect();
    Placement { q }
}

/// Powers within each UAV's budget and quantization noise that keeps every
/// fronthaul link within capacity. Common-rate shares are zero.
pub fn random_allocation(s: &Scenario, t: &Topology, rng: &mut ChaCha8Rng) -> Allocation {
    let (k_n, u_n) = (s.num_ues(), s.num_uavs());
    let mut a = Allocation::zeros(k_n, u_n);
    let hap_max = s.uavs[0].p_max;
    for p in a.p_private.iter_mut() {
        *p = rng.random_range(0.01..1.0) * hap_max / (k_n + 2) as f64;
    }
    for u in 0..u_n {
        let p_max = s.uavs[u].p_max;
        a.p_common[u] = if t.served_ues[u].is_empty() { 0.0 } else { rng.random_range(0.01..1.0) * p_max / 3.0 };
        let signal = a.p_common[u] + if u == 0 { a.p_private.iter().sum() } else { 0.0 };
        let c = s.uavs[u].fronthaul_capacity;
        let needed = if signal > 0.0 { signal / (2f64.powf(c) - 1.0) } else { 0.0 };
        a.quant_var[u] = needed.max(1e-9 * p_max) * rng.random_range(1.0..3.0);
        let total = signal + a.quant_var[u];
        if total > p_max {
            let f = p_max / total;
            a.quant_var[u] *= f;
            a.p_common[u] *= f;
            if u == 0 {
                a.p_private.iter_mut().for_each(|p| *p *= f);
            }
        }
    }
    a
}

/// A random state with up to 6 UEs and 2 LAPs.
pub fn random_state(rng: &mut ChaCha8Rng) -> State {
    loop {
        let k = rng.random_range(1..=6);
        let l = rng.random_range(0..=2);
        let scenario = generate_scenario(k, l, rng.random()).expect("generated scenario");
        let Ok(q_r) = separate(&scenario, &random_placement(&scenario, rng)) else { continue };
        let Ok(q) = separate(&scenario, &perturb(&scenario, &q_r, 800.0, rng)) else { continue };
        let sets = coverage_sets(&scenario, &q_r).expect("coverage sets");
        let gains = gain_matrix(&scenario, &q_r).expect("gains");
        let order_powers: Vec<f64> = (0..scenario.num_uavs()).map(|_| rng.random_range(0.1..1.0)).collect();
        let topology = decoding_order(&sets, &gains, &order_powers);
        let a = random_allocation(&scenario, &topology, rng);
        let b = random_allocation(&scenario, &topology, rng);
        return State { scenario, q_r, q, topology, a, b };
    }
}
