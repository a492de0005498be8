use haplap::cvx::{solve, BarrierOptions, Status};
use haplap::model::validate_scenario;
use haplap::rates::rate_report;
use haplap::Network;
use haplap_bench::{fixture, smooth_program};

#[test]
fn fixtures_are_feasible() {
    for (k, l, seed) in [(6, 2, 3), (10, 4, 1), (3, 1, 5)] {
        let f = fixture(k, l, seed);
        assert!(validate_scenario(&f.scenario, &f.placement).is_empty());
        let net = Network::new(&f.scenario, &f.placement, &f.topology).unwrap();
        assert!(rate_report(&net, &f.allocation).unwrap().is_feasible(1e-7));
    }
}

#[test]
fn smooth_program_solves() {
    for n in [4, 16] {
        let (p, x0) = smooth_program(n);
        let s = solve(&p, &x0, &BarrierOptions::default()).unwrap();
        assert_eq!(s.status, Status::Optimal);
        assert!(p.max_violation(&s.x) <= 1e-9);
    }
}
