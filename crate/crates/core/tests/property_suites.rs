//! The property-verification suites on the benchmark and on random instances,
//! plus fault injection.

use nalgebra::DMatrix;
use smpc::properties::{corrupt_p_bar, random_stable_instance, verify_properties, Tolerances};
use smpc::{DpOptions, Distribution, GainLibrary, GridSpec, PlantModel};

fn library(model: &PlantModel, count: usize) -> GainLibrary {
    let grid = GridSpec { count, ..GridSpec::default() }.build().unwrap();
    GainLibrary::generate(model, &grid, DpOptions::default()).unwrap()
}

#[test]
fn benchmark_library_passes_every_suite() {
    let model = PlantModel::coupled_tank();
    let lib = library(&model, 200);
    let report = verify_properties(&model, &lib, &Tolerances::default(), Distribution::Laplace, 11).unwrap();
    for c in &report.checks {
        println!("{:<28} pass={} margin={:.3e} {}", c.suite, c.pass, c.margin, c.detail);
    }
    assert!(report.all_pass(), "{:?}", report.failures().collect::<Vec<_>>());
    assert!(report.get("average_cost_bound").is_some());
}

#[test]
fn corrupted_certificate_is_caught() {
    let model = PlantModel::coupled_tank();
    let lib = library(&model, 50);
    let bad = corrupt_p_bar(&lib, 25, 0.1);
    let tol = Tolerances { closed_loop_runs: 0, mc_draws: 1000, ..Tolerances::default() };
    let report = verify_properties(&model, &bad, &tol, Distribution::Laplace, 3).unwrap();
    assert!(!report.get("certificate_ordering").unwrap().pass);
    assert!(!report.get("certificate_residuals").unwrap().pass);
}

#[test]
fn scalar_tail_identities_are_tight() {
    // a = 0.5, b = 1: any record's certificates are geometric series in the
    // closed-loop pole, so the explicit sums converge to rounding.
    let one = DMatrix::from_element(1, 1, 1.0);
    let model = PlantModel::new(
        DMatrix::from_element(1, 1, 0.5),
        one.clone(),
        one.clone(),
        one.clone(),
        one.clone(),
        one,
        0.8,
        20.0,
        3,
    )
    .unwrap();
    let lib = library(&model, 10);
    let tol = Tolerances { deterministic_rel: 1e-10, closed_loop_runs: 0, mc_draws: 2000, ..Tolerances::default() };
    let report = verify_properties(&model, &lib, &tol, Distribution::Gaussian, 5).unwrap();
    assert!(report.get("tail_identities").unwrap().pass, "{:?}", report.get("tail_identities"));
}

const DETERMINISTIC: [&str; 5] = [
    "tail_identities",
    "certificate_residuals",
    "certificate_ordering",
    "scalarised_concavity",
    "terminal_weight_ordering",
];

#[test]
fn random_instances_pass_the_deterministic_suites() {
    let tol = Tolerances { closed_loop_runs: 0, mc_draws: 20_000, ..Tolerances::default() };
    for seed in 0..12u64 {
        let model = random_stable_instance(seed);
        let lib = library(&model, 24);
        let report = verify_properties(&model, &lib, &tol, Distribution::Laplace, seed).unwrap();
        let failed: Vec<_> = report.failures().filter(|c| DETERMINISTIC.contains(&c.suite.as_str())).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:?}");
    }
}
