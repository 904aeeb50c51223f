use microgrid_mpc::formulation::Variant;
use microgrid_mpc::grid_model::GridSpec;
use microgrid_mpc::simulator::{closed_loop, ControllerConfig, ProfileModel};
use std::time::Instant;

#[test]
fn profile_closed_loop() {
    let spec = GridSpec::case_study();
    let model = ProfileModel::case_study(42);
    let mut cfg = ControllerConfig::new(
        &spec,
        Variant::Risk,
        0.5,
        vec![2, 2, 1, 1, 1, 1, 1, 1],
    );
    cfg.assemble.relax_stage_threshold = 2;
    cfg.bnb.rel_gap = 1e-3;
    cfg.bnb.abs_gap = 1e-5;
    cfg.bnb.qp.eps_abs = 1e-4;
    cfg.bnb.qp.eps_rel = 1e-4;
    cfg.bnb.qp.polish = false;
    cfg.bnb.max_nodes = 30;
    cfg.bnb.qp.check_interval = 10;
    cfg.bnb.rel_gap = 2e-3;
    let t0 = Instant::now();
    let trace = closed_loop(&spec, &model, &cfg, 24).unwrap();
    let total = t0.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for s in &trace.steps {
        worst = worst.max(s.solve_time_s);
        println!(
            "k {} status {:?} nodes {} t {:.2}s delta {:?} fallback {}",
            s.k, s.status, s.bnb_nodes, s.solve_time_s, s.delta, s.fallback
        );
    }
    println!(
        "mean {:.3}s worst {:.3}s",
        total / trace.steps.len() as f64,
        worst
    );
}
