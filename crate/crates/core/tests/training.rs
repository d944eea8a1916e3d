use pmcr_core::harness::{synthesize, SyntheticTaskSpec, TrainConfig, Trainer};

fn loss_at(rows: &[pmcr_core::harness::MetricsRow], it: usize) -> f64 {
    rows.iter().find(|r| r.iteration == it).map(|r| r.loss_all).expect("row for iteration")
}

#[test]
fn loss_at_iteration_500_is_below_iteration_0_on_the_default_task() {
    let data = synthesize(&SyntheticTaskSpec::default(), 0).unwrap();
    let (mut first, mut later) = (0.0, 0.0);
    for seed in 0..3 {
        let cfg = TrainConfig { iterations: 501, seed, ..TrainConfig::default() };
        let s = Trainer::new(cfg, data.clone()).unwrap().run(None).unwrap();
        first += loss_at(&s.rows, 0) / 3.0;
        later += loss_at(&s.rows, 500) / 3.0;
    }
    assert!(later < first, "iteration 0: {first}, iteration 500: {later}");
}
