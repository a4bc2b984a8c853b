use zerodp_core::collectives::CommStats;
use zerodp_core::model::ModelSpec;
use zerodp_core::mpadam::AdamHyper;
use zerodp_core::planner::{dp_comm_volume_exact, model_state_bytes, ADAM_K};
use zerodp_core::zerodp::{
    run_equivalence_suite, EngineConfig, Fault, PartitionLayout, SimCluster, SuiteConfig, Workload,
    PREFETCH_WINDOW,
};
use zerodp_core::{Error, Stage};

fn mlp_2_8_8_1() -> ModelSpec {
    ModelSpec::new(2, 8, 1, 2).unwrap()
}

#[test]
fn default_suite_is_bitwise_equal() {
    for seed in [1, 7] {
        let cfg = SuiteConfig::new(mlp_2_8_8_1(), 50, seed);
        let v = run_equivalence_suite(&cfg).unwrap();
        assert!(v.all_equal(), "{:?}", v.divergences);
        assert_eq!(v.runs.len(), 16);
        assert!(v.memory_mismatches.is_empty());
        for n in [1, 2, 4, 8] {
            let d: Vec<u64> = v.digests.iter().filter(|x| x.0 == n).map(|x| x.2).collect();
            assert!(d.windows(2).all(|w| w[0] == w[1]));
        }
    }
}

#[test]
fn injected_fault_is_located() {
    let mut cfg = SuiteConfig::new(mlp_2_8_8_1(), 5, 7);
    cfg.n_ranks = vec![4];
    cfg.engine.fault = Some(Fault {
        step: 3,
        index: 17,
        delta: 0.5,
    });
    cfg.fault_stage = Some(Stage::PosG);
    let v = run_equivalence_suite(&cfg).unwrap();
    assert_eq!(v.divergences.len(), 1);
    let d = &v.divergences[0];
    assert_eq!(
        (d.n_ranks, d.stage, d.step, d.index),
        (4, Stage::PosG, 3, 17)
    );
}

fn per_step_sent(stage: Stage, spec: ModelSpec, n: usize) -> (usize, Vec<CommStats>, Vec<usize>) {
    let layout = PartitionLayout::new(spec.param_count(), n);
    let mut w = Workload::new(spec, 2 * n, 5);
    let init = w.init_master(layout.padded());
    let mut c = SimCluster::new(stage, spec, n, &init, EngineConfig::default()).unwrap();
    let reports = c.step(&w.next_batch(), &AdamHyper::default()).unwrap();
    (
        layout.padded(),
        reports.iter().map(|r| r.comm).collect(),
        reports.iter().map(|r| r.peak_cached_chunks).collect(),
    )
}

#[test]
fn volume_law_holds_per_rank() {
    // psi = 171 and 1171, so the padding differs with N.
    for spec in [
        ModelSpec::new(4, 10, 1, 2).unwrap(),
        ModelSpec::new(6, 30, 1, 2).unwrap(),
    ] {
        for n in [2, 4, 8] {
            for stage in Stage::ALL {
                let (padded, comm, peaks) = per_step_sent(stage, spec, n);
                let expect = dp_comm_volume_exact(stage, padded as u64, n as u64);
                for c in &comm {
                    assert_eq!(c.total_sent(), expect, "{stage} N={n} psi'={padded}");
                }
                assert!(peaks.iter().all(|&p| p <= PREFETCH_WINDOW));
            }
        }
    }
}

#[test]
fn measured_state_matches_planner() {
    let spec = mlp_2_8_8_1();
    for n in [1, 2, 4, 8] {
        let layout = PartitionLayout::new(spec.param_count(), n);
        let mut w = Workload::new(spec, 8, 1);
        let init = w.init_master(layout.padded());
        for stage in Stage::ALL {
            let mut c = SimCluster::new(stage, spec, n, &init, EngineConfig::default()).unwrap();
            c.step(&w.clone().next_batch(), &AdamHyper::default())
                .unwrap();
            let planned = model_state_bytes(layout.padded() as f64, ADAM_K, n as f64, stage);
            for r in c.ranks() {
                assert_eq!(r.measured_state_bytes(), planned, "{stage} N={n}");
            }
        }
    }
}

#[test]
fn zero_bucket_is_rejected() {
    let spec = mlp_2_8_8_1();
    let init = vec![0.0; PartitionLayout::new(spec.param_count(), 2).padded()];
    let cfg = EngineConfig {
        bucket_capacity: 0,
        fault: None,
    };
    assert!(matches!(
        SimCluster::new(Stage::PosG, spec, 2, &init, cfg),
        Err(Error::Config(_))
    ));
}
