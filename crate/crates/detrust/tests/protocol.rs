//! Socket-backend integration: the TCP cluster must run the identical
//! protocol the in-process cluster runs, byte for byte where determinism is
//! promised, and the aggregator-side attack hooks that need no party access
//! must behave the same over real connections.

use detrust::config::{DatasetSpec, GroupSettings, RunConfig, RunMode, TrustSettings};
use detrust::encoding::EncodingConfig;
use detrust::fl::engine::{
    run_encrypted, AggregatorHooks, EngineError, FailureKind, ReplayPlan, RunOutcome,
};
use detrust::fl::trainer::Hyperparams;
use detrust::metrics::render_metrics_csv;
use detrust::PartyId;
use std::collections::BTreeSet;

fn socket_config(parties: usize, rounds: usize) -> RunConfig {
    RunConfig {
        mode: RunMode::Tcp,
        parties,
        rounds,
        trust: TrustSettings {
            local_thresholds: vec![2],
            min_batch_size: 2,
        },
        group: GroupSettings {
            lambda: 32,
            seed: 7,
            allow_insecure: true,
        },
        encoding: EncodingConfig {
            precision: 4,
            weight_precision: 2,
            clip_bound: 4.0,
        },
        dataset: DatasetSpec::Synthetic {
            classes: 2,
            features: 2,
            samples_per_party: 30,
            eval_samples: 60,
            noise_std: 0.5,
        },
        hyper: Hyperparams {
            learning_rate: 0.05,
            local_epochs: 1,
            batch_size: 8,
        },
        seed: 11,
        ..RunConfig::default()
    }
}

#[test]
fn socket_and_sim_backends_agree_exactly() {
    let tcp_cfg = socket_config(3, 3);
    let mut sim_cfg = tcp_cfg.clone();
    sim_cfg.mode = RunMode::Sim;

    let tcp = run_encrypted(&tcp_cfg, AggregatorHooks::default()).unwrap();
    let sim = run_encrypted(&sim_cfg, AggregatorHooks::default()).unwrap();

    assert_eq!(tcp.outcome, RunOutcome::Completed);
    assert_eq!(sim.outcome, RunOutcome::Completed);
    let tcp_bits: Vec<u64> = tcp.final_model.iter().map(|v| v.to_bits()).collect();
    let sim_bits: Vec<u64> = sim.final_model.iter().map(|v| v.to_bits()).collect();
    assert_eq!(tcp_bits, sim_bits, "backends trained different models");
    assert_eq!(
        render_metrics_csv(&tcp.metrics),
        render_metrics_csv(&sim.metrics)
    );
    assert_eq!(tcp.meter, sim.meter, "interaction accounting differs");
    assert_eq!(tcp.matrix, sim.matrix);
}

#[test]
fn socket_startup_tolerates_any_connection_order() {
    // The key server takes the announce and the deposits in whatever order
    // the sockets race in; several runs exercise different interleavings.
    for salt in 0..5 {
        let mut cfg = socket_config(4, 2);
        cfg.seed = 100 + salt;
        let out = run_encrypted(&cfg, AggregatorHooks::default()).unwrap();
        assert_eq!(out.outcome, RunOutcome::Completed, "run {salt}");
        assert_eq!(out.meter.party_keyserver, 4);
        assert_eq!(out.meter.aggregator_keyserver, 1);
    }
}

#[test]
fn replay_substitution_fails_over_sockets_too() {
    let mut cfg = socket_config(3, 2);
    cfg.trust.local_thresholds = vec![3];
    let hooks = AggregatorHooks {
        replay: Some(ReplayPlan {
            from_round: 0,
            in_round: 1,
            parties: vec![PartyId(1)],
        }),
        ..AggregatorHooks::default()
    };
    let out = run_encrypted(&cfg, hooks).unwrap();
    match out.outcome {
        RunOutcome::RoundFailed { round: 1, failure } => {
            assert_eq!(failure, FailureKind::DlogFailure);
        }
        other => panic!("expected the replayed round to fail, got {other:?}"),
    }
}

#[test]
fn socket_backend_refuses_party_side_hooks() {
    let cfg = socket_config(3, 2);
    let hooks = AggregatorHooks {
        colluders: BTreeSet::from([2u32]),
        ..AggregatorHooks::default()
    };
    let err = run_encrypted(&cfg, hooks).unwrap_err();
    assert!(
        matches!(err, EngineError::Protocol(_)),
        "party-side knobs must not silently work across processes: {err:?}"
    );
}
