use vfda::expcli::{generate_dataset, Dataset, ExperimentConfig};
use vfda::federation::{
    client_local_round, serialize_broadcast, AblationFlags, ClientState, Federation, FedError, GlobalBroadcast,
    Variant,
};
use vfda::segnet::{Network, NetworkConfig};
use vfda::vfda::PrototypeVariance;

fn small_config(clients: usize, rounds: u32) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.data.volume_size = 8;
    c.data.samples_per_client = 2;
    c.data.heldout_samples = 2;
    c.network = NetworkConfig {
        in_channels: 1,
        num_classes: 2,
        encoder_channels: vec![4, 8],
    };
    c.federation.num_clients = clients;
    c.federation.rounds = rounds;
    c.federation.lr0 = 0.1;
    c
}

fn federation(cfg: &ExperimentConfig, data: &Dataset) -> Federation {
    Federation::new(
        cfg.federation.clone(),
        cfg.network.clone(),
        data.shards.clone(),
        data.heldout.clone(),
        cfg.seed,
    )
    .unwrap()
}

fn first_broadcast(fed: &Federation) -> GlobalBroadcast {
    GlobalBroadcast {
        round: 1,
        params: fed.model().flat_params(),
        variances: fed.global_variances().to_vec(),
    }
}

#[test]
fn zero_local_epochs_returns_broadcast_params() {
    let mut cfg = small_config(2, 1);
    cfg.federation.local_epochs = 0;
    let data = generate_dataset(&cfg).unwrap();
    let fed = federation(&cfg, &data);
    let b = first_broadcast(&fed);
    let mut state = ClientState::new(0, &[4, 8]);
    let out = client_local_round(&mut state, fed.model(), &b, &data.shards[0], &cfg.federation, cfg.seed).unwrap();
    assert_eq!(out.update.params, b.params);
    assert!(out.loss_ce.is_nan());
}

#[test]
fn local_round_is_deterministic_and_checks_round() {
    let cfg = small_config(2, 2);
    let data = generate_dataset(&cfg).unwrap();
    let fed = federation(&cfg, &data);
    let b = first_broadcast(&fed);
    let run = || {
        let mut state = ClientState::new(1, &[4, 8]);
        let out = client_local_round(&mut state, fed.model(), &b, &data.shards[1], &cfg.federation, cfg.seed).unwrap();
        (out.update, state)
    };
    let (a, state) = run();
    assert_eq!(a, run().0);
    assert_ne!(a.params, b.params);
    assert_eq!(state.next_round, 2);
    let mut stale = state;
    assert!(matches!(
        client_local_round(&mut stale, fed.model(), &b, &data.shards[1], &cfg.federation, cfg.seed),
        Err(FedError::RoundMismatch { expected: 2, found: 1 })
    ));
}

#[test]
fn no_vfda_skips_every_transform_and_sends_zero_statistics() {
    let mut cfg = small_config(2, 1);
    cfg.federation.ablation = Variant::None.flags();
    let data = generate_dataset(&cfg).unwrap();
    let mut fed = federation(&cfg, &data);
    let log = fed.step().unwrap();
    for c in &log.clients {
        assert!(c.traces.iter().all(|t| *t == Default::default()));
    }
    assert!(fed.global_variances().iter().all(PrototypeVariance::is_zero));
    assert!(fed.clients().iter().all(|c| c.momentum.iter().all(|m| !m.initialized)));
}

#[test]
fn vfda_uploads_statistics_and_produces_global_variance() {
    let mut cfg = small_config(3, 2);
    cfg.data.heterogeneity = 1.0;
    let data = generate_dataset(&cfg).unwrap();
    let mut fed = federation(&cfg, &data);
    fed.step().unwrap();
    assert!(fed.clients().iter().all(|c| c.momentum.iter().all(|m| m.initialized)));
    assert!(fed.global_variances().iter().all(|v| !v.is_zero() && v.is_valid()));
    let log = fed.step().unwrap();
    assert!(log.clients.iter().all(|c| c.traces.iter().all(|t| t.augmented && t.global_factor_used)));
}

#[test]
fn single_client_keeps_zero_variance_and_matches_plain_sgd() {
    let cfg = small_config(1, 3);
    let data = generate_dataset(&cfg).unwrap();
    let mut with = federation(&cfg, &data);
    let mut plain_cfg = cfg.clone();
    plain_cfg.federation.ablation = Variant::None.flags();
    let mut plain = federation(&plain_cfg, &data);
    for _ in 0..3 {
        let a = with.step().unwrap();
        let b = plain.step().unwrap();
        assert!(with.global_variances().iter().all(PrototypeVariance::is_zero));
        assert_eq!(with.model().flat_params(), plain.model().flat_params());
        assert_eq!(a.global, b.global);
    }
}

#[test]
fn checkpoint_resume_equals_uninterrupted_run() {
    let cfg = small_config(3, 2);
    let data = generate_dataset(&cfg).unwrap();
    let mut full = federation(&cfg, &data);
    let full_logs = full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = federation(&cfg, &data);
    let log1 = first.step().unwrap();
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let ckpt = Federation::load_checkpoint(&path).unwrap();
    let mut resumed = Federation::resume(ckpt, data.shards.clone(), data.heldout.clone()).unwrap();
    let log2 = resumed.step().unwrap();
    assert!(resumed.is_finished());

    assert_eq!(resumed.model().flat_params(), full.model().flat_params());
    assert_eq!(resumed.global_variances(), full.global_variances());
    assert_eq!(resumed.clients(), full.clients());
    for (a, b) in [log1, log2].iter().zip(&full_logs) {
        assert_eq!(a.clients, b.clients);
        assert_eq!(a.global, b.global);
    }
}

#[test]
fn result_independent_of_scheduling() {
    let cfg = small_config(4, 2);
    let data = generate_dataset(&cfg).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut fed = federation(&cfg, &data);
            fed.run().unwrap();
            (fed.model().flat_params(), fed.global_variances().to_vec())
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn forced_unit_global_variance_matches_local_only_ablation() {
    let cfg = small_config(3, 3);
    let data = generate_dataset(&cfg).unwrap();
    let mut forced = federation(&cfg, &data);
    forced.global_variance_override = Some(1.0);
    let mut local_cfg = cfg.clone();
    local_cfg.federation.ablation = AblationFlags {
        no_global_variance: true,
        ..AblationFlags::default()
    };
    let mut local_only = federation(&local_cfg, &data);
    for _ in 0..3 {
        let a = forced.step().unwrap();
        let b = local_only.step().unwrap();
        assert_eq!(forced.model().flat_params(), local_only.model().flat_params());
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            for (ta, tb) in ca.traces.iter().zip(&cb.traces) {
                assert!(ta.global_factor_used && !tb.global_factor_used);
                assert_eq!((ta.stats_computed, ta.momentum_updated, ta.augmented), (tb.stats_computed, tb.momentum_updated, tb.augmented));
            }
        }
    }
}

#[test]
fn rounds_are_contiguous_and_stop_at_r() {
    let cfg = small_config(2, 3);
    let data = generate_dataset(&cfg).unwrap();
    let mut fed = federation(&cfg, &data);
    let logs = fed.run().unwrap();
    assert_eq!(logs.iter().map(|l| l.round).collect::<Vec<_>>(), vec![1, 2, 3]);
    for l in &logs {
        let g = l.global.as_ref().unwrap();
        assert!(g.dice.iter().all(|d| (0.0..=1.0).contains(d)));
        assert_eq!(l.clients.iter().map(|c| c.client_id).collect::<Vec<_>>(), vec![0, 1]);
    }
    assert!(fed.step().is_err());
}

#[test]
fn shard_count_must_match_clients() {
    let cfg = small_config(2, 1);
    let data = generate_dataset(&cfg).unwrap();
    let err = Federation::new(
        cfg.federation.clone(),
        cfg.network.clone(),
        data.shards[..1].to_vec(),
        data.heldout.clone(),
        cfg.seed,
    );
    assert!(err.is_err());
}

#[test]
fn broadcast_wire_size_tracks_layers() {
    let cfg = small_config(1, 1);
    let data = generate_dataset(&cfg).unwrap();
    let fed = federation(&cfg, &data);
    let p = Network::new(cfg.network.clone(), Default::default(), &mut vfda::rng::substream(0, "x", &[]))
        .unwrap()
        .parameter_count();
    let bytes = serialize_broadcast(&first_broadcast(&fed)).unwrap();
    assert_eq!(bytes.len(), vfda::federation::broadcast_size(&[4, 8], p));
}
