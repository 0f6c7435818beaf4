use o2olab::diffusion::{ScoreModel, ScoreModelConfig};
use o2olab::envs::Dataset;
use o2olab::optim::OptimizerKind;
use o2olab::pipeline::*;
use o2olab::Error;

fn small_config() -> ExperimentConfig {
    let base = ExperimentConfig::default();
    ExperimentConfig {
        offline_steps: 20,
        online_steps: 12,
        offline_batch: 16,
        online_batch: 16,
        warm_start_count: 30,
        eval_every: 5,
        eval_episodes: 2,
        dataset: DatasetConfig {
            trajectories: 6,
            ..base.dataset.clone()
        },
        networks: NetworkConfig {
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            alpha_hidden: vec![6],
            value_hidden: vec![6],
            ..base.networks.clone()
        },
        ..base
    }
}

fn tiny_score_model(data: &Dataset) -> ScoreModel {
    let cfg = ScoreModelConfig {
        hidden: vec![8],
        diffusion_steps: 8,
        ..ScoreModelConfig::default()
    };
    ScoreModel::new(data.env.state_dim, data.env.action_dim, &cfg, 5).unwrap()
}

#[test]
fn zero_steps_returns_the_initialization() {
    let mut cfg = small_config();
    cfg.offline_steps = 0;
    let data = build_dataset(&cfg).unwrap();
    let model = tiny_score_model(&data);
    let out = offline_pretrain(&cfg, &data, Some(&model), 3).unwrap();
    let init = AgentState::init(&cfg, &cfg.env_spec().unwrap(), 3).unwrap();
    assert_eq!(out.state, init);
}

#[test]
fn smac_without_score_term_is_sac() {
    let mut cfg = small_config();
    cfg.optimizer = OptimizerKind::Adam;
    cfg.loss.kappa = 0.0;
    let data = build_dataset(&cfg).unwrap();
    let model = tiny_score_model(&data);
    let smac = offline_pretrain(&cfg, &data, Some(&model), 7).unwrap();
    cfg.offline_alg = OfflineAlg::Sac;
    let sac = offline_pretrain(&cfg, &data, None, 7).unwrap();
    assert_eq!(smac.state, sac.state);
    assert_eq!(smac.metrics.to_csv().replace("-smac-", "-sac-"), sac.metrics.to_csv());
}

#[test]
fn smac_requires_a_score_model() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    assert!(matches!(offline_pretrain(&cfg, &data, None, 0), Err(Error::Config(_))));
}

#[test]
fn every_offline_algorithm_runs_and_is_deterministic() {
    for alg in OfflineAlg::ALL {
        let mut cfg = small_config();
        cfg.offline_alg = alg;
        let data = build_dataset(&cfg).unwrap();
        let model = tiny_score_model(&data);
        let a = offline_pretrain(&cfg, &data, Some(&model), 1).unwrap();
        let b = offline_pretrain(&cfg, &data, Some(&model), 1).unwrap();
        assert_eq!(a.state, b.state, "{alg}");
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(a.state.value_net.is_some(), alg == OfflineAlg::Iql);
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let model = tiny_score_model(&data);
    let dir = tempfile::tempdir().unwrap();
    let straight = offline_pretrain(&cfg, &data, Some(&model), 11).unwrap();

    let env = cfg.env_spec().unwrap();
    let init = AgentState::init(&cfg, &env, 11).unwrap();
    let half = offline_resume(init, &cfg, &data, Some(&model), 9).unwrap();
    let path = dir.path().join("agent.ckpt");
    save_checkpoint(&half.state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, half.state);
    let resumed = offline_resume(loaded, &cfg, &data, Some(&model), cfg.offline_steps as u64).unwrap();
    assert_eq!(resumed.state, straight.state);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    bytes[0] ^= 0xFF;
    bytes[8] = 2;
    std::fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path) {
        Err(Error::VersionMismatch { found, expected, .. }) => assert_eq!((found, expected), (2, 1)),
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}

#[test]
fn warm_start_fills_exactly() {
    let cfg = small_config();
    let env = cfg.env_spec().unwrap();
    let state = AgentState::init(&cfg, &env, 2).unwrap();
    assert_eq!(warm_start(&state, &env, 1, 0).unwrap().len(), 1);
    let buf = warm_start(&state, &env, 123, 0).unwrap();
    assert_eq!(buf.len(), 123);
    for tr in buf.iter() {
        for (j, a) in tr.a.iter().enumerate() {
            assert!(*a >= env.action_low[j] && *a <= env.action_high[j]);
        }
    }
    assert!(warm_start(&state, &env, 0, 0).is_err());
}

#[test]
fn finetune_contracts() {
    let mut cfg = small_config();
    let data = build_dataset(&cfg).unwrap();
    let model = tiny_score_model(&data);
    let pre = offline_pretrain(&cfg, &data, Some(&model), 4).unwrap();

    cfg.online_steps = 0;
    let out = online_finetune(&pre.state, &cfg, &data).unwrap();
    assert_eq!(out.evals.len(), 1);
    assert_eq!(out.metrics.series(Phase::Online, "eval_return").len(), 1);

    cfg.online_steps = 12;
    for alg in OnlineAlg::ALL {
        cfg.online_alg = alg;
        let a = online_finetune(&pre.state, &cfg, &data).unwrap();
        let b = online_finetune(&pre.state, &cfg, &data).unwrap();
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv(), "{alg}");
        assert_eq!(a.state, b.state);
        // evaluations at 0, 5, 10 and the final step
        assert_eq!(a.evals.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![0, 5, 10, 12]);
        assert_eq!(a.metrics.series(Phase::Online, "buffer_size"), vec![(12, 42.0)]);
        assert_eq!(a.evals[0].1, evaluate_policy(&pre.state.policy, &data.env, 2, a_eval_seed(4)).unwrap());
    }
}

fn a_eval_seed(seed: u64) -> u64 {
    o2olab::numkit::derive_seed(seed, &[4])
}

#[test]
fn scripted_expert_is_near_the_tabulated_band() {
    let env = o2olab::envs::EnvSpec::builtin("reach2d").unwrap();
    let (random, expert) = reference_returns(&env, 20, 9).unwrap();
    // direct simulation gives about -8 for the expert and about -78 for the
    // uniform policy on these start states
    assert!(expert > -12.0 && expert < -4.0, "{expert}");
    assert!(random < expert - 20.0, "{random}");
}
