use rand::Rng;

use rcp_core::envs::{grid_move, gridworld_goal_distances, Action, EnvKind, EnvSpec};
use rcp_core::estimators::{reward_to_go, Normalizer};
use rcp_core::io::{checkpoint_from_bytes, checkpoint_to_bytes, export_heatmap, write_pairs, Checkpoint};
use rcp_core::policy::{policy_loss, ActMode, Conditioning, NetworkConfig, PolicyNet};
use rcp_core::replay::Transition;
use rcp_core::rng::{seeded, Rng as StreamRng};
use rcp_core::trainer::{
    awr_update, collect_dataset, evaluate, normalized_score, optimal_eval_return,
    random_policy_return, rollout, train_offline, Actor, Algorithm, Conditioner, ScriptedActor,
    TrainConfig, Trainer,
};

fn small(env: &str, algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        env: env.into(),
        algorithm,
        hidden_width: 16,
        embed_width: 8,
        samples_per_iteration: 300,
        batch_size: 32,
        value_steps: 10,
        policy_steps: 10,
        iterations: 2,
        eval_episodes: 2,
        diagnostic_episodes: 2,
        buffer_capacity: 1000,
        ..TrainConfig::default()
    }
}

/// Shortest-path controller for the grid world.
struct GridOracle {
    spec: EnvSpec,
}

impl Actor for GridOracle {
    fn choose(&self, obs: &[f64], _z: f64, _mode: ActMode, _rng: &mut StreamRng) -> rcp_core::Result<Action> {
        let EnvKind::GridWorld(p) = &self.spec.kind else { unreachable!() };
        let cell = obs.iter().position(|&v| v > 0.5).unwrap();
        let here = (cell % p.width, cell / p.width);
        let dists = gridworld_goal_distances(p);
        let best = (0..4)
            .min_by_key(|&a| {
                let (x, y) = grid_move(p, here, a);
                dists[y][x].unwrap_or(usize::MAX)
            })
            .unwrap();
        Ok(Action::Discrete(best))
    }
}

#[test]
fn zero_discount_return_labels_are_rewards() {
    let mut config = small("pointmass2d", Algorithm::RcpR);
    config.gamma = 0.0;
    let mut t = Trainer::new(config).unwrap();
    let trajectories = t.collect().unwrap();
    let rewards: Vec<f64> = trajectories.iter().flat_map(|tr| tr.rewards.clone()).collect();
    let labeled = t.label(trajectories).unwrap();
    assert_eq!(labeled.len(), rewards.len());
    for (tr, r) in labeled.iter().zip(&rewards) {
        assert_eq!(tr.z, *r);
    }
}

#[test]
fn return_labels_match_recomputed_reward_to_go() {
    let config = small("gridworld8x8", Algorithm::RcpR);
    let gamma = config.gamma;
    let mut t = Trainer::new(config).unwrap();
    let trajectories = t.collect().unwrap();
    let mut expected = Vec::new();
    for tr in &trajectories {
        // Independent double loop.
        for i in 0..tr.rewards.len() {
            expected.push((i..tr.rewards.len()).map(|k| gamma.powi((k - i) as i32) * tr.rewards[k]).sum::<f64>());
        }
    }
    let labeled = t.label(trajectories).unwrap();
    for (tr, e) in labeled.iter().zip(&expected) {
        assert!((tr.z - e).abs() < 1e-10);
    }
}

#[test]
fn buffer_size_after_k_iterations() {
    let mut config = small("pointmass2d", Algorithm::RcpA);
    config.buffer_capacity = 700;
    config.iterations = 4;
    let mut t = Trainer::new(config).unwrap();
    for k in 1..=4 {
        let m = t.run_iteration().unwrap();
        assert_eq!(m.buffer_size, (k * 300).min(700));
    }
}

#[test]
fn zero_iterations_leave_networks_unchanged() {
    let mut config = small("gridworld8x8", Algorithm::RcpA);
    config.iterations = 0;
    let fresh = Trainer::new(config.clone()).unwrap();
    let mut t = Trainer::new(config).unwrap();
    assert!(t.train().unwrap().is_empty());
    assert_eq!(t.policy, fresh.policy);
    assert_eq!(t.value, fresh.value);
    assert!(t.buffer.is_empty());
}

#[test]
fn oracle_controller_scores_the_optimum() {
    let spec = EnvSpec::by_name("gridworld8x8").unwrap();
    let target = Default::default();
    let normalizer = Normalizer::default();
    let cond = Conditioner {
        target: &target,
        normalizer: &normalizer,
        per_step: false,
        value: None,
        gamma: 0.99,
        bootstrap_timeouts: true,
    };
    let result = evaluate(&GridOracle { spec: spec.clone() }, &spec, &cond, 8, 0, 17).unwrap();
    let optimal = optimal_eval_return(&spec, 8, 17).unwrap();
    assert!((result.mean_return - optimal).abs() < 1e-12);
    let random = random_policy_return(&spec, 100, 1).unwrap();
    assert!((normalized_score(result.mean_return, random, optimal) - 1.0).abs() < 1e-12);
}

#[test]
fn behaviour_cloning_reproduces_shortest_paths() {
    let spec = EnvSpec::by_name("gridworld8x8").unwrap();
    let data = collect_dataset(&spec, &GridOracle { spec: spec.clone() }, 0.0, 400, 5).unwrap();
    let mut config = small("gridworld8x8", Algorithm::Bc);
    config.iterations = 20;
    config.policy_steps = 50;
    config.policy_step_size = 3e-3;
    let (trainer, rows) = train_offline(data, config).unwrap();
    let optimal = optimal_eval_return(&spec, trainer.config.eval_episodes, trainer.eval_seed()).unwrap();
    assert_eq!(rows.last().unwrap().eval_mean_return, optimal);
}

#[test]
fn scripted_controller_is_mediocre() {
    let spec = EnvSpec::by_name("pointmass2d").unwrap();
    let data = collect_dataset(&spec, &ScriptedActor { spec: spec.clone() }, 0.0, 20_000, 9).unwrap();
    let mean = data.iter().map(|t| t.undiscounted_return()).sum::<f64>() / data.len() as f64;
    let random = random_policy_return(&spec, 100, 1).unwrap();
    let optimal = optimal_eval_return(&spec, 100, 2).unwrap();
    let score = normalized_score(mean, random, optimal);
    assert!((0.3..=0.7).contains(&score), "{score}");
}

#[test]
fn checkpoint_reload_gives_identical_evaluation() {
    let mut t = Trainer::new(small("pointmass2d", Algorithm::RcpR)).unwrap();
    t.train().unwrap();
    let spec = t.spec.clone();
    let ck = checkpoint_from_bytes(&checkpoint_to_bytes(&Checkpoint::from_trainer(&t)), &spec).unwrap();
    let cond = Conditioner {
        target: &ck.target,
        normalizer: &ck.normalizer,
        per_step: false,
        value: None,
        gamma: t.config.gamma,
        bootstrap_timeouts: t.config.bootstrap_timeouts,
    };
    let reloaded = evaluate(&ck.policy, &spec, &cond, 3, 2, t.eval_seed()).unwrap();
    let original = t.evaluate(3, 2).unwrap();
    assert_eq!(reloaded, original);
}

#[test]
fn large_beta_weighting_matches_unweighted() {
    let mut rng = seeded(31);
    let cfg = NetworkConfig { hidden_width: 8, hidden_layers: 2, embed_width: 4, init_log_std: -0.5 };
    let spec = EnvSpec::by_name("pointmass2d").unwrap();
    let net = PolicyNet::new(spec.obs_dim, spec.action_space.clone(), Conditioning::None, &cfg, &mut rng);
    let batch: Vec<Transition> = (0..16)
        .map(|_| {
            let obs = (0..spec.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let action = Action::Continuous(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let mut t = Transition::new(obs, action, rng.gen_range(-30.0..30.0));
            t.z_norm = 0.0;
            t
        })
        .collect();
    let weighted = awr_update(&net, &batch, 1e13, 20.0).unwrap();
    let plain = policy_loss(&net, &batch).unwrap();
    assert!((weighted.loss - plain.loss).abs() < 1e-10);
    let mut config = small("pointmass2d", Algorithm::RcpR);
    config.beta = 1e13;
    let weighted_cfg = config.clone();
    config.weighted = false;
    for t in &batch {
        assert!((weighted_cfg.weight_for(t.z) - config.weight_for(t.z)).abs() < 1e-10);
    }
}

#[test]
fn value_predictions_track_reward_to_go() {
    let mut config = small("pointmass2d", Algorithm::RcpA);
    config.samples_per_iteration = 1000;
    config.iterations = 80;
    config.value_steps = 50;
    config.hidden_width = 32;
    config.value_step_size = 1e-3;
    config.bootstrap_timeouts = false;
    let mut t = Trainer::new(config).unwrap();
    let rows = t.train().unwrap();
    assert!(rows.iter().all(|m| m.value_loss.is_finite()));
    let value = t.value.as_ref().unwrap();
    let mut rng = seeded(999);
    let mut pairs = Vec::new();
    for reset in 0..5 {
        let traj = rollout(
            &t.spec,
            &t.policy,
            10_000 + reset,
            t.spec.max_episode_length,
            ActMode::Stochastic,
            &t.normalizer,
            &mut || 0.0,
            &mut rng,
        )
        .unwrap();
        let rtg = reward_to_go(&traj.rewards, t.config.gamma).unwrap();
        for (obs, g) in traj.observations.iter().zip(rtg) {
            pairs.push((value.predict(obs).unwrap(), g));
        }
    }
    let r = rcp_core::io::pearson(&pairs).unwrap();
    assert!(r > 0.5, "{r}");
}

#[test]
fn heatmap_summary_matches_recomputed_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(4);
    let pairs: Vec<(f64, f64)> = (0..400)
        .map(|_| {
            let c: f64 = rng.gen_range(-3.0..3.0);
            (c, 0.8 * c + rng.gen_range(-1.0..1.0))
        })
        .collect();
    write_pairs(&dir.path().join("diagnostics.csv"), &pairs).unwrap();
    let summary = export_heatmap(dir.path(), 10).unwrap();
    let n = pairs.len() as f64;
    let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let cov: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let vy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert_eq!(summary.pairs, 400);
    assert!((summary.pearson.unwrap() - r).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}
