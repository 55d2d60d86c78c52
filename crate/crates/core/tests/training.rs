use flowgrpo_core::baselines::{dpo_update, rwr_update, sft_update, train_baseline, BaselineConfig, Method};
use flowgrpo_core::flow::{fm_draws, pretrain, DatasetSpec, PretrainConfig};
use flowgrpo_core::grpo::{
    collect_groups, grpo_loss_and_grads, train_grpo, Group, GrpoConfig, GrpoLossConfig, HarnessConfig,
};
use flowgrpo_core::numerics::flatten;
use flowgrpo_core::rewards::mode_match_reward;
use flowgrpo_core::sampler::{rollout_sde, NoiseSchedule, TimeGrid};
use flowgrpo_core::{Rng, VelocityNet};

fn small_net(seed: u64) -> VelocityNet {
    VelocityNet::new(2, 2, &[8, 8, 8], &mut Rng::seed(seed)).unwrap()
}

fn groups_with(net: &VelocityNet, rewards: &dyn Fn(usize, usize) -> f64, g: usize, steps: usize) -> Vec<Group> {
    let grid = TimeGrid::uniform(steps).unwrap();
    let mut rng = Rng::seed(99);
    (0..2)
        .map(|c| {
            let trajs: Vec<_> = rollout_sde(net, g, &grid, &NoiseSchedule::new(0.7), c, &mut rng)
                .into_iter()
                .map(Result::unwrap)
                .collect();
            Group::new(trajs, (0..g).map(|i| rewards(c, i)).collect()).unwrap()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn first_inner_step_ratio_is_one() {
    let net = small_net(1);
    let gs = groups_with(&net, &|c, i| (i * 3 + c) as f64 % 5.0, 8, 10);
    let cfg = GrpoLossConfig { clip_range: 1e-4, beta: 0.01 };
    let (_, _, diag) = grpo_loss_and_grads(&net, &net, &gs, &cfg).unwrap();
    assert!(diag.max_abs_log_ratio < 1e-10, "{}", diag.max_abs_log_ratio);
    assert!((diag.mean_ratio - 1.0).abs() < 1e-10);
    assert_eq!(diag.clip_frac, 0.0);
    // The reference equals the policy, so the KL term vanishes.
    assert_eq!(diag.mean_kl, 0.0);
}

#[test]
fn reward_shift_leaves_gradients_unchanged() {
    let behaviour = small_net(2);
    let mut current = behaviour.clone();
    let p: Vec<f64> = current.flat_params().iter().map(|v| v * 1.01).collect();
    current.set_flat_params(&p).unwrap();
    let reward = |c: usize, i: usize| ((i + 2 * c) as f64).cos();
    let gs = groups_with(&behaviour, &reward, 6, 4);
    let shifted: Vec<Group> = gs
        .iter()
        .map(|g| Group::new(g.trajectories.clone(), g.rewards.iter().map(|r| r + 17.5).collect()).unwrap())
        .collect();
    let cfg = GrpoLossConfig { clip_range: 0.2, beta: 0.05 };
    let (_, a, _) = grpo_loss_and_grads(&current, &behaviour, &gs, &cfg).unwrap();
    let (_, b, _) = grpo_loss_and_grads(&current, &behaviour, &shifted, &cfg).unwrap();
    assert!(max_abs_diff(&flatten(&a), &flatten(&b)) < 1e-9);
}

#[test]
fn degenerate_groups_give_no_policy_gradient() {
    let net = small_net(3);
    let gs = groups_with(&net, &|_, _| 1.0, 6, 4);
    assert!(gs.iter().all(Group::is_degenerate));
    let cfg = GrpoLossConfig { clip_range: 1e-4, beta: 0.0 };
    let (loss, grads, _) = grpo_loss_and_grads(&net, &net, &gs, &cfg).unwrap();
    assert_eq!(loss, 0.0);
    assert!(flatten(&grads).iter().all(|&g| g == 0.0));
}

#[test]
fn sft_is_the_one_hot_limit_of_rwr() {
    let net = small_net(4);
    let mut last = f64::INFINITY;
    for gap in [1.0, 5.0, 20.0, 60.0] {
        // Sample 2 of each group dominates by `gap`.
        let gs = groups_with(&net, &|c, i| if i == 2 { gap } else { 0.1 * (i + c) as f64 }, 5, 3);
        let draws = fm_draws(10, 2, &mut Rng::seed(7));
        let (_, s) = sft_update(&net, &gs, &draws).unwrap();
        let (_, r) = rwr_update(&net, &gs, &draws).unwrap();
        let d = max_abs_diff(&flatten(&s), &flatten(&r));
        assert!(d <= last + 1e-15, "difference grew: {d} after {last}");
        last = d;
    }
    assert!(last < 1e-12, "{last}");
}

#[test]
fn dpo_limits() {
    let net = small_net(5);
    let mut reference = net.clone();
    let p: Vec<f64> = reference.flat_params().iter().map(|v| v * 0.98).collect();
    reference.set_flat_params(&p).unwrap();
    let gs = groups_with(&net, &|_, i| i as f64, 4, 3);
    let draws = fm_draws(2, 2, &mut Rng::seed(8));
    // Zero margin at θ = ref.
    let (loss, _) = dpo_update(&net, &net, &gs, &draws, 0.7).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    // Gradients vanish linearly as β → 0.
    let norm = |beta: f64| {
        let (_, g) = dpo_update(&net, &reference, &gs, &draws, beta).unwrap();
        flatten(&g).iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let (a, b) = (norm(1e-3), norm(1e-6));
    assert!((b / a - 1e-3).abs() < 1e-5, "{a} {b}");
    assert!(b < 1e-5);
    // All-tie groups are skipped.
    let ties = groups_with(&net, &|_, _| 0.0, 4, 3);
    let (loss, g) = dpo_update(&net, &reference, &ties, &draws, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(flatten(&g).iter().all(|&v| v == 0.0));
}

#[test]
fn net_evals_scale_with_train_steps() {
    let net = small_net(6);
    let reward = |_: &[f64], _: usize| 0.0;
    let evals = |t_train: usize| {
        let h = HarnessConfig { group_size: 6, prompts_per_iter: 3, conditions: 2, a: 0.7, t_train };
        collect_groups(&net, &reward, &h, 0, &mut Rng::seed(1)).unwrap().1
    };
    assert_eq!(evals(10), 6 * 3 * 10);
    assert_eq!(evals(40), 4 * evals(10));
}

fn tiny_base() -> VelocityNet {
    let mut pc = PretrainConfig::new(DatasetSpec::gaussian_mixture(2, 1.5, 0.35, 0.3));
    pc.hidden = vec![16, 16, 16];
    pc.steps = 60;
    pc.batch_size = 64;
    pretrain(&pc).unwrap().net
}

#[test]
fn pretraining_is_reproducible() {
    let a = tiny_base();
    let b = tiny_base();
    assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save_checkpoint(&path).unwrap();
    let back = VelocityNet::load_checkpoint(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_checkpoint_bytes(), std::fs::read(&path).unwrap());
}

fn centers() -> Vec<Vec<f64>> {
    DatasetSpec::gaussian_mixture(2, 1.5, 0.35, 0.3).centers().unwrap().to_vec()
}

#[test]
fn grpo_training_is_deterministic_across_thread_counts() {
    let base = tiny_base();
    let cs = centers();
    let reward = |x: &[f64], c: usize| mode_match_reward(x, c, &cs);
    let cfg = GrpoConfig {
        group_size: 6,
        iterations: 4,
        eval_interval: 2,
        eval_samples: 16,
        prompts_per_iter: 2,
        clip_range: 0.2,
        ..GrpoConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_grpo(&base, &reward, &cfg, |_, _| Ok(())).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.net.to_checkpoint_bytes(), b.net.to_checkpoint_bytes());
    let strip = |o: &flowgrpo_core::grpo::TrainOutcome| {
        o.log.iter().map(|r| (r.mean_reward, r.eval_reward, r.mean_kl, r.net_evals)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.log.len(), 4);
    assert!(a.log[1].eval_reward.is_some() && a.log[0].eval_reward.is_none());
    assert_ne!(a.net, base, "training moved the parameters");
}

#[test]
fn callback_sees_every_iteration_and_can_abort() {
    let base = tiny_base();
    let cs = centers();
    let reward = |x: &[f64], c: usize| mode_match_reward(x, c, &cs);
    let cfg = GrpoConfig { group_size: 4, iterations: 5, prompts_per_iter: 1, eval_samples: 4, ..GrpoConfig::default() };
    let mut seen = Vec::new();
    train_grpo(&base, &reward, &cfg, |row, _| {
        seen.push(row.iter);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    let err = train_grpo(&base, &reward, &cfg, |row, _| {
        if row.iter == 2 {
            Err(flowgrpo_core::Error::Divergence("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
}

#[test]
fn baselines_run_and_log_like_grpo() {
    let base = tiny_base();
    let cs = centers();
    let reward = |x: &[f64], c: usize| mode_match_reward(x, c, &cs);
    for method in [Method::Sft, Method::Rwr, Method::Dpo] {
        for online in [false, true] {
            let mut cfg = BaselineConfig::new(method);
            cfg.online = online;
            cfg.refresh_interval = 2;
            cfg.group_size = 4;
            cfg.iterations = 4;
            cfg.prompts_per_iter = 2;
            cfg.eval_samples = 8;
            let out = train_baseline(&base, &reward, &cfg, |_, _| Ok(())).unwrap();
            assert_eq!(out.train.log.len(), 4);
            assert!(out.train.final_eval_reward().is_some());
            assert_eq!(out.rwr_weights.is_empty(), method != Method::Rwr);
            for w in &out.rwr_weights {
                assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
