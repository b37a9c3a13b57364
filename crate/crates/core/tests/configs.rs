//! The committed configuration files parse, validate and stay in sync with
//! the built-in defaults.

use std::path::PathBuf;

use igrft_core::config::Config;
use igrft_core::sim::TaskSpec;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn desk_file_equals_defaults() {
    let cfg = Config::load(&config_path("desk.toml")).unwrap();
    assert_eq!(cfg, Config::default());
}

#[test]
fn tasks_file_equals_builtin_tasks() {
    let text = std::fs::read_to_string(config_path("tasks.toml")).unwrap();
    let cfg = Config::from_toml_str(&text).unwrap();
    assert_eq!(cfg.tasks, TaskSpec::builtin());
}

#[test]
fn full_scale_file_carries_the_reference_hyperparameters() {
    let c = Config::load(&config_path("paper-scale.toml")).unwrap();
    let t = &c.train;
    assert_eq!((t.learning_rate_actor, t.learning_rate_critic), (5e-5, 5e-6));
    assert_eq!((t.batch_size, t.gradient_clipping, t.ema_decay), (64, 1.0, 0.999));
    assert_eq!((t.lr_warmup_steps, t.critic_warmup_steps), (1000, 2000));
    assert_eq!(t.sft_warmup_steps + t.offline_rl_training_steps, 30_000);
    assert_eq!((t.awr_temperature_beta, t.advantage_clipping), (0.05, [0.0, 10.0]));
    assert_eq!((t.actor_update_frequency, t.critic_update_frequency), (1.0, 0.5));
    assert_eq!((c.interaction.ig_flow_threshold, c.interaction.ig_pixel_threshold), (2.0, 400));
    let p = &c.policy;
    assert_eq!(
        (p.exploration_sigma_base, p.exploration_sigma_min, p.exploration_modulation_alpha),
        (1.5, 0.2, 0.9)
    );
    let r = &c.reward;
    assert_eq!((r.discount_factor, r.trajectory_reward_weight, r.subtask_reward_weight), (1.0, 0.4, 0.6));
    assert_eq!((c.hil.hitl_rl_iterations, c.hil.hitl_rl_update_interval), (4, 10));
}
