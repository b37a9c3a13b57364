//! Golden fixture for the version-1 episode log. The committed file must
//! keep reading back to the same episode, and writing that episode must
//! reproduce it byte for byte. Regenerate with `IGRFT_BLESS=1` only when the
//! format version changes.

use std::path::PathBuf;

use igrft_core::config::Config;
use igrft_core::demos::expert_rollout;
use igrft_core::episode::Episode;
use igrft_core::sim::Env;
use igrft_core::store::{read_episode, write_episode, FrameMode, SCHEMA_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_v1.jsonl")
}

/// Short, small-frame annotated episode that stops before completion.
fn golden_episode() -> Episode {
    let mut cfg = Config::default();
    cfg.sim.image_size = 16;
    cfg.sim.max_episode_steps = Some(24);
    let task = cfg.task("pack-2").unwrap();
    let env = Env::new(task.clone(), cfg.sim.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ep = expert_rollout(&env, 17, 0.3, &mut rng).unwrap();
    ep.annotate(&cfg, &task).unwrap();
    ep
}

#[test]
fn version_one_log_reads_back_unchanged() {
    assert_eq!(SCHEMA_VERSION, 1);
    let ep = golden_episode();
    if std::env::var_os("IGRFT_BLESS").is_some() {
        write_episode(&fixture(), &ep, FrameMode::Inline).unwrap();
    }
    let stored = read_episode(&fixture()).unwrap();
    assert_eq!(stored, ep);
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.jsonl");
    write_episode(&again, &stored, FrameMode::Inline).unwrap();
    assert!(std::fs::read(&again).unwrap() == std::fs::read(fixture()).unwrap(), "writer output drifted");
}
