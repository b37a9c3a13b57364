//! Hybrid dense reward: a sparse trajectory term spread evenly over a
//! successful episode plus potential-based subtask shaping, and the
//! undiscounted return-to-go that the critic regresses.

use crate::config::RewardConfig;
use crate::error::{Error, Result};
use crate::sim::TaskSpec;

/// Numerically stable logistic function; exact limits at +-inf.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subtask anchors, weights and mixing coefficients for one episode (or for a
/// task-average reference curve).
///
/// An anchor of `+inf` marks a subtask the episode never completed: its
/// sigmoid never switches on, so that share of shaping mass is never paid out.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub anchors: Vec<f64>,
    pub weights: Vec<f64>,
    pub eps: f64,
    pub omega_traj: f64,
    pub omega_sub: f64,
    pub norm_c: f64,
}

impl RewardSpec {
    /// Validates the inputs and sets `norm_c` so that a fully completed
    /// episode gets `Phi(1) - Phi(0) = 1`. Unreached subtasks count toward the
    /// normalizer with their full weight.
    pub fn new(anchors: Vec<f64>, weights: Vec<f64>, eps: f64, omega_traj: f64, omega_sub: f64) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(format!("reward spec: {m}")));
        if anchors.is_empty() || anchors.len() != weights.len() {
            return bad(format!("{} anchors vs {} weights", anchors.len(), weights.len()));
        }
        let reached: Vec<f64> = anchors.iter().copied().filter(|k| k.is_finite()).collect();
        if reached.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return bad("finite anchors must lie in (0, 1)".into());
        }
        if reached.windows(2).any(|w| w[0] >= w[1]) || anchors.iter().any(|&k| k.is_nan() || k == f64::NEG_INFINITY) {
            return bad("anchors must be strictly increasing".into());
        }
        if let Some(first_unreached) = anchors.iter().position(|k| k.is_infinite()) {
            if anchors[first_unreached..].iter().any(|k| k.is_finite()) {
                return bad("a later subtask cannot be reached before an earlier one".into());
            }
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("weights must be positive and sum to 1".into());
        }
        if !(eps > 0.0) {
            return bad("sharpness must be positive".into());
        }
        if omega_traj < 0.0 || omega_sub < 0.0 || (omega_traj + omega_sub - 1.0).abs() > 1e-9 {
            return bad("omega_traj and omega_sub must be non-negative and sum to 1".into());
        }
        let span: f64 = anchors
            .iter()
            .zip(&weights)
            .map(|(&k, &w)| {
                if k.is_finite() {
                    w * (sigmoid((1.0 - k) / eps) - sigmoid(-k / eps))
                } else {
                    w
                }
            })
            .sum();
        Ok(Self {
            anchors,
            weights,
            eps,
            omega_traj,
            omega_sub,
            norm_c: 1.0 / span,
        })
    }

    /// Spec for an episode of `len` transitions. `completions[i]` is the
    /// transition index at which subtask `i` fired, if it did; its anchor sits
    /// in the middle of that transition so the shaping peak lands on it.
    pub fn for_episode(
        completions: &[Option<usize>],
        len: usize,
        weights: Vec<f64>,
        cfg: &RewardConfig,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Annotation("episode has no transitions".into()));
        }
        let anchors = completions
            .iter()
            .map(|c| match c {
                Some(c) if *c < len => Ok((*c as f64 + 0.5) / len as f64),
                Some(c) => Err(Error::Annotation(format!("completion step {c} beyond length {len}"))),
                None => Ok(f64::INFINITY),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            anchors,
            weights,
            cfg.sharpness,
            cfg.trajectory_reward_weight,
            cfg.subtask_reward_weight,
        )
    }

    pub fn n_subtasks(&self) -> usize {
        self.anchors.len()
    }
}

/// Normalized importance weights for `task`: configured ones if present,
/// uniform otherwise.
pub fn subtask_weights(task: &TaskSpec, cfg: &RewardConfig) -> Result<Vec<f64>> {
    let k = task.n_subtasks();
    match cfg.subtask_weights.get(&task.name) {
        None => Ok(vec![1.0 / k as f64; k]),
        Some(w) if w.len() == k && w.iter().all(|&x| x > 0.0) => {
            let s: f64 = w.iter().sum();
            Ok(w.iter().map(|x| x / s).collect())
        }
        Some(w) => Err(Error::Config(format!(
            "task `{}` has {k} subtasks but {} positive weights were expected, got {w:?}",
            task.name, k
        ))),
    }
}

/// Sigmoid-mixture potential over normalized progress.
pub fn potential(rho: f64, spec: &RewardSpec) -> f64 {
    let s: f64 = spec
        .anchors
        .iter()
        .zip(&spec.weights)
        .map(|(&k, &w)| w * sigmoid((rho - k) / spec.eps))
        .sum();
    spec.norm_c * s
}

/// `1/T` at every step of a successful episode, zero otherwise.
pub fn trajectory_reward(len: usize, success: bool) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Annotation("trajectory reward of an empty episode".into()));
    }
    let r = if success { 1.0 / len as f64 } else { 0.0 };
    Ok(vec![r; len])
}

/// Potential differences over transitions: `r_t = Phi((t+1)/T) - Phi(t/T)`.
pub fn subtask_reward(len: usize, spec: &RewardSpec) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Annotation("subtask reward of an empty episode".into()));
    }
    let t = len as f64;
    let phi: Vec<f64> = (0..=len).map(|i| potential(i as f64 / t, spec)).collect();
    Ok(phi.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect())
}

/// Per-step rewards and suffix sums. `g`, `y_traj` and `y_sub` have `T + 1`
/// entries; the last is the terminal zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrace {
    pub r_traj: Vec<f64>,
    pub r_sub: Vec<f64>,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub y_traj: Vec<f64>,
    pub y_sub: Vec<f64>,
}

fn suffix_sums(r: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; r.len() + 1];
    for t in (0..r.len()).rev() {
        g[t] = r[t] + g[t + 1];
    }
    g
}

pub fn hybrid_trace(len: usize, success: bool, spec: &RewardSpec) -> Result<RewardTrace> {
    let r_traj = trajectory_reward(len, success)?;
    let r_sub = subtask_reward(len, spec)?;
    let r: Vec<f64> = r_traj
        .iter()
        .zip(&r_sub)
        .map(|(a, b)| spec.omega_traj * a + spec.omega_sub * b)
        .collect();
    Ok(RewardTrace {
        g: suffix_sums(&r),
        y_traj: suffix_sums(&r_traj),
        y_sub: suffix_sums(&r_sub),
        r_traj,
        r_sub,
        r,
    })
}

/// Return-to-go at step `t` of a `len`-step episode.
pub fn reference_value(t: usize, len: usize, success: bool, spec: &RewardSpec) -> Result<f64> {
    if t > len {
        return Err(Error::Usage(format!("step {t} beyond episode length {len}")));
    }
    Ok(hybrid_trace(len, success, spec)?.g[t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(eps: f64) -> RewardSpec {
        RewardSpec::new(vec![0.5], vec![1.0], eps, 0.4, 0.6).unwrap()
    }

    #[test]
    fn trajectory_reward_spreads_unit_mass() {
        let r = trajectory_reward(100, true).unwrap();
        assert!(r.iter().all(|&x| x == 0.01));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(trajectory_reward(100, false).unwrap().iter().all(|&x| x == 0.0));
        assert!(trajectory_reward(0, true).is_err());
    }

    #[test]
    fn potential_midpoint_and_normalization() {
        for eps in [0.02, 0.1, 0.5] {
            let s = single(eps);
            assert!((potential(0.5, &s) - 0.5 * s.norm_c).abs() < 1e-15);
        }
        let s = single(0.02);
        // Independent evaluation of the normalizer: C = 1 / (sigma(25) - sigma(-25)).
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let c = 1.0 / (sig(25.0) - sig(-25.0));
        assert!((s.norm_c - c).abs() < 1e-12);
        assert!((potential(1.0, &s) - potential(0.0, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subtask_peaks_sit_on_the_anchor_steps() {
        let s = RewardSpec::new(vec![0.2013, 0.4507, 0.8021], vec![0.2, 0.5, 0.3], 0.02, 0.4, 0.6).unwrap();
        let len = 400;
        let r = subtask_reward(len, &s).unwrap();
        for &k in &s.anchors {
            // Local argmax in a window of +-0.1 around the anchor.
            let centre = (k * len as f64) as usize;
            let lo = centre.saturating_sub(40);
            let hi = (centre + 40).min(len - 1);
            let best = (lo..=hi).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            let expect = (k * len as f64 - 0.5).round() as usize;
            assert_eq!(best, expect, "anchor {k}");
        }
    }

    #[test]
    fn equal_weights_give_equal_peaks() {
        let len = 200;
        let s = RewardSpec::new(vec![0.3, 0.7], vec![0.5, 0.5], 0.02, 0.4, 0.6).unwrap();
        let r = subtask_reward(len, &s).unwrap();
        let p1 = r[..100].iter().cloned().fold(0.0, f64::max);
        let p2 = r[100..].iter().cloned().fold(0.0, f64::max);
        // 0.3 * 200 and 0.7 * 200 are both integers, so the peaks are mirror images.
        assert!((p1 - p2).abs() < 1e-9);
    }

    #[test]
    fn hybrid_trace_values() {
        let s = RewardSpec::new(vec![0.25, 0.75], vec![0.5, 0.5], 0.02, 0.4, 0.6).unwrap();
        let ok = hybrid_trace(100, true, &s).unwrap();
        assert!((ok.g[0] - 1.0).abs() < 1e-9);
        assert_eq!(ok.g[100], 0.0);
        for t in 0..=100 {
            assert!((ok.y_traj[t] - (1.0 - t as f64 / 100.0)).abs() < 1e-12);
        }
        let fail = hybrid_trace(100, false, &s).unwrap();
        assert!((fail.g[0] - 0.6).abs() < 1e-9);
        assert!(fail.r_traj.iter().all(|&x| x == 0.0));
        assert!((reference_value(0, 100, true, &s).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(reference_value(100, 100, true, &s).unwrap(), 0.0);
        assert!(reference_value(101, 100, true, &s).is_err());
    }

    #[test]
    fn unreached_subtasks_withhold_their_share() {
        let cfg = RewardConfig::default();
        let w = vec![0.25; 4];
        let s = RewardSpec::for_episode(&[Some(10), Some(40), None, None], 100, w, &cfg).unwrap();
        let r = subtask_reward(100, &s).unwrap();
        // Reached part of the span over reached span plus the withheld half.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let reached: f64 = [0.105f64, 0.405]
            .iter()
            .map(|k| 0.25 * (sig((1.0 - k) / 0.02) - sig(-k / 0.02)))
            .sum();
        assert!((r.iter().sum::<f64>() - reached / (reached + 0.5)).abs() < 1e-12);
        assert!((r.iter().sum::<f64>() - 0.5).abs() < 1e-2);
        assert!(RewardSpec::for_episode(&[None, Some(3)], 10, vec![0.5, 0.5], &cfg).is_err());
        assert!(RewardSpec::for_episode(&[Some(12), None], 10, vec![0.5, 0.5], &cfg).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(RewardSpec::new(vec![0.5, 0.4], vec![0.5, 0.5], 0.02, 0.4, 0.6).is_err());
        assert!(RewardSpec::new(vec![0.5], vec![0.9], 0.02, 0.4, 0.6).is_err());
        assert!(RewardSpec::new(vec![0.5], vec![1.0], 0.0, 0.4, 0.6).is_err());
        assert!(RewardSpec::new(vec![0.5], vec![1.0], 0.02, 0.5, 0.6).is_err());
        assert!(RewardSpec::new(vec![1.0], vec![1.0], 0.02, 0.4, 0.6).is_err());
    }

    #[test]
    fn configured_weights_are_normalized() {
        let task = TaskSpec::pack2();
        let mut cfg = RewardConfig::default();
        assert_eq!(subtask_weights(&task, &cfg).unwrap(), vec![0.2; 5]);
        cfg.subtask_weights.insert("pack-2".into(), vec![1.0, 2.0, 3.0, 2.0, 2.0]);
        let w = subtask_weights(&task, &cfg).unwrap();
        assert!((w[2] - 0.3).abs() < 1e-15);
        cfg.subtask_weights.insert("pack-2".into(), vec![1.0; 3]);
        assert!(subtask_weights(&task, &cfg).is_err());
    }

    /// Random valid spec: K anchors at least 0.01 apart in (0.01, 0.99).
    fn spec_strategy() -> impl Strategy<Value = (usize, RewardSpec)> {
        (1usize..=8, 10usize..=600, 0.005f64..0.2, 0.0f64..=1.0, any::<u64>()).prop_map(
            |(k, len, eps, wt, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut anchors: Vec<f64> = (0..k).map(|i| (i as f64 + rng.random_range(0.05..0.95)) / k as f64).collect();
                anchors.iter_mut().for_each(|a| *a = a.clamp(0.01, 0.99));
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
                let drift = 1.0 - weights.iter().sum::<f64>();
                weights[0] += drift;
                (len, RewardSpec::new(anchors, weights, eps, wt, 1.0 - wt).unwrap())
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn reward_and_return_invariants((len, spec) in spec_strategy(), success in any::<bool>()) {
            let tr = hybrid_trace(len, success, &spec).unwrap();
            prop_assert!((tr.r_sub.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(tr.r_sub.iter().all(|&x| x >= 0.0));
            prop_assert_eq!(tr.g[len], 0.0);
            if success {
                prop_assert!((tr.r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(tr.g.windows(2).all(|w| w[1] <= w[0]));
            }
            for t in 0..=len {
                let comp = spec.omega_traj * tr.y_traj[t] + spec.omega_sub * tr.y_sub[t];
                prop_assert!((comp - tr.g[t]).abs() < 1e-9);
            }
        }

        #[test]
        fn potential_is_monotone((_, spec) in spec_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(potential(hi, &spec) >= potential(lo, &spec));
        }

        #[test]
        fn shaping_telescopes_over_any_segment((len, spec) in spec_strategy(), a in 0usize..600, b in 0usize..600) {
            let (a, b) = (a.min(len), b.min(len));
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let r = subtask_reward(len, &spec).unwrap();
            let seg: f64 = r[a..b].iter().sum();
            let t = len as f64;
            let want = potential(b as f64 / t, &spec) - potential(a as f64 / t, &spec);
            prop_assert!((seg - want).abs() < 1e-9);
        }

        #[test]
        fn raising_a_weight_raises_mass_near_its_anchor(
            k in 2usize..=5, i in 0usize..5, bump in 0.05f64..1.0, len in 200usize..600,
        ) {
            let i = i % k;
            let eps = 0.02;
            // Anchors 1/(k+1) apart, far more than 6 eps.
            let anchors: Vec<f64> = (1..=k).map(|j| j as f64 / (k + 1) as f64).collect();
            let base = vec![1.0 / k as f64; k];
            let mut raised = base.clone();
            raised[i] += bump;
            let s: f64 = raised.iter().sum();
            raised.iter_mut().for_each(|w| *w /= s);
            let a = RewardSpec::new(anchors.clone(), base, eps, 0.4, 0.6).unwrap();
            let b = RewardSpec::new(anchors.clone(), raised, eps, 0.4, 0.6).unwrap();
            let t = len as f64;
            let window = |spec: &RewardSpec| {
                potential((anchors[i] + 3.0 * eps).min(1.0), spec)
                    - potential((anchors[i] - 3.0 * eps).max(0.0), spec)
            };
            prop_assert!(window(&b) > window(&a));
            // Same statement on the discretized trace.
            let ra = subtask_reward(len, &a).unwrap();
            let rb = subtask_reward(len, &b).unwrap();
            let lo = ((anchors[i] - 3.0 * eps) * t).ceil() as usize;
            let hi = ((anchors[i] + 3.0 * eps) * t).floor() as usize;
            prop_assert!(rb[lo..hi].iter().sum::<f64>() > ra[lo..hi].iter().sum::<f64>());
        }
    }
}
