//! Evaluation protocol: testing-set success rates, single-agent malfunction
//! suites with performance-reduction accounting, the N-1 chi-squared
//! two-proportion test, and per-trial trace export.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Ensemble, Role};
use crate::env::{compute_reward, Environment, MalfunctionMask, RotationEnv, Trial};
use crate::{Error, Result};

/// Success counts over one frozen trial set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
}

/// Deterministic, noise-free success rate of the ensemble over `trials`,
/// with `mask` applied to every joint action before execution. A trial
/// succeeds iff its final step's reward is 0.
pub fn success_rate<E: Environment>(
    ensemble: &Ensemble,
    env: &E,
    trials: &[Trial],
    mask: MalfunctionMask,
) -> Result<EvalOutcome> {
    let mut successes = 0;
    // The evaluation path draws no randomness; the rng is only a signature
    // requirement of select_action.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in trials {
        let (mut state, mut obs) = env.reset(*trial)?;
        let final_reward = loop {
            let action = ensemble.select_action(&obs, None, &mut rng)?;
            let action = env.apply_malfunction(&action, mask)?;
            let out = env.step(&state, &action)?;
            if out.terminal.is_some() {
                break out.reward;
            }
            state = out.state;
            obs = out.observation;
        };
        if final_reward == 0.0 {
            successes += 1;
        }
    }
    Ok(EvalOutcome {
        successes,
        trials: trials.len(),
        success_rate: successes as f64 / trials.len().max(1) as f64,
    })
}

/// Relative success-rate reduction `(sr0 - sr) / sr0`, clamped at 0 for
/// improvements. `None` when the baseline is 0 (the reduction is undefined
/// and reported as not-applicable).
pub fn performance_reduction(sr0: f64, sr: f64) -> Option<f64> {
    if sr0 <= 0.0 {
        None
    } else {
        Some(((sr0 - sr) / sr0).max(0.0))
    }
}

/// One malfunction test: the disabled agent and the degraded outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalfunctionEntry {
    pub agent_id: usize,
    pub role: Role,
    pub label: String,
    pub successes: usize,
    pub success_rate: f64,
    /// `None` renders as "n/a" (undefined against a zero baseline).
    pub reduction: Option<f64>,
}

/// Baseline plus one entry per physical agent. The average reduction runs
/// over finger agents only: every policy fails the no-wrist test, so
/// including it would flatten the comparison, and improvements are clamped
/// to zero. `significance` is the pairwise N-1 chi-squared matrix over the
/// groups `[baseline, entries...]` in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalfunctionReport {
    pub trials: usize,
    pub baseline_successes: usize,
    pub baseline_sr: f64,
    pub entries: Vec<MalfunctionEntry>,
    pub average_finger_reduction: Option<f64>,
    pub significance: Vec<Vec<SignificanceResult>>,
}

/// Runs the baseline and one disable-test per physical agent.
pub fn malfunction_suite(
    ensemble: &Ensemble,
    env: &RotationEnv,
    trials: &[Trial],
) -> Result<MalfunctionReport> {
    let baseline = success_rate(ensemble, env, trials, MalfunctionMask::none())?;
    let partition = env.partition();
    let mut entries = Vec::with_capacity(partition.len());
    for agent in &partition {
        let outcome = success_rate(
            ensemble,
            env,
            trials,
            MalfunctionMask::disable(agent.agent_id),
        )?;
        let label = match agent.role {
            Role::Wrist => "no_wrist".to_string(),
            _ => format!("no_finger_{}", agent.agent_id),
        };
        entries.push(MalfunctionEntry {
            agent_id: agent.agent_id,
            role: agent.role,
            label,
            successes: outcome.successes,
            success_rate: outcome.success_rate,
            reduction: performance_reduction(baseline.success_rate, outcome.success_rate),
        });
    }
    let average_finger_reduction = average_reduction(
        entries
            .iter()
            .filter(|e| e.role == Role::Finger)
            .map(|e| e.reduction),
    );
    let mut groups = vec![(baseline.successes, trials.len())];
    groups.extend(entries.iter().map(|e| (e.successes, trials.len())));
    let significance = significance_matrix(&groups)?;
    Ok(MalfunctionReport {
        trials: trials.len(),
        baseline_successes: baseline.successes,
        baseline_sr: baseline.success_rate,
        entries,
        average_finger_reduction,
        significance,
    })
}

/// Mean of the reductions; `None` if any is undefined or there are none.
pub fn average_reduction<I: IntoIterator<Item = Option<f64>>>(reductions: I) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in reductions {
        sum += r?;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// The N-1 chi-squared statistic and its two-tailed p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub chi2_n1: f64,
    pub p_two_tailed: f64,
}

/// Standard normal CDF via the Taylor expansion
/// `Phi(x) = 1/2 + phi(x) * (x + x^3/3 + x^5/(3*5) + ...)`
/// (odd double factorials in the denominators). All terms share the sign
/// of `x`, so the sum is cancellation-free; truncation at a 1e-17 relative
/// increment leaves the result accurate to well below 1e-7 over the domain.
/// Beyond |x| = 8 the tail mass is under double epsilon.
pub fn normal_cdf(x: f64) -> f64 {
    if x < -8.0 {
        return 0.0;
    }
    if x > 8.0 {
        return 1.0;
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 1u32;
    while term.abs() > sum.abs() * 1e-17 && k < 700 {
        term *= x2 / (2 * k + 1) as f64;
        sum += term;
        k += 1;
    }
    let pdf = (-0.5 * x2).exp() / (2.0 * PI).sqrt();
    (0.5 + pdf * sum).clamp(0.0, 1.0)
}

/// Two-proportion N-1 chi-squared test, two-tailed.
///
/// With the 2x2 table `a = s1, b = n1-s1, c = s2, d = n2-s2` and
/// `N = n1+n2`, the statistic is `(N-1) (ad-bc)^2 / ((a+b)(c+d)(a+c)(b+d))`,
/// i.e. Pearson's chi-squared scaled by `(N-1)/N`. The p-value is
/// `2 (1 - Phi(sqrt(chi2)))`. Degenerate pooled margins (all successes or
/// all failures) yield `chi2 = 0, p = 1`.
pub fn n1_chi2_two_tailed(
    successes1: usize,
    n1: usize,
    successes2: usize,
    n2: usize,
) -> Result<SignificanceResult> {
    if n1 == 0 || n2 == 0 || successes1 > n1 || successes2 > n2 {
        return Err(Error::InvalidConfig(
            "need 0 <= successes <= n and n >= 1 per group".into(),
        ));
    }
    let a = successes1 as f64;
    let b = (n1 - successes1) as f64;
    let c = successes2 as f64;
    let d = (n2 - successes2) as f64;
    let n = a + b + c + d;
    let col1 = a + c;
    let col2 = b + d;
    if col1 == 0.0 || col2 == 0.0 {
        return Ok(SignificanceResult {
            chi2_n1: 0.0,
            p_two_tailed: 1.0,
        });
    }
    let det = a * d - b * c;
    let chi2 = (n - 1.0) * det * det / ((a + b) * (c + d) * col1 * col2);
    let p = 2.0 * (1.0 - normal_cdf(chi2.sqrt()));
    Ok(SignificanceResult {
        chi2_n1: chi2,
        p_two_tailed: p.clamp(0.0, 1.0),
    })
}

/// Pairwise significance over `(successes, trials)` groups.
pub fn significance_matrix(groups: &[(usize, usize)]) -> Result<Vec<Vec<SignificanceResult>>> {
    groups
        .iter()
        .map(|&(s1, n1)| {
            groups
                .iter()
                .map(|&(s2, n2)| n1_chi2_two_tailed(s1, n1, s2, n2))
                .collect()
        })
        .collect()
}

/// What the `eval` command writes: counts over the frozen testing set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub trials_path: String,
    pub variant: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// One row of an exported trajectory trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub theta: f64,
    pub omega: f64,
    pub goal: f64,
    pub grips: Vec<f64>,
    pub wrist: f64,
    pub reward: f64,
}

/// Rolls out one trial (noise-free, mask applied) and records a row per
/// state, including the reset state: a full episode yields T+1 rows.
pub fn trace_rows(
    ensemble: &Ensemble,
    env: &RotationEnv,
    trial: Trial,
    mask: MalfunctionMask,
) -> Result<Vec<TraceRow>> {
    let threshold = env.success_threshold();
    let (mut state, mut obs) = env.reset(trial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = vec![TraceRow {
        step: 0,
        theta: state.theta,
        omega: state.omega,
        goal: state.desired_goal,
        grips: state.grip_positions.clone(),
        wrist: state.wrist_tilt,
        reward: compute_reward(state.theta, state.desired_goal, threshold),
    }];
    loop {
        let action = ensemble.select_action(&obs, None, &mut rng)?;
        let action = env.apply_malfunction(&action, mask)?;
        let out = env.step(&state, &action)?;
        state = out.state;
        obs = out.observation;
        rows.push(TraceRow {
            step: rows.len(),
            theta: state.theta,
            omega: state.omega,
            goal: state.desired_goal,
            grips: state.grip_positions.clone(),
            wrist: state.wrist_tilt,
            reward: out.reward,
        });
        if out.terminal.is_some() {
            break;
        }
    }
    Ok(rows)
}

/// CSV with header `step,theta,omega,goal,grip_1..grip_N,wrist,reward`.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let n = rows.first().map_or(0, |r| r.grips.len());
    let mut out = String::from("step,theta,omega,goal");
    for i in 1..=n {
        let _ = write!(out, ",grip_{i}");
    }
    out.push_str(",wrist,reward\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.step, r.theta, r.omega, r.goal);
        for g in &r.grips {
            let _ = write!(out, ",{g}");
        }
        let _ = writeln!(out, ",{},{}", r.wrist, r.reward);
    }
    out
}

/// Writes a trial's trace CSV to `out_path`.
pub fn trace_export(
    ensemble: &Ensemble,
    env: &RotationEnv,
    trial: Trial,
    mask: MalfunctionMask,
    out_path: &Path,
) -> Result<()> {
    let rows = trace_rows(ensemble, env, trial, mask)?;
    std::fs::write(out_path, trace_to_csv(&rows))?;
    Ok(())
}

/// Minimal dependency-free SVG line chart. Each series is a named list of
/// (x, y) points; axes are scaled to the joint data range.
pub fn line_chart_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 46.0;
    const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    let _ = write!(
        svg,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"#333\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    );
    let _ = write!(
        svg,
        "<text x=\"{M}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{x0:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{x1:.3}</text>\n\
         <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{y0:.3}</text>\n\
         <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{y1:.3}</text>\n",
        H - M + 14.0,
        W - M,
        H - M + 14.0,
        H - M,
        M + 4.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            path.join(" "),
            W - M + 2.0,
            M + 14.0 * i as f64,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Object angle against the goal over one trace.
pub fn trace_svg(rows: &[TraceRow]) -> String {
    let theta: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.theta)).collect();
    let goal: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.goal)).collect();
    line_chart_svg("object rotation", &[("theta", theta), ("goal", goal)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Algo, AlgorithmVariant, Ensemble, EnsembleConfig, ReplayMode};
    use crate::env::{EnvConfig, Environment};

    fn rot_env() -> RotationEnv {
        RotationEnv::new(EnvConfig::default()).unwrap()
    }

    /// An ensemble whose actors output exactly zero everywhere.
    fn zero_action_ensemble(env: &RotationEnv) -> Ensemble {
        let mut ens = Ensemble::new(
            AlgorithmVariant::new(Algo::Magcla, ReplayMode::Sher),
            env.partition(),
            env.x_dim(),
            env.action_dim(),
            EnsembleConfig {
                hidden_layers: vec![8],
                ..EnsembleConfig::default()
            },
            0,
        )
        .unwrap();
        for i in 0..ens.n_agents() {
            let n = ens.nets(i).actor.num_params();
            for idx in 0..n {
                ens.nets_mut(i).actor.set_param(idx, 0.0);
            }
        }
        ens
    }

    fn trial_with_goal_at_start(env: &RotationEnv, seed: u64) -> Trial {
        let (state, _) = env.reset(Trial { seed, goal: 0.0 }).unwrap();
        Trial {
            seed,
            goal: state.theta,
        }
    }

    #[test]
    fn zero_policy_succeeds_iff_goal_is_the_initial_angle() {
        let env = rot_env();
        let ens = zero_action_ensemble(&env);
        // Goals equal to the initial angles: theta never moves, success.
        let easy: Vec<Trial> = (0..10).map(|s| trial_with_goal_at_start(&env, s)).collect();
        let outcome = success_rate(&ens, &env, &easy, MalfunctionMask::none()).unwrap();
        assert_eq!(outcome.success_rate, 1.0);
        // Goals far from the initial angles: always -1 at the end.
        let hard: Vec<Trial> = (0..10)
            .map(|s| {
                let t = trial_with_goal_at_start(&env, s);
                Trial {
                    seed: s,
                    goal: crate::env::wrap_angle(t.goal + 1.5),
                }
            })
            .collect();
        let outcome = success_rate(&ens, &env, &hard, MalfunctionMask::none()).unwrap();
        assert_eq!(outcome.success_rate, 0.0);
    }

    #[test]
    fn success_rate_is_bit_deterministic() {
        let env = rot_env();
        let ens = zero_action_ensemble(&env);
        let trials: Vec<Trial> = (0..8).map(|s| trial_with_goal_at_start(&env, s)).collect();
        let a = success_rate(&ens, &env, &trials, MalfunctionMask::none()).unwrap();
        let b = success_rate(&ens, &env, &trials, MalfunctionMask::none()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reduction_arithmetic_reproduces_the_reference_rows() {
        // Block task row: baseline .91, per-finger rates
        // {.38, .78, .69, .94, .28} -> reductions {.58, .14, .24, 0, .69},
        // average .33.
        let sr0 = 0.91;
        let rates = [0.38, 0.78, 0.69, 0.94, 0.28];
        let expected = [58, 14, 24, 0, 69];
        let reductions: Vec<f64> = rates
            .iter()
            .map(|&sr| performance_reduction(sr0, sr).unwrap())
            .collect();
        for (r, e) in reductions.iter().zip(expected.iter()) {
            assert_eq!((r * 100.0).round() as i64, *e);
        }
        let avg = average_reduction(reductions.iter().map(|&r| Some(r))).unwrap();
        assert_eq!((avg * 100.0).round() as i64, 33);

        // Egg task row: baseline .95, rates {.48, .89, .71, .92, .36},
        // average .29.
        let sr0 = 0.95;
        let rates = [0.48, 0.89, 0.71, 0.92, 0.36];
        let avg = average_reduction(
            rates
                .iter()
                .map(|&sr| performance_reduction(sr0, sr)),
        )
        .unwrap();
        assert_eq!((avg * 100.0).round() as i64, 29);
    }

    #[test]
    fn reduction_edge_cases() {
        assert_eq!(performance_reduction(0.5, 0.5), Some(0.0));
        assert_eq!(performance_reduction(0.5, 0.9), Some(0.0)); // clamped
        assert_eq!(performance_reduction(0.0, 0.3), None);
    }

    proptest::proptest! {
        // Scale-free: multiplying both rates by any positive factor leaves
        // the reduction unchanged.
        #[test]
        fn reduction_is_scale_free(
            sr0 in 0.01f64..1.0,
            sr in 0.0f64..1.0,
            lambda in 0.01f64..100.0
        ) {
            let a = performance_reduction(sr0, sr).unwrap();
            let b = performance_reduction(lambda * sr0, lambda * sr).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.158655253931457).abs() < 1e-12);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(3.0) - 0.998650101968370).abs() < 1e-12);
        assert_eq!(normal_cdf(9.0), 1.0);
        assert_eq!(normal_cdf(-9.0), 0.0);
    }

    #[test]
    fn chi2_reproduces_the_reference_p_values() {
        let r = n1_chi2_two_tailed(91, 100, 76, 100).unwrap();
        assert!(
            r.p_two_tailed >= 3.5e-3 && r.p_two_tailed <= 5.0e-3,
            "p = {}",
            r.p_two_tailed
        );
        let r = n1_chi2_two_tailed(95, 100, 83, 100).unwrap();
        assert!(
            r.p_two_tailed >= 6e-3 && r.p_two_tailed <= 8e-3,
            "p = {}",
            r.p_two_tailed
        );
    }

    #[test]
    fn chi2_equal_proportions_and_degenerate_margins() {
        let r = n1_chi2_two_tailed(40, 100, 40, 100).unwrap();
        assert_eq!(r.chi2_n1, 0.0);
        assert_eq!(r.p_two_tailed, 1.0);
        // Pooled all-success margin.
        let r = n1_chi2_two_tailed(100, 100, 50, 50).unwrap();
        assert_eq!(r.chi2_n1, 0.0);
        assert_eq!(r.p_two_tailed, 1.0);
        let r = n1_chi2_two_tailed(0, 100, 0, 50).unwrap();
        assert_eq!(r.p_two_tailed, 1.0);
    }

    #[test]
    fn chi2_is_symmetric_in_the_groups() {
        let a = n1_chi2_two_tailed(91, 100, 76, 100).unwrap();
        let b = n1_chi2_two_tailed(76, 100, 91, 100).unwrap();
        assert_eq!(a.chi2_n1, b.chi2_n1);
        assert_eq!(a.p_two_tailed, b.p_two_tailed);
    }

    #[test]
    fn chi2_matches_a_directly_coded_pearson_statistic() {
        // Oracle: Pearson chi-squared via the observed/expected loop; the
        // N-1 statistic must equal (N-1)/N times it on every input.
        fn pearson(s1: usize, n1: usize, s2: usize, n2: usize) -> f64 {
            let obs = [
                [s1 as f64, (n1 - s1) as f64],
                [s2 as f64, (n2 - s2) as f64],
            ];
            let n = (n1 + n2) as f64;
            let row: Vec<f64> = obs.iter().map(|r| r[0] + r[1]).collect();
            let col = [obs[0][0] + obs[1][0], obs[0][1] + obs[1][1]];
            let mut chi2 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let expected = row[i] * col[j] / n;
                    if expected > 0.0 {
                        let d = obs[i][j] - expected;
                        chi2 += d * d / expected;
                    }
                }
            }
            chi2
        }
        let cases = [
            (91, 100, 76, 100),
            (95, 100, 83, 100),
            (10, 50, 40, 60),
            (1, 10, 9, 10),
            (25, 100, 25, 100),
        ];
        for (s1, n1, s2, n2) in cases {
            let ours = n1_chi2_two_tailed(s1, n1, s2, n2).unwrap().chi2_n1;
            let n = (n1 + n2) as f64;
            let scaled = (n - 1.0) / n * pearson(s1, n1, s2, n2);
            assert!(
                (ours - scaled).abs() < 1e-10,
                "{s1}/{n1} vs {s2}/{n2}: {ours} vs {scaled}"
            );
        }
    }

    #[test]
    fn chi2_rejects_bad_counts() {
        assert!(n1_chi2_two_tailed(5, 4, 1, 10).is_err());
        assert!(n1_chi2_two_tailed(0, 0, 1, 10).is_err());
    }

    #[test]
    fn significance_matrix_diagonal_is_one() {
        let m = significance_matrix(&[(91, 100), (76, 100), (5, 100)]).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i].p_two_tailed, 1.0);
            for (j, cell) in row.iter().enumerate() {
                assert_eq!(cell.p_two_tailed, m[j][i].p_two_tailed);
            }
        }
    }

    #[test]
    fn malfunction_suite_layout() {
        let env = rot_env();
        let ens = zero_action_ensemble(&env);
        let trials: Vec<Trial> = (0..6).map(|s| trial_with_goal_at_start(&env, s)).collect();
        let report = malfunction_suite(&ens, &env, &trials).unwrap();
        assert_eq!(report.entries.len(), 4); // 3 fingers + wrist
        assert_eq!(report.baseline_sr, 1.0);
        assert_eq!(report.entries[3].label, "no_wrist");
        // Significance matrix over baseline + 4 disable tests.
        assert_eq!(report.significance.len(), 5);
        assert!(report.significance.iter().all(|row| row.len() == 5));
        assert_eq!(report.significance[0][0].p_two_tailed, 1.0);
        // Averaging skips the wrist entry.
        let fingers: Vec<Option<f64>> = report
            .entries
            .iter()
            .filter(|e| e.role == Role::Finger)
            .map(|e| e.reduction)
            .collect();
        assert_eq!(fingers.len(), 3);
        assert_eq!(
            report.average_finger_reduction,
            average_reduction(fingers.into_iter())
        );
        // Disabling an agent the zero policy never uses: theta still never
        // moves, so reduction is 0 for fingers.
        assert_eq!(report.entries[0].reduction, Some(0.0));
    }

    #[test]
    fn trace_has_horizon_plus_one_rows_and_reconstructible_rewards() {
        let env = rot_env();
        let ens = zero_action_ensemble(&env);
        let trial = trial_with_goal_at_start(&env, 3);
        let rows = trace_rows(&ens, &env, trial, MalfunctionMask::none()).unwrap();
        assert_eq!(rows.len(), env.horizon() + 1);
        let threshold = env.success_threshold();
        for r in &rows {
            assert_eq!(r.reward, compute_reward(r.theta, r.goal, threshold));
        }
        // Zero-action policy: constant theta column.
        assert!(rows.iter().all(|r| r.theta == rows[0].theta));
        let csv = trace_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,theta,omega,goal,grip_1,grip_2,grip_3,wrist,reward"
        );
        assert_eq!(lines.count(), rows.len());
    }

    #[test]
    fn trace_svg_is_well_formed() {
        let env = rot_env();
        let ens = zero_action_ensemble(&env);
        let trial = trial_with_goal_at_start(&env, 5);
        let rows = trace_rows(&ens, &env, trial, MalfunctionMask::none()).unwrap();
        let svg = trace_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
