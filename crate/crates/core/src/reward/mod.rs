//! Rollout rewards and the group-relative clipped policy objective.
//!
//! Everything here is a pure function. The numeric parts are generic over
//! [`Scalar`]; the crate root exposes `f64` aliases.

mod mask;
mod rollout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drtts::verify_answer;
use crate::modelclient::ModelClient;
use crate::protocol::{parse_trajectory, SegmentKind, Verdict};
use crate::scalar::{compensated_sum, mean, Scalar};

pub use mask::{build_sft_mask, response_token_mask, sft_mask};
pub use rollout::{score_groups, GroupScore, RolloutLine};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("log-prob sequences of rollout {rollout} disagree in length")]
    LengthMismatch { rollout: usize },
    #[error("non-finite log-prob in rollout {rollout} at token {token}")]
    NonFiniteLogProb { rollout: usize, token: usize },
    #[error("advantages missing or of wrong length")]
    MissingAdvantages,
    #[error("token offsets do not tile the text: {0}")]
    OffsetsNotTiling(String),
    #[error("spans do not tile the text: {0}")]
    SpansNotTiling(String),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// α weights accuracy against format; ε is the ratio clip; β the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig<S> {
    pub alpha: S,
    pub clip_eps: S,
    pub kl_beta: S,
}

impl<S: Scalar> Default for RewardConfig<S> {
    fn default() -> Self {
        Self {
            alpha: S::of(0.9),
            clip_eps: S::of(0.2),
            kl_beta: S::zero(),
        }
    }
}

impl<S: Scalar> RewardConfig<S> {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha >= S::zero() && self.alpha <= S::one()) {
            return Err(RewardError::InvalidConfig(
                "alpha must lie in [0, 1]".into(),
            ));
        }
        if !(self.clip_eps > S::zero()) {
            return Err(RewardError::InvalidConfig("clip_eps must be > 0".into()));
        }
        if !(self.kl_beta >= S::zero()) {
            return Err(RewardError::InvalidConfig("kl_beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// 1 iff the output parses as a complete trajectory and every tool-call body
/// is a valid call.
pub fn format_reward(raw: &str) -> u8 {
    let parsed = parse_trajectory(raw);
    let calls_ok = parsed
        .segments
        .iter()
        .filter(|s| s.kind == SegmentKind::ToolCall)
        .all(|s| s.parsed_call.is_some());
    u8::from(parsed.verdict == Verdict::Valid && calls_ok)
}

/// 1 iff the judge accepts `answer`. No answer means 0 without a judge call;
/// judge failures and unparseable verdicts also give 0.
pub fn accuracy_reward(
    question: &str,
    golden: &str,
    candidates: &[String],
    answer: Option<&str>,
    judge: &dyn ModelClient,
) -> u8 {
    let Some(answer) = answer else { return 0 };
    match verify_answer(question, golden, candidates, answer, judge) {
        Ok(v) => u8::from(v.correct),
        Err(e) => {
            log::warn!("accuracy judge failed: {e}");
            0
        }
    }
}

/// α·r_acc + (1−α)·r_fmt.
pub fn combined_reward<S: Scalar>(r_acc: u8, r_fmt: u8, cfg: &RewardConfig<S>) -> S {
    let acc = S::of(f64::from(r_acc));
    let fmt = S::of(f64::from(r_fmt));
    cfg.alpha * acc + (S::one() - cfg.alpha) * fmt
}

/// A_g = R_g − mean(R).
pub fn group_advantages<S: Scalar>(rewards: &[S]) -> Result<Vec<S>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    // Shifting by the first reward makes equal rewards give exact zeros.
    let shift = rewards[0];
    let deviations: Vec<S> = rewards.iter().map(|&r| r - shift).collect();
    let m = mean(&deviations).expect("non-empty group");
    Ok(deviations.iter().map(|&d| d - m).collect())
}

/// Per-token log-probs of one rollout under the current, old and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs<S> {
    pub theta: Vec<S>,
    pub old: Vec<S>,
    #[serde(rename = "ref")]
    pub reference: Vec<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRollout<S> {
    pub raw_text: String,
    pub r_format: u8,
    pub r_acc: u8,
    pub reward: S,
    pub logprobs: TokenLogProbs<S>,
    /// Tokens that count toward the ratio and KL; `None` keeps every token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mask: Option<Vec<bool>>,
}

impl<S: Scalar> ScoredRollout<S> {
    pub fn new(
        raw_text: impl Into<String>,
        r_format: u8,
        r_acc: u8,
        logprobs: TokenLogProbs<S>,
        cfg: &RewardConfig<S>,
    ) -> Self {
        Self {
            raw_text: raw_text.into(),
            r_format,
            r_acc,
            reward: combined_reward(r_acc, r_format, cfg),
            logprobs,
            token_mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<S> {
    pub question_id: String,
    pub rollouts: Vec<ScoredRollout<S>>,
    pub advantages: Vec<S>,
}

impl<S: Scalar> RolloutGroup<S> {
    /// Builds the group and fills in its advantages.
    pub fn new(
        question_id: impl Into<String>,
        rollouts: Vec<ScoredRollout<S>>,
    ) -> Result<Self, RewardError> {
        let rewards: Vec<S> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards)?;
        Ok(Self {
            question_id: question_id.into(),
            rollouts,
            advantages,
        })
    }
}

/// Per-token KL estimate exp(r − θ) − (r − θ) − 1 with r the reference
/// log-prob. Never negative.
pub fn kl_token<S: Scalar>(theta: S, reference: S) -> S {
    let d = reference - theta;
    // exp(d) - d - 1 via exp_m1 keeps precision for small |d|.
    (d.exp_m1() - d).max(S::zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutTerm<S> {
    pub ratio: S,
    pub clipped_ratio: S,
    pub advantage: S,
    pub kl: S,
    pub term: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoOutput<S> {
    pub objective: S,
    pub terms: Vec<RolloutTerm<S>>,
}

fn check_rollout<S: Scalar>(i: usize, r: &ScoredRollout<S>) -> Result<(), RewardError> {
    let lp = &r.logprobs;
    let n = lp.theta.len();
    if lp.old.len() != n
        || lp.reference.len() != n
        || r.token_mask.as_ref().is_some_and(|m| m.len() != n)
    {
        return Err(RewardError::LengthMismatch { rollout: i });
    }
    for t in 0..n {
        if !(lp.theta[t].is_finite() && lp.old[t].is_finite() && lp.reference[t].is_finite()) {
            return Err(RewardError::NonFiniteLogProb {
                rollout: i,
                token: t,
            });
        }
    }
    Ok(())
}

/// One rollout's clipped surrogate minus its KL penalty.
pub fn rollout_term<S: Scalar>(
    rollout: &ScoredRollout<S>,
    advantage: S,
    cfg: &RewardConfig<S>,
) -> RolloutTerm<S> {
    let lp = &rollout.logprobs;
    let keep = |t: usize| rollout.token_mask.as_ref().is_none_or(|m| m[t]);
    let kept: Vec<usize> = (0..lp.theta.len()).filter(|&t| keep(t)).collect();
    let log_ratio = compensated_sum(kept.iter().map(|&t| lp.theta[t] - lp.old[t]));
    let ratio = log_ratio.exp();
    let clipped_ratio = ratio
        .max(S::one() - cfg.clip_eps)
        .min(S::one() + cfg.clip_eps);
    let kl = if kept.is_empty() {
        S::zero()
    } else {
        let total = compensated_sum(kept.iter().map(|&t| kl_token(lp.theta[t], lp.reference[t])));
        total / S::of(kept.len() as f64)
    };
    let surrogate = (ratio * advantage).min(clipped_ratio * advantage);
    RolloutTerm {
        ratio,
        clipped_ratio,
        advantage,
        kl,
        term: surrogate - cfg.kl_beta * kl,
    }
}

/// Mean over the group of each rollout's term.
pub fn grpo_objective<S: Scalar>(
    group: &RolloutGroup<S>,
    cfg: &RewardConfig<S>,
) -> Result<GrpoOutput<S>, RewardError> {
    if group.advantages.len() != group.rollouts.len() {
        return Err(RewardError::MissingAdvantages);
    }
    if group.rollouts.len() < 2 {
        return Err(RewardError::GroupTooSmall(group.rollouts.len()));
    }
    for (i, r) in group.rollouts.iter().enumerate() {
        check_rollout(i, r)?;
    }
    let terms: Vec<RolloutTerm<S>> = group
        .rollouts
        .iter()
        .zip(&group.advantages)
        .map(|(r, &a)| rollout_term(r, a, cfg))
        .collect();
    let values: Vec<S> = terms.iter().map(|t| t.term).collect();
    Ok(GrpoOutput {
        objective: mean(&values).expect("non-empty group"),
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::ScriptedBackend;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lp(theta: Vec<f64>, old: Vec<f64>, reference: Vec<f64>) -> TokenLogProbs<f64> {
        TokenLogProbs {
            theta,
            old,
            reference,
        }
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(format_reward("<think>x</think><answer>y</answer>"), 1);
        assert_eq!(format_reward("<think>x</think><answer>y"), 0);
        let bad_call = r#"<think>a</think><tool_call>{"name":"text_search","arguments":{}}</tool_call><tool_response>r</tool_response><think>b</think><answer>c</answer>"#;
        assert_eq!(format_reward(bad_call), 0);
        let good = bad_call.replace("{}}", r#"{"query_list":["q"]}}"#);
        assert_eq!(format_reward(&good), 1);
    }

    #[test]
    fn accuracy_reward_cases() {
        let yes = ScriptedBackend::lenient("Yes");
        let no = ScriptedBackend::lenient("No");
        let junk = ScriptedBackend::lenient("Yes, because");
        assert_eq!(accuracy_reward("q", "g", &[], Some("g"), &yes), 1);
        assert_eq!(accuracy_reward("q", "g", &[], Some("g"), &no), 0);
        assert_eq!(accuracy_reward("q", "g", &[], Some("g"), &junk), 0);
        // A strict stub would fail if it were called.
        assert_eq!(
            accuracy_reward("q", "g", &[], None, &ScriptedBackend::strict()),
            0
        );
    }

    #[test]
    fn combined_cases() {
        let mut cfg = RewardConfig::<f64>::default();
        assert_relative_eq!(combined_reward(0, 1, &cfg), 0.1, epsilon = 1e-12);
        cfg.alpha = 1.0;
        assert_eq!(combined_reward(1, 0, &cfg), 1.0);
        cfg.alpha = 0.5;
        assert_eq!(combined_reward(1, 1, &cfg), 1.0);
        let cfg32 = RewardConfig::<f32>::default();
        assert!((combined_reward(1, 0, &cfg32) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn advantages_cases() {
        assert_eq!(group_advantages(&[0.7, 0.7, 0.7]).unwrap(), vec![0.0; 3]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        for (x, y) in a.iter().zip([0.4, -0.6, -0.6, 0.4, 0.4]) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
        assert_eq!(group_advantages(&[1.0]), Err(RewardError::GroupTooSmall(1)));
    }

    #[test]
    fn clip_cases() {
        let cfg = RewardConfig::<f64>::default();
        let r = ScoredRollout::new("", 1, 1, lp(vec![2f64.ln()], vec![0.0], vec![0.0]), &cfg);
        let pos = rollout_term(&r, 1.0, &cfg);
        assert!((pos.term - 1.2).abs() < 1e-12);
        let neg = rollout_term(&r, -1.0, &cfg);
        assert!((neg.term + 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_give_zero() {
        let cfg = RewardConfig::<f64> {
            kl_beta: 0.3,
            ..Default::default()
        };
        let rollouts = (0..4)
            .map(|i| {
                let v = vec![-0.5 * i as f64, -1.0];
                ScoredRollout::new(
                    "",
                    (i % 2) as u8,
                    (i / 2) as u8,
                    lp(v.clone(), v.clone(), v),
                    &cfg,
                )
            })
            .collect();
        let g = RolloutGroup::new("q", rollouts).unwrap();
        let out = grpo_objective(&g, &cfg).unwrap();
        assert!(out.objective.abs() < 1e-12);
        assert!(out.terms.iter().all(|t| t.ratio == 1.0 && t.kl == 0.0));
    }

    #[test]
    fn mask_excludes_tokens() {
        let cfg = RewardConfig::<f64>::default();
        let mut r = ScoredRollout::new(
            "",
            1,
            1,
            lp(vec![0.0, 5.0], vec![0.0, 0.0], vec![0.0, 0.0]),
            &cfg,
        );
        r.token_mask = Some(vec![true, false]);
        let t = rollout_term(&r, 1.0, &cfg);
        assert_eq!(t.ratio, 1.0);
        assert_eq!(t.kl, 0.0);
    }

    #[test]
    fn objective_errors() {
        let cfg = RewardConfig::<f64>::default();
        let ok = ScoredRollout::new("", 1, 1, lp(vec![0.0], vec![0.0], vec![0.0]), &cfg);
        let short = ScoredRollout::new("", 1, 1, lp(vec![0.0], vec![], vec![0.0]), &cfg);
        let g = RolloutGroup::new("q", vec![ok.clone(), short]).unwrap();
        assert_eq!(
            grpo_objective(&g, &cfg),
            Err(RewardError::LengthMismatch { rollout: 1 })
        );
        let nan = ScoredRollout::new("", 1, 1, lp(vec![f64::NAN], vec![0.0], vec![0.0]), &cfg);
        let g = RolloutGroup::new("q", vec![ok, nan]).unwrap();
        assert_eq!(
            grpo_objective(&g, &cfg),
            Err(RewardError::NonFiniteLogProb {
                rollout: 1,
                token: 0
            })
        );
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::<f64>::default().validate().is_ok());
        let bad = RewardConfig::<f64> {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RewardConfig::<f64> {
            clip_eps: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let a = group_advantages(&rewards).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let m = rewards.iter().sum::<f64>() / rewards.len() as f64;
            for (x, r) in a.iter().zip(&rewards) {
                prop_assert!((x - (r - m)).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_non_negative(theta in -20.0f64..0.0, reference in -20.0f64..0.0) {
            let k = kl_token(theta, reference);
            prop_assert!(k >= 0.0);
            let d = reference - theta;
            prop_assert!((k - (d.exp() - d - 1.0)).abs() <= 1e-9 * (1.0 + d.exp()));
        }

        #[test]
        fn reward_bounded(alpha in 0.0f64..=1.0, acc in 0u8..2, fmt in 0u8..2) {
            let cfg = RewardConfig { alpha, ..Default::default() };
            let r = combined_reward(acc, fmt, &cfg);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn clip_bound_for_positive_advantage(log_ratio in -3.0f64..3.0, a in 0.01f64..2.0) {
            let cfg = RewardConfig::<f64>::default();
            let r = ScoredRollout::new("", 1, 1, lp(vec![log_ratio], vec![0.0], vec![0.0]), &cfg);
            let t = rollout_term(&r, a, &cfg);
            prop_assert!(t.term <= 1.2 * a + 1e-12);
        }
    }
}
