use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::mask::response_token_mask;
use super::{
    accuracy_reward, format_reward, grpo_objective, RewardConfig, RewardError, RolloutGroup,
    RolloutTerm, ScoredRollout, TokenLogProbs,
};
use crate::modelclient::ModelClient;
use crate::protocol::parse_trajectory;

/// One input rollout line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLine {
    pub question_id: String,
    #[serde(default)]
    pub question: String,
    pub raw_text: String,
    pub golden: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
    pub token_logprobs: TokenLogProbs<f64>,
    /// Character offsets of each token; when present, tool-response tokens
    /// are left out of the ratio and KL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_offsets: Option<Vec<(usize, usize)>>,
}

/// One output line per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub question_id: String,
    pub r_format: Vec<u8>,
    pub r_acc: Vec<u8>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub objective: f64,
    pub objective_terms: Vec<RolloutTerm<f64>>,
}

/// Groups lines by question (first-appearance order), scores every rollout
/// and evaluates the group objective.
pub fn score_groups(
    lines: &[RolloutLine],
    judge: &dyn ModelClient,
    cfg: &RewardConfig<f64>,
) -> Result<Vec<GroupScore>, RewardError> {
    cfg.validate()?;
    let mut groups: IndexMap<&str, Vec<&RolloutLine>> = IndexMap::new();
    for line in lines {
        groups.entry(&line.question_id).or_default().push(line);
    }
    groups
        .into_iter()
        .map(|(qid, members)| {
            let rollouts = members
                .iter()
                .map(|l| {
                    let r_fmt = format_reward(&l.raw_text);
                    let parsed = parse_trajectory(&l.raw_text);
                    let r_acc = accuracy_reward(
                        &l.question,
                        &l.golden,
                        &l.candidates,
                        parsed.answer(),
                        judge,
                    );
                    let mut r = ScoredRollout::new(
                        l.raw_text.clone(),
                        r_fmt,
                        r_acc,
                        l.token_logprobs.clone(),
                        cfg,
                    );
                    if let Some(offsets) = &l.token_offsets {
                        r.token_mask = Some(response_token_mask(&l.raw_text, offsets)?);
                    }
                    Ok(r)
                })
                .collect::<Result<Vec<_>, RewardError>>()?;
            let group = RolloutGroup::new(qid, rollouts)?;
            let out = grpo_objective(&group, cfg)?;
            Ok(GroupScore {
                question_id: qid.to_string(),
                r_format: group.rollouts.iter().map(|r| r.r_format).collect(),
                r_acc: group.rollouts.iter().map(|r| r.r_acc).collect(),
                rewards: group.rollouts.iter().map(|r| r.reward).collect(),
                advantages: group.advantages,
                objective: out.objective,
                objective_terms: out.terms,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::ScriptedBackend;

    fn line(qid: &str, raw: &str) -> RolloutLine {
        RolloutLine {
            question_id: qid.into(),
            question: "q".into(),
            raw_text: raw.into(),
            golden: "g".into(),
            candidates: vec![],
            token_logprobs: TokenLogProbs {
                theta: vec![-1.0],
                old: vec![-1.0],
                reference: vec![-1.0],
            },
            token_offsets: None,
        }
    }

    #[test]
    fn groups_in_order() {
        let judge = ScriptedBackend::lenient("Yes");
        let good = "<think>t</think><answer>g</answer>";
        let lines = vec![
            line("b", good),
            line("a", "junk"),
            line("b", "junk"),
            line("a", good),
        ];
        let out = score_groups(&lines, &judge, &RewardConfig::default()).unwrap();
        assert_eq!(out[0].question_id, "b");
        assert_eq!(out[0].r_format, vec![1, 0]);
        assert_eq!(out[0].rewards, vec![1.0, 0.0]);
        assert_eq!(out[0].advantages, vec![0.5, -0.5]);
        assert_eq!(out[0].objective, 0.0);
        assert_eq!(out[1].rewards, vec![0.0, 1.0]);
    }

    #[test]
    fn singleton_group_rejected() {
        let judge = ScriptedBackend::lenient("Yes");
        let err = score_groups(&[line("a", "x")], &judge, &RewardConfig::default()).unwrap_err();
        assert_eq!(err, RewardError::GroupTooSmall(1));
    }
}
