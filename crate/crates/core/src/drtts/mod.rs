//! Tree search over per-tool expert models with judge-verified leaves, and
//! extraction of the winning paths as supervised fine-tuning records.

mod sft;
mod tree;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelclient::{complete, ChatTurn, ClientError, ModelClient};
use crate::prompts;
use crate::protocol::{ProtocolError, ToolName};

pub use sft::{extract_sft_dataset, sft_record, SftRecord};
pub use tree::{
    estimate_tokens, run_tree_search, ExhaustReason, Gap, NodeStatus, PruneReason, SearchConfig,
    SearchOutcome, SearchTree, Termination, TreeNode, TreeSearch, TreeStats, VerifiedTrajectory,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DrttsError {
    #[error("expert pool is empty")]
    EmptyPool,
    #[error("every expert failed at the root: {0:?}")]
    AllExpertsFailed(Vec<String>),
    #[error("judge reply is not Yes or No: {raw:?}")]
    JudgeUnparseable { raw: String },
    #[error("judge call failed: {0}")]
    Judge(ClientError),
    #[error("classifier reply is not a tool label: {raw:?}")]
    ClassifierUnparseable { raw: String },
    #[error("classifier call failed: {0}")]
    Classifier(ClientError),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("no verified trajectories to export")]
    EmptyResults,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// One tool expert: a model endpoint and the tool it specializes in.
#[derive(Clone)]
pub struct Expert {
    pub label: ToolName,
    pub client: Arc<dyn ModelClient>,
}

/// The M experts, in the order their children are attached.
#[derive(Clone)]
pub struct ExpertPool {
    experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn new(experts: Vec<Expert>) -> Result<Self, DrttsError> {
        if experts.is_empty() {
            return Err(DrttsError::EmptyPool);
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn labels(&self) -> Vec<ToolName> {
        self.experts.iter().map(|e| e.label).collect()
    }
}

/// A judge decision and the reply it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub correct: bool,
    pub raw: String,
}

/// Strict reading of a judge reply: `Yes` or `No` after trimming, any case.
pub fn parse_judge_reply(raw: &str) -> Result<bool, DrttsError> {
    let t = raw.trim();
    if t.eq_ignore_ascii_case("yes") {
        Ok(true)
    } else if t.eq_ignore_ascii_case("no") {
        Ok(false)
    } else {
        Err(DrttsError::JudgeUnparseable {
            raw: raw.to_string(),
        })
    }
}

/// The judge conversation for one candidate answer.
pub fn judge_turns(
    question: &str,
    golden: &str,
    candidates: &[String],
    response: &str,
) -> Vec<ChatTurn> {
    vec![
        ChatTurn::system(prompts::JUDGE_SYSTEM),
        ChatTurn::user(prompts::judge_user(question, golden, candidates, response)),
    ]
}

pub fn verify_answer(
    question: &str,
    golden: &str,
    candidates: &[String],
    response: &str,
    judge: &dyn ModelClient,
) -> Result<JudgeVerdict, DrttsError> {
    let turns = judge_turns(question, golden, candidates, response);
    let raw = complete(judge, &turns, &[]).map_err(DrttsError::Judge)?;
    let correct = parse_judge_reply(&raw)?;
    Ok(JudgeVerdict { correct, raw })
}

const CLASSIFIER_SYSTEM: &str = "Decide which single search tool is most needed to answer the \
question. Reply with exactly one of: image_search_by_text_query, image_search_by_lens, \
text_search, model_search.";

/// Asks `classifier` which tool a question needs. Replies outside the four
/// labels are an error, never a guess.
pub fn classify_task(
    question: &str,
    image: Option<&str>,
    classifier: &dyn ModelClient,
) -> Result<ToolName, DrttsError> {
    let turns = vec![
        ChatTurn::system(CLASSIFIER_SYSTEM),
        ChatTurn::user(question).with_image(image.map(str::to_string)),
    ];
    let raw = complete(classifier, &turns, &[]).map_err(DrttsError::Classifier)?;
    ToolName::from_str(raw.trim()).map_err(|_| DrttsError::ClassifierUnparseable { raw })
}

/// Per-tool subsets of a dataset, by item index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub by_tool: BTreeMap<ToolName, Vec<usize>>,
    /// Items the classifier could not label, with the reason.
    pub quarantined: Vec<(usize, String)>,
}

impl Partition {
    pub fn count(&self, tool: ToolName) -> usize {
        self.by_tool.get(&tool).map_or(0, Vec::len)
    }
}

pub fn partition<'a>(
    questions: impl IntoIterator<Item = (&'a str, Option<&'a str>)>,
    classifier: &dyn ModelClient,
) -> Partition {
    let mut out = Partition::default();
    for (i, (text, image)) in questions.into_iter().enumerate() {
        match classify_task(text, image, classifier) {
            Ok(tool) => out.by_tool.entry(tool).or_default().push(i),
            Err(e) => out.quarantined.push((i, e.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::ScriptedBackend;

    #[test]
    fn judge_parsing() {
        assert!(parse_judge_reply("Yes").unwrap());
        assert!(!parse_judge_reply(" no\n").unwrap());
        assert!(parse_judge_reply("YES").unwrap());
        assert!(matches!(
            parse_judge_reply("Yes, because"),
            Err(DrttsError::JudgeUnparseable { .. })
        ));
        assert!(parse_judge_reply("").is_err());
    }

    #[test]
    fn verify_uses_template() {
        let judge = ScriptedBackend::strict().on_contains("Ground Truth Answer: Paris", "Yes");
        let v = verify_answer("Capital?", "Paris", &[], "paris", &judge).unwrap();
        assert!(v.correct);
        assert_eq!(v.raw, "Yes");
        assert!(matches!(
            verify_answer("Capital?", "Rome", &[], "x", &judge),
            Err(DrttsError::Judge(_))
        ));
    }

    #[test]
    fn classification() {
        let c = ScriptedBackend::strict()
            .on_contains("who wrote", "text_search")
            .on_contains("which bridge", " image_search_by_lens\n")
            .on_contains("hmm", "maybe images?");
        assert_eq!(
            classify_task("who wrote it", None, &c).unwrap(),
            ToolName::TextSearch
        );
        assert!(matches!(
            classify_task("hmm", None, &c),
            Err(DrttsError::ClassifierUnparseable { .. })
        ));
        let qs = ["who wrote a", "which bridge b", "hmm c", "who wrote d"];
        let p = partition(qs.iter().map(|q| (*q, None)), &c);
        assert_eq!(p.by_tool[&ToolName::TextSearch], vec![0, 3]);
        assert_eq!(p.count(ToolName::ImageSearchByLens), 1);
        assert_eq!(p.quarantined.len(), 1);
        assert_eq!(p.quarantined[0].0, 2);
    }

    #[test]
    fn empty_pool() {
        assert!(matches!(
            ExpertPool::new(vec![]),
            Err(DrttsError::EmptyPool)
        ));
    }
}
