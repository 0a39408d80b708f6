use std::collections::VecDeque;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{verify_answer, DrttsError, ExpertPool, JudgeVerdict};
use crate::modelclient::{complete, summarize_tool_response, ChatTurn, ClientError, ModelClient};
use crate::prompts;
use crate::protocol::{
    neutralize_tags, parse_trajectory, Awaiting, MultimodalQuery, Segment, SegmentKind, ToolCall,
    Trajectory, Verdict,
};
use crate::toolserver::{render_tool_result, ToolExecutor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Deepest node allowed; equals the tool-call cap.
    pub max_depth: usize,
    /// Maximum number of non-root nodes per question.
    pub node_budget: usize,
    /// Estimated-token cap on the context handed to an expert.
    pub context_token_cap: usize,
    /// Word budget for tool responses; `None` inserts them unshortened.
    #[serde(default)]
    pub summary_budget: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_depth: 5,
            node_budget: 64,
            context_token_cap: 70_000,
            summary_budget: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), DrttsError> {
        if self.max_depth == 0 || self.node_budget == 0 || self.context_token_cap == 0 {
            return Err(DrttsError::InvalidConfig(
                "max_depth, node_budget and context_token_cap must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    FormatInvalid,
    ToolFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustReason {
    DepthExceeded,
    ContextOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum NodeStatus {
    Open,
    TerminalCorrect,
    TerminalIncorrect,
    Pruned(PruneReason),
    Exhausted(ExhaustReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    /// `None` for the root.
    pub expert_index: Option<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub think: String,
    /// Tool-call body exactly as the expert wrote it.
    pub call_body: Option<String>,
    pub call: Option<ToolCall>,
    pub response: Option<String>,
    pub answer: Option<String>,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeVerdict>,
    /// Failure detail for pruned nodes and unparseable verdicts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TreeNode {
    fn root() -> Self {
        Self {
            id: 0,
            depth: 0,
            expert_index: None,
            parent: None,
            children: Vec::new(),
            think: String::new(),
            call_body: None,
            call: None,
            response: None,
            answer: None,
            status: NodeStatus::Open,
            judge: None,
            note: None,
        }
    }
}

/// An expert that failed to produce output; no child was created for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub parent: usize,
    pub expert_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub nodes: usize,
    pub expanded: usize,
    /// Nodes ending TerminalIncorrect or Pruned.
    pub pruned: usize,
    pub judged: usize,
    pub judge_unparseable: usize,
    pub gaps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Solved,
    BudgetExhausted,
    FrontierExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTree {
    pub question: MultimodalQuery,
    pub experts: usize,
    pub config: SearchConfig,
    pub nodes: Vec<TreeNode>,
    pub gaps: Vec<Gap>,
}

impl SearchTree {
    /// Node ids from the root to `leaf`, both included.
    pub fn path_to(&self, leaf: usize) -> Vec<usize> {
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn stats(&self, expanded: usize, judged: usize, judge_unparseable: usize) -> TreeStats {
        TreeStats {
            nodes: self.nodes.len(),
            expanded,
            pruned: self
                .nodes
                .iter()
                .filter(|n| {
                    matches!(
                        n.status,
                        NodeStatus::TerminalIncorrect | NodeStatus::Pruned(_)
                    )
                })
                .count(),
            judged,
            judge_unparseable,
            gaps: self.gaps.len(),
        }
    }

    /// Segments along the path to `leaf`: think/call/response per tool round,
    /// then think/answer at the leaf.
    pub fn segments_to(&self, leaf: usize) -> Vec<Segment> {
        let mut steps = Vec::new();
        for &id in &self.path_to(leaf)[1..] {
            let n = &self.nodes[id];
            steps.push(Segment::think(n.think.clone()));
            if let (Some(body), Some(resp)) = (&n.call_body, &n.response) {
                steps.push(Segment::new(SegmentKind::ToolCall, body.clone()));
                steps.push(Segment::response(resp.clone()));
            }
            if let Some(a) = &n.answer {
                steps.push(Segment::answer(a.clone()));
            }
        }
        steps
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedTrajectory {
    pub trajectory: Trajectory,
    pub path: Vec<usize>,
    pub verdict: JudgeVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub result: Option<VerifiedTrajectory>,
    pub termination: Termination,
    pub stats: TreeStats,
    pub tree: SearchTree,
}

/// Rough token count: one token per four characters, rounded up.
pub fn estimate_tokens(turns: &[ChatTurn]) -> usize {
    turns
        .iter()
        .map(|t| t.content.chars().count().div_ceil(4))
        .sum()
}

enum Step {
    Call {
        think: String,
        body: String,
        call: ToolCall,
    },
    Answer {
        think: String,
        answer: String,
    },
}

/// One expert turn must be exactly think + tool_call, or think + answer.
fn parse_step(output: &str) -> Result<Step, String> {
    let parsed = parse_trajectory(output);
    let kinds: Vec<SegmentKind> = parsed.segments.iter().map(|s| s.kind).collect();
    match (kinds.as_slice(), &parsed.verdict) {
        (
            [SegmentKind::Think, SegmentKind::ToolCall],
            Verdict::Incomplete {
                awaiting: Awaiting::ToolResponse,
            },
        ) => {
            let seg = &parsed.segments[1];
            match &seg.parsed_call {
                Some(call) => Ok(Step::Call {
                    think: parsed.segments[0].body.clone(),
                    body: seg.body.clone(),
                    call: call.clone(),
                }),
                None => Err("tool call body is not a valid call".into()),
            }
        }
        ([SegmentKind::Think, SegmentKind::Answer], Verdict::Valid) => Ok(Step::Answer {
            think: parsed.segments[0].body.clone(),
            answer: parsed.segments[1].body.clone(),
        }),
        (_, Verdict::Malformed { position, cause }) => Err(format!("{cause} at byte {position}")),
        _ => Err(format!("expected one reasoning step, got {kinds:?}")),
    }
}

/// Everything a search needs besides the question.
pub struct TreeSearch<'a> {
    pub pool: &'a ExpertPool,
    pub tools: &'a dyn ToolExecutor,
    pub judge: &'a dyn ModelClient,
    pub summarizer: Option<&'a dyn ModelClient>,
    pub cfg: SearchConfig,
}

enum Expansion {
    Continue,
    Solved(usize),
    Budget,
}

struct Run<'s, 'a> {
    search: &'s TreeSearch<'a>,
    tree: SearchTree,
    golden: &'s str,
    candidates: &'s [String],
    frontier: VecDeque<usize>,
    expanded: usize,
    judged: usize,
    judge_unparseable: usize,
}

impl Run<'_, '_> {
    fn context(&self, node: usize) -> Vec<ChatTurn> {
        let q = &self.tree.question;
        let mut turns = vec![
            ChatTurn::system(prompts::AGENT_SYSTEM),
            ChatTurn::user(prompts::agent_user(&q.text)).with_image(q.image.clone()),
        ];
        for &id in &self.tree.path_to(node)[1..] {
            let n = &self.tree.nodes[id];
            let body = n.call_body.as_deref().unwrap_or_default();
            let resp = n.response.as_deref().unwrap_or_default();
            turns.push(ChatTurn::assistant(format!(
                "<think>{}</think>\n<tool_call>{body}</tool_call>",
                n.think
            )));
            turns.push(ChatTurn::tool(format!(
                "<tool_response>{resp}</tool_response>"
            )));
        }
        turns
    }

    fn consult(&self, turns: &[ChatTurn]) -> Vec<Result<String, ClientError>> {
        let stop = vec!["<tool_response>".to_string()];
        let experts = self.search.pool.experts();
        thread::scope(|s| {
            let handles: Vec<_> = experts
                .iter()
                .map(|e| s.spawn(|| complete(e.client.as_ref(), turns, &stop)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(ClientError::InvalidRequest("expert panicked".into()))
                    })
                })
                .collect()
        })
    }

    fn add_child(&mut self, parent: usize, expert: usize) -> usize {
        let id = self.tree.nodes.len();
        let mut node = TreeNode::root();
        node.id = id;
        node.depth = self.tree.nodes[parent].depth + 1;
        node.expert_index = Some(expert);
        node.parent = Some(parent);
        self.tree.nodes.push(node);
        self.tree.nodes[parent].children.push(id);
        id
    }

    fn respond(&self, call: &ToolCall) -> Result<String, String> {
        let image = self.tree.question.image.as_deref();
        let result = self
            .search
            .tools
            .execute(call, image)
            .map_err(|e| e.to_string())?;
        let text = render_tool_result(&result);
        Ok(match self.search.cfg.summary_budget {
            Some(budget) => neutralize_tags(&summarize_tool_response(
                self.search.summarizer,
                &text,
                budget,
            )),
            None => text,
        })
    }

    fn judge(&mut self, id: usize) -> bool {
        let answer = self.tree.nodes[id].answer.clone().unwrap_or_default();
        self.judged += 1;
        let q = self.tree.question.text.clone();
        let verdict = verify_answer(&q, self.golden, self.candidates, &answer, self.search.judge);
        let node = &mut self.tree.nodes[id];
        match verdict {
            Ok(v) => {
                let correct = v.correct;
                node.status = if correct {
                    NodeStatus::TerminalCorrect
                } else {
                    NodeStatus::TerminalIncorrect
                };
                node.judge = Some(v);
                correct
            }
            Err(e) => {
                if matches!(e, DrttsError::JudgeUnparseable { .. }) {
                    self.judge_unparseable += 1;
                }
                node.status = NodeStatus::TerminalIncorrect;
                node.note = Some(e.to_string());
                false
            }
        }
    }

    fn expand(&mut self, node: usize) -> Result<Expansion, DrttsError> {
        if self.tree.nodes[node].depth >= self.search.cfg.max_depth {
            self.tree.nodes[node].status = NodeStatus::Exhausted(ExhaustReason::DepthExceeded);
            return Ok(Expansion::Continue);
        }
        let turns = self.context(node);
        if estimate_tokens(&turns) > self.search.cfg.context_token_cap {
            self.tree.nodes[node].status = NodeStatus::Exhausted(ExhaustReason::ContextOverflow);
            return Ok(Expansion::Continue);
        }
        self.expanded += 1;
        let outputs = self.consult(&turns);
        if node == 0 && outputs.iter().all(Result::is_err) {
            return Err(DrttsError::AllExpertsFailed(
                outputs
                    .into_iter()
                    .filter_map(Result::err)
                    .map(|e| e.to_string())
                    .collect(),
            ));
        }
        for (j, out) in outputs.into_iter().enumerate() {
            let text = match out {
                Ok(t) => t,
                Err(e) => {
                    self.tree.gaps.push(Gap {
                        parent: node,
                        expert_index: j,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            if self.tree.nodes.len() > self.search.cfg.node_budget {
                return Ok(Expansion::Budget);
            }
            let id = self.add_child(node, j);
            match parse_step(&text) {
                Err(why) => {
                    let n = &mut self.tree.nodes[id];
                    n.status = NodeStatus::Pruned(PruneReason::FormatInvalid);
                    n.note = Some(why);
                }
                Ok(Step::Call { think, body, call }) => {
                    let response = self.respond(&call);
                    let n = &mut self.tree.nodes[id];
                    n.think = think;
                    n.call_body = Some(body);
                    n.call = Some(call);
                    match response {
                        Ok(r) => {
                            n.response = Some(r);
                            self.frontier.push_back(id);
                        }
                        Err(e) => {
                            n.status = NodeStatus::Pruned(PruneReason::ToolFailure);
                            n.note = Some(e);
                        }
                    }
                }
                Ok(Step::Answer { think, answer }) => {
                    let n = &mut self.tree.nodes[id];
                    n.think = think;
                    n.answer = Some(answer);
                    if self.judge(id) {
                        return Ok(Expansion::Solved(id));
                    }
                }
            }
        }
        Ok(Expansion::Continue)
    }
}

impl TreeSearch<'_> {
    /// Breadth-first search from the question; stops at the first answer the
    /// judge accepts, when the node budget runs out, or when nothing is left
    /// to expand.
    pub fn run(
        &self,
        question: &MultimodalQuery,
        golden: &str,
        candidates: &[String],
    ) -> Result<SearchOutcome, DrttsError> {
        self.cfg.validate()?;
        let mut run = Run {
            search: self,
            tree: SearchTree {
                question: question.clone(),
                experts: self.pool.len(),
                config: self.cfg,
                nodes: vec![TreeNode::root()],
                gaps: Vec::new(),
            },
            golden,
            candidates,
            frontier: VecDeque::from([0]),
            expanded: 0,
            judged: 0,
            judge_unparseable: 0,
        };
        let mut solved = None;
        let mut termination = Termination::FrontierExhausted;
        while let Some(node) = run.frontier.pop_front() {
            match run.expand(node)? {
                Expansion::Continue => {}
                Expansion::Solved(id) => {
                    solved = Some(id);
                    termination = Termination::Solved;
                    break;
                }
                Expansion::Budget => {
                    termination = Termination::BudgetExhausted;
                    break;
                }
            }
        }
        let stats = run
            .tree
            .stats(run.expanded, run.judged, run.judge_unparseable);
        let tree = run.tree;
        let result = match solved {
            None => None,
            Some(leaf) => {
                let trajectory = Trajectory::with_cap(
                    question.clone(),
                    tree.segments_to(leaf),
                    self.cfg.max_depth,
                )?;
                Some(VerifiedTrajectory {
                    trajectory,
                    path: tree.path_to(leaf),
                    verdict: tree.nodes[leaf].judge.clone().expect("judged leaf"),
                })
            }
        };
        Ok(SearchOutcome {
            result,
            termination,
            stats,
            tree,
        })
    }
}

/// [`TreeSearch::run`] without a summarizer.
pub fn run_tree_search(
    question: &MultimodalQuery,
    golden: &str,
    candidates: &[String],
    pool: &ExpertPool,
    tools: &dyn ToolExecutor,
    judge: &dyn ModelClient,
    cfg: SearchConfig,
) -> Result<SearchOutcome, DrttsError> {
    TreeSearch {
        pool,
        tools,
        judge,
        summarizer: None,
        cfg,
    }
    .run(question, golden, candidates)
}
