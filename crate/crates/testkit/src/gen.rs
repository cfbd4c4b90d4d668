//! Seeded random inputs. Every generator is a plain function of the RNG so a
//! failing case can be reproduced from its seed.

use kbagent::akb::{Guard, GuardRule, KnowledgeBase, KnowledgeTip};
use kbagent::action::ScrollDirection;
use kbagent::trace::{ActFailureKind, ActRecord, Payload, TraceEvent, Trajectory};
use kbagent::{Action, ActionDecision, Goal, Observation};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::oracle::CalcTree;
use crate::Rng;

const WORDS: &[&str] = &[
    "cart", "order", "orders", "issue", "issues", "merge", "forum", "post", "route", "price", "review", "member",
    "invite", "label", "stock", "coupon", "report", "search", "profile", "star", "address", "zip", "variant",
    "color", "size", "commit", "branch", "reply", "vote", "map",
];
const HOSTS: &[&str] = &["shop.local", "gitlab.local", "forum.local", "map.local"];
const PATHS: &[&str] = &["admin", "catalog", "product", "edit", "-", "issues", "sales", "order", "history", "f", "search", "id", "7"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

/// Free text that stresses quoting: quotes, backslashes, newlines, commas,
/// parentheses and non-ASCII characters.
pub fn text(rng: &mut Rng, max_len: usize) -> String {
    const ALPHABET: &[char] = &[
        'a', 'b', 'z', 'Q', '0', '9', ' ', ' ', ',', '(', ')', '"', '\\', '\n', '\t', '\'', '<', '>', '/', 'é', '✓', '$',
    ];
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| *ALPHABET.choose(rng).expect("non-empty")).collect()
}

fn token(rng: &mut Rng) -> String {
    let len = rng.gen_range(1..=6);
    (0..len)
        .map(|_| *b"0123456789abcdefXYZ_-.".choose(rng).expect("non-empty") as char)
        .collect()
}

fn non_blank(rng: &mut Rng, max_len: usize) -> String {
    loop {
        let t = text(rng, max_len);
        if !t.trim().is_empty() {
            return t;
        }
    }
}

/// Any valid action, uniformly over the action names.
pub fn action(rng: &mut Rng) -> Action {
    match rng.gen_range(0..15) {
        0 => Action::Click(token(rng)),
        1 => Action::Hover(token(rng)),
        2 => Action::Type { bid: token(rng), text: text(rng, 24), press_enter: rng.gen() },
        3 => Action::Press(non_blank(rng, 12)),
        4 => Action::Scroll {
            direction: if rng.gen() { ScrollDirection::Up } else { ScrollDirection::Down },
            amount: rng.gen_bool(0.5).then(|| rng.gen_range(1..20)),
        },
        5 => Action::GoTo(non_blank(rng, 30)),
        6 => Action::GoBack,
        7 => Action::GoForward,
        8 => Action::NewTab,
        9 => Action::TabFocus(rng.gen_range(0..10)),
        10 => Action::TabClose,
        11 => Action::TakeNote(text(rng, 40)),
        12 => Action::Calculate(calc_tree(rng, 3).render()),
        13 => Action::Stop(None),
        _ => Action::Stop(Some(text(rng, 30))),
    }
}

fn literal(rng: &mut Rng) -> String {
    match rng.gen_range(0..3) {
        0 => rng.gen_range(0..1000).to_string(),
        1 => format!("{}.{:02}", rng.gen_range(0..500), rng.gen_range(0..100)),
        _ => format!("0.{}", rng.gen_range(1..10)),
    }
}

/// Random arithmetic tree of at most `depth` operator levels.
pub fn calc_tree(rng: &mut Rng, depth: u32) -> CalcTree {
    if depth == 0 || rng.gen_bool(0.3) {
        return CalcTree::Lit(literal(rng));
    }
    if rng.gen_bool(0.15) {
        return CalcTree::Neg(Box::new(calc_tree(rng, depth - 1)));
    }
    let op = *['+', '-', '*', '/'].choose(rng).expect("non-empty");
    CalcTree::Bin(op, Box::new(calc_tree(rng, depth - 1)), Box::new(calc_tree(rng, depth - 1)))
}

pub fn url(rng: &mut Rng) -> String {
    let segs: Vec<&str> = (0..rng.gen_range(0..4)).map(|_| pick(rng, PATHS)).collect();
    format!("http://{}/{}", pick(rng, HOSTS), segs.join("/"))
}

fn url_pattern(rng: &mut Rng) -> String {
    match rng.gen_range(0..4) {
        0 => format!("*/{}/*", pick(rng, PATHS)),
        1 => format!("http://{}/*", pick(rng, HOSTS)),
        2 => format!("*{}*", pick(rng, PATHS)),
        _ => url(rng),
    }
}

/// A valid tip with a few random patterns and keywords.
pub fn tip(rng: &mut Rng, id: &str) -> KnowledgeTip {
    let mut url_patterns: Vec<String> = (0..rng.gen_range(0..3)).map(|_| url_pattern(rng)).collect();
    let mut keywords: Vec<String> = (0..rng.gen_range(0..4)).map(|_| pick(rng, WORDS).to_string()).collect();
    keywords.dedup();
    if url_patterns.is_empty() && keywords.is_empty() {
        url_patterns.push(url_pattern(rng));
    }
    let sentence = |rng: &mut Rng| (0..rng.gen_range(3..9)).map(|_| pick(rng, WORDS)).collect::<Vec<_>>().join(" ");
    KnowledgeTip {
        id: id.to_string(),
        domain_label: pick(rng, &["shopping", "gitlab", "reddit", "map"]).to_string(),
        scope: sentence(rng),
        action_guidance: sentence(rng),
        constraint: sentence(rng),
        goal_alignment: sentence(rng),
        url_patterns,
        keywords,
        guard: rng.gen_bool(0.1).then(|| Guard {
            when_url: url_pattern(rng),
            rule: if rng.gen() { GuardRule::Forbid } else { GuardRule::Require },
            action: "click".parse().expect("valid pattern"),
        }),
        source_failure_id: None,
        created_at: String::new(),
    }
}

/// Knowledge base of `n` random tips with ids `t000`, `t001`, ...
pub fn kb(rng: &mut Rng, n: usize) -> KnowledgeBase {
    let tips: Vec<KnowledgeTip> = (0..n).map(|i| tip(rng, &format!("t{i:03}"))).collect();
    KnowledgeBase::from_tips(tips, false).expect("generated tips are valid")
}

/// A page observation and goal built from the same vocabulary as the tips.
pub fn query(rng: &mut Rng) -> (Observation, Goal) {
    let lines: Vec<String> = (0..rng.gen_range(1..6))
        .map(|i| format!("[{i}] link '{} {}'", pick(rng, WORDS), pick(rng, WORDS)))
        .collect();
    let tree = format!("RootWebArea 'Page'\n\t{}", lines.join("\n\t"));
    let obs = Observation::new(0, url(rng), tree, Vec::new()).expect("generated observation is valid");
    let instruction = (0..rng.gen_range(2..8)).map(|_| pick(rng, WORDS)).collect::<Vec<_>>().join(" ");
    (obs, Goal::new("q", instruction))
}

/// One executed step of a synthetic trajectory: a page and what was done on
/// it (`None` for an operator failure).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStep {
    pub page: usize,
    pub action: Option<Action>,
}

/// Steps drawn from a tiny alphabet of pages and actions so repeats are
/// common; occasionally a run of identical steps is forced.
pub fn synthetic_steps(rng: &mut Rng, len: usize) -> Vec<SyntheticStep> {
    let actions = [Action::Click("1".into()), Action::Click("2".into()), Action::GoBack, Action::Scroll { direction: ScrollDirection::Down, amount: None }];
    let mut out: Vec<SyntheticStep> = Vec::with_capacity(len);
    while out.len() < len {
        let step = SyntheticStep {
            page: rng.gen_range(0..2),
            action: (!rng.gen_bool(0.05)).then(|| actions.choose(rng).expect("non-empty").clone()),
        };
        let repeat = if rng.gen_bool(0.2) { rng.gen_range(2..5) } else { 1 };
        for _ in 0..repeat {
            out.push(step.clone());
        }
    }
    out.truncate(len);
    out
}

fn page_observation(step: u32, page: usize) -> Observation {
    Observation::new(step, format!("http://h/p{page}"), format!("RootWebArea 'Page {page}'"), Vec::new())
        .expect("synthetic observation is valid")
}

/// Appends one step (observation, act, env result) to `traj` and returns the
/// observation of that step.
pub fn append_step(traj: &mut Trajectory, step: u32, s: &SyntheticStep) -> Observation {
    let obs = page_observation(step, s.page);
    traj.append_event(TraceEvent::new(step, 0, Payload::Observation(obs.clone()))).expect("ordered");
    let record = match &s.action {
        Some(a) => ActRecord::Decided {
            decision: ActionDecision { think: String::new(), raw: a.to_string(), action: a.clone() },
            retry_count: 0,
        },
        None => ActRecord::Failed { failure: ActFailureKind::Grounding, detail: "no such bid".into(), raw: None, retry_count: 1 },
    };
    traj.append_event(TraceEvent::new(step, 0, Payload::Act(record))).expect("ordered");
    obs
}
