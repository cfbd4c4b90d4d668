use std::collections::{BTreeMap, BTreeSet};

use kbagent::akb::{KnowledgeBase, KnowledgeTip, Stage};
use kbagent::{Goal, Observation};

// ---- glob ----

/// Exhaustive recursive glob: `*` any run, `?` one char, rest literal, whole
/// string. Exponential in the worst case, fine for test-sized inputs.
pub fn glob(pattern: &str, text: &str) -> bool {
    fn go(p: &[char], t: &[char]) -> bool {
        match p.split_first() {
            None => t.is_empty(),
            Some(('*', rest)) => (0..=t.len()).any(|i| go(rest, &t[i..])),
            Some(('?', rest)) => !t.is_empty() && go(rest, &t[1..]),
            Some((c, rest)) => t.first() == Some(c) && go(rest, &t[1..]),
        }
    }
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    go(&p, &t)
}

// ---- calculator ----

#[derive(Debug, Clone, PartialEq)]
pub enum CalcTree {
    Lit(String),
    Neg(Box<CalcTree>),
    Bin(char, Box<CalcTree>, Box<CalcTree>),
}

impl CalcTree {
    /// Tree-walking evaluation; `None` on division by zero.
    pub fn eval(&self) -> Option<f64> {
        match self {
            CalcTree::Lit(s) => Some(s.parse().expect("generated literals are valid")),
            CalcTree::Neg(e) => Some(-e.eval()?),
            CalcTree::Bin(op, a, b) => {
                let (x, y) = (a.eval()?, b.eval()?);
                match op {
                    '+' => Some(x + y),
                    '-' => Some(x - y),
                    '*' => Some(x * y),
                    '/' if y == 0.0 => None,
                    '/' => Some(x / y),
                    _ => unreachable!("unknown operator {op}"),
                }
            }
        }
    }

    /// Source text with every compound operand parenthesized.
    pub fn render(&self) -> String {
        match self {
            CalcTree::Lit(s) => s.clone(),
            CalcTree::Neg(e) => format!("-{}", e.render_operand()),
            CalcTree::Bin(op, a, b) => format!("{} {op} {}", a.render_operand(), b.render_operand()),
        }
    }

    fn render_operand(&self) -> String {
        match self {
            CalcTree::Lit(s) => s.clone(),
            other => format!("({})", other.render()),
        }
    }
}

// ---- retrieval ----

/// One entry of the reference ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub stage: Stage,
    pub score: f64,
}

fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if cur.chars().count() >= 2 {
                out.push(cur.to_lowercase());
            }
            cur.clear();
        }
    }
    out
}

fn specificity(pattern: &str) -> usize {
    pattern.chars().filter(|c| *c != '*' && *c != '?').count()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).fold(0.0, |s, v| s + v);
    let na: f64 = a.iter().map(|x| f64::from(*x) * f64::from(*x)).fold(0.0, |s, v| s + v);
    let nb: f64 = b.iter().map(|x| f64::from(*x) * f64::from(*x)).fold(0.0, |s, v| s + v);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn tip_text(t: &KnowledgeTip) -> String {
    format!("{} {} {} {} {}", t.scope, t.action_guidance, t.constraint, t.goal_alignment, t.keywords.join(" "))
}

/// Linear scan over every tip: each tip lands in the first stage that claims
/// it (URL match, then keyword overlap, then embedding), then the whole list
/// is sorted by (stage, score desc, id) and cut to `limit`.
pub fn retrieve(kb: &KnowledgeBase, obs: &Observation, goal: &Goal, limit: usize) -> Vec<Ranked> {
    let tips: Vec<&KnowledgeTip> = kb.tips().collect();
    let n = tips.len() as f64;

    let top = obs.ax_tree.lines().take(60).collect::<Vec<_>>().join("\n");
    let query: BTreeSet<String> = terms(&goal.instruction).into_iter().chain(terms(&top)).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tips {
        let distinct: BTreeSet<&str> = t.keywords.iter().map(String::as_str).collect();
        for k in distinct {
            *df.entry(k).or_default() += 1;
        }
    }
    let qv = kb.embedder().embed(&format!("{} {}", obs.url, goal.instruction)).expect("test embedder never fails");

    let mut all = Vec::with_capacity(tips.len());
    for t in &tips {
        let url_score = t.url_patterns.iter().filter(|p| glob(p, &obs.url)).map(|p| specificity(p)).max();
        if let Some(s) = url_score {
            all.push(Ranked { id: t.id.clone(), stage: Stage::Url, score: s as f64 });
            continue;
        }
        let own: BTreeSet<&str> = t.keywords.iter().map(String::as_str).collect();
        let hits: Vec<&String> = query.iter().filter(|q| own.contains(q.as_str())).collect();
        if !hits.is_empty() {
            let score = hits.iter().fold(0.0, |s, q| s + (1.0 + n / df[q.as_str()] as f64).ln());
            all.push(Ranked { id: t.id.clone(), stage: Stage::Keyword, score });
            continue;
        }
        let tv = kb.embedder().embed(&tip_text(t)).expect("test embedder never fails");
        all.push(Ranked { id: t.id.clone(), stage: Stage::Embedding, score: cosine(&qv, &tv) });
    }
    all.sort_by(|a, b| a.stage.cmp(&b.stage).then(b.score.total_cmp(&a.score)).then(a.id.cmp(&b.id)));
    all.truncate(limit.max(1));
    all
}

/// Stage numbers never decrease along a result list.
pub fn stages_ordered(stages: &[Stage]) -> bool {
    stages.windows(2).all(|w| w[0] <= w[1])
}

// ---- loop trigger ----

/// Brute force over the executed actions: the loop rule fires after the last
/// action iff the final `k` entries all exist and are pairwise equal.
/// Returns the steps of that window.
pub fn loop_window<T: PartialEq>(pairs: &[(u32, Option<T>)], k: usize) -> Option<Vec<u32>> {
    if k == 0 || pairs.len() < k {
        return None;
    }
    let window = &pairs[pairs.len() - k..];
    for (_, a) in window {
        for (_, b) in window {
            match (a, b) {
                (Some(x), Some(y)) if x == y => {}
                _ => return None,
            }
        }
    }
    Some(window.iter().map(|(s, _)| *s).collect())
}
