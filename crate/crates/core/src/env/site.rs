//! Site specification for the mock environment.
//!
//! A site is a list of pages, each with a URL template, the elements it shows
//! and a transition table keyed by action patterns. State lives in named
//! scalar variables that transitions mutate and conditions read.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::action::ActionPattern;
use crate::env::{AnswerSpec, EnvError};

pub const SITE_SPEC_VERSION: u32 = 1;

/// A state variable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Num(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Num(n) => write!(f, "{n}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

impl Scalar {
    fn parse_literal(s: &str) -> Scalar {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
            return Scalar::Text(inner.to_string());
        }
        match s {
            "true" => Scalar::Bool(true),
            "false" => Scalar::Bool(false),
            _ => s.parse::<f64>().map(Scalar::Num).unwrap_or_else(|_| Scalar::Text(s.to_string())),
        }
    }

    fn as_num(&self) -> Option<f64> {
        match self {
            Scalar::Num(n) => Some(*n),
            Scalar::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Scalar::Text(t) => t.trim().parse().ok(),
        }
    }

    fn loosely_equals(&self, other: &Scalar) -> bool {
        match (self.as_num(), other.as_num()) {
            (Some(a), Some(b)) if !matches!((self, other), (Scalar::Text(_), Scalar::Text(_))) => a == b,
            _ => self.to_string() == other.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Ge,
    Le,
    Gt,
    Lt,
    Contains,
}

impl CmpOp {
    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Ge => ">=",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Lt => "<",
            CmpOp::Contains => "contains",
        }
    }
}

/// `var op literal`, e.g. `cart_count == 1` or `$url contains "/cart"`.
///
/// The pseudo-variable `$url` is the current page URL. Missing variables
/// compare as `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub var: String,
    pub op: CmpOp,
    pub value: Scalar,
}

impl Condition {
    pub fn eval(&self, vars: &BTreeMap<String, Scalar>, url: &str) -> bool {
        let actual = if self.var == "$url" {
            Scalar::Text(url.to_string())
        } else {
            vars.get(&self.var).cloned().unwrap_or(Scalar::Num(0.0))
        };
        let ord = || match (actual.as_num(), self.value.as_num()) {
            (Some(a), Some(b)) => a.partial_cmp(&b),
            _ => Some(actual.to_string().cmp(&self.value.to_string())),
        };
        match self.op {
            CmpOp::Eq => actual.loosely_equals(&self.value),
            CmpOp::Ne => !actual.loosely_equals(&self.value),
            CmpOp::Ge => ord().is_some_and(|o| o.is_ge()),
            CmpOp::Le => ord().is_some_and(|o| o.is_le()),
            CmpOp::Gt => ord().is_some_and(|o| o.is_gt()),
            CmpOp::Lt => ord().is_some_and(|o| o.is_lt()),
            CmpOp::Contains => actual.to_string().contains(&self.value.to_string()),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = match &self.value {
            Scalar::Text(t) => format!("\"{t}\""),
            other => other.to_string(),
        };
        write!(f, "{} {} {}", self.var, self.op.as_str(), value)
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (var, rest) = s.split_once(char::is_whitespace).ok_or_else(|| format!("bad condition {s:?}"))?;
        let rest = rest.trim_start();
        let (op, value) = [
            ("==", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            (">=", CmpOp::Ge),
            ("<=", CmpOp::Le),
            (">", CmpOp::Gt),
            ("<", CmpOp::Lt),
            ("contains", CmpOp::Contains),
        ]
        .into_iter()
        .find_map(|(tok, op)| rest.strip_prefix(tok).map(|v| (op, v)))
        .ok_or_else(|| format!("bad operator in condition {s:?}"))?;
        if value.trim().is_empty() {
            return Err(format!("missing value in condition {s:?}"));
        }
        Ok(Condition { var: var.to_string(), op, value: Scalar::parse_literal(value) })
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A named state check used by programmatic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgrammaticCheck {
    pub name: String,
    pub check: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Set { var: String, value: Scalar },
    Inc { var: String, by: f64 },
}

impl Effect {
    pub fn apply(&self, vars: &mut BTreeMap<String, Scalar>) {
        match self {
            Effect::Set { var, value } => {
                vars.insert(var.clone(), value.clone());
            }
            Effect::Inc { var, by } => {
                let cur = vars.get(var).and_then(Scalar::as_num).unwrap_or(0.0);
                vars.insert(var.clone(), Scalar::Num(cur + by));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    /// Elements without a bid render as static text and are not actionable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid: Option<String>,
    pub role: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Extra state words rendered after the name, e.g. `checked`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Condition>,
    /// Typing into this element stores the text in this variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binds: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub on: ActionPattern,
    /// Target page; `None` stays on the current page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Condition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<Effect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSpec {
    pub id: String,
    /// URL with optional `{var}` placeholders filled from state.
    pub url: String,
    pub title: String,
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub v: u32,
    pub site_id: String,
    pub domain_label: String,
    pub initial_page: String,
    pub pages: Vec<PageSpec>,
    #[serde(default)]
    pub state_vars: BTreeMap<String, Scalar>,
    #[serde(default)]
    pub validators: Vec<ProgrammaticCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_spec: Option<AnswerSpec>,
    /// Parameterised URLs the agent may construct directly.
    #[serde(default)]
    pub url_templates: Vec<String>,
}

impl SiteSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| EnvError::BadSite(format!("{}: {m}", self.site_id));
        if self.v != SITE_SPEC_VERSION {
            return Err(bad(format!("unsupported version {}", self.v)));
        }
        let mut ids = HashSet::new();
        for p in &self.pages {
            if !ids.insert(p.id.as_str()) {
                return Err(bad(format!("duplicate page id {:?}", p.id)));
            }
        }
        if !ids.contains(self.initial_page.as_str()) {
            return Err(bad(format!("initial page {:?} does not exist", self.initial_page)));
        }
        for p in &self.pages {
            for t in &p.transitions {
                if let Some(to) = &t.to {
                    if !ids.contains(to.as_str()) {
                        return Err(bad(format!("page {:?} transitions to unknown page {to:?}", p.id)));
                    }
                }
            }
            url::Url::parse(&p.url.replace(['{', '}'], "")).map_err(|e| bad(format!("page {:?} url: {e}", p.id)))?;
        }
        Ok(())
    }

    pub fn page(&self, id: &str) -> Option<&PageSpec> {
        self.pages.iter().find(|p| p.id == id)
    }
}

/// Fills `{var}` placeholders from `vars`; unknown names are left as-is.
pub fn render_template(template: &str, vars: &BTreeMap<String, Scalar>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        match rest[open..].find('}') {
            Some(close) => {
                let name = &rest[open + 1..open + close];
                match vars.get(name) {
                    Some(v) => out.push_str(&v.to_string()),
                    None => out.push_str(&rest[open..=open + close]),
                }
                rest = &rest[open + close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Matches `url` against a template, capturing `{var}` segments.
///
/// A placeholder captures a non-empty run of characters up to the next
/// `/`, `?`, `&` or `#`; captured values are form-decoded.
pub fn match_template(template: &str, url: &str) -> Option<BTreeMap<String, String>> {
    let mut caps = BTreeMap::new();
    let mut t = template;
    let mut u = url;
    while !t.is_empty() {
        if let Some(after) = t.strip_prefix('{') {
            let close = after.find('}')?;
            let name = &after[..close];
            t = &after[close + 1..];
            let end = u.find(['/', '?', '&', '#']).unwrap_or(u.len());
            if end == 0 {
                return None;
            }
            let raw = &u[..end];
            let decoded = url::form_urlencoded::parse(format!("v={raw}").as_bytes())
                .next()
                .map(|(_, v)| v.into_owned())
                .unwrap_or_else(|| raw.to_string());
            caps.insert(name.to_string(), decoded);
            u = &u[end..];
        } else {
            let lit_end = t.find('{').unwrap_or(t.len());
            u = u.strip_prefix(&t[..lit_end])?;
            t = &t[lit_end..];
        }
    }
    u.is_empty().then_some(caps)
}
