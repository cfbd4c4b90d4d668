use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{quote, Action, ActionName};
use crate::akb::pattern::glob_match;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad action pattern {pattern:?}: {reason}")]
pub struct PatternError {
    pub pattern: String,
    pub reason: String,
}

/// Matches actions by name and, optionally, a glob over the first argument.
///
/// Written `click`, `click("17*")`, `goto("*/sales/order/history*")`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionPattern {
    pub name: ActionName,
    pub arg: Option<String>,
}

impl ActionPattern {
    pub fn new(name: ActionName, arg: Option<String>) -> Self {
        ActionPattern { name, arg }
    }

    pub fn matches(&self, action: &Action) -> bool {
        if action.name() != self.name {
            return false;
        }
        match (&self.arg, action.primary_arg()) {
            (None, _) => true,
            (Some(glob), Some(arg)) => glob_match(glob, &arg),
            (Some(glob), None) => glob_match(glob, ""),
        }
    }

    pub fn parse(src: &str) -> Result<Self, PatternError> {
        let err = |reason: &str| PatternError { pattern: src.to_string(), reason: reason.to_string() };
        let s = src.trim();
        let (name, rest) = match s.find('(') {
            Some(i) => (s[..i].trim(), Some(&s[i..])),
            None => (s, None),
        };
        let name = ActionName::from_name(name).ok_or_else(|| err("unknown action name"))?;
        let arg = match rest {
            None => None,
            Some(rest) => {
                let inner = rest
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| err("unbalanced parentheses"))?
                    .trim();
                if inner.is_empty() {
                    None
                } else if inner == "*" {
                    Some("*".to_string())
                } else {
                    // Reuse the action lexer by parsing `take_note(<inner>)`.
                    match crate::action::parse_action(&format!("take_note({inner})")) {
                        Ok(Action::TakeNote(text)) => Some(text),
                        _ => return Err(err("argument must be a single double-quoted glob")),
                    }
                }
            }
        };
        Ok(ActionPattern { name, arg })
    }
}

impl fmt::Display for ActionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.arg {
            None => f.write_str(self.name.as_str()),
            Some(g) => write!(f, "{}({})", self.name, quote(g)),
        }
    }
}

impl FromStr for ActionPattern {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionPattern::parse(s)
    }
}

impl Serialize for ActionPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActionPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ActionPattern::parse(&s).map_err(serde::de::Error::custom)
    }
}
