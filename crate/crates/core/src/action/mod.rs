//! The closed action language the operator speaks.
//!
//! Actions are written as function calls with double-quoted string
//! arguments, e.g. `click("1773")` or `type("42", "brown", true)`. The full
//! grammar is in `docs/action-grammar.md`; [`Action`]'s `Display` impl is the
//! canonical serializer and [`parse_action`] its inverse.

mod calc;
mod parse;
mod pattern;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use calc::{eval_calculate, parse_expr, CalcError, Expr};
pub use parse::{parse_action, parse_envelope, ActionParseError, Span};
pub use pattern::{ActionPattern, PatternError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "up" => ScrollDirection::Up,
            "down" => ScrollDirection::Down,
            "left" => ScrollDirection::Left,
            "right" => ScrollDirection::Right,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click(String),
    Hover(String),
    Type { bid: String, text: String, press_enter: bool },
    Press(String),
    /// `amount` is in viewports; `None` means one.
    Scroll { direction: ScrollDirection, amount: Option<u32> },
    GoTo(String),
    GoBack,
    GoForward,
    NewTab,
    TabFocus(u32),
    TabClose,
    TakeNote(String),
    Calculate(String),
    Stop(Option<String>),
}

/// Action names, in the order they are listed in prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionName {
    Click,
    Hover,
    Type,
    Press,
    Scroll,
    GoTo,
    GoBack,
    GoForward,
    NewTab,
    TabFocus,
    TabClose,
    TakeNote,
    Calculate,
    Stop,
}

impl ActionName {
    pub const ALL: [ActionName; 14] = [
        ActionName::Click,
        ActionName::Hover,
        ActionName::Type,
        ActionName::Press,
        ActionName::Scroll,
        ActionName::GoTo,
        ActionName::GoBack,
        ActionName::GoForward,
        ActionName::NewTab,
        ActionName::TabFocus,
        ActionName::TabClose,
        ActionName::TakeNote,
        ActionName::Calculate,
        ActionName::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionName::Click => "click",
            ActionName::Hover => "hover",
            ActionName::Type => "type",
            ActionName::Press => "press",
            ActionName::Scroll => "scroll",
            ActionName::GoTo => "goto",
            ActionName::GoBack => "go_back",
            ActionName::GoForward => "go_forward",
            ActionName::NewTab => "new_tab",
            ActionName::TabFocus => "tab_focus",
            ActionName::TabClose => "tab_close",
            ActionName::TakeNote => "take_note",
            ActionName::Calculate => "calculate",
            ActionName::Stop => "stop",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ActionName::ALL.into_iter().find(|n| n.as_str() == s)
    }

    /// Signature line shown to the model.
    pub fn signature(self) -> &'static str {
        match self {
            ActionName::Click => "click(\"bid\") - click the element with the given mark id",
            ActionName::Hover => "hover(\"bid\") - move the pointer over an element",
            ActionName::Type => {
                "type(\"bid\", \"text\"[, true]) - type text into a field; pass true to press Enter afterwards"
            }
            ActionName::Press => "press(\"key_combo\") - press a key combination, e.g. \"Escape\" or \"Control+a\"",
            ActionName::Scroll => "scroll(\"up|down|left|right\"[, amount]) - scroll by amount viewports (default 1)",
            ActionName::GoTo => "goto(\"url\") - navigate the current tab to a URL",
            ActionName::GoBack => "go_back() - go back in history",
            ActionName::GoForward => "go_forward() - go forward in history",
            ActionName::NewTab => "new_tab() - open and focus a new tab",
            ActionName::TabFocus => "tab_focus(index) - switch to the tab with the given 0-based index",
            ActionName::TabClose => "tab_close() - close the current tab",
            ActionName::TakeNote => "take_note(\"text\") - record a fact you will need later",
            ActionName::Calculate => "calculate(\"expr\") - evaluate arithmetic with + - * / and parentheses",
            ActionName::Stop => "stop([\"answer\"]) - finish the task, with the answer if one is asked for",
        }
    }
}

impl fmt::Display for ActionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Action {
    pub fn name(&self) -> ActionName {
        match self {
            Action::Click(_) => ActionName::Click,
            Action::Hover(_) => ActionName::Hover,
            Action::Type { .. } => ActionName::Type,
            Action::Press(_) => ActionName::Press,
            Action::Scroll { .. } => ActionName::Scroll,
            Action::GoTo(_) => ActionName::GoTo,
            Action::GoBack => ActionName::GoBack,
            Action::GoForward => ActionName::GoForward,
            Action::NewTab => ActionName::NewTab,
            Action::TabFocus(_) => ActionName::TabFocus,
            Action::TabClose => ActionName::TabClose,
            Action::TakeNote(_) => ActionName::TakeNote,
            Action::Calculate(_) => ActionName::Calculate,
            Action::Stop(_) => ActionName::Stop,
        }
    }

    /// The element this action targets, for element actions.
    pub fn bid(&self) -> Option<&str> {
        match self {
            Action::Click(b) | Action::Hover(b) | Action::Type { bid: b, .. } => Some(b),
            _ => None,
        }
    }

    /// First argument as text; what action patterns match against.
    pub fn primary_arg(&self) -> Option<Cow<'_, str>> {
        match self {
            Action::Click(s)
            | Action::Hover(s)
            | Action::Type { bid: s, .. }
            | Action::Press(s)
            | Action::GoTo(s)
            | Action::TakeNote(s)
            | Action::Calculate(s) => Some(Cow::Borrowed(s)),
            Action::Scroll { direction, .. } => Some(Cow::Borrowed(direction.as_str())),
            Action::TabFocus(i) => Some(Cow::Owned(i.to_string())),
            Action::Stop(a) => a.as_deref().map(Cow::Borrowed),
            Action::GoBack | Action::GoForward | Action::NewTab | Action::TabClose => None,
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Action::Stop(_))
    }

    /// Notes and arithmetic never touch the page.
    pub fn is_env_neutral(&self) -> bool {
        matches!(self, Action::TakeNote(_) | Action::Calculate(_))
    }

    /// Checks argument invariants that the type alone does not carry.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Action::Click(b) | Action::Hover(b) | Action::Type { bid: b, .. } => {
                if b.is_empty() || b.chars().any(char::is_whitespace) {
                    return Err(format!("bid {b:?} is not a non-empty token"));
                }
            }
            Action::Press(k) if k.trim().is_empty() => return Err("empty key combination".into()),
            Action::GoTo(u) if u.trim().is_empty() => return Err("empty url".into()),
            Action::Scroll { amount: Some(0), .. } => return Err("scroll amount must be positive".into()),
            Action::Calculate(e) => {
                parse_expr(e).map_err(|err| format!("calculate expression: {err}"))?;
            }
            _ => {}
        }
        Ok(())
    }
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        match self {
            Action::Click(s) | Action::Hover(s) | Action::Press(s) | Action::GoTo(s) | Action::TakeNote(s) | Action::Calculate(s) => {
                write!(f, "{name}({})", quote(s))
            }
            Action::Type { bid, text, press_enter } => {
                write!(f, "{name}({}, {}", quote(bid), quote(text))?;
                if *press_enter {
                    f.write_str(", true")?;
                }
                f.write_str(")")
            }
            Action::Scroll { direction, amount } => {
                write!(f, "{name}({}", quote(direction.as_str()))?;
                if let Some(n) = amount {
                    write!(f, ", {n}")?;
                }
                f.write_str(")")
            }
            Action::TabFocus(i) => write!(f, "{name}({i})"),
            Action::Stop(Some(a)) => write!(f, "{name}({})", quote(a)),
            Action::Stop(None) | Action::GoBack | Action::GoForward | Action::NewTab | Action::TabClose => {
                write!(f, "{name}()")
            }
        }
    }
}

impl FromStr for Action {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = Cow::<str>::deserialize(d)?;
        parse_action(&s).map_err(serde::de::Error::custom)
    }
}

/// One model turn: its reasoning, the single action, and the raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDecision {
    pub think: String,
    pub action: Action,
    pub raw: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_forms() {
        assert_eq!(Action::Stop(None).to_string(), "stop()");
        assert_eq!(Action::GoTo("http://x/y?z=1".into()).to_string(), "goto(\"http://x/y?z=1\")");
        assert_eq!(
            Action::Type { bid: "7".into(), text: "a \"b\"".into(), press_enter: true }.to_string(),
            r#"type("7", "a \"b\"", true)"#
        );
        assert_eq!(Action::Scroll { direction: ScrollDirection::Down, amount: None }.to_string(), "scroll(\"down\")");
        assert_eq!(Action::TabFocus(2).to_string(), "tab_focus(2)");
    }

    #[test]
    fn validation() {
        assert!(Action::Click("".into()).validate().is_err());
        assert!(Action::Click("a b".into()).validate().is_err());
        assert!(Action::Calculate("2+".into()).validate().is_err());
        assert!(Action::Calculate("1/0".into()).validate().is_ok());
        assert!(Action::Scroll { direction: ScrollDirection::Up, amount: Some(0) }.validate().is_err());
    }

    #[test]
    fn serde_uses_canonical_string() {
        let a = Action::Click("1773".into());
        assert_eq!(serde_json::to_string(&a).unwrap(), r#""click(\"1773\")""#);
        let back: Action = serde_json::from_str(r#""click(\"1773\")""#).unwrap();
        assert_eq!(back, a);
    }
}
