use std::ops::Range;

use thiserror::Error;

use super::{Action, ActionDecision, ActionName, ScrollDirection};

/// Byte range into the text that was parsed.
pub type Span = Range<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("response has no <action> tag")]
    MissingActionTag { span: Span },
    #[error("more than one action given (second one at {span:?})")]
    MultipleActions { span: Span },
    #[error("unknown action {name:?}")]
    UnknownActionName { name: String, span: Span },
    #[error("malformed arguments at {span:?}: {reason}")]
    MalformedArguments { reason: String, span: Span },
}

impl ActionParseError {
    pub fn span(&self) -> &Span {
        match self {
            ActionParseError::MissingActionTag { span }
            | ActionParseError::MultipleActions { span }
            | ActionParseError::UnknownActionName { span, .. }
            | ActionParseError::MalformedArguments { span, .. } => span,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ActionParseError::MissingActionTag { .. } => "missing_action_tag",
            ActionParseError::MultipleActions { .. } => "multiple_actions",
            ActionParseError::UnknownActionName { .. } => "unknown_action_name",
            ActionParseError::MalformedArguments { .. } => "malformed_arguments",
        }
    }

    fn shifted(self, by: usize) -> Self {
        let shift = |s: Span| s.start + by..s.end + by;
        match self {
            ActionParseError::MissingActionTag { span } => ActionParseError::MissingActionTag { span: shift(span) },
            ActionParseError::MultipleActions { span } => ActionParseError::MultipleActions { span: shift(span) },
            ActionParseError::UnknownActionName { name, span } => {
                ActionParseError::UnknownActionName { name, span: shift(span) }
            }
            ActionParseError::MalformedArguments { reason, span } => {
                ActionParseError::MalformedArguments { reason, span: shift(span) }
            }
        }
    }
}

fn malformed(reason: impl Into<String>, span: Span) -> ActionParseError {
    ActionParseError::MalformedArguments { reason: reason.into(), span }
}

#[derive(Debug, Clone, PartialEq)]
enum Arg {
    Str(String),
    Int(u64),
    Bool(bool),
}

impl Arg {
    fn kind(&self) -> &'static str {
        match self {
            Arg::Str(_) => "string",
            Arg::Int(_) => "integer",
            Arg::Bool(_) => "boolean",
        }
    }
}

struct Call {
    name: String,
    name_span: Span,
    args: Vec<(Arg, Span)>,
    span: Span,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<(String, Span)> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        Some((self.src[start..self.pos].to_string(), start..self.pos))
    }

    /// Whether an identifier immediately followed by `(` starts here.
    fn at_call(&self) -> bool {
        let mut probe = Cursor { src: self.src, pos: self.pos };
        if probe.ident().is_none() {
            return false;
        }
        probe.skip_ws();
        probe.peek() == Some('(')
    }

    fn string(&mut self) -> Result<String, ActionParseError> {
        let start = self.pos;
        debug_assert_eq!(self.peek(), Some('"'));
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(malformed("unterminated string", start..self.pos)),
                Some('"') => return Ok(out),
                Some('\\') => {
                    let esc_start = self.pos - 1;
                    match self.bump() {
                        Some('"') => out.push('"'),
                        Some('\\') => out.push('\\'),
                        Some('n') => out.push('\n'),
                        Some('t') => out.push('\t'),
                        Some('r') => out.push('\r'),
                        Some(c) => return Err(malformed(format!("unknown escape \\{c}"), esc_start..self.pos)),
                        None => return Err(malformed("unterminated string", start..self.pos)),
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn arg(&mut self) -> Result<(Arg, Span), ActionParseError> {
        let start = self.pos;
        match self.peek() {
            Some('"') => {
                let s = self.string()?;
                Ok((Arg::Str(s), start..self.pos))
            }
            Some(c) if c.is_ascii_digit() => {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.bump();
                }
                let text = &self.src[start..self.pos];
                let n = text.parse().map_err(|_| malformed("integer out of range", start..self.pos))?;
                Ok((Arg::Int(n), start..self.pos))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let (word, span) = self.ident().expect("alphabetic start");
                match word.as_str() {
                    "true" => Ok((Arg::Bool(true), span)),
                    "false" => Ok((Arg::Bool(false), span)),
                    _ => Err(malformed(format!("bare word {word:?}; strings must be double-quoted"), span)),
                }
            }
            _ => {
                let end = self.pos + self.peek().map_or(0, char::len_utf8);
                Err(malformed("expected an argument", start..end))
            }
        }
    }

    fn call(&mut self) -> Result<Call, ActionParseError> {
        self.skip_ws();
        let start = self.pos;
        let Some((name, name_span)) = self.ident() else {
            let end = self.src.len().min(start + 16);
            let end = (start..=end).rev().find(|i| self.src.is_char_boundary(*i)).unwrap_or(start);
            return Err(malformed("expected an action call", start..end));
        };
        self.skip_ws();
        if !self.eat('(') {
            return Err(malformed(format!("expected '(' after {name:?}"), start..self.pos));
        }
        let mut args = Vec::new();
        self.skip_ws();
        if !self.eat(')') {
            loop {
                self.skip_ws();
                args.push(self.arg()?);
                self.skip_ws();
                if self.eat(')') {
                    break;
                }
                if !self.eat(',') {
                    let end = self.pos + self.peek().map_or(0, char::len_utf8);
                    return Err(malformed("expected ',' or ')'", self.pos..end));
                }
            }
        }
        Ok(Call { name, name_span, args, span: start..self.pos })
    }
}

fn build(call: Call) -> Result<Action, ActionParseError> {
    let Some(name) = ActionName::from_name(&call.name) else {
        return Err(ActionParseError::UnknownActionName { name: call.name, span: call.name_span });
    };
    let span = call.span.clone();
    let mut args = call.args.into_iter();
    let take_str = |what: &str, args: &mut std::vec::IntoIter<(Arg, Span)>| -> Result<String, ActionParseError> {
        match args.next() {
            Some((Arg::Str(s), _)) => Ok(s),
            Some((other, sp)) => Err(malformed(format!("{what} must be a string, got {}", other.kind()), sp)),
            None => Err(malformed(format!("{name} needs {what}"), span.clone())),
        }
    };
    let action = match name {
        ActionName::Click => Action::Click(take_str("a bid", &mut args)?),
        ActionName::Hover => Action::Hover(take_str("a bid", &mut args)?),
        ActionName::Type => {
            let bid = take_str("a bid", &mut args)?;
            let text = take_str("text", &mut args)?;
            let press_enter = match args.next() {
                None => false,
                Some((Arg::Bool(b), _)) => b,
                Some((other, sp)) => {
                    return Err(malformed(format!("press_enter must be a boolean, got {}", other.kind()), sp))
                }
            };
            Action::Type { bid, text, press_enter }
        }
        ActionName::Press => Action::Press(take_str("a key combination", &mut args)?),
        ActionName::Scroll => {
            let (dir, dir_span) = match args.next() {
                Some((Arg::Str(s), sp)) => (s, sp),
                Some((other, sp)) => {
                    return Err(malformed(format!("direction must be a string, got {}", other.kind()), sp))
                }
                None => return Err(malformed("scroll needs a direction", span.clone())),
            };
            let direction = ScrollDirection::parse(&dir)
                .ok_or_else(|| malformed(format!("unknown scroll direction {dir:?}"), dir_span))?;
            let amount = match args.next() {
                None => None,
                Some((Arg::Int(n), sp)) => Some(u32::try_from(n).map_err(|_| malformed("amount out of range", sp))?),
                Some((other, sp)) => return Err(malformed(format!("amount must be an integer, got {}", other.kind()), sp)),
            };
            Action::Scroll { direction, amount }
        }
        ActionName::GoTo => Action::GoTo(take_str("a url", &mut args)?),
        ActionName::GoBack => Action::GoBack,
        ActionName::GoForward => Action::GoForward,
        ActionName::NewTab => Action::NewTab,
        ActionName::TabFocus => match args.next() {
            Some((Arg::Int(n), sp)) => Action::TabFocus(u32::try_from(n).map_err(|_| malformed("index out of range", sp))?),
            Some((other, sp)) => return Err(malformed(format!("tab index must be an integer, got {}", other.kind()), sp)),
            None => return Err(malformed("tab_focus needs an index", span.clone())),
        },
        ActionName::TabClose => Action::TabClose,
        ActionName::TakeNote => Action::TakeNote(take_str("note text", &mut args)?),
        ActionName::Calculate => Action::Calculate(take_str("an expression", &mut args)?),
        ActionName::Stop => match args.next() {
            None => Action::Stop(None),
            Some((Arg::Str(s), _)) => Action::Stop(Some(s)),
            Some((other, sp)) => return Err(malformed(format!("answer must be a string, got {}", other.kind()), sp)),
        },
    };
    if let Some((_, sp)) = args.next() {
        return Err(malformed(format!("too many arguments for {name}"), sp));
    }
    action.validate().map_err(|reason| malformed(reason, span))?;
    Ok(action)
}

/// Parses exactly one action from `src`. Anything after it is an error.
pub fn parse_action(src: &str) -> Result<Action, ActionParseError> {
    let mut cur = Cursor::new(src);
    let call = cur.call()?;
    let action = build(call)?;
    cur.skip_ws();
    while cur.eat(';') {
        cur.skip_ws();
    }
    if cur.pos < src.len() {
        let rest = cur.pos..src.len();
        if cur.at_call() {
            return Err(ActionParseError::MultipleActions { span: rest });
        }
        return Err(malformed("unexpected text after the action", rest));
    }
    Ok(action)
}

fn tag_body<'a>(raw: &'a str, open: &str, close: &str) -> Vec<(usize, &'a str)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = raw[from..].find(open) {
        let body_start = from + i + open.len();
        let body_end = raw[body_start..].find(close).map_or(raw.len(), |j| body_start + j);
        out.push((body_start, &raw[body_start..body_end]));
        from = body_end.min(raw.len());
        if from == raw.len() {
            break;
        }
    }
    out
}

/// Strips a surrounding markdown code fence, returning the inner offset and text.
fn strip_fence(body: &str) -> (usize, &str) {
    let lead = body.len() - body.trim_start().len();
    let trimmed = body.trim();
    if let Some(after) = trimmed.strip_prefix("```") {
        let nl = after.find('\n');
        let inner_start = match nl {
            Some(n) => 3 + n + 1,
            None => 3,
        };
        let inner = &trimmed[inner_start..];
        let inner = inner.strip_suffix("```").unwrap_or(inner);
        return (lead + inner_start, inner);
    }
    (lead, trimmed)
}

/// Extracts the `<think>` text and the single `<action>` from a model response.
pub fn parse_envelope(raw: &str) -> Result<ActionDecision, ActionParseError> {
    let actions = tag_body(raw, "<action>", "</action>");
    let (body_start, body) = match actions.as_slice() {
        [] => return Err(ActionParseError::MissingActionTag { span: 0..raw.len() }),
        [one] => *one,
        [_, (second, _), ..] => {
            let tag_start = second - "<action>".len();
            return Err(ActionParseError::MultipleActions { span: tag_start..raw.len() });
        }
    };
    let (inner_off, inner) = strip_fence(body);
    if inner.trim().is_empty() {
        return Err(malformed("empty action tag", body_start..body_start + body.len()));
    }
    let action = parse_action(inner).map_err(|e| e.shifted(body_start + inner_off))?;
    let think = tag_body(raw, "<think>", "</think>")
        .first()
        .map(|(_, t)| t.trim().to_string())
        .unwrap_or_default();
    Ok(ActionDecision { think, action, raw: raw.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn click_from_envelope() {
        let raw = "<think>the product name cell opens the edit page</think><action>click(\"1773\")</action>";
        let d = parse_envelope(raw).unwrap();
        assert_eq!(d.action, Action::Click("1773".into()));
        assert_eq!(d.think, "the product name cell opens the edit page");
        assert_eq!(d.raw, raw);
    }

    #[test]
    fn stop_with_empty_think() {
        let d = parse_envelope("<action>stop(\"WH07-S-Brown\")</action>").unwrap();
        assert_eq!(d.action, Action::Stop(Some("WH07-S-Brown".into())));
        assert_eq!(d.think, "");
    }

    #[test]
    fn two_action_lines_rejected() {
        let raw = "<think>x</think><action>\nclick(\"1\")\nclick(\"2\")\n</action>";
        let err = parse_envelope(raw).unwrap_err();
        assert!(matches!(err, ActionParseError::MultipleActions { .. }), "{err:?}");
        assert_eq!(&raw[err.span().clone()], "click(\"2\")");
    }

    #[test]
    fn two_action_tags_rejected() {
        let err = parse_envelope("<action>go_back()</action><action>go_back()</action>").unwrap_err();
        assert!(matches!(err, ActionParseError::MultipleActions { .. }));
    }

    #[test]
    fn missing_tag() {
        assert!(matches!(
            parse_envelope("<think>hm</think> click(\"1\")"),
            Err(ActionParseError::MissingActionTag { .. })
        ));
    }

    #[test]
    fn unknown_name_carries_span() {
        let raw = "<action>teleport(\"x\")</action>";
        let err = parse_envelope(raw).unwrap_err();
        match &err {
            ActionParseError::UnknownActionName { name, span } => {
                assert_eq!(name, "teleport");
                assert_eq!(&raw[span.clone()], "teleport");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_arguments() {
        for src in ["click(1773)", "click(\"1\"", "click \"1\"", "scroll(\"sideways\")", "type(\"1\")", "click(\"1\", \"2\")", "calculate(\"2+\")"] {
            assert!(
                matches!(parse_action(src), Err(ActionParseError::MalformedArguments { .. })),
                "{src}: {:?}",
                parse_action(src)
            );
        }
    }

    #[test]
    fn code_fence_is_tolerated() {
        let d = parse_envelope("<action>\n```\ngoto(\"http://h/a\")\n```\n</action>").unwrap();
        assert_eq!(d.action, Action::GoTo("http://h/a".into()));
    }

    #[test]
    fn escapes_and_optional_args() {
        assert_eq!(
            parse_action(r#"type("5", "say \"hi\"\n", false)"#).unwrap(),
            Action::Type { bid: "5".into(), text: "say \"hi\"\n".into(), press_enter: false }
        );
        assert_eq!(
            parse_action("scroll(\"down\", 3)").unwrap(),
            Action::Scroll { direction: ScrollDirection::Down, amount: Some(3) }
        );
        assert_eq!(parse_action("  stop ( )  ").unwrap(), Action::Stop(None));
    }

    #[test]
    fn span_offsets_point_into_raw() {
        let raw = "<think>t</think><action>click(\"1\") junk</action>";
        let err = parse_envelope(raw).unwrap_err();
        assert_eq!(&raw[err.span().clone()], "junk");
    }
}
