use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, LlmClient, LlmError, Usage};

/// One substring or a list that must all be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextMatch {
    One(String),
    All(Vec<String>),
}

impl TextMatch {
    fn parts(&self) -> &[String] {
        match self {
            TextMatch::One(s) => std::slice::from_ref(s),
            TextMatch::All(v) => v,
        }
    }

    fn all_in(&self, text: &str) -> bool {
        self.parts().iter().all(|p| text.contains(p.as_str()))
    }

    fn any_in(&self, text: &str) -> bool {
        self.parts().iter().any(|p| text.contains(p.as_str()))
    }
}

/// `{match, unless?, reply | replies}`.
///
/// `replies` are handed out in order on successive hits, the last one
/// repeating once exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub when: TextMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unless: Option<TextMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubScript {
    pub rules: Vec<ScriptRule>,
    /// Reply when nothing matches; without it a miss is a protocol error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

/// Rule-driven fake model. Rules are tried in order against the non-system
/// messages of the request; the first whose `match` parts are all present
/// and none of whose `unless` parts are present answers.
pub struct ScriptedStub {
    script: StubScript,
    hits: Mutex<Vec<usize>>,
    calls: AtomicU64,
}

impl ScriptedStub {
    pub fn new(script: StubScript) -> Self {
        let hits = Mutex::new(vec![0; script.rules.len()]);
        ScriptedStub { script, hits, calls: AtomicU64::new(0) }
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        Self::new(StubScript { rules, default: None })
    }

    /// A stub that always answers `reply`.
    pub fn constant(reply: impl Into<String>) -> Self {
        Self::new(StubScript { rules: Vec::new(), default: Some(reply.into()) })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        let script: StubScript =
            serde_json::from_str(&text).map_err(|e| LlmError::Protocol(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmClient for ScriptedStub {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text: String = req
            .messages
            .iter()
            .filter(|m| m.role != "system")
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let hit = self.script.rules.iter().enumerate().find(|(_, r)| {
            r.when.all_in(&text) && !r.unless.as_ref().is_some_and(|u| u.any_in(&text))
        });
        let reply = match hit {
            Some((i, rule)) if !rule.replies.is_empty() => {
                let mut hits = self.hits.lock().expect("stub lock poisoned");
                let n = hits[i];
                hits[i] += 1;
                rule.replies[n.min(rule.replies.len() - 1)].clone()
            }
            Some((_, rule)) => rule.reply.clone().unwrap_or_default(),
            None => self
                .script
                .default
                .clone()
                .ok_or_else(|| LlmError::Protocol("no scripted reply matches the request".into()))?,
        };
        Ok(ChatResponse { text: reply, usage: Usage::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::system("ignored bid 1773"), ChatMessage::user(text)])
    }

    #[test]
    fn first_matching_rule_replies_verbatim() {
        let stub: StubScript = serde_json::from_str(
            r#"{"rules": [
                {"match": "bid 1773", "unless": "Edit Configurations", "reply": "<action>click(\"1773\")</action>"},
                {"match": ["bid 1773", "Edit"], "reply": "other"}
            ]}"#,
        )
        .unwrap();
        let stub = ScriptedStub::new(stub);
        assert_eq!(stub.complete(&req("row bid 1773")).unwrap().text, "<action>click(\"1773\")</action>");
        assert_eq!(stub.complete(&req("bid 1773, Edit Configurations")).unwrap().text, "other");
        assert!(matches!(stub.complete(&req("nothing")), Err(LlmError::Protocol(_))));
        assert_eq!(stub.calls(), 3);
    }

    #[test]
    fn reply_sequences_advance() {
        let stub = ScriptedStub::from_rules(vec![ScriptRule {
            when: TextMatch::One("x".into()),
            unless: None,
            reply: None,
            replies: vec!["a".into(), "b".into()],
        }]);
        let got: Vec<String> = (0..3).map(|_| stub.complete(&req("x")).unwrap().text).collect();
        assert_eq!(got, ["a", "b", "b"]);
    }
}
