use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{request_digest, ChatRequest, ChatResponse, LlmClient, LlmError};

/// One cassette line: the digest, the raw request (for audit) and the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

struct Recorder {
    inner: Arc<dyn LlmClient>,
    file: Mutex<File>,
}

/// Record/replay wrapper keyed by [`request_digest`].
///
/// In record mode every request goes to the wrapped client and new replies are
/// appended to the cassette file. In replay mode nothing leaves the process:
/// a request missing from the cassette is a [`LlmError::CassetteMiss`].
pub struct CassetteClient {
    path: PathBuf,
    entries: Mutex<HashMap<String, ChatResponse>>,
    recorder: Option<Recorder>,
}

fn load(path: &Path) -> Result<HashMap<String, ChatResponse>, LlmError> {
    let mut out = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(LlmError::Cassette(format!("{}: {e}", path.display()))),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CassetteRecord = serde_json::from_str(&line)
            .map_err(|e| LlmError::Cassette(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.insert(rec.digest, rec.response);
    }
    Ok(out)
}

impl CassetteClient {
    pub fn replay(path: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let path = path.into();
        let entries = Mutex::new(load(&path)?);
        Ok(CassetteClient { path, entries, recorder: None })
    }

    pub fn record(path: impl Into<PathBuf>, inner: Arc<dyn LlmClient>) -> Result<Self, LlmError> {
        let path = path.into();
        let entries = Mutex::new(load(&path)?);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| LlmError::Cassette(format!("{}: {e}", dir.display())))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(CassetteClient { path, entries, recorder: Some(Recorder { inner, file: Mutex::new(file) }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cassette lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LlmClient for CassetteClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let digest = request_digest(req);
        if let Some(hit) = self.entries.lock().expect("cassette lock poisoned").get(&digest) {
            return Ok(hit.clone());
        }
        let Some(rec) = &self.recorder else {
            return Err(LlmError::CassetteMiss { digest });
        };
        let response = rec.inner.complete(req)?;
        let line = serde_json::to_string(&CassetteRecord { digest: digest.clone(), request: req.clone(), response: response.clone() })
            .map_err(|e| LlmError::Cassette(e.to_string()))?;
        {
            let mut f = rec.file.lock().expect("cassette lock poisoned");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| LlmError::Cassette(e.to_string()))?;
        }
        self.entries.lock().expect("cassette lock poisoned").insert(digest, response.clone());
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, ScriptedStub};

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let stub = Arc::new(ScriptedStub::constant("<action>stop()</action>"));
        let req = ChatRequest::new("m", vec![ChatMessage::user("hello")]);
        let rec = CassetteClient::record(&path, stub.clone()).unwrap();
        let a = rec.complete(&req).unwrap();
        rec.complete(&req).unwrap();
        assert_eq!(stub.calls(), 1);
        let replay = CassetteClient::replay(&path).unwrap();
        assert_eq!(replay.complete(&req).unwrap(), a);
        let other = ChatRequest::new("m", vec![ChatMessage::user("bye")]);
        match replay.complete(&other) {
            Err(LlmError::CassetteMiss { digest }) => assert_eq!(digest, request_digest(&other)),
            other => panic!("expected a miss, got {other:?}"),
        }
    }
}
