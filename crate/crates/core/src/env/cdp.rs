//! Real-browser environment over the Chrome DevTools protocol.
//!
//! Connects to one page target's websocket (`ws://host:9222/devtools/page/<id>`)
//! and speaks the protocol directly: `Page.navigate` for navigation,
//! `Accessibility.getFullAXTree` for observations, `Input.*` for element
//! actions and `Page.captureScreenshot` for screenshots. Element ids (bids) are
//! the backend DOM node ids of interactive accessibility nodes.
//!
//! Tabs are not modelled: `new_tab`, `tab_focus` and `tab_close` are no-ops
//! with a note. Server-side state is opaque, so [`FinalState::vars`] is empty.

use std::collections::{BTreeMap, HashMap};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use super::{neutral_step, EnvError, EnvResult, Environment, FinalState};
use crate::action::{Action, ScrollDirection};
use crate::model::{Mark, Observation};

const INTERACTIVE_ROLES: &[&str] = &[
    "button", "link", "textbox", "searchbox", "combobox", "checkbox", "radio", "menuitem", "tab", "option",
    "switch", "slider", "spinbutton", "listbox", "gridcell",
];

/// Pixels scrolled per unit of `scroll` amount.
const SCROLL_STEP_PX: i64 = 600;

#[derive(Debug, Clone)]
pub struct CdpConfig {
    /// Websocket URL of the page target.
    pub endpoint: String,
    /// Page loaded after (re)connecting.
    pub start_url: Option<String>,
    pub nav_timeout: Duration,
    pub site_id: String,
}

impl CdpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        CdpConfig { endpoint: endpoint.into(), start_url: None, nav_timeout: Duration::from_secs(30), site_id: "browser".into() }
    }
}

type Socket = WebSocket<MaybeTlsStream<TcpStream>>;

pub struct CdpEnv {
    cfg: CdpConfig,
    socket: Option<Socket>,
    next_id: u64,
    step: u32,
    last_url: String,
}

impl CdpEnv {
    /// Connects and, if configured, loads the start page. A browser that is
    /// not listening yields [`EnvError::SessionLost`].
    pub fn connect(cfg: CdpConfig) -> Result<Self, EnvError> {
        let mut env = CdpEnv { cfg, socket: None, next_id: 0, step: 0, last_url: String::new() };
        env.open()?;
        Ok(env)
    }

    fn open(&mut self) -> Result<(), EnvError> {
        let (socket, _) = tungstenite::connect(self.cfg.endpoint.as_str())
            .map_err(|e| EnvError::SessionLost(format!("cannot reach {}: {e}", self.cfg.endpoint)))?;
        if let MaybeTlsStream::Plain(s) = socket.get_ref() {
            let _ = s.set_read_timeout(Some(self.cfg.nav_timeout));
        }
        self.socket = Some(socket);
        self.call("Page.enable", json!({}))?;
        self.call("DOM.enable", json!({}))?;
        if let Some(url) = self.cfg.start_url.clone() {
            self.navigate(&url)?;
        }
        Ok(())
    }

    fn lost(&mut self, why: String) -> EnvError {
        self.socket = None;
        EnvError::SessionLost(why)
    }

    /// Sends one command and waits for its response, skipping events.
    fn call(&mut self, method: &str, params: Value) -> Result<Value, EnvError> {
        self.next_id += 1;
        let id = self.next_id;
        let msg = json!({"id": id, "method": method, "params": params}).to_string();
        let socket = self.socket.as_mut().ok_or_else(|| EnvError::SessionLost("not connected".into()))?;
        if let Err(e) = socket.send(Message::text(msg)) {
            return Err(self.lost(format!("{method}: {e}")));
        }
        let deadline = Instant::now() + self.cfg.nav_timeout;
        loop {
            let socket = self.socket.as_mut().ok_or_else(|| EnvError::SessionLost("not connected".into()))?;
            let frame = match socket.read() {
                Ok(f) => f,
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    return Err(EnvError::Timeout(format!("{method} got no response")));
                }
                Err(e) => return Err(self.lost(format!("{method}: {e}"))),
            };
            let text = match frame {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => return Err(self.lost(format!("{method}: browser closed the connection"))),
                _ => continue,
            };
            let v: Value = serde_json::from_str(&text).map_err(|e| EnvError::SessionLost(format!("bad frame: {e}")))?;
            if v.get("id").and_then(Value::as_u64) == Some(id) {
                if let Some(err) = v.get("error") {
                    return Err(EnvError::NavigationError(format!("{method}: {err}")));
                }
                return Ok(v.get("result").cloned().unwrap_or(Value::Null));
            }
            if Instant::now() > deadline {
                return Err(EnvError::Timeout(format!("{method} got no response")));
            }
        }
    }

    fn eval(&mut self, expr: &str) -> Result<Value, EnvError> {
        let r = self.call("Runtime.evaluate", json!({"expression": expr, "returnByValue": true}))?;
        Ok(r.pointer("/result/value").cloned().unwrap_or(Value::Null))
    }

    fn wait_loaded(&mut self) -> Result<(), EnvError> {
        let deadline = Instant::now() + self.cfg.nav_timeout;
        loop {
            if self.eval("document.readyState")?.as_str() == Some("complete") {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(EnvError::Timeout("page did not finish loading".into()));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn current_url(&mut self) -> Result<String, EnvError> {
        let url = self.eval("location.href")?.as_str().unwrap_or_default().to_string();
        self.last_url = url.clone();
        Ok(url)
    }

    fn navigate(&mut self, url: &str) -> Result<EnvResult, EnvError> {
        url::Url::parse(url).map_err(|e| EnvError::NavigationError(format!("{url:?}: {e}")))?;
        let r = self.call("Page.navigate", json!({"url": url}))?;
        if let Some(err) = r.get("errorText").and_then(Value::as_str).filter(|s| !s.is_empty()) {
            return Err(EnvError::NavigationError(format!("{url}: {err}")));
        }
        self.wait_loaded()?;
        Ok(EnvResult::changed(self.current_url()?))
    }

    fn history_move(&mut self, delta: i64) -> Result<EnvResult, EnvError> {
        let h = self.call("Page.getNavigationHistory", json!({}))?;
        let idx = h.get("currentIndex").and_then(Value::as_i64).unwrap_or(0) + delta;
        let entries = h.get("entries").and_then(Value::as_array).cloned().unwrap_or_default();
        let Some(entry) = usize::try_from(idx).ok().and_then(|i| entries.get(i)) else {
            let url = self.current_url()?;
            return Ok(EnvResult::neutral(url, Some("no history entry in that direction".into())));
        };
        let entry_id = entry.get("id").cloned().unwrap_or(Value::Null);
        self.call("Page.navigateToHistoryEntry", json!({"entryId": entry_id}))?;
        self.wait_loaded()?;
        Ok(EnvResult::changed(self.current_url()?))
    }

    fn node_center(&mut self, bid: &str) -> Result<(f64, f64), EnvError> {
        let node: i64 = bid.parse().map_err(|_| EnvError::InvalidBid(bid.to_string()))?;
        self.call("DOM.scrollIntoViewIfNeeded", json!({"backendNodeId": node}))
            .map_err(|_| EnvError::InvalidBid(bid.to_string()))?;
        let r = self
            .call("DOM.getBoxModel", json!({"backendNodeId": node}))
            .map_err(|_| EnvError::InvalidBid(bid.to_string()))?;
        let quad: Vec<f64> = r
            .pointer("/model/content")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if quad.len() < 8 {
            return Err(EnvError::InvalidBid(bid.to_string()));
        }
        Ok(((quad[0] + quad[2] + quad[4] + quad[6]) / 4.0, (quad[1] + quad[3] + quad[5] + quad[7]) / 4.0))
    }

    fn mouse(&mut self, kind: &str, x: f64, y: f64) -> Result<(), EnvError> {
        self.call(
            "Input.dispatchMouseEvent",
            json!({"type": kind, "x": x, "y": y, "button": "left", "clickCount": 1}),
        )
        .map(drop)
    }

    fn key(&mut self, key: &str) -> Result<(), EnvError> {
        let (code, vk, text) = match key {
            "Enter" => ("Enter", 13, "\r"),
            "Tab" => ("Tab", 9, ""),
            "Escape" => ("Escape", 27, ""),
            "Backspace" => ("Backspace", 8, ""),
            other => (other, 0, ""),
        };
        let mut down = json!({"type": "keyDown", "key": key, "code": code, "windowsVirtualKeyCode": vk});
        if !text.is_empty() {
            down["text"] = json!(text);
        }
        self.call("Input.dispatchKeyEvent", down)?;
        self.call("Input.dispatchKeyEvent", json!({"type": "keyUp", "key": key, "code": code, "windowsVirtualKeyCode": vk}))
            .map(drop)
    }

    fn after_input(&mut self) -> Result<EnvResult, EnvError> {
        self.wait_loaded()?;
        Ok(EnvResult::changed(self.current_url()?))
    }
}

/// Renders a `getFullAXTree` result as indented text plus marks.
pub fn render_ax_nodes(nodes: &[Value]) -> (String, Vec<Mark>) {
    let by_id: HashMap<&str, &Value> =
        nodes.iter().filter_map(|n| n.get("nodeId").and_then(Value::as_str).map(|id| (id, n))).collect();
    let mut out = Vec::new();
    let mut marks: Vec<Mark> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let Some(root) = nodes.first() else { return (String::new(), marks) };
    let mut stack = vec![(root, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        let role = node.pointer("/role/value").and_then(Value::as_str).unwrap_or("");
        let name = node.pointer("/name/value").and_then(Value::as_str).unwrap_or("");
        let ignored = node.get("ignored").and_then(Value::as_bool).unwrap_or(false);
        let shown = !ignored && !(matches!(role, "none" | "generic" | "") && name.is_empty());
        if shown {
            let disabled = node
                .get("properties")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
                .any(|p| p.get("name").and_then(Value::as_str) == Some("disabled") && p.pointer("/value/value") == Some(&json!(true)));
            let mut line = "\t".repeat(depth);
            let backend = node.get("backendDOMNodeId").and_then(Value::as_i64);
            if let Some(b) = backend.filter(|_| INTERACTIVE_ROLES.contains(&role)) {
                let bid = b.to_string();
                if seen.insert(bid.clone()) {
                    line.push_str(&format!("[{bid}] "));
                    marks.push(Mark { bid, role: role.into(), name: name.into(), enabled: !disabled });
                }
            }
            line.push_str(&format!("{role} '{name}'"));
            if disabled {
                line.push_str(" disabled");
            }
            out.push(line);
        }
        let child_depth = if shown { depth + 1 } else { depth };
        let children: Vec<&str> = node
            .get("childIds")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .collect();
        for c in children.into_iter().rev() {
            if let Some(child) = by_id.get(c) {
                stack.push((child, child_depth));
            }
        }
    }
    (out.join("\n"), marks)
}

impl Environment for CdpEnv {
    fn site_id(&self) -> &str {
        &self.cfg.site_id
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        let url = self.current_url()?;
        let tree = self.call("Accessibility.getFullAXTree", json!({}))?;
        let nodes = tree.get("nodes").and_then(Value::as_array).cloned().unwrap_or_default();
        let (ax, marks) = render_ax_nodes(&nodes);
        Observation::new(self.step, url, ax, marks).map_err(|e| EnvError::NavigationError(e.to_string()))
    }

    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        if let Some(r) = neutral_step(action, &self.last_url) {
            return Ok(r);
        }
        match action {
            Action::Click(bid) => {
                let (x, y) = self.node_center(bid)?;
                self.mouse("mousePressed", x, y)?;
                self.mouse("mouseReleased", x, y)?;
                self.after_input()
            }
            Action::Hover(bid) => {
                let (x, y) = self.node_center(bid)?;
                self.mouse("mouseMoved", x, y)?;
                self.after_input()
            }
            Action::Type { bid, text, press_enter } => {
                let node: i64 = bid.parse().map_err(|_| EnvError::InvalidBid(bid.clone()))?;
                self.call("DOM.focus", json!({"backendNodeId": node})).map_err(|_| EnvError::InvalidBid(bid.clone()))?;
                self.call("Input.insertText", json!({"text": text}))?;
                if *press_enter {
                    self.key("Enter")?;
                }
                self.after_input()
            }
            Action::Press(key) => {
                for part in key.split('+') {
                    self.key(part)?;
                }
                self.after_input()
            }
            Action::Scroll { direction, amount } => {
                let px = SCROLL_STEP_PX * i64::from(amount.unwrap_or(1));
                let (dx, dy) = match direction {
                    ScrollDirection::Up => (0, -px),
                    ScrollDirection::Down => (0, px),
                    ScrollDirection::Left => (-px, 0),
                    ScrollDirection::Right => (px, 0),
                };
                self.eval(&format!("window.scrollBy({dx}, {dy})"))?;
                Ok(EnvResult::changed(self.last_url.clone()))
            }
            Action::GoTo(url) => self.navigate(url),
            Action::GoBack => self.history_move(-1),
            Action::GoForward => self.history_move(1),
            Action::NewTab | Action::TabFocus(_) | Action::TabClose => Ok(EnvResult::neutral(
                self.last_url.clone(),
                Some("tab actions are not supported by the devtools adapter".into()),
            )),
            Action::TakeNote(_) | Action::Calculate(_) | Action::Stop(_) => unreachable!("handled as neutral"),
        }
    }

    fn reopen(&mut self) -> Result<(), EnvError> {
        self.socket = None;
        self.open()
    }

    fn final_state(&self) -> FinalState {
        FinalState { url: self.last_url.clone(), vars: BTreeMap::new() }
    }

    fn set_step(&mut self, step: u32) {
        self.step = step;
    }

    fn screenshot(&mut self) -> Option<Vec<u8>> {
        let r = self.call("Page.captureScreenshot", json!({"format": "png"})).ok()?;
        let data = r.get("data")?.as_str()?;
        base64::engine::general_purpose::STANDARD.decode(data).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_browser_is_session_lost() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let err = CdpEnv::connect(CdpConfig::new(format!("ws://127.0.0.1:{port}/devtools/page/x"))).err().unwrap();
        assert!(matches!(err, EnvError::SessionLost(_)), "{err:?}");
    }

    #[test]
    fn renders_interactive_nodes_as_marks() {
        let nodes = vec![
            json!({"nodeId": "1", "role": {"value": "RootWebArea"}, "name": {"value": "Shop"}, "childIds": ["2", "3"]}),
            json!({"nodeId": "2", "role": {"value": "generic"}, "name": {"value": ""}, "childIds": ["4"]}),
            json!({"nodeId": "3", "role": {"value": "StaticText"}, "name": {"value": "Hello"}}),
            json!({"nodeId": "4", "role": {"value": "button"}, "name": {"value": "Buy"}, "backendDOMNodeId": 42,
                   "properties": [{"name": "disabled", "value": {"value": true}}]}),
        ];
        let (tree, marks) = render_ax_nodes(&nodes);
        assert_eq!(tree, "RootWebArea 'Shop'\n\t[42] button 'Buy' disabled\n\tStaticText 'Hello'");
        assert_eq!(marks, vec![Mark { bid: "42".into(), role: "button".into(), name: "Buy".into(), enabled: false }]);
    }
}
