use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::site::{match_template, render_template, ElementSpec, PageSpec, Scalar, SiteSpec};
use super::{neutral_step, EnvError, EnvResult, Environment, FinalState};
use crate::action::Action;
use crate::model::{Mark, Observation};

pub const NOT_FOUND_TITLE: &str = "404 Not Found";
const BLANK: &str = "about:blank";

#[derive(Debug, Clone, PartialEq)]
enum Location {
    Page(String),
    NotFound(String),
    Blank,
}

#[derive(Debug, Clone)]
struct Tab {
    history: Vec<Location>,
    pos: usize,
}

impl Tab {
    fn at(loc: Location) -> Self {
        Tab { history: vec![loc], pos: 0 }
    }

    fn current(&self) -> &Location {
        &self.history[self.pos]
    }

    fn push(&mut self, loc: Location) {
        self.history.truncate(self.pos + 1);
        self.history.push(loc);
        self.pos += 1;
    }
}

/// Deterministic site simulator.
///
/// Pages render through a fixed text template so identical state always gives
/// identical observations. Actions resolve through the current page's
/// transition table, first match wins; anything unmatched is a no-op with a
/// note.
#[derive(Debug, Clone)]
pub struct MockEnv {
    spec: Arc<SiteSpec>,
    vars: BTreeMap<String, Scalar>,
    tabs: Vec<Tab>,
    active: usize,
    step: u32,
    calls: u64,
    faults: Vec<std::ops::Range<u64>>,
    dead: bool,
}

impl MockEnv {
    pub fn new(spec: SiteSpec) -> Result<Self, EnvError> {
        Self::from_shared(Arc::new(spec))
    }

    pub fn from_shared(spec: Arc<SiteSpec>) -> Result<Self, EnvError> {
        spec.validate()?;
        Ok(MockEnv {
            vars: spec.state_vars.clone(),
            tabs: vec![Tab::at(Location::Page(spec.initial_page.clone()))],
            active: 0,
            step: 0,
            calls: 0,
            faults: Vec::new(),
            dead: false,
            spec,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::BadSite(format!("{}: {e}", path.display())))?;
        let spec: SiteSpec =
            serde_json::from_str(&text).map_err(|e| EnvError::BadSite(format!("{}: {e}", path.display())))?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &SiteSpec {
        &self.spec
    }

    pub fn shared_spec(&self) -> Arc<SiteSpec> {
        self.spec.clone()
    }

    pub fn vars(&self) -> &BTreeMap<String, Scalar> {
        &self.vars
    }

    /// Makes calls number `start..start+count` (counting every `observe` and
    /// `step`, from zero) lose the session. A lost session stays lost until
    /// [`reopen`](Environment::reopen).
    pub fn inject_faults(&mut self, start: u64, count: u64) {
        self.faults.push(start..start.saturating_add(count));
    }

    /// Number of `observe`/`step` calls made so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn tick(&mut self) -> Result<(), EnvError> {
        let idx = self.calls;
        self.calls += 1;
        if self.dead {
            return Err(EnvError::SessionLost("session is closed".into()));
        }
        if self.faults.iter().any(|r| r.contains(&idx)) {
            self.dead = true;
            return Err(EnvError::SessionLost(format!("injected fault at call {idx}")));
        }
        Ok(())
    }

    fn tab(&self) -> &Tab {
        &self.tabs[self.active]
    }

    fn current_page(&self) -> Option<&PageSpec> {
        match self.tab().current() {
            Location::Page(id) => self.spec.page(id),
            _ => None,
        }
    }

    fn url_of(&self, loc: &Location) -> String {
        match loc {
            Location::Page(id) => self.spec.page(id).map(|p| render_template(&p.url, &self.vars)).unwrap_or_default(),
            Location::NotFound(url) => url.clone(),
            Location::Blank => BLANK.to_string(),
        }
    }

    fn current_url(&self) -> String {
        self.url_of(self.tab().current())
    }

    fn visible<'a>(&'a self, page: &'a PageSpec) -> impl Iterator<Item = &'a ElementSpec> + 'a {
        let url = render_template(&page.url, &self.vars);
        page.elements
            .iter()
            .filter(move |e| e.when.as_ref().map_or(true, |c| c.eval(&self.vars, &url)))
    }

    fn render(&self) -> (String, Vec<Mark>) {
        let mut tree = String::new();
        let mut marks = Vec::new();
        if self.tabs.len() > 1 {
            tree.push_str(&format!("Tab {} of {}\n", self.active, self.tabs.len()));
        }
        match self.tab().current() {
            Location::Blank => tree.push_str("RootWebArea ''"),
            Location::NotFound(_) => {
                tree.push_str(&format!("RootWebArea '{NOT_FOUND_TITLE}'\n\tStaticText 'The requested page could not be found.'"))
            }
            Location::Page(id) => {
                let page = self.spec.page(id).expect("validated page id");
                tree.push_str(&format!("RootWebArea '{}'", render_template(&page.title, &self.vars)));
                for el in self.visible(page) {
                    tree.push_str("\n\t");
                    let name = render_template(&el.name, &self.vars);
                    if let Some(bid) = &el.bid {
                        tree.push_str(&format!("[{bid}] "));
                        marks.push(Mark { bid: bid.clone(), role: el.role.clone(), name: name.clone(), enabled: el.enabled });
                    }
                    tree.push_str(&format!("{} '{}'", el.role, name));
                    let value = el
                        .binds
                        .as_ref()
                        .and_then(|v| self.vars.get(v))
                        .map(|v| render_template(&v.to_string(), &self.vars))
                        .or_else(|| el.text.as_ref().map(|t| render_template(t, &self.vars)));
                    if let Some(v) = value.filter(|v| !v.is_empty()) {
                        tree.push_str(&format!(" value='{v}'"));
                    }
                    for s in &el.states {
                        tree.push(' ');
                        tree.push_str(s);
                    }
                    if !el.enabled {
                        tree.push_str(" disabled");
                    }
                }
            }
        }
        (tree, marks)
    }

    fn navigate(&mut self, loc: Location) {
        let tab = &mut self.tabs[self.active];
        if *tab.current() != loc {
            tab.push(loc);
        }
    }

    fn route(&mut self, raw: &str) -> Result<EnvResult, EnvError> {
        if raw == BLANK {
            self.navigate(Location::Blank);
            return Ok(EnvResult::changed(BLANK));
        }
        let parsed = url::Url::parse(raw).map_err(|e| EnvError::NavigationError(format!("{raw:?}: {e}")))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(EnvError::NavigationError(format!("unsupported scheme in {raw:?}")));
        }
        let hit = self
            .spec
            .pages
            .iter()
            .find_map(|p| match_template(&p.url, raw).map(|caps| (p.id.clone(), caps)));
        match hit {
            Some((id, caps)) => {
                for (k, v) in caps {
                    self.vars.insert(k, Scalar::Text(v));
                }
                self.navigate(Location::Page(id));
                Ok(EnvResult::changed(self.current_url()))
            }
            None => {
                self.navigate(Location::NotFound(raw.to_string()));
                Ok(EnvResult::changed(raw).with_note("page not found"))
            }
        }
    }

    /// Applies the first matching transition of the current page.
    fn fire(&mut self, action: &Action) -> Option<EnvResult> {
        let page = self.current_page()?;
        let url = render_template(&page.url, &self.vars);
        let t = page
            .transitions
            .iter()
            .find(|t| t.on.matches(action) && t.when.as_ref().map_or(true, |c| c.eval(&self.vars, &url)))?
            .clone();
        for e in &t.effects {
            e.apply(&mut self.vars);
        }
        if let Some(to) = &t.to {
            self.navigate(Location::Page(to.clone()));
        }
        let mut r = EnvResult::changed(self.current_url());
        r.note = t.note.clone();
        Some(r)
    }

    fn ineffective(&self, action: &Action) -> EnvResult {
        EnvResult::neutral(self.current_url(), Some(format!("ineffective action: {action} changed nothing")))
    }

    fn element(&self, bid: &str) -> Result<ElementSpec, EnvError> {
        self.current_page()
            .and_then(|p| self.visible(p).find(|e| e.bid.as_deref() == Some(bid)).cloned())
            .ok_or_else(|| EnvError::InvalidBid(bid.to_string()))
    }

    fn apply(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        let url = self.current_url();
        if let Some(r) = neutral_step(action, &url) {
            return Ok(r);
        }
        match action {
            Action::Click(bid) | Action::Hover(bid) | Action::Type { bid, .. } => {
                let el = self.element(bid)?;
                if !el.enabled {
                    return Ok(EnvResult::neutral(url, Some(format!("element {bid} is disabled"))));
                }
                let mut bound = false;
                if let (Action::Type { text, .. }, Some(var)) = (action, &el.binds) {
                    self.vars.insert(var.clone(), Scalar::Text(text.clone()));
                    bound = true;
                }
                if let Some(r) = self.fire(action) {
                    return Ok(r);
                }
                if let Action::Type { press_enter: true, .. } = action {
                    if let Some(r) = self.fire(&Action::Press("Enter".into())) {
                        return Ok(r);
                    }
                }
                Ok(if bound { EnvResult::changed(url) } else { self.ineffective(action) })
            }
            Action::GoTo(target) => self.route(target),
            Action::GoBack => {
                let tab = &mut self.tabs[self.active];
                if tab.pos == 0 {
                    return Ok(EnvResult::neutral(url, Some("already at the start of history".into())));
                }
                tab.pos -= 1;
                Ok(EnvResult::changed(self.current_url()))
            }
            Action::GoForward => {
                let tab = &mut self.tabs[self.active];
                if tab.pos + 1 >= tab.history.len() {
                    return Ok(EnvResult::neutral(url, Some("already at the end of history".into())));
                }
                tab.pos += 1;
                Ok(EnvResult::changed(self.current_url()))
            }
            Action::NewTab => {
                self.tabs.push(Tab::at(Location::Blank));
                self.active = self.tabs.len() - 1;
                Ok(EnvResult::changed(BLANK))
            }
            Action::TabFocus(i) => {
                let i = *i as usize;
                if i >= self.tabs.len() {
                    return Ok(EnvResult::neutral(url, Some(format!("no tab with index {i}"))));
                }
                self.active = i;
                Ok(EnvResult::changed(self.current_url()))
            }
            Action::TabClose => {
                if self.tabs.len() == 1 {
                    return Ok(EnvResult::neutral(url, Some("cannot close the last tab".into())));
                }
                self.tabs.remove(self.active);
                self.active = self.tabs.len() - 1;
                Ok(EnvResult::changed(self.current_url()))
            }
            Action::Press(_) | Action::Scroll { .. } => Ok(self.fire(action).unwrap_or_else(|| self.ineffective(action))),
            Action::TakeNote(_) | Action::Calculate(_) | Action::Stop(_) => unreachable!("handled as neutral"),
        }
    }
}

impl Environment for MockEnv {
    fn site_id(&self) -> &str {
        &self.spec.site_id
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        self.tick()?;
        let (tree, marks) = self.render();
        Observation::new(self.step, self.current_url(), tree, marks).map_err(|e| EnvError::BadSite(e.to_string()))
    }

    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        self.tick()?;
        self.apply(action)
    }

    fn reopen(&mut self) -> Result<(), EnvError> {
        self.dead = false;
        self.tabs = vec![Tab::at(Location::Page(self.spec.initial_page.clone()))];
        self.active = 0;
        Ok(())
    }

    fn final_state(&self) -> FinalState {
        FinalState { url: self.current_url(), vars: self.vars.clone() }
    }

    fn url_templates(&self) -> Vec<String> {
        self.spec.url_templates.clone()
    }

    fn set_step(&mut self, step: u32) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> SiteSpec {
        serde_json::from_value(serde_json::json!({
            "v": 1,
            "site_id": "t",
            "domain_label": "shopping",
            "initial_page": "home",
            "state_vars": {"cart_count": 0},
            "url_templates": ["http://shop.test/search?q={q}"],
            "pages": [
                {"id": "home", "url": "http://shop.test/", "title": "Home",
                 "elements": [
                    {"bid": "1", "role": "link", "name": "Product"},
                    {"bid": "2", "role": "textbox", "name": "Search", "binds": "q"},
                    {"bid": "3", "role": "button", "name": "Off", "enabled": false},
                    {"role": "StaticText", "name": "Cart: {cart_count}", "when": "cart_count >= 1"}
                 ],
                 "transitions": [
                    {"on": "click(\"1\")", "to": "product"},
                    {"on": "press(\"Enter\")", "to": "search"}
                 ]},
                {"id": "product", "url": "http://shop.test/p/1", "title": "Product",
                 "elements": [{"bid": "10", "role": "button", "name": "Add to Cart"}],
                 "transitions": [{"on": "click(\"10\")", "effects": [{"inc": {"var": "cart_count", "by": 1}}], "note": "added"}]},
                {"id": "search", "url": "http://shop.test/search?q={q}", "title": "Results for {q}"}
            ]
        }))
        .unwrap()
    }

    #[test]
    fn initial_observation_lists_elements() {
        let mut env = MockEnv::new(site()).unwrap();
        let obs = env.observe().unwrap();
        assert_eq!(obs.url, "http://shop.test/");
        assert_eq!(obs.marks.len(), 3);
        assert!(obs.ax_tree.contains("[1] link 'Product'"));
        assert!(obs.ax_tree.contains("[3] button 'Off' disabled"));
        assert!(!obs.ax_tree.contains("Cart:"));
        assert_eq!(obs, env.observe().unwrap());
    }

    #[test]
    fn transitions_and_effects() {
        let mut env = MockEnv::new(site()).unwrap();
        let r = env.step(&Action::Click("1".into())).unwrap();
        assert!(r.effective);
        assert_eq!(r.url, "http://shop.test/p/1");
        let r = env.step(&Action::Click("10".into())).unwrap();
        assert_eq!(r.note.as_deref(), Some("added"));
        assert_eq!(env.vars()["cart_count"], Scalar::Num(1.0));
        env.step(&Action::GoBack).unwrap();
        assert!(env.observe().unwrap().ax_tree.contains("Cart: 1"));
    }

    #[test]
    fn typing_with_enter_submits() {
        let mut env = MockEnv::new(site()).unwrap();
        let r = env
            .step(&Action::Type { bid: "2".into(), text: "red socks".into(), press_enter: true })
            .unwrap();
        assert_eq!(r.url, "http://shop.test/search?q=red socks");
        assert!(env.observe().unwrap().ax_tree.contains("Results for red socks"));
    }

    #[test]
    fn url_first_navigation_captures_vars() {
        let mut env = MockEnv::new(site()).unwrap();
        env.step(&Action::GoTo("http://shop.test/search?q=blue+hat".into())).unwrap();
        assert_eq!(env.vars()["q"], Scalar::Text("blue hat".into()));
    }

    #[test]
    fn unknown_and_invalid_navigation() {
        let mut env = MockEnv::new(site()).unwrap();
        let r = env.step(&Action::GoTo("http://shop.test/nope".into())).unwrap();
        assert_eq!(r.note.as_deref(), Some("page not found"));
        assert!(env.observe().unwrap().ax_tree.contains(NOT_FOUND_TITLE));
        assert!(matches!(env.step(&Action::GoTo("not a url".into())), Err(EnvError::NavigationError(_))));
    }

    #[test]
    fn degenerate_actions_are_noops() {
        let mut env = MockEnv::new(site()).unwrap();
        let r = env.step(&Action::GoBack).unwrap();
        assert!(!r.effective && r.note.is_some());
        let r = env.step(&Action::Scroll { direction: crate::action::ScrollDirection::Down, amount: None }).unwrap();
        assert!(r.note.unwrap().starts_with("ineffective"));
        let r = env.step(&Action::Click("3".into())).unwrap();
        assert!(!r.effective);
        assert!(matches!(env.step(&Action::Click("99".into())), Err(EnvError::InvalidBid(_))));
        let r = env.step(&Action::Calculate("2+2".into())).unwrap();
        assert_eq!(r.value, Some(4.0));
        assert_eq!(env.final_state().url, "http://shop.test/");
    }

    #[test]
    fn tabs() {
        let mut env = MockEnv::new(site()).unwrap();
        env.step(&Action::NewTab).unwrap();
        assert_eq!(env.observe().unwrap().url, BLANK);
        env.step(&Action::TabFocus(0)).unwrap();
        assert!(env.observe().unwrap().ax_tree.starts_with("Tab 0 of 2"));
        env.step(&Action::TabClose).unwrap();
        assert!(!env.step(&Action::TabClose).unwrap().effective);
    }

    #[test]
    fn faults_kill_the_session_until_reopened() {
        let mut env = MockEnv::new(site()).unwrap();
        env.inject_faults(1, 1);
        env.observe().unwrap();
        assert!(matches!(env.step(&Action::Click("1".into())), Err(EnvError::SessionLost(_))));
        assert!(env.observe().is_err());
        env.step(&Action::GoBack).unwrap_err();
        env.reopen().unwrap();
        assert_eq!(env.observe().unwrap().url, "http://shop.test/");
    }
}
