use super::{EnvError, EnvResult, Environment, FinalState};
use crate::action::Action;
use crate::model::Observation;

/// Restores lost sessions.
///
/// When the wrapped environment reports `SessionLost` or `Timeout`, the
/// watchdog reopens it, navigates back to the last URL it saw, replays every
/// note taken so far and retries the failed call. After `retries` failed
/// recoveries it gives up with [`EnvError::Unrecoverable`]. Without faults it
/// is a pure pass-through.
pub struct Watchdog<E> {
    inner: E,
    retries: u32,
    last_url: Option<String>,
    notes: Vec<String>,
    recoveries: u32,
}

impl<E: Environment> Watchdog<E> {
    pub fn new(inner: E, retries: u32) -> Self {
        Watchdog { inner, retries, last_url: None, notes: Vec::new(), recoveries: 0 }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn into_inner(self) -> E {
        self.inner
    }

    /// Successful recoveries so far.
    pub fn recoveries(&self) -> u32 {
        self.recoveries
    }

    fn restore(&mut self) -> Result<(), EnvError> {
        self.inner.reopen()?;
        if let Some(url) = &self.last_url {
            self.inner.step(&Action::GoTo(url.clone()))?;
        }
        for note in &self.notes {
            self.inner.step(&Action::TakeNote(note.clone()))?;
        }
        Ok(())
    }

    fn guarded<T>(&mut self, mut op: impl FnMut(&mut E) -> Result<T, EnvError>) -> Result<T, EnvError> {
        let mut last = match op(&mut self.inner) {
            Err(e) if e.is_transient() => e,
            other => return other,
        };
        for attempt in 1..=self.retries {
            log::warn!("session fault ({last}); recovery attempt {attempt}/{}", self.retries);
            if let Err(e) = self.restore() {
                if !e.is_transient() {
                    return Err(e);
                }
                last = e;
                continue;
            }
            match op(&mut self.inner) {
                Ok(v) => {
                    self.recoveries += 1;
                    return Ok(v);
                }
                Err(e) if e.is_transient() => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(EnvError::Unrecoverable { attempts: self.retries, last: last.to_string() })
    }
}

impl<E: Environment> Environment for Watchdog<E> {
    fn site_id(&self) -> &str {
        self.inner.site_id()
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        let obs = self.guarded(|e| e.observe())?;
        self.last_url = Some(obs.url.clone());
        Ok(obs)
    }

    fn step(&mut self, action: &Action) -> Result<EnvResult, EnvError> {
        let r = self.guarded(|e| e.step(action))?;
        self.last_url = Some(r.url.clone());
        if let Action::TakeNote(text) = action {
            self.notes.push(text.clone());
        }
        Ok(r)
    }

    fn reopen(&mut self) -> Result<(), EnvError> {
        self.inner.reopen()
    }

    fn final_state(&self) -> FinalState {
        self.inner.final_state()
    }

    fn url_templates(&self) -> Vec<String> {
        self.inner.url_templates()
    }

    fn set_step(&mut self, step: u32) {
        self.inner.set_step(step)
    }

    fn screenshot(&mut self) -> Option<Vec<u8>> {
        self.inner.screenshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MockEnv, SiteSpec};

    fn env() -> MockEnv {
        let spec: SiteSpec = serde_json::from_value(serde_json::json!({
            "v": 1, "site_id": "w", "domain_label": "x", "initial_page": "a",
            "pages": [
                {"id": "a", "url": "http://w.test/a", "title": "A",
                 "elements": [{"bid": "1", "role": "link", "name": "to b"}],
                 "transitions": [{"on": "click(\"1\")", "to": "b"}]},
                {"id": "b", "url": "http://w.test/b", "title": "B",
                 "elements": [{"bid": "2", "role": "button", "name": "inc"}],
                 "transitions": [{"on": "click(\"2\")", "effects": [{"inc": {"var": "n", "by": 1}}]}]}
            ]
        }))
        .unwrap();
        MockEnv::new(spec).unwrap()
    }

    fn script(env: &mut impl Environment) -> Result<FinalState, EnvError> {
        env.observe()?;
        env.step(&Action::Click("1".into()))?;
        env.observe()?;
        env.step(&Action::Click("2".into()))?;
        env.observe()?;
        env.step(&Action::Click("2".into()))?;
        Ok(env.final_state())
    }

    #[test]
    fn single_fault_is_invisible() {
        let baseline = script(&mut Watchdog::new(env(), 2)).unwrap();
        for at in 0..6 {
            let mut faulty = env();
            faulty.inject_faults(at, 1);
            let mut wd = Watchdog::new(faulty, 2);
            assert_eq!(script(&mut wd).unwrap(), baseline, "fault at call {at}");
            assert_eq!(wd.recoveries(), 1);
        }
    }

    #[test]
    fn exhaustion_is_unrecoverable() {
        let mut faulty = env();
        faulty.inject_faults(3, 3);
        let err = script(&mut Watchdog::new(faulty, 2)).unwrap_err();
        assert!(matches!(err, EnvError::Unrecoverable { attempts: 2, .. }));
    }

    #[test]
    fn pass_through_without_faults() {
        let mut wd = Watchdog::new(env(), 2);
        script(&mut wd).unwrap();
        assert_eq!(wd.recoveries(), 0);
        assert_eq!(wd.inner().calls(), 6);
    }
}
