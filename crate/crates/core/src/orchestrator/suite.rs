use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{MockEnv, SiteSpec};
use crate::llm::StubScript;
use crate::model::Goal;
use crate::{Error, Result};

pub const SUITE_VERSION: u32 = 1;
pub const MANIFEST: &str = "suite.json";

/// The bundled twelve-task suite with its stub script.
pub fn seeded_suite_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("suite")
}

/// `suite.json`: the task list of a benchmark directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub v: u32,
    pub name: String,
    /// Scripted model replies shared by every task, relative to the suite dir.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub: Option<PathBuf>,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: String,
    pub domain: String,
    /// Site spec file, relative to the suite dir.
    pub site: PathBuf,
    pub goal: Goal,
    /// Free-form labels, e.g. `needs_knowledge` for tasks the scripted model
    /// only solves with tips.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// A loaded task: its goal and the site it runs against.
#[derive(Debug, Clone)]
pub struct SuiteTask {
    pub id: String,
    pub domain: String,
    pub goal: Goal,
    pub site: Arc<SiteSpec>,
    pub tags: Vec<String>,
}

impl SuiteTask {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    /// A fresh session on the task's site.
    pub fn env(&self) -> MockEnv {
        MockEnv::from_shared(self.site.clone()).expect("site specs are validated when the suite loads")
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub dir: PathBuf,
    pub name: String,
    pub tasks: Vec<SuiteTask>,
    pub stub: Option<Arc<StubScript>>,
}

impl Suite {
    pub fn load(dir: impl AsRef<Path>) -> Result<Suite> {
        let dir = dir.as_ref();
        let manifest: SuiteManifest = crate::read_json(&dir.join(MANIFEST))?;
        if manifest.v != SUITE_VERSION {
            return Err(Error::InvalidInput(format!("{}: unsupported suite version {}", dir.display(), manifest.v)));
        }
        let mut seen = BTreeSet::new();
        let mut sites: Vec<(PathBuf, Arc<SiteSpec>)> = Vec::new();
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for entry in manifest.tasks {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate task id {:?}", entry.id)));
            }
            let path = dir.join(&entry.site);
            let site = match sites.iter().find(|(p, _)| *p == path) {
                Some((_, s)) => s.clone(),
                None => {
                    let spec = MockEnv::load(&path)?.shared_spec();
                    sites.push((path, spec.clone()));
                    spec
                }
            };
            let mut goal = entry.goal;
            if goal.id.is_empty() {
                goal.id = entry.id.clone();
            }
            goal.validate()?;
            tasks.push(SuiteTask { id: entry.id, domain: entry.domain, goal, site, tags: entry.tags });
        }
        let stub = match manifest.stub {
            Some(rel) => {
                let path = dir.join(rel);
                let script: StubScript = crate::read_json(&path)?;
                Some(Arc::new(script))
            }
            None => None,
        };
        Ok(Suite { dir: dir.to_path_buf(), name: manifest.name, tasks, stub })
    }

    pub fn task(&self, id: &str) -> Option<&SuiteTask> {
        self.tasks.iter().find(|t| t.id == id)
    }
}
