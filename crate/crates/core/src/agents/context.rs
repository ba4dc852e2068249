use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AgentError, Role};
use crate::dataset::Dataset;

pub const CONTEXT_FILE: &str = "context.json";

/// Registry of artifact locations shared by every agent in a run. All paths are absolute
/// and lie under the workspace root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectContext {
    pub root: PathBuf,
    pub run_id: String,
    bindings: BTreeMap<Role, PathBuf>,
}

/// Lexically resolves `.` and `..`; `None` if `..` climbs above the filesystem root.
pub(crate) fn normalize(path: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::Prefix(_) | Component::RootDir => out.push(c.as_os_str()),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::Normal(s) => out.push(s),
        }
    }
    Some(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

impl ProjectContext {
    /// Creates an empty context; the root is created if missing and canonicalized.
    pub fn new(root: &Path, run_id: impl Into<String>) -> Result<Self, AgentError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.canonicalize()?,
            run_id: run_id.into(),
            bindings: BTreeMap::new(),
        })
    }

    pub fn contains(&self, path: &Path) -> bool {
        path.is_absolute() && normalize(path).is_some_and(|p| p.starts_with(&self.root))
    }

    /// Binds a role to a path under the root. Rebinding to the same path is a no-op.
    pub fn bind(&mut self, role: Role, path: &Path) -> Result<(), AgentError> {
        if !self.contains(path) {
            return Err(AgentError::PathOutsideWorkspace(path.to_path_buf()));
        }
        let path = normalize(path).expect("checked by contains");
        match self.bindings.get(&role) {
            Some(existing) if *existing != path => Err(AgentError::RoleAlreadyBound(role)),
            Some(_) => Ok(()),
            None => {
                self.bindings.insert(role, path);
                Ok(())
            }
        }
    }

    pub fn lookup(&self, role: Role) -> Result<&Path, AgentError> {
        self.bindings
            .get(&role)
            .map(PathBuf::as_path)
            .ok_or(AgentError::UnboundRole(role))
    }

    pub fn is_bound(&self, role: Role) -> bool {
        self.bindings.contains_key(&role)
    }

    pub fn bindings(&self) -> &BTreeMap<Role, PathBuf> {
        &self.bindings
    }

    /// Conventional location of each artifact inside the workspace.
    pub fn default_path(&self, role: Role) -> PathBuf {
        let rel = match role {
            Role::Dataset => "data/dataset.csv",
            Role::ModelSpec => "tasks/model.json",
            Role::TrainingSpec => "tasks/train.json",
            Role::EvaluationSpec => "tasks/evaluate.json",
            Role::TrainedEnsemble => "ensemble",
            Role::ReportDir => "report",
            Role::StateFile => "state.json",
        };
        self.root.join(rel)
    }

    /// Path relative to the workspace root, for logs and reports.
    pub fn relative<'a>(&self, path: &'a Path) -> &'a Path {
        path.strip_prefix(&self.root).unwrap_or(path)
    }

    pub fn save(&self) -> Result<(), AgentError> {
        let json = serde_json::to_vec_pretty(self).expect("context serializes");
        write_atomic(&self.root.join(CONTEXT_FILE), &json)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, AgentError> {
        let root = root.canonicalize()?;
        let text = std::fs::read_to_string(root.join(CONTEXT_FILE))?;
        let ctx: Self = serde_json::from_str(&text)
            .map_err(|e| AgentError::CorruptState(format!("{CONTEXT_FILE}: {e}")))?;
        if ctx.root != root {
            return Err(AgentError::CorruptState(format!(
                "{CONTEXT_FILE} describes workspace {}",
                ctx.root.display()
            )));
        }
        for (role, p) in &ctx.bindings {
            if !ctx.contains(p) {
                return Err(AgentError::CorruptState(format!("{role} bound outside the workspace")));
            }
        }
        Ok(ctx)
    }
}

/// Workspace bootstrap shared by all run modes.
pub struct Workspace;

impl Workspace {
    /// Creates the directory layout, writes the dataset into it and binds the dataset
    /// and state-file roles.
    pub fn init(root: &Path, run_id: &str, dataset: &Dataset) -> Result<ProjectContext, AgentError> {
        let mut ctx = ProjectContext::new(root, run_id)?;
        for dir in ["data", "tasks"] {
            std::fs::create_dir_all(ctx.root.join(dir))?;
        }
        let data = ctx.default_path(Role::Dataset);
        dataset.write_csv(&data)?;
        ctx.bind(Role::Dataset, &data)?;
        let state = ctx.default_path(Role::StateFile);
        ctx.bind(Role::StateFile, &state)?;
        ctx.save()?;
        Ok(ctx)
    }

    pub fn exists(root: &Path) -> bool {
        root.join(CONTEXT_FILE).is_file()
    }
}
