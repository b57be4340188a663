//! TOML configuration: search, retrieval, VTE and PPO settings, the
//! knowledge base, the output directory and one backend per role.
//!
//! String values may contain `${VAR}`; the variable must be set. Relative
//! paths resolve against the config file's directory and must exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use vragent_core::backends::http::{HttpChat, HttpDetector, HttpEmbedder, HttpEndpoint, HttpRelevance};
use vragent_core::backends::mock::{MockBackend, MockScript};
use vragent_core::backends::scripted::ScriptedTree;
use vragent_core::backends::{
    Backends, CallKind, ChatModel, Detector, Embedder, HashEmbedder, LexicalRelevance, RelevanceScorer,
};
use vragent_core::rar::RarConfig;
use vragent_core::trajectory::PpoConfig;
use vragent_core::vte::VteConfig;
use vragent_core::SearchConfig;

use crate::error::CliError;

pub const ENV_SEED: &str = "VRAGENT_SEED";
pub const ENV_OUTPUT_DIR: &str = "VRAGENT_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub rar: RarConfig,
    #[serde(default)]
    pub vte: VteConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub knowledge_base: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    scripts: BTreeMap<PathBuf, MockScript>,
    #[serde(skip)]
    tables: BTreeMap<PathBuf, ScriptedTree>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("vragent-out")
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            search: SearchConfig::default(),
            rar: RarConfig::default(),
            vte: VteConfig::default(),
            ppo: PpoConfig::default(),
            backends: BackendsConfig::default(),
            knowledge_base: None,
            output_dir: default_output_dir(),
            scripts: BTreeMap::new(),
            tables: BTreeMap::new(),
        }
    }
}

/// `default` fills in teacher, student and assessor when they are not set.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub default: Option<BackendSpec>,
    pub teacher: Option<BackendSpec>,
    pub student: Option<BackendSpec>,
    pub assessor: Option<BackendSpec>,
    pub detector: Option<BackendSpec>,
    pub embedder: Option<BackendSpec>,
    pub relevance: Option<BackendSpec>,
    pub entities: Option<BackendSpec>,
}

/// Exactly one source must be set.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    /// JSON-lines mock script. Roles naming the same file share its queue.
    pub mock: Option<PathBuf>,
    /// JSON reward table for the scripted teacher/student/assessor.
    pub scripted: Option<PathBuf>,
    pub http: Option<HttpEndpoint>,
    pub builtin: Option<Builtin>,
    /// Embedding width for http and builtin embedders.
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    /// Hashed bag-of-words embedder.
    Hash,
    /// Token-overlap relevance scorer.
    Lexical,
}

enum Source<'a> {
    Mock(&'a Path),
    Scripted(&'a Path),
    Http(&'a HttpEndpoint),
    Builtin(Builtin),
}

impl BackendSpec {
    fn source(&self, role: &str) -> Result<Source<'_>, CliError> {
        let mut set = Vec::new();
        if let Some(p) = &self.mock {
            set.push(Source::Mock(p));
        }
        if let Some(p) = &self.scripted {
            set.push(Source::Scripted(p));
        }
        if let Some(h) = &self.http {
            set.push(Source::Http(h));
        }
        if let Some(b) = self.builtin {
            set.push(Source::Builtin(b));
        }
        match set.len() {
            1 => Ok(set.pop().expect("one source")),
            0 => Err(CliError::Config(format!("backends.{role} names no source"))),
            _ => Err(CliError::Config(format!(
                "backends.{role} must set exactly one of mock, scripted, http, builtin"
            ))),
        }
    }
}

impl AppConfig {
    /// Reads, interpolates, resolves and validates a config file. Env
    /// overrides are applied on top.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base, |k| std::env::var(k).ok())?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Parses config text. `env` resolves `${VAR}` references; relative
    /// paths are joined to `base`.
    pub fn parse(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        interpolate(&mut value, &env)?;
        let mut cfg: AppConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.resolve(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) -> Result<(), CliError> {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let Some(kb) = &mut self.knowledge_base {
            join(kb);
            require(kb, "knowledge_base")?;
        }
        for (role, spec) in self.backends.all_mut() {
            for p in [&mut spec.mock, &mut spec.scripted].into_iter().flatten() {
                join(p);
                require(p, &format!("backends.{role}"))?;
            }
            if let Some(p) = &spec.mock {
                if !self.scripts.contains_key(p) {
                    let script = MockScript::load(p)
                        .map_err(|e| CliError::Config(format!("backends.{role}: {}: {e}", p.display())))?;
                    self.scripts.insert(p.clone(), script);
                }
            }
            if let Some(p) = &spec.scripted {
                if !self.tables.contains_key(p) {
                    let table = std::fs::read_to_string(p)
                        .map_err(|e| e.to_string())
                        .and_then(|t| serde_json::from_str::<ScriptedTree>(&t).map_err(|e| e.to_string()))
                        .map_err(|e| CliError::Config(format!("backends.{role}: {}: {e}", p.display())))?;
                    self.tables.insert(p.clone(), table);
                }
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        self.search.validate().map_err(|e| CliError::Config(format!("search: {e}")))?;
        self.rar.validate().map_err(|e| CliError::Config(format!("rar: {e}")))?;
        self.vte.validate().map_err(|e| CliError::Config(format!("vte: {e}")))?;
        self.ppo.validate().map_err(|e| CliError::Config(format!("ppo: {e}")))?;
        for (role, spec) in self.backends.all() {
            spec.source(role)?;
        }
        Ok(())
    }

    /// `VRAGENT_SEED` and `VRAGENT_OUTPUT_DIR` override the file.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(seed) = env(ENV_SEED) {
            self.search.rng_seed =
                seed.trim().parse().map_err(|_| CliError::Config(format!("{ENV_SEED} is not an integer: {seed}")))?;
        }
        if let Some(dir) = env(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    /// Fresh backends: mock queues start from the top of their scripts.
    pub fn build_backends(&self) -> Result<Backends, CliError> {
        let mut mocks: BTreeMap<PathBuf, MockBackend> = BTreeMap::new();
        let b = &self.backends;
        let mut chat = |role: &str, spec: Option<&BackendSpec>, kind: CallKind| -> Result<Arc<dyn ChatModel>, CliError> {
            let spec = spec.ok_or_else(|| CliError::Config(format!("backends.{role} is not configured")))?;
            Ok(match spec.source(role)? {
                Source::Mock(p) => self.mock(&mut mocks, p).chat(kind),
                Source::Scripted(p) => Arc::new(self.tables[p].clone()),
                Source::Http(h) => Arc::new(HttpChat::new(h.clone())),
                Source::Builtin(_) => {
                    return Err(CliError::Config(format!("backends.{role}: builtin backends cannot chat")))
                }
            })
        };
        let teacher = chat("teacher", b.teacher.as_ref().or(b.default.as_ref()), CallKind::Teacher)?;
        let student = chat("student", b.student.as_ref().or(b.default.as_ref()), CallKind::Student)?;
        let assessor = chat("assessor", b.assessor.as_ref().or(b.default.as_ref()), CallKind::Assessor)?;
        let entities = b.entities.as_ref().map(|s| chat("entities", Some(s), CallKind::Entities)).transpose()?;

        let detector: Option<Arc<dyn Detector>> = match &b.detector {
            None => None,
            Some(spec) => Some(match spec.source("detector")? {
                Source::Mock(p) => Arc::new(self.mock(&mut mocks, p)),
                Source::Http(h) => Arc::new(HttpDetector::new(h.clone())),
                _ => return Err(CliError::Config("backends.detector must be mock or http".into())),
            }),
        };
        let embedder: Option<Arc<dyn Embedder>> = match &b.embedder {
            None => None,
            Some(spec) => Some(match spec.source("embedder")? {
                Source::Mock(p) => match spec.dimension {
                    Some(d) => Arc::new(MockBackend::with_dimension(self.scripts[p].clone(), d)),
                    None => Arc::new(self.mock(&mut mocks, p)),
                },
                Source::Http(h) => {
                    let d = spec
                        .dimension
                        .ok_or_else(|| CliError::Config("backends.embedder: http needs a dimension".into()))?;
                    Arc::new(HttpEmbedder::new(h.clone(), d))
                }
                Source::Builtin(Builtin::Hash) => Arc::new(HashEmbedder::new(spec.dimension.unwrap_or(64))),
                _ => return Err(CliError::Config("backends.embedder must be mock, http or builtin = \"hash\"".into())),
            }),
        };
        let relevance: Option<Arc<dyn RelevanceScorer>> = match &b.relevance {
            None => None,
            Some(spec) => Some(match spec.source("relevance")? {
                Source::Mock(p) => Arc::new(self.mock(&mut mocks, p)),
                Source::Http(h) => Arc::new(HttpRelevance::new(h.clone())),
                Source::Builtin(Builtin::Lexical) => Arc::new(LexicalRelevance),
                _ => {
                    return Err(CliError::Config(
                        "backends.relevance must be mock, http or builtin = \"lexical\"".into(),
                    ))
                }
            }),
        };
        Ok(Backends { teacher, student, assessor, detector, embedder, relevance, entities })
    }

    fn mock(&self, cache: &mut BTreeMap<PathBuf, MockBackend>, path: &Path) -> MockBackend {
        cache.entry(path.to_path_buf()).or_insert_with(|| MockBackend::new(self.scripts[path].clone())).clone()
    }
}

impl BackendsConfig {
    fn all(&self) -> impl Iterator<Item = (&'static str, &BackendSpec)> {
        [
            ("default", &self.default),
            ("teacher", &self.teacher),
            ("student", &self.student),
            ("assessor", &self.assessor),
            ("detector", &self.detector),
            ("embedder", &self.embedder),
            ("relevance", &self.relevance),
            ("entities", &self.entities),
        ]
        .into_iter()
        .filter_map(|(r, s)| s.as_ref().map(|s| (r, s)))
    }

    fn all_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut BackendSpec)> {
        [
            ("default", &mut self.default),
            ("teacher", &mut self.teacher),
            ("student", &mut self.student),
            ("assessor", &mut self.assessor),
            ("detector", &mut self.detector),
            ("embedder", &mut self.embedder),
            ("relevance", &mut self.relevance),
            ("entities", &mut self.entities),
        ]
        .into_iter()
        .filter_map(|(r, s)| s.as_mut().map(|s| (r, s)))
    }
}

fn require(path: &Path, key: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {} does not exist", path.display())))
    }
}

fn interpolate(value: &mut toml::Value, env: &impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
    match value {
        toml::Value::String(s) => *s = expand(s, env)?,
        toml::Value::Array(items) => {
            for v in items {
                interpolate(v, env)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, v) in t.iter_mut() {
                interpolate(v, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Replaces every `${NAME}` in `s`. `$$` is a literal `$`.
pub fn expand(s: &str, env: &impl Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let after = &rest[i + 1..];
        if let Some(tail) = after.strip_prefix('$') {
            out.push('$');
            rest = tail;
        } else if let Some(body) = after.strip_prefix('{') {
            let end = body.find('}').ok_or_else(|| CliError::Config(format!("unterminated ${{ in {s:?}")))?;
            let name = &body[..end];
            let valid = !name.is_empty()
                && !name.starts_with(|c: char| c.is_ascii_digit())
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(CliError::Config(format!("bad variable name {name:?}")));
            }
            let v = env(name).ok_or_else(|| CliError::Config(format!("environment variable {name} is not set")))?;
            out.push_str(&v);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}
