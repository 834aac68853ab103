//! Containerized user environments.
//!
//! A `skiff-core.yaml` document declares containers, the users whose SSH
//! sessions are routed into them, and how each image is acquired (pulled
//! from a registry or built from a local source). [`plan_setup`] compares the
//! declaration against a runtime snapshot and emits the steps needed to
//! converge; [`apply_steps`] drives a [`ContainerRuntime`] through them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, TryLockError};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::error::{Error, Result};

pub const CONFIG_FILE_NAME: &str = "skiff-core.yaml";

/// Persist-partition directory whose keys are copied for `copyRootKeys`.
pub const ROOT_KEYS_DIR: &str = "/mnt/persist/skiff/keys";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PullPolicy {
    IfNotExists,
    Always,
    Never,
}

impl PullPolicy {
    fn parse(text: &str) -> Option<PullPolicy> {
        match text {
            "ifnotexists" => Some(PullPolicy::IfNotExists),
            "always" => Some(PullPolicy::Always),
            "never" => Some(PullPolicy::Never),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MountSpec {
    pub host: String,
    pub container: String,
    pub read_only: bool,
}

impl MountSpec {
    pub fn parse(text: &str) -> std::result::Result<MountSpec, String> {
        let parts: Vec<&str> = text.split(':').collect();
        let (host, container, read_only) = match parts.as_slice() {
            [h, c] => (*h, *c, false),
            [h, c, "ro"] => (*h, *c, true),
            [_, _, opt] => return Err(format!("unsupported mount option {opt:?}")),
            _ => return Err("expected host:container[:ro]".into()),
        };
        if host.is_empty() || container.is_empty() {
            return Err("empty mount path".into());
        }
        Ok(MountSpec {
            host: host.to_owned(),
            container: container.to_owned(),
            read_only,
        })
    }
}

impl fmt::Display for MountSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.container)?;
        if self.read_only {
            f.write_str(":ro")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContainerSpec {
    pub image: String,
    pub mounts: Vec<MountSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserSpec {
    pub container: String,
    pub container_user: String,
    pub copy_root_keys: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PullSpec {
    pub policy: PullPolicy,
    pub registry: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildSpec {
    pub source: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageSpec {
    pub pull: Option<PullSpec>,
    pub build: Option<BuildSpec>,
}

impl ImageSpec {
    /// Acquisition rules for an image with no entry under `images:`.
    pub fn implicit() -> ImageSpec {
        ImageSpec {
            pull: Some(PullSpec {
                policy: PullPolicy::IfNotExists,
                registry: None,
            }),
            build: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoreConfig {
    pub containers: BTreeMap<String, ContainerSpec>,
    pub users: BTreeMap<String, UserSpec>,
    pub images: BTreeMap<String, ImageSpec>,
    /// Unknown keys and other non-fatal findings.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl CoreConfig {
    pub fn image_spec(&self, image: &str) -> ImageSpec {
        self.images.get(image).cloned().unwrap_or_else(ImageSpec::implicit)
    }

    /// Users routed into `container`, sorted by user name.
    pub fn users_of<'a>(&'a self, container: &'a str) -> impl Iterator<Item = (&'a str, &'a UserSpec)> + 'a {
        self.users
            .iter()
            .filter(move |(_, u)| u.container == container)
            .map(|(n, u)| (n.as_str(), u))
    }
}

type Extra = BTreeMap<String, Value>;

#[derive(Deserialize, Default)]
struct RawConfig {
    containers: Option<BTreeMap<String, RawContainer>>,
    users: Option<BTreeMap<String, RawUser>>,
    images: Option<BTreeMap<String, RawImage>>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawContainer {
    image: Option<String>,
    mounts: Option<Vec<String>>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawUser {
    container: Option<String>,
    #[serde(rename = "containerUser")]
    container_user: Option<String>,
    auth: Option<RawAuth>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawAuth {
    #[serde(rename = "copyRootKeys")]
    copy_root_keys: Option<bool>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawImage {
    pull: Option<RawPull>,
    build: Option<RawBuild>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawPull {
    policy: Option<String>,
    registry: Option<String>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawBuild {
    source: Option<String>,
    #[serde(flatten)]
    extra: Extra,
}

fn note_extra(warnings: &mut Vec<String>, at: &str, extra: &Extra) {
    for key in extra.keys() {
        warnings.push(format!("{at}: unknown key {key:?}"));
    }
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|s| s.trim().to_owned()).filter(|s| !s.is_empty())
}

/// Parses and validates a `skiff-core.yaml` document. All violations are
/// reported together.
pub fn parse_core_config(yaml_text: &str) -> Result<CoreConfig> {
    let raw: Option<RawConfig> = serde_yaml::from_str(yaml_text)?;
    let raw = raw.unwrap_or_default();
    let mut cfg = CoreConfig::default();
    let mut errors = Vec::new();
    note_extra(&mut cfg.warnings, "top level", &raw.extra);

    for (name, c) in raw.containers.unwrap_or_default() {
        let at = format!("containers.{name}");
        note_extra(&mut cfg.warnings, &at, &c.extra);
        let image = non_empty(c.image).unwrap_or_else(|| {
            errors.push(format!("container {name}: image is empty"));
            String::new()
        });
        let mut mounts = Vec::new();
        for m in c.mounts.unwrap_or_default() {
            match MountSpec::parse(&m) {
                Ok(spec) => mounts.push(spec),
                Err(why) => errors.push(format!("container {name}: invalid mount {m:?}: {why}")),
            }
        }
        cfg.containers.insert(name, ContainerSpec { image, mounts });
    }

    for (name, u) in raw.users.unwrap_or_default() {
        let at = format!("users.{name}");
        note_extra(&mut cfg.warnings, &at, &u.extra);
        let container = non_empty(u.container).unwrap_or_else(|| {
            errors.push(format!("user {name}: container is empty"));
            String::new()
        });
        let container_user = non_empty(u.container_user).unwrap_or_else(|| {
            errors.push(format!("user {name}: containerUser is empty"));
            String::new()
        });
        let auth = u.auth.unwrap_or_default();
        note_extra(&mut cfg.warnings, &format!("{at}.auth"), &auth.extra);
        if !container.is_empty() && !cfg.containers.contains_key(&container) {
            errors.push(format!("user {name} references missing container {container}"));
        }
        cfg.users.insert(
            name,
            UserSpec {
                container,
                container_user,
                copy_root_keys: auth.copy_root_keys.unwrap_or(false),
            },
        );
    }

    for (image, spec) in raw.images.unwrap_or_default() {
        let at = format!("images.{image}");
        note_extra(&mut cfg.warnings, &at, &spec.extra);
        let pull = match spec.pull {
            Some(p) if p.policy.is_some() || p.registry.is_some() || !p.extra.is_empty() => {
                note_extra(&mut cfg.warnings, &format!("{at}.pull"), &p.extra);
                let policy = match non_empty(p.policy) {
                    None => Some(PullPolicy::IfNotExists),
                    Some(text) => PullPolicy::parse(&text).or_else(|| {
                        errors.push(format!("image {image}: unknown pull policy {text:?}"));
                        None
                    }),
                };
                policy.map(|policy| PullSpec {
                    policy,
                    registry: non_empty(p.registry),
                })
            }
            // An empty `pull:` section counts as absent.
            _ => None,
        };
        let build = spec.build.and_then(|b| {
            note_extra(&mut cfg.warnings, &format!("{at}.build"), &b.extra);
            non_empty(b.source).map(|s| BuildSpec { source: s.into() })
        });
        if pull.is_none() && build.is_none() && !errors.iter().any(|e| e.starts_with(&format!("image {image}:"))) {
            errors.push(format!("image {image}: neither pull nor build given"));
        }
        cfg.images.insert(image, ImageSpec { pull, build });
    }

    if cfg.users.is_empty() {
        errors.insert(0, "no users defined".into());
    }
    for image in cfg.images.keys() {
        if !cfg.containers.values().any(|c| &c.image == image) {
            cfg.warnings.push(format!("image {image} is not used by any container"));
        }
    }

    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::CoreValidation(errors))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum Acquisition {
    UseLocal,
    Pull { registry: Option<String> },
    Build { source: PathBuf },
    Fail { reason: String },
}

/// Decides how to obtain `image_ref`.
///
/// A locally present image is used as-is unless the policy is `always`.
/// Otherwise a pull is attempted when the policy allows it and a registry
/// is reachable, then a build from source, and failing both the decision is
/// [`Acquisition::Fail`].
pub fn resolve_acquisition(
    image_ref: &str,
    spec: &ImageSpec,
    local_present: bool,
    pull_available: bool,
) -> Acquisition {
    let policy = spec.pull.as_ref().map(|p| p.policy);
    if local_present && policy != Some(PullPolicy::Always) {
        return Acquisition::UseLocal;
    }
    if let Some(pull) = &spec.pull {
        if pull.policy != PullPolicy::Never && pull_available {
            return Acquisition::Pull {
                registry: pull.registry.clone(),
            };
        }
    }
    if let Some(build) = &spec.build {
        return Acquisition::Build {
            source: build.source.clone(),
        };
    }
    let reason = match policy {
        None => format!("{image_ref}: no pull section and no build source"),
        Some(PullPolicy::Never) => format!("{image_ref}: pull policy is never and no build source"),
        Some(_) => format!("{image_ref}: pull unavailable and no build source"),
    };
    Acquisition::Fail { reason }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Route {
    pub container: String,
    pub container_user: String,
}

/// Looks up where an incoming session for `user` is routed.
pub fn route_session(user: &str, config: &CoreConfig) -> Result<Route> {
    let spec = config.users.get(user).ok_or_else(|| Error::Routing(user.to_owned()))?;
    Ok(Route {
        container: spec.container.clone(),
        container_user: spec.container_user.clone(),
    })
}

/// Container creation flags. Isolation is mostly disabled and the image's
/// init system runs as PID 1 in its own PID namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CreateOptions {
    pub pid1_init: bool,
    pub privileged: bool,
    pub host_network: bool,
    pub host_ipc: bool,
    pub host_uts: bool,
}

impl Default for CreateOptions {
    fn default() -> Self {
        CreateOptions {
            pid1_init: true,
            privileged: true,
            host_network: true,
            host_ipc: true,
            host_uts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum SetupStep {
    Pull {
        image: String,
        registry: Option<String>,
    },
    Build {
        image: String,
        source: PathBuf,
    },
    Create {
        container: String,
        image: String,
        mounts: Vec<MountSpec>,
        options: CreateOptions,
    },
    Start {
        container: String,
    },
    ProvisionUser {
        container: String,
        container_user: String,
        copy_root_keys: bool,
        /// Set when root keys are copied: source and destination of the copy.
        keys_source: Option<PathBuf>,
        authorized_keys: Option<PathBuf>,
    },
}

impl fmt::Display for SetupStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetupStep::Pull { image, registry } => match registry {
                Some(r) => write!(f, "pull {image} from {r}"),
                None => write!(f, "pull {image}"),
            },
            SetupStep::Build { image, source } => write!(f, "build {image} from {}", source.display()),
            SetupStep::Create { container, image, .. } => write!(f, "create {container} ({image})"),
            SetupStep::Start { container } => write!(f, "start {container}"),
            SetupStep::ProvisionUser {
                container,
                container_user,
                copy_root_keys,
                ..
            } => {
                write!(f, "provision-user {container_user} in {container}")?;
                if *copy_root_keys {
                    f.write_str(" (copy root keys)")?;
                }
                Ok(())
            }
        }
    }
}

/// Snapshot of what a container runtime already has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeState {
    pub images: BTreeSet<String>,
    /// Containers that exist, running or not.
    pub containers: BTreeSet<String>,
    pub running: BTreeSet<String>,
    /// container → users already provisioned inside it.
    pub provisioned: BTreeMap<String, BTreeSet<String>>,
    pub pull_available: bool,
}

impl Default for RuntimeState {
    fn default() -> Self {
        RuntimeState {
            images: BTreeSet::new(),
            containers: BTreeSet::new(),
            running: BTreeSet::new(),
            provisioned: BTreeMap::new(),
            pull_available: true,
        }
    }
}

impl RuntimeState {
    fn is_provisioned(&self, container: &str, user: &str) -> bool {
        self.provisioned.get(container).is_some_and(|u| u.contains(user))
    }
}

fn home_dir(user: &str) -> PathBuf {
    if user == "root" {
        PathBuf::from("/root")
    } else {
        Path::new("/home").join(user)
    }
}

/// Steps that bring `state` in line with `config`, container by container:
/// acquire the image, create, start, then provision each routed user.
/// Planning against a converged state yields no steps.
pub fn plan_setup(config: &CoreConfig, state: &RuntimeState) -> Result<Vec<SetupStep>> {
    let mut steps = Vec::new();
    let mut images = state.images.clone();
    for (name, container) in &config.containers {
        if !state.containers.contains(name) {
            if !images.contains(&container.image) {
                let spec = config.image_spec(&container.image);
                match resolve_acquisition(&container.image, &spec, false, state.pull_available) {
                    Acquisition::UseLocal => {}
                    Acquisition::Pull { registry } => steps.push(SetupStep::Pull {
                        image: container.image.clone(),
                        registry,
                    }),
                    Acquisition::Build { source } => steps.push(SetupStep::Build {
                        image: container.image.clone(),
                        source,
                    }),
                    Acquisition::Fail { reason } => {
                        return Err(Error::Acquisition {
                            image: container.image.clone(),
                            reason,
                        })
                    }
                }
                images.insert(container.image.clone());
            }
            steps.push(SetupStep::Create {
                container: name.clone(),
                image: container.image.clone(),
                mounts: container.mounts.clone(),
                options: CreateOptions::default(),
            });
        }
        if !state.running.contains(name) {
            steps.push(SetupStep::Start {
                container: name.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for (_, user) in config.users_of(name) {
            let cu = &user.container_user;
            if state.is_provisioned(name, cu) || !seen.insert(cu.clone()) {
                continue;
            }
            let copy = user.copy_root_keys;
            steps.push(SetupStep::ProvisionUser {
                container: name.clone(),
                container_user: cu.clone(),
                copy_root_keys: copy,
                keys_source: copy.then(|| PathBuf::from(ROOT_KEYS_DIR)),
                authorized_keys: copy.then(|| home_dir(cu).join(".ssh/authorized_keys")),
            });
        }
    }
    Ok(steps)
}

/// Operations a container engine must provide. Implementations accept
/// serialized calls only.
pub trait ContainerRuntime {
    fn state(&self) -> Result<RuntimeState>;
    fn pull(&self, image: &str, registry: Option<&str>) -> Result<()>;
    fn build(&self, image: &str, source: &Path) -> Result<()>;
    fn create(&self, container: &str, image: &str, mounts: &[MountSpec], options: &CreateOptions) -> Result<()>;
    fn start(&self, container: &str) -> Result<()>;
    fn provision_user(&self, container: &str, user: &str, copy_root_keys: bool) -> Result<()>;
    fn exec(&self, container: &str, user: &str, command: &[String]) -> Result<i32>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Started,
    Finished,
}

#[derive(Debug, Clone)]
pub struct ProgressEvent<'a> {
    pub index: usize,
    pub total: usize,
    pub step: &'a SetupStep,
    pub progress: Progress,
}

pub fn apply_steps<R, F>(runtime: &R, steps: &[SetupStep], mut on_progress: F) -> Result<()>
where
    R: ContainerRuntime + ?Sized,
    F: FnMut(&ProgressEvent<'_>),
{
    let total = steps.len();
    for (index, step) in steps.iter().enumerate() {
        on_progress(&ProgressEvent {
            index,
            total,
            step,
            progress: Progress::Started,
        });
        match step {
            SetupStep::Pull { image, registry } => runtime.pull(image, registry.as_deref())?,
            SetupStep::Build { image, source } => runtime.build(image, source)?,
            SetupStep::Create {
                container,
                image,
                mounts,
                options,
            } => runtime.create(container, image, mounts, options)?,
            SetupStep::Start { container } => runtime.start(container)?,
            SetupStep::ProvisionUser {
                container,
                container_user,
                copy_root_keys,
                ..
            } => runtime.provision_user(container, container_user, *copy_root_keys)?,
        }
        on_progress(&ProgressEvent {
            index,
            total,
            step,
            progress: Progress::Finished,
        });
    }
    Ok(())
}

/// In-memory runtime. Calls that overlap in time are rejected.
#[derive(Debug, Default)]
pub struct FakeRuntime {
    state: Mutex<RuntimeState>,
    log: Mutex<Vec<String>>,
}

impl FakeRuntime {
    pub fn new(state: RuntimeState) -> Self {
        FakeRuntime {
            state: Mutex::new(state),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Calls received so far, one line each.
    pub fn calls(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }

    fn with<T>(&self, call: String, f: impl FnOnce(&mut RuntimeState) -> Result<T>) -> Result<T> {
        let mut guard = match self.state.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => {
                return Err(Error::Runtime(format!("concurrent call rejected: {call}")))
            }
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        self.log.lock().expect("log lock").push(call);
        f(&mut guard)
    }
}

impl ContainerRuntime for FakeRuntime {
    fn state(&self) -> Result<RuntimeState> {
        self.with("state".into(), |s| Ok(s.clone()))
    }

    fn pull(&self, image: &str, registry: Option<&str>) -> Result<()> {
        self.with(format!("pull {image} {}", registry.unwrap_or("-")), |s| {
            if !s.pull_available {
                return Err(Error::Runtime(format!("registry unreachable for {image}")));
            }
            s.images.insert(image.to_owned());
            Ok(())
        })
    }

    fn build(&self, image: &str, source: &Path) -> Result<()> {
        self.with(format!("build {image} {}", source.display()), |s| {
            s.images.insert(image.to_owned());
            Ok(())
        })
    }

    fn create(&self, container: &str, image: &str, _mounts: &[MountSpec], _options: &CreateOptions) -> Result<()> {
        self.with(format!("create {container} {image}"), |s| {
            if !s.images.contains(image) {
                return Err(Error::Runtime(format!("image {image} not present")));
            }
            if !s.containers.insert(container.to_owned()) {
                return Err(Error::Runtime(format!("container {container} already exists")));
            }
            Ok(())
        })
    }

    fn start(&self, container: &str) -> Result<()> {
        self.with(format!("start {container}"), |s| {
            if !s.containers.contains(container) {
                return Err(Error::Runtime(format!("no container {container}")));
            }
            s.running.insert(container.to_owned());
            Ok(())
        })
    }

    fn provision_user(&self, container: &str, user: &str, copy_root_keys: bool) -> Result<()> {
        self.with(format!("provision {container} {user} {copy_root_keys}"), |s| {
            if !s.running.contains(container) {
                return Err(Error::Runtime(format!("container {container} is not running")));
            }
            s.provisioned
                .entry(container.to_owned())
                .or_default()
                .insert(user.to_owned());
            Ok(())
        })
    }

    fn exec(&self, container: &str, user: &str, command: &[String]) -> Result<i32> {
        self.with(format!("exec {container} {user} {}", command.join(" ")), |s| {
            if !s.running.contains(container) {
                return Err(Error::Runtime(format!("container {container} is not running")));
            }
            Ok(0)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE_YAML: &str = "\
containers:
  core:
    image: skiffos/skiff-core-gentoo:latest
    mounts:
      - /dev:/dev
      - /etc/resolv.conf:/etc/resolv.conf:ro
      - /mnt/persist/data:/home
users:
  core:
    container: core
    containerUser: core
    auth: {copyRootKeys: true}
images:
  skiffos/skiff-core-gentoo:latest:
    pull:
      policy: ifnotexists
      registry: quay.io
    build:
      source: /opt/skiff/coreenv/base
";

    const GENTOO: &str = "skiffos/skiff-core-gentoo:latest";

    #[test]
    fn sample_document_parses_and_routes() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        assert!(cfg.warnings.is_empty(), "{:?}", cfg.warnings);
        assert_eq!(cfg.containers["core"].image, GENTOO);
        assert_eq!(cfg.containers["core"].mounts.len(), 3);
        assert!(cfg.containers["core"].mounts[1].read_only);
        assert!(cfg.users["core"].copy_root_keys);
        let route = route_session("core", &cfg).unwrap();
        assert_eq!(
            route,
            Route {
                container: "core".into(),
                container_user: "core".into()
            }
        );
        let img = &cfg.images[GENTOO];
        assert_eq!(img.pull.as_ref().unwrap().policy, PullPolicy::IfNotExists);
        assert_eq!(img.pull.as_ref().unwrap().registry.as_deref(), Some("quay.io"));
        assert_eq!(img.build.as_ref().unwrap().source, PathBuf::from("/opt/skiff/coreenv/base"));
    }

    #[test]
    fn empty_document_has_no_users() {
        match parse_core_config("") {
            Err(Error::CoreValidation(errs)) => assert_eq!(errs, ["no users defined"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_container_is_named() {
        let yaml = "users:\n  alice:\n    container: ghost\n    containerUser: alice\n";
        match parse_core_config(yaml) {
            Err(Error::CoreValidation(errs)) => {
                assert_eq!(errs, ["user alice references missing container ghost"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_listed() {
        let yaml = "\
containers:
  c:
    image: img
    mounts: [/a, /b:/c:rw]
users:
  u:
    container: c
images:
  img: {}
";
        match parse_core_config(yaml) {
            Err(Error::CoreValidation(errs)) => {
                assert_eq!(errs.len(), 4, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("containerUser is empty")));
                assert!(errs.iter().any(|e| e.contains("neither pull nor build")));
                assert!(errs.iter().any(|e| e.contains("\"/a\"")));
                assert!(errs.iter().any(|e| e.contains("\"rw\"")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_warn() {
        let yaml = format!("{SAMPLE_YAML}extra: 1\n");
        let yaml = yaml.replace("containerUser: core\n", "containerUser: core\n    shell: /bin/zsh\n");
        let cfg = parse_core_config(&yaml).unwrap();
        assert_eq!(cfg.warnings.len(), 2, "{:?}", cfg.warnings);
        assert!(cfg.warnings.iter().any(|w| w.contains("users.core") && w.contains("shell")));
    }

    #[test]
    fn syntax_errors_surface() {
        assert!(matches!(parse_core_config("users: [unclosed"), Err(Error::Yaml(_))));
    }

    #[test]
    fn empty_pull_section_builds() {
        let spec_yaml = SAMPLE_YAML.replace(
            "    pull:\n      policy: ifnotexists\n      registry: quay.io\n",
            "    pull: {}\n",
        );
        let cfg = parse_core_config(&spec_yaml).unwrap();
        let spec = &cfg.images[GENTOO];
        assert!(spec.pull.is_none());
        assert_eq!(
            resolve_acquisition(GENTOO, spec, false, true),
            Acquisition::Build {
                source: "/opt/skiff/coreenv/base".into()
            }
        );
    }

    #[test]
    fn acquisition_examples() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        let spec = &cfg.images[GENTOO];
        assert_eq!(resolve_acquisition(GENTOO, spec, true, true), Acquisition::UseLocal);
        assert_eq!(
            resolve_acquisition(GENTOO, spec, false, false),
            Acquisition::Build {
                source: "/opt/skiff/coreenv/base".into()
            }
        );
        assert_eq!(
            resolve_acquisition(GENTOO, spec, false, true),
            Acquisition::Pull {
                registry: Some("quay.io".into())
            }
        );
    }

    #[test]
    fn policy_variants() {
        let spec = |policy| ImageSpec {
            pull: Some(PullSpec { policy, registry: None }),
            build: None,
        };
        assert_eq!(
            resolve_acquisition("i", &spec(PullPolicy::Always), true, true),
            Acquisition::Pull { registry: None }
        );
        assert!(matches!(
            resolve_acquisition("i", &spec(PullPolicy::Always), true, false),
            Acquisition::Fail { .. }
        ));
        assert_eq!(resolve_acquisition("i", &spec(PullPolicy::Never), true, true), Acquisition::UseLocal);
        match resolve_acquisition("i", &spec(PullPolicy::Never), false, true) {
            Acquisition::Fail { reason } => assert!(reason.contains("never")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_user_refused() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        assert!(matches!(route_session("alice", &cfg), Err(Error::Routing(_))));
    }

    #[test]
    fn two_users_share_a_container() {
        let yaml = SAMPLE_YAML.replace(
            "images:",
            "  dev:\n    container: core\n    containerUser: developer\nimages:",
        );
        let cfg = parse_core_config(&yaml).unwrap();
        let a = route_session("core", &cfg).unwrap();
        let b = route_session("dev", &cfg).unwrap();
        assert_eq!(a.container, b.container);
        assert_ne!(a.container_user, b.container_user);
    }

    #[test]
    fn fresh_plan_for_sample_document() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        let steps = plan_setup(&cfg, &RuntimeState::default()).unwrap();
        let rendered: Vec<String> = steps.iter().map(ToString::to_string).collect();
        assert_eq!(
            rendered,
            [
                "pull skiffos/skiff-core-gentoo:latest from quay.io",
                "create core (skiffos/skiff-core-gentoo:latest)",
                "start core",
                "provision-user core in core (copy root keys)"
            ]
        );
        match &steps[3] {
            SetupStep::ProvisionUser {
                keys_source,
                authorized_keys,
                ..
            } => {
                assert_eq!(keys_source.as_deref(), Some(Path::new(ROOT_KEYS_DIR)));
                assert_eq!(
                    authorized_keys.as_deref(),
                    Some(Path::new("/home/core/.ssh/authorized_keys"))
                );
            }
            other => panic!("{other:?}"),
        }
        match &steps[1] {
            SetupStep::Create { options, .. } => assert!(options.pid1_init && options.privileged),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn image_present_skips_acquisition() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        let state = RuntimeState {
            images: [GENTOO.to_string()].into(),
            ..Default::default()
        };
        let steps = plan_setup(&cfg, &state).unwrap();
        assert!(!steps.iter().any(|s| matches!(s, SetupStep::Pull { .. } | SetupStep::Build { .. })));
        assert!(matches!(steps[0], SetupStep::Create { .. }));
        assert!(matches!(steps[1], SetupStep::Start { .. }));
    }

    #[test]
    fn converged_state_plans_nothing() {
        let cfg = parse_core_config(SAMPLE_YAML).unwrap();
        let runtime = FakeRuntime::new(RuntimeState::default());
        let steps = plan_setup(&cfg, &runtime.state().unwrap()).unwrap();
        let mut events = 0;
        apply_steps(&runtime, &steps, |_| events += 1).unwrap();
        assert_eq!(events, 2 * steps.len());
        assert!(plan_setup(&cfg, &runtime.state().unwrap()).unwrap().is_empty());
    }

    #[test]
    fn failed_acquisition_is_a_plan_error() {
        let yaml = SAMPLE_YAML.replace("    build:\n      source: /opt/skiff/coreenv/base\n", "");
        let cfg = parse_core_config(&yaml).unwrap();
        let state = RuntimeState {
            pull_available: false,
            ..Default::default()
        };
        assert!(matches!(plan_setup(&cfg, &state), Err(Error::Acquisition { .. })));
    }

    #[test]
    fn fake_runtime_rejects_overlapping_calls() {
        let runtime = FakeRuntime::new(RuntimeState::default());
        let guard = runtime.state.lock().unwrap();
        assert!(matches!(runtime.start("x"), Err(Error::Runtime(msg)) if msg.contains("concurrent")));
        drop(guard);
        assert!(runtime.state().is_ok());
    }
}
