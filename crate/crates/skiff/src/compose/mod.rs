//! Composition of a resolved layer list into a complete build plan, and a
//! simulated build that writes the plan's artifacts to an output directory.

mod overlay;

pub use overlay::{
    apply_overlay, compose_overlay, layer_overlay_sources, plan_sources, ApplyReport, EntryKind,
    OverlayAction, OverlayPlan, OverlaySource,
};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kconfig::{self, collect_fragment_paths, merge_fragments, render_config, ConfigClass, MergedConfig};
use crate::layers::{order_diagnostics, resolve_order, Layer, LayerCatalog, LayerId, Marker, Selection};

pub const DEFAULT_WORKSPACE: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    BuildrootPatches,
    KernelPatches,
    UbootPatches,
}

impl PatchClass {
    pub const ALL: [PatchClass; 3] = [
        PatchClass::BuildrootPatches,
        PatchClass::KernelPatches,
        PatchClass::UbootPatches,
    ];

    pub fn marker(self) -> Marker {
        match self {
            PatchClass::BuildrootPatches => Marker::BuildrootPatches,
            PatchClass::KernelPatches => Marker::KernelPatches,
            PatchClass::UbootPatches => Marker::UbootPatches,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HookPhase {
    Pre,
    Post,
}

impl HookPhase {
    pub const ALL: [HookPhase; 2] = [HookPhase::Pre, HookPhase::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            HookPhase::Pre => "pre",
            HookPhase::Post => "post",
        }
    }

    /// `pre`, `pre.sh`, `pre-build.sh` and `pre_x` match `pre`; `prepare.sh`
    /// does not.
    pub fn matches(self, file_name: &str) -> bool {
        match file_name.strip_prefix(self.as_str()) {
            Some("") => true,
            Some(rest) => rest.starts_with(['.', '-', '_']),
            None => false,
        }
    }
}

impl fmt::Display for HookPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Rejects workspace names that are not a single path-safe token.
pub fn validate_workspace(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && !name.chars().any(|c| c.is_whitespace() || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidWorkspace(name.to_owned()))
    }
}

/// `<output_root>/workspaces/<workspace>`
pub fn workspace_dir(output_root: &Path, workspace: &str) -> PathBuf {
    output_root.join("workspaces").join(workspace)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

/// Per-layer `cflags` files concatenated in layer order, one flag per line.
pub fn collect_cflags(layers: &[Layer]) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for layer in layers.iter().filter(|l| l.has(Marker::Cflags)) {
        flags.extend(read_lines(&layer.path(Marker::Cflags))?);
    }
    Ok(flags)
}

fn patches_with_warnings(layers: &[Layer], class: PatchClass) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let mut patches = Vec::new();
    let mut warnings = Vec::new();
    for layer in layers {
        for path in kconfig::sorted_files(&layer.path(class.marker()))? {
            if path.extension().is_some_and(|e| e == "patch") {
                patches.push(path);
            } else {
                let msg = format!("{}: ignoring non-patch file {}", layer.id, path.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok((patches, warnings))
}

/// `.patch` files of one patch directory class, layer order then file name.
pub fn collect_patches(layers: &[Layer], class: PatchClass) -> Result<Vec<PathBuf>> {
    patches_with_warnings(layers, class).map(|(p, _)| p)
}

pub fn collect_hooks(layers: &[Layer], phase: HookPhase) -> Result<Vec<PathBuf>> {
    let mut hooks = Vec::new();
    for layer in layers {
        for path in kconfig::sorted_files(&layer.path(Marker::Hooks))? {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if phase.matches(&name) {
                hooks.push(path);
            }
        }
    }
    Ok(hooks)
}

pub fn collect_external_trees(layers: &[Layer]) -> Vec<PathBuf> {
    layers
        .iter()
        .filter(|l| l.has(Marker::BuildrootExt))
        .map(|l| l.path(Marker::BuildrootExt))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedLayer {
    pub id: LayerId,
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassConfig {
    pub fragments: Vec<PathBuf>,
    pub merged: MergedConfig,
}

/// Fully resolved composition of a workspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildPlan {
    pub workspace: String,
    pub selection: Selection,
    pub layers: Vec<PlannedLayer>,
    pub configs: BTreeMap<ConfigClass, ClassConfig>,
    pub cflags: Vec<String>,
    pub patches: BTreeMap<PatchClass, Vec<PathBuf>>,
    pub external_trees: Vec<PathBuf>,
    pub hooks: BTreeMap<HookPhase, Vec<PathBuf>>,
    pub overlay: OverlayPlan,
    pub diagnostics: Vec<String>,
}

impl BuildPlan {
    pub fn config(&self, class: ConfigClass) -> &MergedConfig {
        &self.configs[&class].merged
    }

    /// Canonical serialized form: pretty JSON with sorted object keys and a
    /// trailing newline.
    pub fn to_canonical_json(&self) -> String {
        // serde_json::Value objects are BTreeMap-backed, which sorts keys.
        let value = serde_json::to_value(self).expect("plan serializes to JSON");
        let mut text = serde_json::to_string_pretty(&value).expect("JSON value renders");
        text.push('\n');
        text
    }
}

pub fn build_plan(
    selection: &Selection,
    catalog: &LayerCatalog,
    workspace: &str,
    overrides_root: Option<&Path>,
) -> Result<BuildPlan> {
    if selection.is_empty() {
        return Err(Error::NoLayersSelected);
    }
    validate_workspace(workspace)?;
    let overrides_root = overrides_root.filter(|p| p.is_dir());

    let layers = resolve_order(selection, catalog)?;
    let mut diagnostics = order_diagnostics(selection, &layers);

    let layer_fragment_count = |class| -> Result<usize> {
        Ok(collect_fragment_paths(&layers, class, None, workspace)?.len())
    };

    let mut configs = BTreeMap::new();
    for class in ConfigClass::ALL {
        let paths = collect_fragment_paths(&layers, class, overrides_root, workspace)?;
        let from_layers = layer_fragment_count(class)?;
        if paths.len() > from_layers {
            diagnostics.push(format!(
                "{class}: {} override fragment(s) appended after layer fragments",
                paths.len() - from_layers
            ));
        }
        let mut fragments = Vec::with_capacity(paths.len());
        for path in &paths {
            let fragment = kconfig::read_fragment(path)?;
            for key in fragment.duplicate_keys() {
                let msg = format!("{}: key {key} assigned more than once; last line wins", path.display());
                log::warn!("{msg}");
                diagnostics.push(msg);
            }
            fragments.push(fragment);
        }
        configs.insert(
            class,
            ClassConfig {
                merged: merge_fragments(&fragments),
                fragments: paths,
            },
        );
    }

    let mut patches = BTreeMap::new();
    for class in PatchClass::ALL {
        let (list, warnings) = patches_with_warnings(&layers, class)?;
        diagnostics.extend(warnings);
        patches.insert(class, list);
    }

    let mut hooks = BTreeMap::new();
    for phase in HookPhase::ALL {
        hooks.insert(phase, collect_hooks(&layers, phase)?);
    }

    let mut extra = Vec::new();
    if let Some(overrides) = overrides_root {
        extra.push(OverlaySource::new("overrides", overrides.join("root_overlay")));
        extra.push(OverlaySource::new(
            format!("overrides/workspaces/{workspace}"),
            overrides.join("workspaces").join(workspace).join("root_overlay"),
        ));
    }
    let overlay = compose_overlay(&layers, &extra)?;

    Ok(BuildPlan {
        workspace: workspace.to_owned(),
        selection: selection.clone(),
        cflags: collect_cflags(&layers)?,
        external_trees: collect_external_trees(&layers),
        layers: layers
            .iter()
            .map(|l| PlannedLayer {
                id: l.id.clone(),
                root: l.root.clone(),
            })
            .collect(),
        configs,
        patches,
        hooks,
        overlay,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimulateOptions {
    /// Execute hook scripts with the output directory as sole argument.
    pub run_hooks: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BuildArtifacts {
    pub written: Vec<PathBuf>,
    pub overlay: ApplyReport,
    pub hooks_run: Vec<PathBuf>,
}

pub const OVERLAY_DIR: &str = "rootfs-overlay";

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn path_lines<'a>(items: impl IntoIterator<Item = (String, &'a PathBuf)>) -> String {
    items
        .into_iter()
        .map(|(tag, p)| format!("{tag} {}\n", p.display()))
        .collect()
}

fn run_hook(hook: &Path, output: &Path, plan: &BuildPlan) -> Result<()> {
    let status = Command::new(hook)
        .arg(output)
        .env("SKIFF_WORKSPACE", &plan.workspace)
        .env("SKIFF_CONFIG", plan.selection.to_string())
        .status()
        .map_err(|e| Error::io(hook, e))?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Exec(format!("hook {} exited with {status}", hook.display())))
    }
}

/// Writes rendered configs, flag and manifest files, the serialized plan and
/// the staged overlay into `output`. Running it again yields the same tree.
pub fn simulate_build(plan: &BuildPlan, output: &Path, opts: SimulateOptions) -> Result<BuildArtifacts> {
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut artifacts = BuildArtifacts::default();

    if opts.run_hooks {
        for hook in &plan.hooks[&HookPhase::Pre] {
            run_hook(hook, output, plan)?;
            artifacts.hooks_run.push(hook.clone());
        }
    }

    let mut files: Vec<(String, String)> = ConfigClass::ALL
        .iter()
        .map(|c| (format!("{c}.config"), render_config(plan.config(*c))))
        .collect();
    files.push(("cflags.txt".into(), plan.cflags.iter().map(|f| format!("{f}\n")).collect()));
    files.push((
        "patches.txt".into(),
        path_lines(
            plan.patches
                .iter()
                .flat_map(|(c, list)| list.iter().map(move |p| (serde_name(c), p))),
        ),
    ));
    files.push((
        "hooks.txt".into(),
        path_lines(
            plan.hooks
                .iter()
                .flat_map(|(phase, list)| list.iter().map(move |p| (phase.to_string(), p))),
        ),
    ));
    files.push((
        "external-trees.txt".into(),
        plan.external_trees.iter().map(|p| format!("{}\n", p.display())).collect(),
    ));
    files.push(("plan.json".into(), plan.to_canonical_json()));

    for (name, contents) in files {
        let path = output.join(name);
        write_atomic(&path, contents.as_bytes())?;
        artifacts.written.push(path);
    }

    let staged = output.join(OVERLAY_DIR);
    match fs::remove_dir_all(&staged) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&staged, e)),
    }
    fs::create_dir(&staged).map_err(|e| Error::io(&staged, e))?;
    artifacts.overlay = apply_overlay(&plan.overlay, &staged)?;

    if opts.run_hooks {
        for hook in &plan.hooks[&HookPhase::Post] {
            run_hook(hook, output, plan)?;
            artifacts.hooks_run.push(hook.clone());
        }
    }
    Ok(artifacts)
}

fn serde_name<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}
