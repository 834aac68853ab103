//! Configuration layers: identity, on-disk discovery, metadata and ordering.
//!
//! A layer is a directory holding any of the known subdirectories listed in
//! [`Marker`]. Layers are addressed by a slash-separated [`LayerId`] that is
//! the directory's path relative to its search root (`pi/4`, `core/gentoo`).
//! A user selects layers with an ordered comma-separated list; dependencies
//! declared in `metadata/dependencies` are pulled in ahead of the layers that
//! need them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Slash-separated layer name, e.g. `pi/4`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    segments: Vec<String>,
}

impl LayerId {
    pub fn new<I, S>(segments: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        let id = LayerId { segments };
        id.validate()?;
        Ok(id)
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// Path of the layer relative to its search root.
    pub fn rel_path(&self) -> PathBuf {
        self.segments.iter().collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason| Error::InvalidLayerId {
            item: self.to_string(),
            reason,
        };
        if self.segments.is_empty() {
            return Err(bad("empty id"));
        }
        for seg in &self.segments {
            if seg.is_empty() {
                return Err(bad("empty segment"));
            }
            if seg.contains('/') {
                return Err(bad("segment contains a slash"));
            }
            if seg.chars().any(char::is_whitespace) {
                return Err(bad("whitespace inside id"));
            }
            if seg == "." || seg == ".." {
                return Err(bad("relative path segment"));
            }
        }
        Ok(())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = LayerId {
            segments: s.split('/').map(str::to_owned).collect(),
        };
        if s.is_empty() {
            return Err(Error::InvalidLayerId {
                item: s.to_owned(),
                reason: "empty id",
            });
        }
        id.validate()?;
        Ok(id)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("/"))
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Known entries of a layer directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Cflags,
    Buildroot,
    BuildrootExt,
    BuildrootPatches,
    Extensions,
    Hooks,
    Kernel,
    KernelPatches,
    RootOverlay,
    Metadata,
    Resources,
    Scripts,
    Uboot,
    UbootPatches,
}

impl Marker {
    pub const ALL: [Marker; 14] = [
        Marker::Cflags,
        Marker::Buildroot,
        Marker::BuildrootExt,
        Marker::BuildrootPatches,
        Marker::Extensions,
        Marker::Hooks,
        Marker::Kernel,
        Marker::KernelPatches,
        Marker::RootOverlay,
        Marker::Metadata,
        Marker::Resources,
        Marker::Scripts,
        Marker::Uboot,
        Marker::UbootPatches,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Marker::Cflags => "cflags",
            Marker::Buildroot => "buildroot",
            Marker::BuildrootExt => "buildroot_ext",
            Marker::BuildrootPatches => "buildroot_patches",
            Marker::Extensions => "extensions",
            Marker::Hooks => "hooks",
            Marker::Kernel => "kernel",
            Marker::KernelPatches => "kernel_patches",
            Marker::RootOverlay => "root_overlay",
            Marker::Metadata => "metadata",
            Marker::Resources => "resources",
            Marker::Scripts => "scripts",
            Marker::Uboot => "uboot",
            Marker::UbootPatches => "uboot_patches",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Marker> {
        Marker::ALL.into_iter().find(|m| m.dir_name() == name)
    }

    /// `cflags` is a plain file; every other marker is a directory.
    pub fn is_file(self) -> bool {
        self == Marker::Cflags
    }

    fn exists_in(self, root: &Path) -> bool {
        match fs::metadata(root.join(self.dir_name())) {
            Ok(md) if self.is_file() => md.is_file(),
            Ok(md) => md.is_dir(),
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCommand {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerMetadata {
    pub commands: Vec<LayerCommand>,
    pub dependencies: Vec<LayerId>,
    pub description: String,
    pub unlisted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub id: LayerId,
    pub root: PathBuf,
    pub present: Vec<Marker>,
    pub metadata: LayerMetadata,
}

impl Layer {
    /// Loads a single layer rooted at `root`.
    pub fn load(id: LayerId, root: impl Into<PathBuf>) -> Result<Layer> {
        let root = root.into();
        let present = Marker::ALL
            .into_iter()
            .filter(|m| m.exists_in(&root))
            .collect();
        let metadata = load_metadata(&root)?;
        Ok(Layer {
            id,
            root,
            present,
            metadata,
        })
    }

    pub fn has(&self, marker: Marker) -> bool {
        self.present.contains(&marker)
    }

    pub fn path(&self, marker: Marker) -> PathBuf {
        self.root.join(marker.dir_name())
    }
}

/// Ordered, de-duplicated list of selected layers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection(Vec<LayerId>);

impl Selection {
    pub fn new(ids: impl IntoIterator<Item = LayerId>) -> Self {
        let mut seen = HashSet::new();
        Selection(ids.into_iter().filter(|id| seen.insert(id.clone())).collect())
    }

    pub fn ids(&self) -> &[LayerId] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for Selection {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(&self.0)
    }
}

/// Parses a `SKIFF_CONFIG`-style comma-separated layer list.
pub fn parse_selection(text: &str) -> Result<Selection> {
    let ids = parse_id_list(text)?;
    Ok(Selection::new(ids))
}

fn parse_id_list(text: &str) -> Result<Vec<LayerId>> {
    text.split(',')
        .map(str::trim)
        .filter(|item| !item.is_empty())
        .map(LayerId::from_str)
        .collect()
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Reads `metadata/{commands,dependencies,description,unlisted}` under a layer
/// directory. Every file is optional.
pub fn load_metadata(layer_dir: &Path) -> Result<LayerMetadata> {
    let dir = layer_dir.join("metadata");
    let mut meta = LayerMetadata::default();

    let commands_path = dir.join("commands");
    if let Some(text) = read_optional(&commands_path)? {
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, description) = match line.split_once(char::is_whitespace) {
                Some((name, rest)) => (name, rest.trim()),
                None => (line, ""),
            };
            if !seen.insert(name.to_owned()) {
                return Err(Error::parse(
                    &commands_path,
                    idx + 1,
                    format!("duplicate command {name:?}"),
                ));
            }
            meta.commands.push(LayerCommand {
                name: name.to_owned(),
                description: description.to_owned(),
            });
        }
    }

    let deps_path = dir.join("dependencies");
    if let Some(text) = read_optional(&deps_path)? {
        // Dependencies may span several lines; newlines act like commas.
        let joined = text.replace(['\n', '\r'], ",");
        meta.dependencies = parse_id_list(&joined).map_err(|e| Error::parse(&deps_path, 0, e.to_string()))?;
    }

    if let Some(text) = read_optional(&dir.join("description"))? {
        meta.description = text.lines().next().unwrap_or("").trim().to_owned();
    }

    meta.unlisted = dir.join("unlisted").exists();
    Ok(meta)
}

/// All layers found under an ordered list of search roots.
#[derive(Debug, Clone, Default)]
pub struct LayerCatalog {
    pub roots: Vec<PathBuf>,
    pub layers: BTreeMap<LayerId, Layer>,
}

impl LayerCatalog {
    pub fn get(&self, id: &LayerId) -> Option<&Layer> {
        self.layers.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &LayerId> {
        self.layers.keys()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Walks each search root and collects layers. A later root shadows layers
/// with the same id from earlier roots.
pub fn discover_layers<P: AsRef<Path>>(search_roots: &[P]) -> Result<LayerCatalog> {
    if search_roots.is_empty() {
        return Err(Error::NoSearchRoots);
    }
    let mut catalog = LayerCatalog::default();
    for root in search_roots {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::io(
                root,
                io::Error::new(io::ErrorKind::NotFound, "search root is not a directory"),
            ));
        }
        catalog.roots.push(root.to_path_buf());
        let mut found = Vec::new();
        scan_dir(root, &mut Vec::new(), &mut found)?;
        for (segments, dir) in found {
            let id = LayerId { segments };
            let layer = Layer::load(id.clone(), dir)?;
            catalog.layers.insert(id, layer);
        }
    }
    Ok(catalog)
}

fn is_layer_dir(dir: &Path) -> bool {
    Marker::ALL.into_iter().any(|m| m.exists_in(dir))
}

fn scan_dir(dir: &Path, rel: &mut Vec<String>, found: &mut Vec<(Vec<String>, PathBuf)>) -> Result<()> {
    let is_layer = !rel.is_empty() && is_layer_dir(dir);
    if is_layer {
        let id = LayerId {
            segments: rel.clone(),
        };
        match id.validate() {
            Ok(()) => found.push((rel.clone(), dir.to_path_buf())),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }

    let mut children = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file_type = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if !file_type.is_dir() {
            continue;
        }
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        if name.starts_with('.') {
            continue;
        }
        // A layer's own known subdirectories are content, not nested layers.
        if is_layer && Marker::from_dir_name(&name).is_some() {
            continue;
        }
        children.push(name);
    }
    children.sort();
    for name in children {
        rel.push(name.clone());
        scan_dir(&dir.join(&name), rel, found)?;
        rel.pop();
    }
    Ok(())
}

/// Orders the selection plus its transitive dependencies.
///
/// Every dependency lands before its dependents. Layers that are not
/// required by one another keep the user's relative order, and a dependency
/// is inserted right before the first selected layer that needs it.
pub fn resolve_order(selection: &Selection, catalog: &LayerCatalog) -> Result<Vec<Layer>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }

    fn visit(
        id: &LayerId,
        required_by: Option<&LayerId>,
        catalog: &LayerCatalog,
        marks: &mut HashMap<LayerId, Mark>,
        stack: &mut Vec<LayerId>,
        out: &mut Vec<Layer>,
    ) -> Result<()> {
        match marks.get(id) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Active) => {
                let start = stack.iter().position(|s| s == id).unwrap_or(0);
                let mut cycle = stack[start..].to_vec();
                cycle.push(id.clone());
                return Err(Error::Cycle { cycle });
            }
            None => {}
        }
        let layer = catalog.get(id).ok_or_else(|| Error::UnknownLayer {
            id: id.clone(),
            required_by: required_by.cloned(),
        })?;
        marks.insert(id.clone(), Mark::Active);
        stack.push(id.clone());
        for dep in &layer.metadata.dependencies {
            visit(dep, Some(id), catalog, marks, stack, out)?;
        }
        stack.pop();
        marks.insert(id.clone(), Mark::Done);
        out.push(layer.clone());
        Ok(())
    }

    let mut marks = HashMap::new();
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for id in selection.ids() {
        visit(id, None, catalog, &mut marks, &mut stack, &mut out)?;
    }
    Ok(out)
}

/// Notes for selected layers that were pulled ahead of their position in
/// the user's order because an earlier selected layer depends on them.
pub fn order_diagnostics(selection: &Selection, resolved: &[Layer]) -> Vec<String> {
    let position: HashMap<&LayerId, usize> = resolved.iter().enumerate().map(|(i, l)| (&l.id, i)).collect();
    let mut notes = Vec::new();
    let ids = selection.ids();
    for (i, earlier) in ids.iter().enumerate() {
        for later in &ids[i + 1..] {
            if let (Some(a), Some(b)) = (position.get(earlier), position.get(later)) {
                if b < a {
                    notes.push(format!(
                        "layer {later} moved ahead of {earlier}: required as a dependency"
                    ));
                }
            }
        }
    }
    notes
}
