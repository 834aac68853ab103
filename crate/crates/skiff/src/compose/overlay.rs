//! Root filesystem overlay planning and application.
//!
//! Each layer's `root_overlay` tree is laid down in resolved layer order, so
//! a later layer providing the same relative path replaces the earlier one.
//! Directories merge. A file or symlink meeting a directory at the same path
//! is a hard error.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::layers::{Layer, Marker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Directory,
    Symlink,
}

impl EntryKind {
    pub fn name(self) -> &'static str {
        match self {
            EntryKind::File => "file",
            EntryKind::Directory => "directory",
            EntryKind::Symlink => "symlink",
        }
    }

    fn of(md: &fs::Metadata) -> Option<EntryKind> {
        let ft = md.file_type();
        if ft.is_symlink() {
            Some(EntryKind::Symlink)
        } else if ft.is_dir() {
            Some(EntryKind::Directory)
        } else if ft.is_file() {
            Some(EntryKind::File)
        } else {
            None
        }
    }
}

/// A named overlay tree: a layer's `root_overlay` or an override tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlaySource {
    pub label: String,
    pub root: PathBuf,
}

impl OverlaySource {
    pub fn new(label: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        OverlaySource {
            label: label.into(),
            root: root.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverlayAction {
    pub rel_path: PathBuf,
    pub layer: String,
    pub source: PathBuf,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlayPlan {
    /// Every provided entry, in application order.
    pub actions: Vec<OverlayAction>,
    /// Winning action per relative path.
    pub entries: BTreeMap<PathBuf, OverlayAction>,
}

impl OverlayPlan {
    pub fn winner(&self, rel: impl AsRef<Path>) -> Option<&str> {
        self.entries.get(rel.as_ref()).map(|a| a.layer.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Serialize for OverlayPlan {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let winners: BTreeMap<String, &str> = self
            .entries
            .iter()
            .map(|(p, a)| (p.display().to_string(), a.layer.as_str()))
            .collect();
        let mut s = serializer.serialize_struct("OverlayPlan", 2)?;
        s.serialize_field("actions", &self.actions)?;
        s.serialize_field("winners", &winners)?;
        s.end()
    }
}

fn check_relative(rel: &Path) -> bool {
    !rel.as_os_str().is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Overlay sources for a resolved layer list: each layer that has a
/// `root_overlay`, in order.
pub fn layer_overlay_sources(layers: &[Layer]) -> Vec<OverlaySource> {
    layers
        .iter()
        .filter(|l| l.has(Marker::RootOverlay))
        .map(|l| OverlaySource::new(l.id.to_string(), l.path(Marker::RootOverlay)))
        .collect()
}

pub fn compose_overlay(layers: &[Layer], extra_roots: &[OverlaySource]) -> Result<OverlayPlan> {
    let mut sources = layer_overlay_sources(layers);
    sources.extend(extra_roots.iter().filter(|s| s.root.is_dir()).cloned());
    plan_sources(&sources)
}

/// Builds a plan from an explicit ordered list of overlay trees.
pub fn plan_sources(sources: &[OverlaySource]) -> Result<OverlayPlan> {
    let mut plan = OverlayPlan::default();
    for src in sources {
        let walker = WalkDir::new(&src.root)
            .min_depth(1)
            .follow_links(false)
            .sort_by_file_name();
        for entry in walker {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&src.root).to_path_buf();
                Error::io(path, e.into_io_error().unwrap_or_else(|| io::Error::other("walk failed")))
            })?;
            let md = entry.metadata().map_err(|e| {
                Error::io(entry.path(), e.into_io_error().unwrap_or_else(|| io::Error::other("stat failed")))
            })?;
            let Some(kind) = EntryKind::of(&md) else {
                log::warn!("skipping special file {}", entry.path().display());
                continue;
            };
            let rel = entry
                .path()
                .strip_prefix(&src.root)
                .expect("walkdir yields paths under its root")
                .to_path_buf();
            debug_assert!(check_relative(&rel));
            let action = OverlayAction {
                rel_path: rel.clone(),
                layer: src.label.clone(),
                source: entry.path().to_path_buf(),
                kind,
            };
            if let Some(prev) = plan.entries.get(&rel) {
                let prev_is_dir = prev.kind == EntryKind::Directory;
                let new_is_dir = kind == EntryKind::Directory;
                if prev_is_dir != new_is_dir {
                    return Err(Error::OverlayConflict {
                        path: rel,
                        first: prev.layer.clone(),
                        first_kind: prev.kind.name(),
                        second: src.label.clone(),
                        second_kind: kind.name(),
                    });
                }
            }
            plan.actions.push(action.clone());
            plan.entries.insert(rel, action);
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub files: usize,
    pub directories: usize,
    pub symlinks: usize,
    pub bytes: u64,
    pub winners: BTreeMap<PathBuf, String>,
}

impl ApplyReport {
    pub fn entries(&self) -> usize {
        self.files + self.directories + self.symlinks
    }
}

/// Writes the winning entry of every planned path under `target`.
///
/// Regular files are copied with their permission bits, symlinks are
/// recreated with the same link text, and directory permissions are applied
/// last so read-only directories do not block their children.
pub fn apply_overlay(plan: &OverlayPlan, target: &Path) -> Result<ApplyReport> {
    let mut report = ApplyReport::default();
    let mut dir_modes = Vec::new();

    for (rel, action) in &plan.entries {
        let dest = target.join(rel);
        let fail = |report: &ApplyReport, source: io::Error| Error::OverlayApply {
            path: dest.clone(),
            completed: report.entries(),
            source,
        };
        let existing = fs::symlink_metadata(&dest).ok();
        let existing_is_dir = existing.as_ref().is_some_and(|m| m.file_type().is_dir());

        match action.kind {
            EntryKind::Directory => {
                if existing.is_some() && !existing_is_dir {
                    return Err(target_conflict(rel, action));
                }
                if existing.is_none() {
                    fs::create_dir(&dest).map_err(|e| fail(&report, e))?;
                }
                let md = fs::metadata(&action.source).map_err(|e| fail(&report, e))?;
                dir_modes.push((dest.clone(), md.permissions()));
                report.directories += 1;
            }
            EntryKind::File => {
                if existing_is_dir {
                    return Err(target_conflict(rel, action));
                }
                if existing.is_some() {
                    fs::remove_file(&dest).map_err(|e| fail(&report, e))?;
                }
                let n = fs::copy(&action.source, &dest).map_err(|e| fail(&report, e))?;
                report.bytes += n;
                report.files += 1;
            }
            EntryKind::Symlink => {
                if existing_is_dir {
                    return Err(target_conflict(rel, action));
                }
                if existing.is_some() {
                    fs::remove_file(&dest).map_err(|e| fail(&report, e))?;
                }
                let link = fs::read_link(&action.source).map_err(|e| fail(&report, e))?;
                symlink(&link, &dest).map_err(|e| fail(&report, e))?;
                report.symlinks += 1;
            }
        }
        report.winners.insert(rel.clone(), action.layer.clone());
    }

    for (dir, perms) in dir_modes.into_iter().rev() {
        fs::set_permissions(&dir, perms).map_err(|e| Error::OverlayApply {
            path: dir.clone(),
            completed: report.entries(),
            source: e,
        })?;
    }
    Ok(report)
}

fn target_conflict(rel: &Path, action: &OverlayAction) -> Error {
    Error::OverlayConflict {
        path: rel.to_path_buf(),
        first: "target".into(),
        first_kind: "existing entry",
        second: action.layer.clone(),
        second_kind: action.kind.name(),
    }
}

#[cfg(unix)]
fn symlink(link: &Path, dest: &Path) -> io::Result<()> {
    std::os::unix::fs::symlink(link, dest)
}

#[cfg(not(unix))]
fn symlink(_link: &Path, _dest: &Path) -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "symlinks require a unix host"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(path: &Path, text: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, text).unwrap();
    }

    fn sources(root: &Path, names: &[&str]) -> Vec<OverlaySource> {
        names.iter().map(|n| OverlaySource::new(*n, root.join(n))).collect()
    }

    #[test]
    fn later_layer_wins() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        write(&root.join("common/etc/a.conf"), "common");
        write(&root.join("board/etc/a.conf"), "board");
        let plan = plan_sources(&sources(root, &["common", "board"])).unwrap();
        assert_eq!(plan.winner("etc/a.conf"), Some("board"));
        assert_eq!(plan.winner("etc"), Some("board"));
        assert_eq!(plan.actions.len(), 4);

        let target = root.join("out");
        fs::create_dir(&target).unwrap();
        let report = apply_overlay(&plan, &target).unwrap();
        assert_eq!(fs::read_to_string(target.join("etc/a.conf")).unwrap(), "board");
        assert_eq!(report.files, 1);
        assert_eq!(report.bytes, 5);
    }

    #[test]
    fn single_layer_is_its_own_listing() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        write(&root.join("only/etc/x"), "1");
        write(&root.join("only/usr/lib/firmware/config.txt"), "2");
        let plan = plan_sources(&sources(root, &["only"])).unwrap();
        let paths: Vec<String> = plan.entries.keys().map(|p| p.display().to_string()).collect();
        assert_eq!(
            paths,
            ["etc", "etc/x", "usr", "usr/lib", "usr/lib/firmware", "usr/lib/firmware/config.txt"]
        );
    }

    #[test]
    fn file_over_directory_conflicts() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        write(&root.join("a/etc/thing/inner"), "");
        write(&root.join("b/etc/thing"), "");
        let err = plan_sources(&sources(root, &["a", "b"])).unwrap_err();
        match err {
            Error::OverlayConflict { path, first, second, .. } => {
                assert_eq!(path, PathBuf::from("etc/thing"));
                assert_eq!(first, "a");
                assert_eq!(second, "b");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_plan_leaves_target_untouched() {
        let tmp = TempDir::new().unwrap();
        write(&tmp.path().join("keep"), "x");
        let report = apply_overlay(&OverlayPlan::default(), tmp.path()).unwrap();
        assert_eq!(report.entries(), 0);
        assert_eq!(fs::read_to_string(tmp.path().join("keep")).unwrap(), "x");
    }

    #[cfg(unix)]
    #[test]
    fn symlink_text_preserved() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        fs::create_dir_all(root.join("l/etc")).unwrap();
        std::os::unix::fs::symlink("../does/not/exist", root.join("l/etc/link")).unwrap();
        let plan = plan_sources(&sources(root, &["l"])).unwrap();
        assert_eq!(plan.entries[Path::new("etc/link")].kind, EntryKind::Symlink);
        let target = root.join("out");
        fs::create_dir(&target).unwrap();
        apply_overlay(&plan, &target).unwrap();
        assert_eq!(
            fs::read_link(target.join("etc/link")).unwrap(),
            PathBuf::from("../does/not/exist")
        );
    }

    #[cfg(unix)]
    #[test]
    fn file_mode_preserved() {
        use std::os::unix::fs::PermissionsExt;
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        write(&root.join("l/usr/bin/tool"), "#!/bin/sh\n");
        fs::set_permissions(root.join("l/usr/bin/tool"), fs::Permissions::from_mode(0o751)).unwrap();
        let plan = plan_sources(&sources(root, &["l"])).unwrap();
        let target = root.join("out");
        fs::create_dir(&target).unwrap();
        apply_overlay(&plan, &target).unwrap();
        let mode = fs::metadata(target.join("usr/bin/tool")).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o751);
    }

    #[test]
    fn existing_target_file_blocks_directory() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        write(&root.join("l/etc/x"), "");
        write(&root.join("out/etc"), "a file");
        let plan = plan_sources(&sources(root, &["l"])).unwrap();
        assert!(matches!(
            apply_overlay(&plan, &root.join("out")),
            Err(Error::OverlayConflict { .. })
        ));
    }
}
