//! Kconfig-style fragment parsing, merging and rendering.
//!
//! Fragments are line-oriented `KEY=value` files. `# KEY is not set` is an
//! assignment that disables the key; any other comment or blank line is
//! skipped. Fragments merge in order and the last assignment of a key wins.
//! Classification of values is syntactic only.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::Layer;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KconfigValue {
    /// `y`
    Yes,
    /// `m`, built as a kernel module.
    Module,
    /// `n` or `# KEY is not set`.
    Unset,
    /// Double-quoted text; holds the text between the quotes verbatim.
    Str(String),
    /// Decimal or `0x` hexadecimal integer text.
    Number(String),
    Raw(String),
}

impl KconfigValue {
    /// Classifies the right-hand side of a `KEY=value` line.
    pub fn classify(text: &str) -> KconfigValue {
        match text {
            "y" => KconfigValue::Yes,
            "m" => KconfigValue::Module,
            "n" => KconfigValue::Unset,
            _ if text.len() >= 2 && text.starts_with('"') && text.ends_with('"') => {
                KconfigValue::Str(text[1..text.len() - 1].to_owned())
            }
            _ if is_integer(text) => KconfigValue::Number(text.to_owned()),
            _ => KconfigValue::Raw(text.to_owned()),
        }
    }
}

fn is_integer(text: &str) -> bool {
    if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        return !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit());
    }
    let digits = text.strip_prefix('-').unwrap_or(text);
    !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())
}

impl fmt::Display for KconfigValue {
    /// Right-hand side text; `Unset` renders as `n`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KconfigValue::Yes => f.write_str("y"),
            KconfigValue::Module => f.write_str("m"),
            KconfigValue::Unset => f.write_str("n"),
            KconfigValue::Str(s) => write!(f, "\"{s}\""),
            KconfigValue::Number(s) | KconfigValue::Raw(s) => f.write_str(s),
        }
    }
}

impl Serialize for KconfigValue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Source {
    pub path: PathBuf,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KconfigAssignment {
    pub key: String,
    pub value: KconfigValue,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KconfigFragment {
    pub source: PathBuf,
    pub assignments: Vec<KconfigAssignment>,
}

impl KconfigFragment {
    /// Keys assigned more than once within this fragment.
    pub fn duplicate_keys(&self) -> Vec<&str> {
        let mut counts: IndexMap<&str, usize> = IndexMap::new();
        for a in &self.assignments {
            *counts.entry(a.key.as_str()).or_default() += 1;
        }
        counts.into_iter().filter(|(_, n)| *n > 1).map(|(k, _)| k).collect()
    }
}

/// Checks `PREFIX_REST` where the prefix is an uppercase token and the rest
/// is `[A-Z0-9_]`, e.g. `CONFIG_EXT4_FS` or `BR2_LINUX_KERNEL`.
pub fn is_valid_key(key: &str) -> bool {
    let Some((prefix, rest)) = key.split_once('_') else {
        return false;
    };
    let mut prefix_chars = prefix.chars();
    matches!(prefix_chars.next(), Some(c) if c.is_ascii_uppercase())
        && prefix_chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        && !rest.is_empty()
        && rest.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

fn parse_unset(line: &str) -> Option<&str> {
    let body = line.strip_prefix('#')?.trim_start();
    let key = body.strip_suffix("is not set")?.trim_end();
    is_valid_key(key).then_some(key)
}

pub fn parse_fragment(text: &[u8], source: &Path) -> Result<KconfigFragment> {
    let text = std::str::from_utf8(text)
        .map_err(|e| Error::parse(source, 0, format!("not valid UTF-8: {e}")))?;
    let mut assignments = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        let src = || Source {
            path: source.to_path_buf(),
            line: line_no,
        };
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(key) = parse_unset(line) {
                assignments.push(KconfigAssignment {
                    key: key.to_owned(),
                    value: KconfigValue::Unset,
                    source: src(),
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(source, line_no, format!("expected KEY=value, got {line:?}")));
        };
        let key = key.trim_end();
        if !is_valid_key(key) {
            return Err(Error::parse(source, line_no, format!("invalid key {key:?}")));
        }
        assignments.push(KconfigAssignment {
            key: key.to_owned(),
            value: KconfigValue::classify(value.trim_start()),
            source: src(),
        });
    }
    Ok(KconfigFragment {
        source: source.to_path_buf(),
        assignments,
    })
}

pub fn read_fragment(path: &Path) -> Result<KconfigFragment> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_fragment(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergedEntry {
    pub value: KconfigValue,
    pub source: Source,
}

/// Merged key → value map; iteration follows first-seen key order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergedConfig {
    entries: IndexMap<String, MergedEntry>,
}

impl MergedConfig {
    pub fn get(&self, key: &str) -> Option<&MergedEntry> {
        self.entries.get(key)
    }

    pub fn value(&self, key: &str) -> Option<&KconfigValue> {
        self.entries.get(key).map(|e| &e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MergedEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn apply(&mut self, assignment: &KconfigAssignment) {
        let entry = MergedEntry {
            value: assignment.value.clone(),
            source: assignment.source.clone(),
        };
        // IndexMap::insert keeps the original position of an existing key.
        self.entries.insert(assignment.key.clone(), entry);
    }
}

impl Serialize for MergedConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Row<'a> {
            key: &'a str,
            value: &'a KconfigValue,
            source: &'a Source,
        }
        serializer.collect_seq(self.entries.iter().map(|(key, e)| Row {
            key,
            value: &e.value,
            source: &e.source,
        }))
    }
}

pub fn merge_fragments<'a, I>(fragments: I) -> MergedConfig
where
    I: IntoIterator<Item = &'a KconfigFragment>,
{
    let mut merged = MergedConfig::default();
    for fragment in fragments {
        for assignment in &fragment.assignments {
            merged.apply(assignment);
        }
    }
    merged
}

pub fn render_config(merged: &MergedConfig) -> String {
    let mut out = String::new();
    for (key, entry) in merged.iter() {
        match entry.value {
            KconfigValue::Unset => {
                out.push_str("# ");
                out.push_str(key);
                out.push_str(" is not set\n");
            }
            ref v => {
                out.push_str(key);
                out.push('=');
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
    }
    out
}

/// Fragment directories that feed a rendered configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigClass {
    Buildroot,
    Kernel,
    Uboot,
}

impl ConfigClass {
    pub const ALL: [ConfigClass; 3] = [ConfigClass::Buildroot, ConfigClass::Kernel, ConfigClass::Uboot];

    pub fn dir_name(self) -> &'static str {
        match self {
            ConfigClass::Buildroot => "buildroot",
            ConfigClass::Kernel => "kernel",
            ConfigClass::Uboot => "uboot",
        }
    }
}

impl fmt::Display for ConfigClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Regular, non-hidden files directly inside `dir`, sorted by file name.
/// A missing directory yields nothing.
pub(crate) fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if fs::metadata(&path).map(|m| m.is_file()).unwrap_or(false) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Fragment files for `class`, in merge order: each layer's directory in
/// layer order, then `overrides/<class>`, then
/// `overrides/workspaces/<workspace>/<class>`. Each directory contributes its
/// files in lexicographic file-name order.
pub fn collect_fragment_paths(
    layers: &[Layer],
    class: ConfigClass,
    overrides_root: Option<&Path>,
    workspace: &str,
) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = layers.iter().map(|l| l.root.join(class.dir_name())).collect();
    if let Some(overrides) = overrides_root {
        dirs.push(overrides.join(class.dir_name()));
        dirs.push(overrides.join("workspaces").join(workspace).join(class.dir_name()));
    }
    let mut out = Vec::new();
    for dir in dirs {
        out.extend(sorted_files(&dir)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerId, LayerMetadata};
    use tempfile::TempDir;

    const EXT_FRAGMENT: &str = "CONFIG_EXT3_FS=m
CONFIG_EXT3_FS_SECURITY=y
CONFIG_EXT3_FS_XATTR=y
CONFIG_EXT3_POSIX_ACL=y
CONFIG_EXT4_FS=y
CONFIG_EXT4_FS_SECURITY=y
CONFIG_EXT4_POSIX_ACL=y
";

    fn frag(text: &str, name: &str) -> KconfigFragment {
        parse_fragment(text.as_bytes(), Path::new(name)).unwrap()
    }

    #[test]
    fn module_value() {
        let f = frag("CONFIG_EXT3_FS=m", "a");
        assert_eq!(f.assignments.len(), 1);
        assert_eq!(f.assignments[0].key, "CONFIG_EXT3_FS");
        assert_eq!(f.assignments[0].value, KconfigValue::Module);
        assert_eq!(f.assignments[0].source.line, 1);
    }

    #[test]
    fn quoted_string_value() {
        let f = frag("BR2_LINUX_KERNEL_CUSTOM_VERSION_VALUE=\"5.11.2\"", "a");
        assert_eq!(f.assignments[0].value, KconfigValue::Str("5.11.2".into()));
    }

    #[test]
    fn empty_input() {
        assert!(frag("", "a").assignments.is_empty());
    }

    #[test]
    fn unset_directive() {
        let f = frag("# CONFIG_FOO is not set\n# just a comment\n", "a");
        assert_eq!(f.assignments.len(), 1);
        assert_eq!(f.assignments[0].key, "CONFIG_FOO");
        assert_eq!(f.assignments[0].value, KconfigValue::Unset);
    }

    #[test]
    fn classification() {
        assert_eq!(KconfigValue::classify("n"), KconfigValue::Unset);
        assert_eq!(KconfigValue::classify("42"), KconfigValue::Number("42".into()));
        assert_eq!(KconfigValue::classify("-7"), KconfigValue::Number("-7".into()));
        assert_eq!(KconfigValue::classify("0x1F"), KconfigValue::Number("0x1F".into()));
        assert_eq!(KconfigValue::classify("0x"), KconfigValue::Raw("0x".into()));
        assert_eq!(KconfigValue::classify("\""), KconfigValue::Raw("\"".into()));
        assert_eq!(KconfigValue::classify("\"\""), KconfigValue::Str(String::new()));
        assert_eq!(KconfigValue::classify("abc"), KconfigValue::Raw("abc".into()));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_fragment(b"CONFIG_A=y\ngarbage here\n", Path::new("frag")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_fragment(b"config_lower=y", Path::new("f")).is_err());
        assert!(parse_fragment(b"NOPREFIX=y", Path::new("f")).is_err());
        assert!(parse_fragment(b"=y", Path::new("f")).is_err());
    }

    #[test]
    fn last_assignment_wins() {
        let a = frag("A_X=y\n", "first");
        let b = frag("A_X=m\n", "second");
        let merged = merge_fragments([&a, &b]);
        let entry = merged.get("A_X").unwrap();
        assert_eq!(entry.value, KconfigValue::Module);
        assert_eq!(entry.source.path, PathBuf::from("second"));
    }

    #[test]
    fn single_fragment_merges_to_itself() {
        let f = frag("A_X=y\nB_Y=\"s\"\n# C_Z is not set\n", "only");
        let merged = merge_fragments([&f]);
        let got: Vec<(String, KconfigValue)> =
            merged.iter().map(|(k, e)| (k.to_owned(), e.value.clone())).collect();
        let want: Vec<(String, KconfigValue)> =
            f.assignments.iter().map(|a| (a.key.clone(), a.value.clone())).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ext_fragment_alone() {
        let merged = merge_fragments([&frag(EXT_FRAGMENT, "kernel/ext")]);
        assert_eq!(merged.len(), 7);
        assert_eq!(merged.value("CONFIG_EXT4_FS"), Some(&KconfigValue::Yes));
        assert_eq!(merged.value("CONFIG_EXT3_FS"), Some(&KconfigValue::Module));
        assert_eq!(render_config(&merged), EXT_FRAGMENT);
    }

    #[test]
    fn render_cases() {
        let merged = merge_fragments([&frag("CONFIG_EXT3_FS=m", "a")]);
        assert_eq!(render_config(&merged), "CONFIG_EXT3_FS=m\n");
        assert_eq!(render_config(&MergedConfig::default()), "");
        let merged = merge_fragments([&frag("# CONFIG_FOO is not set", "a")]);
        assert_eq!(render_config(&merged), "# CONFIG_FOO is not set\n");
        let merged = merge_fragments([&frag("CONFIG_FOO=n", "a")]);
        assert_eq!(render_config(&merged), "# CONFIG_FOO is not set\n");
    }

    #[test]
    fn first_seen_key_order_is_kept() {
        let a = frag("A_1=y\nA_2=y\n", "a");
        let b = frag("A_3=y\nA_1=n\n", "b");
        let merged = merge_fragments([&a, &b]);
        let keys: Vec<&str> = merged.iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["A_1", "A_2", "A_3"]);
    }

    #[test]
    fn duplicate_keys_in_one_fragment() {
        let f = frag("A_1=y\nA_2=y\nA_1=m\n", "a");
        assert_eq!(f.duplicate_keys(), ["A_1"]);
        assert_eq!(merge_fragments([&f]).value("A_1"), Some(&KconfigValue::Module));
    }

    fn layer(root: &Path, name: &str) -> Layer {
        Layer {
            id: name.parse::<LayerId>().unwrap(),
            root: root.join(name),
            present: vec![],
            metadata: LayerMetadata::default(),
        }
    }

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, "").unwrap();
    }

    #[test]
    fn fragment_paths_follow_layer_then_filename_order() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        for l in ["pi/common", "pi/4"] {
            touch(&root.join(l).join("kernel/10-net.conf"));
            touch(&root.join(l).join("kernel/00-base.conf"));
        }
        let layers = [layer(root, "pi/common"), layer(root, "pi/4")];
        let paths = collect_fragment_paths(&layers, ConfigClass::Kernel, None, "default").unwrap();
        let rel: Vec<String> = paths
            .iter()
            .map(|p| p.strip_prefix(root).unwrap().display().to_string())
            .collect();
        assert_eq!(
            rel,
            [
                "pi/common/kernel/00-base.conf",
                "pi/common/kernel/10-net.conf",
                "pi/4/kernel/00-base.conf",
                "pi/4/kernel/10-net.conf"
            ]
        );
    }

    #[test]
    fn workspace_overrides_come_last() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        touch(&root.join("pi/4/kernel/50-x"));
        touch(&root.join("overrides/workspaces/pi4/kernel/00-local"));
        touch(&root.join("overrides/kernel/99-global"));
        touch(&root.join("overrides/workspaces/other/kernel/00-ignored"));
        let layers = [layer(root, "pi/4")];
        let paths =
            collect_fragment_paths(&layers, ConfigClass::Kernel, Some(&root.join("overrides")), "pi4").unwrap();
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.strip_prefix(root).unwrap().display().to_string())
            .collect();
        assert_eq!(
            names,
            [
                "pi/4/kernel/50-x",
                "overrides/kernel/99-global",
                "overrides/workspaces/pi4/kernel/00-local"
            ]
        );
    }

    #[test]
    fn no_fragments_anywhere() {
        let tmp = TempDir::new().unwrap();
        let layers = [layer(tmp.path(), "a")];
        assert!(collect_fragment_paths(&layers, ConfigClass::Uboot, Some(tmp.path()), "w")
            .unwrap()
            .is_empty());
    }
}
