//! Persistent data partition: layout planning, first-boot growth and the
//! `skiff` directory tree.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;
/// Size of the persist partition before first-boot growth.
pub const INITIAL_PERSIST_SIZE: u64 = 256 * MIB;
pub const SWAPFILE_NAME: &str = "swapfile";
pub const TREE_DIR: &str = "skiff";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionRole {
    Boot,
    Rootfs,
    Persist,
    Vendor,
}

impl PartitionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionRole::Boot => "boot",
            PartitionRole::Rootfs => "rootfs",
            PartitionRole::Persist => "persist",
            PartitionRole::Vendor => "vendor",
        }
    }
}

impl fmt::Display for PartitionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boot" => Ok(PartitionRole::Boot),
            "rootfs" => Ok(PartitionRole::Rootfs),
            "persist" => Ok(PartitionRole::Persist),
            "vendor" => Ok(PartitionRole::Vendor),
            _ => Err(Error::Layout(format!("unknown partition role {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub name: String,
    pub start: u64,
    pub size: u64,
    pub role: PartitionRole,
}

impl Partition {
    pub fn end(&self) -> u64 {
        self.start + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MediaLayout {
    pub media_size: u64,
    pub reserved_prefix: u64,
    pub partitions: Vec<Partition>,
}

impl MediaLayout {
    pub fn persist(&self) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.role == PartitionRole::Persist)
    }

    /// End of the last partition.
    pub fn extent(&self) -> u64 {
        self.partitions.last().map_or(self.reserved_prefix, Partition::end)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cursor = self.reserved_prefix;
        for p in &self.partitions {
            if p.name.is_empty() || p.name.contains(char::is_whitespace) {
                return Err(Error::Layout(format!("invalid partition name {:?}", p.name)));
            }
            if p.size == 0 {
                return Err(Error::Layout(format!("partition {} is empty", p.name)));
            }
            if p.start < cursor {
                return Err(Error::Layout(format!("partition {} overlaps its predecessor", p.name)));
            }
            cursor = p
                .start
                .checked_add(p.size)
                .ok_or_else(|| Error::Layout(format!("partition {} overflows", p.name)))?;
        }
        if cursor > self.media_size {
            return Err(Error::Layout(format!(
                "partitions end at {cursor}, beyond media size {}",
                self.media_size
            )));
        }
        let persists = self.partitions.iter().filter(|p| p.role == PartitionRole::Persist).count();
        if persists != 1 {
            return Err(Error::Layout(format!("expected one persist partition, found {persists}")));
        }
        if self.partitions.last().map(|p| p.role) != Some(PartitionRole::Persist) {
            return Err(Error::Layout("persist partition is not last".into()));
        }
        Ok(())
    }

    /// Descriptor text: `media <size>`, `prefix <size>`, then one
    /// `name start size role` line per partition.
    pub fn to_descriptor(&self) -> String {
        let mut out = format!("media {}\nprefix {}\n", self.media_size, self.reserved_prefix);
        for p in &self.partitions {
            out.push_str(&format!("{} {} {} {}\n", p.name, p.start, p.size, p.role));
        }
        out
    }

    /// Parses a descriptor; `#` comments and blank lines are ignored.
    pub fn from_descriptor(text: &str) -> Result<MediaLayout> {
        let mut media_size = None;
        let mut reserved_prefix = 0;
        let mut partitions = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Layout(format!("line {}: cannot parse {line:?}", idx + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["media", size] => media_size = Some(parse_size(size).map_err(|_| bad())?),
                ["prefix", size] => reserved_prefix = parse_size(size).map_err(|_| bad())?,
                [name, start, size, role] => partitions.push(Partition {
                    name: (*name).to_owned(),
                    start: parse_size(start).map_err(|_| bad())?,
                    size: parse_size(size).map_err(|_| bad())?,
                    role: role.parse()?,
                }),
                _ => return Err(bad()),
            }
        }
        let layout = MediaLayout {
            media_size: media_size.ok_or_else(|| Error::Layout("missing `media <size>` line".into()))?,
            reserved_prefix,
            partitions,
        };
        layout.validate()?;
        Ok(layout)
    }
}

/// Parses a byte count with an optional binary suffix (K, M, G, T).
pub fn parse_size(text: &str) -> Result<u64> {
    let t = text.trim();
    let t = t.strip_suffix(['b', 'B']).filter(|s| s.ends_with(|c: char| c.is_ascii_alphabetic())).unwrap_or(t);
    let t = t.strip_suffix(['i']).unwrap_or(t);
    let (digits, shift) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 30),
        Some('T' | 't') => (&t[..t.len() - 1], 40),
        _ => (t, 0),
    };
    digits
        .parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(1u64 << shift))
        .ok_or_else(|| Error::Usage(format!("invalid size {text:?}")))
}

/// Lays out boot, rootfs and persist contiguously after `reserved_prefix`.
/// Persist starts at [`INITIAL_PERSIST_SIZE`].
pub fn plan_layout(media_size: u64, boot_size: u64, rootfs_size: u64, reserved_prefix: u64) -> Result<MediaLayout> {
    if boot_size == 0 || rootfs_size == 0 {
        return Err(Error::Layout("boot and rootfs sizes must be non-zero".into()));
    }
    let required = [reserved_prefix, boot_size, rootfs_size, INITIAL_PERSIST_SIZE]
        .into_iter()
        .try_fold(0u64, u64::checked_add)
        .ok_or_else(|| Error::Layout("sizes overflow".into()))?;
    if media_size < required {
        return Err(Error::Layout(format!(
            "media of {media_size} bytes is too small: at least {required} bytes required"
        )));
    }
    let boot = Partition {
        name: "boot".into(),
        start: reserved_prefix,
        size: boot_size,
        role: PartitionRole::Boot,
    };
    let rootfs = Partition {
        name: "rootfs".into(),
        start: boot.end(),
        size: rootfs_size,
        role: PartitionRole::Rootfs,
    };
    let persist = Partition {
        name: "persist".into(),
        start: rootfs.end(),
        size: INITIAL_PERSIST_SIZE,
        role: PartitionRole::Persist,
    };
    let layout = MediaLayout {
        media_size,
        reserved_prefix,
        partitions: vec![boot, rootfs, persist],
    };
    layout.validate()?;
    Ok(layout)
}

/// Extends the persist partition to the end of the media.
pub fn grow_persist(layout: &MediaLayout, media_size: u64) -> Result<MediaLayout> {
    layout.validate()?;
    if media_size < layout.media_size || media_size < layout.extent() {
        return Err(Error::Layout(format!(
            "media size {media_size} is smaller than the current layout ({} bytes)",
            layout.media_size.max(layout.extent())
        )));
    }
    let mut grown = layout.clone();
    grown.media_size = media_size;
    let persist = grown.partitions.last_mut().expect("validated layout has a persist partition");
    persist.size = media_size - persist.start;
    Ok(grown)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeEntryKind {
    Directory,
    File,
}

/// The canonical entries of the persist `skiff` tree.
pub const TREE_ENTRIES: [(&str, TreeEntryKind); 8] = [
    ("connections", TreeEntryKind::Directory),
    ("core", TreeEntryKind::Directory),
    ("docker", TreeEntryKind::Directory),
    ("etc", TreeEntryKind::Directory),
    ("hostname", TreeEntryKind::File),
    ("journal", TreeEntryKind::Directory),
    ("keys", TreeEntryKind::Directory),
    ("ssh", TreeEntryKind::Directory),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeEntry {
    pub name: String,
    pub kind: TreeEntryKind,
    pub created: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersistTree {
    pub root: PathBuf,
    pub entries: Vec<TreeEntry>,
    pub swapfile: Option<u64>,
}

impl PersistTree {
    pub fn created(&self) -> impl Iterator<Item = &TreeEntry> {
        self.entries.iter().filter(|e| e.created)
    }
}

/// Creates missing entries of `<target>/skiff` and, if requested, a sparse
/// swapfile placeholder at `<target>/swapfile`. Existing content is left
/// alone.
pub fn scaffold_tree(target: &Path, swap_size: Option<u64>) -> Result<PersistTree> {
    let root = target.join(TREE_DIR);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut entries = Vec::new();
    for (name, kind) in TREE_ENTRIES {
        let path = root.join(name);
        let created = match fs::symlink_metadata(&path) {
            Ok(meta) => {
                let ok = match kind {
                    TreeEntryKind::Directory => meta.is_dir(),
                    TreeEntryKind::File => meta.is_file(),
                };
                if !ok {
                    return Err(Error::Layout(format!(
                        "{} exists but is not a {}",
                        path.display(),
                        if kind == TreeEntryKind::File { "file" } else { "directory" }
                    )));
                }
                false
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                match kind {
                    TreeEntryKind::Directory => fs::create_dir(&path),
                    TreeEntryKind::File => fs::OpenOptions::new().write(true).create_new(true).open(&path).map(drop),
                }
                .map_err(|e| Error::io(&path, e))?;
                true
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        entries.push(TreeEntry {
            name: name.to_owned(),
            kind,
            created,
        });
    }
    if let Some(size) = swap_size {
        let path = target.join(SWAPFILE_NAME);
        if !path.exists() {
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            file.set_len(size).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(PersistTree {
        root,
        entries,
        swapfile: swap_size,
    })
}
