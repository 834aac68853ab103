//! Over-the-air replacement of the immutable image file set.
//!
//! An image is a handful of files (root filesystem, kernel, kernel modules
//! and optional boot extras) described by an [`OtaManifest`]. Pushing a
//! manifest to a target follows a stage → verify → commit protocol:
//!
//! 1. take the target lock (`staging/.lock`);
//! 2. write every changed file to the staging area;
//! 3. re-read and hash every staged file;
//! 4. rename staged files into content-addressed live names
//!    (`images/<digest>/<filename>`), which never collide with files the
//!    active manifest references;
//! 5. store the current manifest as `manifest.previous`;
//! 6. rename the staged manifest over `manifest`, the single commit point;
//! 7. delete live files referenced by neither manifest and clear staging.
//!
//! A crash anywhere leaves `manifest` pointing at a complete file set, either
//! the old one or the new one. [`recover`] clears leftovers of an interrupted
//! session.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DIGEST_ALGO: &str = "sha256";
/// Maximum number of rootfs/kernel/modules entries in one manifest.
pub const MAX_CORE_ENTRIES: usize = 5;

pub const ACTIVE_MANIFEST: &str = "manifest";
pub const PREVIOUS_MANIFEST: &str = "manifest.previous";
pub const STAGING_PREFIX: &str = "staging/";
pub const IMAGES_PREFIX: &str = "images/";
const LOCK_NAME: &str = "staging/.lock";
const STAGED_MANIFEST: &str = "manifest.new";
const STAGED_PREVIOUS: &str = "manifest.prev";

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Rootfs,
    Kernel,
    Modules,
    BootExtra,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Rootfs, Role::Kernel, Role::Modules, Role::BootExtra];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Rootfs => "rootfs",
            Role::Kernel => "kernel",
            Role::Modules => "modules",
            Role::BootExtra => "boot-extra",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Role> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub role: Role,
    pub filename: String,
    pub size: u64,
    pub digest: String,
}

impl ManifestEntry {
    /// Name of the live, content-addressed copy on the target.
    pub fn object_name(&self) -> String {
        format!("{IMAGES_PREFIX}{}/{}", self.digest, self.filename)
    }

    fn staged_name(&self) -> String {
        format!("{}/{}", self.digest, self.filename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OtaManifest {
    pub version: String,
    pub digest_algo: String,
    pub entries: Vec<ManifestEntry>,
    /// Unix seconds; kept out of the canonical text.
    #[serde(skip)]
    pub created_at: Option<u64>,
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

impl OtaManifest {
    /// Canonical text: `version`, `digest-algo`, then `role filename size
    /// digest` per entry, newline-terminated.
    pub fn to_text(&self) -> String {
        let mut out = format!("version {}\ndigest-algo {}\n", self.version, self.digest_algo);
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {}\n", e.role, e.filename, e.size, e.digest));
        }
        out
    }

    pub fn parse(text: &str) -> Result<OtaManifest> {
        let bad = |line: usize, msg: String| Error::Manifest(format!("line {line}: {msg}"));
        if !text.ends_with('\n') {
            return Err(Error::Manifest("missing trailing newline".into()));
        }
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<String> {
            let (idx, line) = lines.next().ok_or_else(|| Error::Manifest(format!("missing {key} header")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key && is_token(v) => Ok(v.to_owned()),
                _ => Err(bad(idx + 1, format!("expected `{key} <value>`"))),
            }
        };
        let version = header("version")?;
        let digest_algo = header("digest-algo")?;
        if digest_algo != DIGEST_ALGO {
            return Err(Error::Manifest(format!("unsupported digest algorithm {digest_algo:?}")));
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(' ').collect();
            let [role, filename, size, digest] = fields.as_slice() else {
                return Err(bad(idx + 1, "expected `role filename size digest`".into()));
            };
            entries.push(ManifestEntry {
                role: role.parse()?,
                filename: (*filename).to_owned(),
                size: size.parse().map_err(|_| bad(idx + 1, format!("bad size {size:?}")))?,
                digest: (*digest).to_owned(),
            });
        }
        let manifest = OtaManifest {
            version,
            digest_algo,
            entries,
            created_at: None,
        };
        manifest.validate()?;
        if manifest.to_text() != text {
            return Err(Error::Manifest("manifest is not in canonical form".into()));
        }
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_token(&self.version) {
            return Err(Error::Manifest(format!("invalid version {:?}", self.version)));
        }
        for role in [Role::Rootfs, Role::Kernel] {
            let n = self.entries.iter().filter(|e| e.role == role).count();
            if n != 1 {
                return Err(Error::Manifest(format!("expected exactly one {role} entry, found {n}")));
            }
        }
        let core = self.entries.iter().filter(|e| e.role != Role::BootExtra).count();
        if core > MAX_CORE_ENTRIES {
            return Err(Error::Manifest(format!(
                "{core} image files exceed the limit of {MAX_CORE_ENTRIES}"
            )));
        }
        let mut names = BTreeSet::new();
        for e in &self.entries {
            if !is_token(&e.filename) || e.filename.contains('/') {
                return Err(Error::Manifest(format!("invalid file name {:?}", e.filename)));
            }
            if !names.insert(&e.filename) {
                return Err(Error::Manifest(format!("duplicate file {}", e.filename)));
            }
            if e.digest.len() != 64 || !e.digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
                return Err(Error::Manifest(format!("invalid {DIGEST_ALGO} digest for {}", e.filename)));
            }
        }
        Ok(())
    }

    /// Digest of the canonical text.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Non-fatal findings, e.g. boot extras pushing the file count past the
    /// usual limit.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.entries.len() > MAX_CORE_ENTRIES {
            out.push(format!(
                "{} files including boot extras exceed {MAX_CORE_ENTRIES}; boot extras are exempt from the limit",
                self.entries.len()
            ));
        }
        out
    }

    fn object_names(&self) -> BTreeSet<String> {
        self.entries.iter().map(ManifestEntry::object_name).collect()
    }
}

/// File-name patterns that assign an image file its role. The first role
/// with a matching pattern wins.
#[derive(Debug, Clone)]
pub struct RolePatterns {
    patterns: Vec<(Role, glob::Pattern)>,
}

impl RolePatterns {
    pub fn new<'a>(patterns: impl IntoIterator<Item = (Role, &'a str)>) -> Result<Self> {
        let patterns = patterns
            .into_iter()
            .map(|(role, p)| {
                glob::Pattern::new(p)
                    .map(|pat| (role, pat))
                    .map_err(|e| Error::Manifest(format!("bad pattern {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(RolePatterns { patterns })
    }

    pub fn role_of(&self, file_name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|role| {
            self.patterns
                .iter()
                .any(|(r, p)| r == role && p.matches(file_name))
        })
    }
}

impl Default for RolePatterns {
    fn default() -> Self {
        RolePatterns::new([
            (Role::Rootfs, "rootfs.*"),
            (Role::Rootfs, "rootfs"),
            (Role::Rootfs, "initramfs*"),
            (Role::Kernel, "Image"),
            (Role::Kernel, "zImage"),
            (Role::Kernel, "bzImage"),
            (Role::Kernel, "uImage"),
            (Role::Kernel, "vmlinuz*"),
            (Role::Kernel, "kernel*"),
            (Role::Modules, "modules*"),
            (Role::BootExtra, "*.dtb"),
            (Role::BootExtra, "u-boot*"),
            (Role::BootExtra, "boot.scr"),
            (Role::BootExtra, "bootcode.bin"),
            (Role::BootExtra, "firmware*"),
        ])
        .expect("built-in patterns are valid")
    }
}

fn now_unix() -> Option<u64> {
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

pub fn build_manifest(image_dir: &Path, version: &str) -> Result<OtaManifest> {
    build_manifest_with(image_dir, version, &RolePatterns::default())
}

/// Hashes the recognized image files in `image_dir`. Entries are ordered by
/// role, then file name. Unrecognized files are ignored.
pub fn build_manifest_with(image_dir: &Path, version: &str, patterns: &RolePatterns) -> Result<OtaManifest> {
    let mut entries = Vec::new();
    for path in crate::kconfig::sorted_files(image_dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        if name == ACTIVE_MANIFEST {
            continue;
        }
        let Some(role) = patterns.role_of(&name) else {
            log::debug!("ignoring {}", path.display());
            continue;
        };
        let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            role,
            filename: name,
            size: data.len() as u64,
            digest: sha256_hex(&data),
        });
    }
    entries.sort_by(|a, b| (a.role, &a.filename).cmp(&(b.role, &b.filename)));
    let manifest = OtaManifest {
        version: version.to_owned(),
        digest_algo: DIGEST_ALGO.to_owned(),
        entries,
        created_at: now_unix(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Storage operations on an update target. Names are `/`-separated; names
/// under `staging/` form the staging area.
pub trait Transport {
    /// Every stored name, sorted.
    fn list(&self) -> Result<Vec<String>>;
    fn read(&self, name: &str) -> Result<Option<Vec<u8>>>;
    /// Writes `staging/<name>`.
    fn write_staging(&mut self, name: &str, data: &[u8]) -> Result<()>;
    /// Atomically renames `staging/<staged>` to `live`, replacing it.
    fn commit(&mut self, staged: &str, live: &str) -> Result<()>;
    /// Removes a name; missing names are not an error.
    fn delete(&mut self, name: &str) -> Result<()>;
    /// Takes the session lock, failing with [`Error::TargetBusy`] if held.
    fn lock(&mut self) -> Result<()>;
    fn unlock(&mut self) -> Result<()>;
}

/// Target held in memory. Clones share the same storage, so several
/// sessions can address one target.
#[derive(Debug, Clone, Default)]
pub struct MemoryTransport {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl MemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.files.lock().expect("memory target lock").clone()
    }

    /// Overwrites a stored name directly, bypassing the protocol.
    pub fn put(&self, name: &str, data: &[u8]) {
        self.files.lock().expect("memory target lock").insert(name.to_owned(), data.to_vec());
    }

    fn files(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Vec<u8>>> {
        self.files.lock().expect("memory target lock")
    }
}

impl Transport for MemoryTransport {
    fn list(&self) -> Result<Vec<String>> {
        Ok(self.files().keys().cloned().collect())
    }

    fn read(&self, name: &str) -> Result<Option<Vec<u8>>> {
        Ok(self.files().get(name).cloned())
    }

    fn write_staging(&mut self, name: &str, data: &[u8]) -> Result<()> {
        self.files().insert(format!("{STAGING_PREFIX}{name}"), data.to_vec());
        Ok(())
    }

    fn commit(&mut self, staged: &str, live: &str) -> Result<()> {
        let mut files = self.files();
        let data = files
            .remove(&format!("{STAGING_PREFIX}{staged}"))
            .ok_or_else(|| Error::Transport(format!("nothing staged as {staged}")))?;
        files.insert(live.to_owned(), data);
        Ok(())
    }

    fn delete(&mut self, name: &str) -> Result<()> {
        self.files().remove(name);
        Ok(())
    }

    fn lock(&mut self) -> Result<()> {
        let mut files = self.files();
        if files.contains_key(LOCK_NAME) {
            return Err(Error::TargetBusy);
        }
        files.insert(LOCK_NAME.to_owned(), Vec::new());
        Ok(())
    }

    fn unlock(&mut self) -> Result<()> {
        self.files().remove(LOCK_NAME);
        Ok(())
    }
}

/// Target stored in a local directory.
#[derive(Debug, Clone)]
pub struct LocalDirTransport {
    root: PathBuf,
}

impl LocalDirTransport {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(LocalDirTransport { root })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        if name.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
            return Err(Error::Transport(format!("invalid name {name:?}")));
        }
        Ok(self.root.join(name))
    }

    fn ensure_parent(path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(())
    }
}

impl Transport for LocalDirTransport {
    fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Transport(e.to_string()))?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(&self.root).expect("under root");
                let name: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
                names.push(name.join("/"));
            }
        }
        names.sort();
        Ok(names)
    }

    fn read(&self, name: &str) -> Result<Option<Vec<u8>>> {
        let path = self.path(name)?;
        match fs::read(&path) {
            Ok(data) => Ok(Some(data)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn write_staging(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.path(&format!("{STAGING_PREFIX}{name}"))?;
        Self::ensure_parent(&path)?;
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(data).map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))
    }

    fn commit(&mut self, staged: &str, live: &str) -> Result<()> {
        let from = self.path(&format!("{STAGING_PREFIX}{staged}"))?;
        let to = self.path(live)?;
        Self::ensure_parent(&to)?;
        fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        if let Some(parent) = to.parent() {
            if let Ok(dir) = fs::File::open(parent) {
                let _ = dir.sync_all();
            }
        }
        Ok(())
    }

    fn delete(&mut self, name: &str) -> Result<()> {
        let path = self.path(name)?;
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(path, e)),
        }
        // Drop directories left empty, up to the target root.
        let mut dir = path.parent();
        while let Some(d) = dir {
            if d == self.root || fs::remove_dir(d).is_err() {
                break;
            }
            dir = d.parent();
        }
        Ok(())
    }

    fn lock(&mut self) -> Result<()> {
        let path = self.path(LOCK_NAME)?;
        Self::ensure_parent(&path)?;
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::TargetBusy),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn unlock(&mut self) -> Result<()> {
        self.delete(LOCK_NAME)
    }
}

/// Opens a transport for a target URI: `file:///path`, `dir:path`, or a
/// bare path. Remote shells are not supported.
pub fn open_target(uri: &str) -> Result<LocalDirTransport> {
    let path = if let Some(p) = uri.strip_prefix("file://") {
        p
    } else if let Some(p) = uri.strip_prefix("dir:") {
        p
    } else if uri.contains("://") || (uri.contains('@') && !uri.starts_with('/')) {
        return Err(Error::Usage(format!("unsupported target {uri:?}: only local directories are available")));
    } else {
        uri
    };
    LocalDirTransport::new(path)
}

/// Wraps a transport and simulates a crash: the mutating operation with
/// index `crash_at` fails (a staged write is left torn), and every later
/// call fails too.
#[derive(Debug)]
pub struct FaultyTransport<T> {
    inner: T,
    crash_at: Option<usize>,
    mutations: usize,
    crashed: bool,
    corrupt_staging: bool,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, crash_at: Option<usize>) -> Self {
        FaultyTransport {
            inner,
            crash_at,
            mutations: 0,
            crashed: false,
            corrupt_staging: false,
        }
    }

    /// Flips a bit in every staged write.
    pub fn corrupting(inner: T) -> Self {
        FaultyTransport {
            corrupt_staging: true,
            ..Self::new(inner, None)
        }
    }

    /// Mutating operations attempted so far.
    pub fn mutations(&self) -> usize {
        self.mutations
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }

    pub fn into_inner(self) -> T {
        self.inner
    }

    fn check(&self) -> Result<()> {
        if self.crashed {
            Err(Error::Transport("connection lost".into()))
        } else {
            Ok(())
        }
    }

    fn mutation(&mut self) -> Result<bool> {
        self.check()?;
        let index = self.mutations;
        self.mutations += 1;
        if self.crash_at == Some(index) {
            self.crashed = true;
            return Ok(true);
        }
        Ok(false)
    }
}

fn injected() -> Error {
    Error::Transport("injected crash".into())
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn list(&self) -> Result<Vec<String>> {
        self.check()?;
        self.inner.list()
    }

    fn read(&self, name: &str) -> Result<Option<Vec<u8>>> {
        self.check()?;
        self.inner.read(name)
    }

    fn write_staging(&mut self, name: &str, data: &[u8]) -> Result<()> {
        if self.mutation()? {
            self.inner.write_staging(name, &data[..data.len() / 2])?;
            return Err(injected());
        }
        if self.corrupt_staging && !data.is_empty() {
            let mut bad = data.to_vec();
            bad[0] ^= 1;
            return self.inner.write_staging(name, &bad);
        }
        self.inner.write_staging(name, data)
    }

    fn commit(&mut self, staged: &str, live: &str) -> Result<()> {
        if self.mutation()? {
            return Err(injected());
        }
        self.inner.commit(staged, live)
    }

    fn delete(&mut self, name: &str) -> Result<()> {
        if self.mutation()? {
            return Err(injected());
        }
        self.inner.delete(name)
    }

    fn lock(&mut self) -> Result<()> {
        if self.mutation()? {
            return Err(injected());
        }
        self.inner.lock()
    }

    fn unlock(&mut self) -> Result<()> {
        if self.mutation()? {
            return Err(injected());
        }
        self.inner.unlock()
    }
}

fn read_manifest<T: Transport + ?Sized>(target: &T, name: &str) -> Result<Option<(String, OtaManifest)>> {
    let Some(bytes) = target.read(name)? else {
        return Ok(None);
    };
    let text = String::from_utf8(bytes).map_err(|_| Error::Manifest(format!("{name} is not UTF-8")))?;
    let manifest = OtaManifest::parse(&text)?;
    Ok(Some((text, manifest)))
}

fn object_matches<T: Transport + ?Sized>(target: &T, entry: &ManifestEntry) -> Result<bool> {
    Ok(target
        .read(&entry.object_name())?
        .is_some_and(|data| sha256_hex(&data) == entry.digest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PushStatus {
    UpToDate,
    Updated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PushReport {
    pub status: PushStatus,
    pub from_version: Option<String>,
    pub to_version: String,
    pub transferred: Vec<String>,
    pub skipped: Vec<String>,
    pub bytes_transferred: u64,
    pub removed: Vec<String>,
    pub warnings: Vec<String>,
}

fn with_lock<T, R, F>(target: &mut T, f: F) -> Result<R>
where
    T: Transport + ?Sized,
    F: FnOnce(&mut T) -> Result<R>,
{
    target.lock()?;
    match f(target) {
        Ok(r) => {
            target.unlock()?;
            Ok(r)
        }
        Err(e) => {
            // Best effort; a dead transport leaves this to `recover`.
            let _ = purge_staging(target);
            let _ = target.unlock();
            Err(e)
        }
    }
}

fn purge_staging<T: Transport + ?Sized>(target: &mut T) -> Result<Vec<String>> {
    let mut removed = Vec::new();
    for name in target.list()? {
        if name.starts_with(STAGING_PREFIX) && name != LOCK_NAME {
            target.delete(&name)?;
            removed.push(name);
        }
    }
    Ok(removed)
}

/// Deletes live image files referenced by neither manifest.
fn collect_garbage<T: Transport + ?Sized>(target: &mut T) -> Result<Vec<String>> {
    let mut keep = BTreeSet::new();
    for name in [ACTIVE_MANIFEST, PREVIOUS_MANIFEST] {
        if let Some((_, m)) = read_manifest(target, name)? {
            keep.extend(m.object_names());
        }
    }
    let mut removed = Vec::new();
    for name in target.list()? {
        if name.starts_with(IMAGES_PREFIX) && !keep.contains(&name) {
            target.delete(&name)?;
            removed.push(name);
        }
    }
    Ok(removed)
}

/// Pushes the files of `manifest` from `source_dir` to `target`.
pub fn push_update<T: Transport + ?Sized>(
    manifest: &OtaManifest,
    source_dir: &Path,
    target: &mut T,
) -> Result<PushReport> {
    manifest.validate()?;
    with_lock(target, |t| push_locked(manifest, source_dir, t))
}

fn push_locked<T: Transport + ?Sized>(manifest: &OtaManifest, source_dir: &Path, target: &mut T) -> Result<PushReport> {
    let new_text = manifest.to_text();
    let old = read_manifest(target, ACTIVE_MANIFEST)?;
    let mut report = PushReport {
        status: PushStatus::Updated,
        from_version: old.as_ref().map(|(_, m)| m.version.clone()),
        to_version: manifest.version.clone(),
        transferred: Vec::new(),
        skipped: Vec::new(),
        bytes_transferred: 0,
        removed: Vec::new(),
        warnings: manifest.warnings(),
    };

    let mut staged = Vec::new();
    for entry in &manifest.entries {
        if object_matches(target, entry)? {
            report.skipped.push(entry.filename.clone());
            continue;
        }
        let path = source_dir.join(&entry.filename);
        let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&data);
        if actual != entry.digest {
            return Err(Error::DigestMismatch {
                name: path.display().to_string(),
                expected: entry.digest.clone(),
                actual,
            });
        }
        target.write_staging(&entry.staged_name(), &data)?;
        report.bytes_transferred += data.len() as u64;
        report.transferred.push(entry.filename.clone());
        staged.push(entry);
    }

    if staged.is_empty() && old.as_ref().is_some_and(|(text, _)| *text == new_text) {
        report.status = PushStatus::UpToDate;
        return Ok(report);
    }

    for entry in &staged {
        let name = format!("{STAGING_PREFIX}{}", entry.staged_name());
        let actual = target.read(&name)?.map(|d| sha256_hex(&d)).unwrap_or_default();
        if actual != entry.digest {
            return Err(Error::DigestMismatch {
                name,
                expected: entry.digest.clone(),
                actual,
            });
        }
    }
    target.write_staging(STAGED_MANIFEST, new_text.as_bytes())?;
    let staged_manifest = target.read(&format!("{STAGING_PREFIX}{STAGED_MANIFEST}"))?;
    if staged_manifest.as_deref() != Some(new_text.as_bytes()) {
        return Err(Error::DigestMismatch {
            name: STAGED_MANIFEST.into(),
            expected: manifest.digest(),
            actual: staged_manifest.map(|d| sha256_hex(&d)).unwrap_or_default(),
        });
    }

    for entry in &staged {
        target.commit(&entry.staged_name(), &entry.object_name())?;
    }
    if let Some((old_text, _)) = &old {
        target.write_staging(STAGED_PREVIOUS, old_text.as_bytes())?;
        target.commit(STAGED_PREVIOUS, PREVIOUS_MANIFEST)?;
    }
    target.commit(STAGED_MANIFEST, ACTIVE_MANIFEST)?;

    report.removed = collect_garbage(target)?;
    purge_staging(target)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntryCheck {
    pub role: Role,
    pub filename: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub version: Option<String>,
    /// Canonical text of the active manifest, if any.
    pub manifest: Option<String>,
    pub entries: Vec<EntryCheck>,
}

impl VerifyReport {
    pub fn has_manifest(&self) -> bool {
        self.manifest.is_some()
    }

    /// True when a manifest is active and every entry verifies.
    pub fn passed(&self) -> bool {
        self.has_manifest() && self.entries.iter().all(|e| e.ok)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Some(version) = &self.version else {
            return writeln!(f, "no active manifest");
        };
        writeln!(f, "version {version}")?;
        for e in &self.entries {
            let status = if e.ok { "ok" } else { "FAIL" };
            writeln!(f, "{status} {} {} {}", e.role, e.filename, e.detail)?;
        }
        Ok(())
    }
}

/// Re-hashes every file of the active manifest.
pub fn verify_target<T: Transport + ?Sized>(target: &T) -> Result<VerifyReport> {
    let Some((text, manifest)) = read_manifest(target, ACTIVE_MANIFEST)? else {
        return Ok(VerifyReport {
            version: None,
            manifest: None,
            entries: Vec::new(),
        });
    };
    let mut entries = Vec::new();
    for entry in &manifest.entries {
        let (ok, detail) = match target.read(&entry.object_name())? {
            None => (false, "missing".to_owned()),
            Some(data) if data.len() as u64 != entry.size => {
                (false, format!("size {} != {}", data.len(), entry.size))
            }
            Some(data) => {
                let digest = sha256_hex(&data);
                if digest == entry.digest {
                    (true, digest)
                } else {
                    (false, format!("digest {digest}"))
                }
            }
        };
        entries.push(EntryCheck {
            role: entry.role,
            filename: entry.filename.clone(),
            ok,
            detail,
        });
    }
    Ok(VerifyReport {
        version: Some(manifest.version),
        manifest: Some(text),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RollbackReport {
    pub from_version: String,
    pub to_version: String,
}

/// Swaps the previous manifest back in; the active one becomes previous.
pub fn rollback<T: Transport + ?Sized>(target: &mut T) -> Result<RollbackReport> {
    with_lock(target, |t| {
        let (active_text, active) = read_manifest(t, ACTIVE_MANIFEST)?.ok_or(Error::NoPreviousManifest)?;
        let (prev_text, previous) = read_manifest(t, PREVIOUS_MANIFEST)?.ok_or(Error::NoPreviousManifest)?;
        for entry in &previous.entries {
            if !object_matches(t, entry)? {
                return Err(Error::Manifest(format!(
                    "previous version {} is incomplete: {} does not verify",
                    previous.version, entry.filename
                )));
            }
        }
        t.write_staging(STAGED_PREVIOUS, active_text.as_bytes())?;
        t.write_staging(STAGED_MANIFEST, prev_text.as_bytes())?;
        t.commit(STAGED_PREVIOUS, PREVIOUS_MANIFEST)?;
        t.commit(STAGED_MANIFEST, ACTIVE_MANIFEST)?;
        purge_staging(t)?;
        Ok(RollbackReport {
            from_version: active.version,
            to_version: previous.version,
        })
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub lock_cleared: bool,
    pub staging_removed: Vec<String>,
    pub objects_removed: Vec<String>,
}

/// Clears what an interrupted session left behind: the lock, staged files
/// and unreferenced image files. Must not run while another session is
/// active.
pub fn recover<T: Transport + ?Sized>(target: &mut T) -> Result<RecoveryReport> {
    let lock_cleared = target.read(LOCK_NAME)?.is_some();
    let staging_removed = purge_staging(target)?;
    let objects_removed = collect_garbage(target)?;
    if lock_cleared {
        target.unlock()?;
    }
    Ok(RecoveryReport {
        lock_cleared,
        staging_removed,
        objects_removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn image_dir(files: &[(&str, &[u8])]) -> TempDir {
        let tmp = TempDir::new().unwrap();
        for (name, data) in files {
            fs::write(tmp.path().join(name), data).unwrap();
        }
        tmp
    }

    fn standard(tag: &str) -> TempDir {
        image_dir(&[
            ("rootfs.squashfs", format!("rootfs {tag}").as_bytes()),
            ("kernel.img", format!("kernel {tag}").as_bytes()),
            ("modules.squashfs", format!("modules {tag}").as_bytes()),
        ])
    }

    #[test]
    fn three_file_manifest() {
        let dir = standard("a");
        let m = build_manifest(dir.path(), "2024.1").unwrap();
        let roles: Vec<Role> = m.entries.iter().map(|e| e.role).collect();
        assert_eq!(roles, [Role::Rootfs, Role::Kernel, Role::Modules]);
        assert_eq!(m.entries[0].size, 8);
        assert_eq!(m.entries[0].digest, sha256_hex(b"rootfs a"));
        let text = m.to_text();
        assert!(text.starts_with("version 2024.1\ndigest-algo sha256\nrootfs rootfs.squashfs 8 "));
        assert_eq!(OtaManifest::parse(&text).unwrap().entries, m.entries);
    }

    #[test]
    fn missing_kernel_is_an_error() {
        let dir = image_dir(&[("rootfs.squashfs", b"r")]);
        let err = build_manifest(dir.path(), "1").unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");
    }

    #[test]
    fn too_many_core_files() {
        let dir = image_dir(&[
            ("rootfs.squashfs", b"r"),
            ("kernel.img", b"k"),
            ("modules-a.squashfs", b"1"),
            ("modules-b.squashfs", b"2"),
            ("modules-c.squashfs", b"3"),
            ("modules-d.squashfs", b"4"),
        ]);
        assert!(matches!(build_manifest(dir.path(), "1"), Err(Error::Manifest(_))));
    }

    #[test]
    fn boot_extras_are_exempt_but_flagged() {
        let dir = image_dir(&[
            ("rootfs.squashfs", b"r"),
            ("kernel.img", b"k"),
            ("modules.squashfs", b"m"),
            ("bcm2711-rpi-4-b.dtb", b"d"),
            ("u-boot.bin", b"u"),
            ("boot.scr", b"s"),
            ("notes.txt", b"ignored"),
        ]);
        let m = build_manifest(dir.path(), "1").unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.warnings().len(), 1);
    }

    #[test]
    fn identical_dirs_identical_manifests() {
        let a = build_manifest(standard("x").path(), "1").unwrap();
        let b = build_manifest(standard("x").path(), "1").unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn parse_rejects_non_canonical_text() {
        let m = build_manifest(standard("x").path(), "1").unwrap();
        let text = m.to_text();
        assert!(OtaManifest::parse(text.trim_end()).is_err());
        assert!(OtaManifest::parse(&text.replace("sha256", "md5")).is_err());
        assert!(OtaManifest::parse(&text.replacen(' ', "  ", 3)).is_err());
    }

    #[test]
    fn fresh_push_then_up_to_date() {
        let dir = standard("a");
        let m = build_manifest(dir.path(), "1").unwrap();
        let mut target = MemoryTransport::new();
        let report = push_update(&m, dir.path(), &mut target).unwrap();
        assert_eq!(report.status, PushStatus::Updated);
        assert_eq!(report.transferred.len(), 3);
        assert!(verify_target(&target).unwrap().passed());

        let again = push_update(&m, dir.path(), &mut target).unwrap();
        assert_eq!(again.status, PushStatus::UpToDate);
        assert_eq!(again.bytes_transferred, 0);
        // Nothing left behind in staging, lock released.
        assert!(target.list().unwrap().iter().all(|n| !n.starts_with(STAGING_PREFIX)));
    }

    #[test]
    fn delta_push_skips_unchanged_files() {
        let v1 = standard("a");
        let m1 = build_manifest(v1.path(), "1").unwrap();
        let mut target = MemoryTransport::new();
        push_update(&m1, v1.path(), &mut target).unwrap();

        let v2 = standard("a");
        fs::write(v2.path().join("kernel.img"), b"kernel b").unwrap();
        let m2 = build_manifest(v2.path(), "2").unwrap();
        let report = push_update(&m2, v2.path(), &mut target).unwrap();
        assert_eq!(report.transferred, ["kernel.img"]);
        assert_eq!(report.bytes_transferred, 8);
        assert_eq!(report.skipped.len(), 2);
        assert_eq!(verify_target(&target).unwrap().version.as_deref(), Some("2"));
    }

    #[test]
    fn corrupted_staging_aborts_and_keeps_active() {
        let v1 = standard("a");
        let m1 = build_manifest(v1.path(), "1").unwrap();
        let mut target = MemoryTransport::new();
        push_update(&m1, v1.path(), &mut target).unwrap();
        let before = target.snapshot();

        let v2 = standard("b");
        let m2 = build_manifest(v2.path(), "2").unwrap();
        let mut faulty = FaultyTransport::corrupting(target.clone());
        let err = push_update(&m2, v2.path(), &mut faulty).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
        assert_eq!(target.snapshot(), before);
    }

    #[test]
    fn verify_cases() {
        let target = MemoryTransport::new();
        let report = verify_target(&target).unwrap();
        assert!(!report.has_manifest());
        assert_eq!(report.to_string(), "no active manifest\n");

        let dir = standard("a");
        let m = build_manifest(dir.path(), "1").unwrap();
        let mut target = MemoryTransport::new();
        push_update(&m, dir.path(), &mut target).unwrap();
        let modules = m.entries.iter().find(|e| e.role == Role::Modules).unwrap();
        let mut data = target.read(&modules.object_name()).unwrap().unwrap();
        data[0] ^= 0x80;
        target.put(&modules.object_name(), &data);
        let report = verify_target(&target).unwrap();
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.ok).map(|e| e.filename.as_str()).collect();
        assert_eq!(failed, ["modules.squashfs"]);
        assert!(!report.passed());
    }

    #[test]
    fn rollback_swaps() {
        let mut target = MemoryTransport::new();
        assert!(matches!(rollback(&mut target), Err(Error::NoPreviousManifest)));
        assert!(target.list().unwrap().is_empty());

        let v1 = standard("a");
        let m1 = build_manifest(v1.path(), "1").unwrap();
        push_update(&m1, v1.path(), &mut target).unwrap();
        assert!(matches!(rollback(&mut target), Err(Error::NoPreviousManifest)));

        let v2 = standard("b");
        let m2 = build_manifest(v2.path(), "2").unwrap();
        push_update(&m2, v2.path(), &mut target).unwrap();

        let r = rollback(&mut target).unwrap();
        assert_eq!((r.from_version.as_str(), r.to_version.as_str()), ("2", "1"));
        let report = verify_target(&target).unwrap();
        assert!(report.passed());
        assert_eq!(report.manifest.as_deref(), Some(m1.to_text().as_str()));

        rollback(&mut target).unwrap();
        assert_eq!(verify_target(&target).unwrap().manifest.as_deref(), Some(m2.to_text().as_str()));
    }

    #[test]
    fn concurrent_sessions_rejected() {
        let dir = standard("a");
        let m = build_manifest(dir.path(), "1").unwrap();
        let mut first = MemoryTransport::new();
        first.lock().unwrap();
        let mut second = first.clone();
        assert!(matches!(push_update(&m, dir.path(), &mut second), Err(Error::TargetBusy)));
        first.unlock().unwrap();
        push_update(&m, dir.path(), &mut second).unwrap();
    }

    #[test]
    fn local_dir_transport_round_trip() {
        let dir = standard("a");
        let m = build_manifest(dir.path(), "1").unwrap();
        let tmp = TempDir::new().unwrap();
        let mut target = open_target(&format!("file://{}", tmp.path().display())).unwrap();
        push_update(&m, dir.path(), &mut target).unwrap();
        assert!(verify_target(&target).unwrap().passed());
        assert_eq!(
            fs::read_to_string(tmp.path().join(ACTIVE_MANIFEST)).unwrap(),
            m.to_text()
        );
        assert!(!tmp.path().join("staging/.lock").exists());

        let mut other = LocalDirTransport::new(tmp.path()).unwrap();
        other.lock().unwrap();
        assert!(matches!(target.lock(), Err(Error::TargetBusy)));
        let report = recover(&mut target).unwrap();
        assert!(report.lock_cleared);
        target.lock().unwrap();
    }

    #[test]
    fn remote_uris_are_refused() {
        assert!(matches!(open_target("root@my-device-ip"), Err(Error::Usage(_))));
        assert!(matches!(open_target("ssh://host/x"), Err(Error::Usage(_))));
    }
}
