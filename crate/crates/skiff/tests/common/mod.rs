#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const BUILDROOT_FRAGMENT: &str = "\
BR2_LINUX_KERNEL_DEFCONFIG=\"versatile\"
BR2_LINUX_KERNEL_CUSTOM_VERSION_VALUE=\"5.11.2\"
";

pub const KERNEL_FRAGMENT: &str = "\
CONFIG_EXT3_FS=m
CONFIG_EXT3_FS_SECURITY=y
CONFIG_EXT3_FS_XATTR=y
CONFIG_EXT3_POSIX_ACL=y
CONFIG_EXT4_FS=y
CONFIG_EXT4_FS_SECURITY=y
CONFIG_EXT4_POSIX_ACL=y
";

pub const COMMANDS: &str = "\
format Format a SD card and install bootloader.
install Installs to a formatted SD card.
";

pub const CORE_YAML: &str = "\
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

pub fn write(path: &Path, contents: impl AsRef<[u8]>) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, contents).unwrap();
}

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Layer catalog with a Pi board pair, a core environment layer and an
/// unlisted utility layer. Returns the search root.
pub fn fixture_catalog(base: &Path) -> PathBuf {
    let root = base.join("configs");
    let pi = root.join("pi/common");
    write(&pi.join("metadata/description"), "Raspberry Pi common configuration\n");
    write(&pi.join("metadata/commands"), COMMANDS);
    write(&pi.join("buildroot/pi"), BUILDROOT_FRAGMENT);
    write(&pi.join("root_overlay/etc/hostname"), "skiff-pi\n");
    write(&pi.join("root_overlay/etc/issue"), "SkiffOS\n");
    write(&pi.join("cflags"), "-O2\n");

    let pi4 = root.join("pi/4");
    write(&pi4.join("metadata/description"), "Raspberry Pi 4\n");
    write(&pi4.join("metadata/dependencies"), "pi/common\n");
    write(&pi4.join("root_overlay/etc/hostname"), "skiff-pi4\n");
    write(&pi4.join("uboot/pi4"), "CONFIG_BOOTDELAY=0\n");

    let core = root.join("core/gentoo");
    write(&core.join("metadata/description"), "Gentoo core environment\n");
    write(&core.join("kernel/ext"), KERNEL_FRAGMENT);
    write(&core.join("resources/skiff-core.yaml"), CORE_YAML);
    write(&core.join("kernel_patches/0001-fix.patch"), "--- a\n+++ b\n");

    let hidden = root.join("util/hidden");
    write(&hidden.join("metadata/description"), "Internal helpers\n");
    write(&hidden.join("metadata/unlisted"), "");
    write(&hidden.join("metadata/commands"), "secret A hidden command.\n");
    write(&hidden.join("scripts/noop.sh"), "#!/bin/sh\n");
    root
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Dir,
    File(Vec<u8>),
    Link(PathBuf),
}

/// Every entry below `root` (relative path → kind and content).
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Node> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(root).unwrap().to_path_buf();
        let ft = entry.file_type();
        let node = if ft.is_symlink() {
            Node::Link(fs::read_link(entry.path()).unwrap())
        } else if ft.is_dir() {
            Node::Dir
        } else {
            Node::File(fs::read(entry.path()).unwrap())
        };
        out.insert(rel, node);
    }
    out
}

/// Digest over paths, kinds and contents of a directory tree.
pub fn tree_digest(root: &Path) -> String {
    let mut h = Sha256::new();
    for (rel, node) in read_tree(root) {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        match node {
            Node::Dir => h.update(b"d"),
            Node::File(data) => {
                h.update(b"f");
                h.update((data.len() as u64).to_le_bytes());
                h.update(&data);
            }
            Node::Link(target) => {
                h.update(b"l");
                h.update(target.to_string_lossy().as_bytes());
            }
        }
        h.update([0]);
    }
    hex::encode(h.finalize())
}
