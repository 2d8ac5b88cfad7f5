//! Content-hash listing of every artifact in an output directory.

use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::fsutil;

pub const MANIFEST: &str = "MANIFEST";

/// Temporary and partial files never enter the manifest.
fn skipped(name: &str) -> bool {
    name == MANIFEST || name.starts_with('.') || name.ends_with(".partial")
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if skipped(&name) {
            continue;
        }
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// `(relative path, sha256)` for every artifact, sorted by path.
pub fn entries(root: &Path) -> io::Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(root.join(&f))?;
        let name = f.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.push((name, hex(&Sha256::digest(&bytes))));
    }
    out.sort();
    Ok(out)
}

/// Rewrites `root/MANIFEST` as `<sha256>  <path>` lines.
pub fn write(root: &Path) -> io::Result<()> {
    let text: String = entries(root)?
        .into_iter()
        .map(|(p, h)| format!("{h}  {p}\n"))
        .collect();
    fsutil::write_atomic(&root.join(MANIFEST), text.as_bytes())
}
