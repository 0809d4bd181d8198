use std::path::{Component, Path, PathBuf};

use crate::storage::Target;
use crate::wire::Direction;

/// Map a requested remote name onto the served tree. Returns the target and,
/// for downloads, its size. Anything that could escape `root` is refused.
pub fn resolve(
    root: &Path,
    name: &str,
    direction: Direction,
    overwrite: bool,
) -> Result<(Target, u64), String> {
    if let Some(pseudo) = Target::pseudo(name.trim_start_matches('/')) {
        let t = pseudo?;
        return match (&t, direction) {
            (Target::Zero(n), Direction::Download) => Ok((t.clone(), *n)),
            (Target::Null, Direction::Upload) => Ok((t, 0)),
            _ => Err(format!("{name} cannot be used for {direction}")),
        };
    }
    let rel = confine(name)?;
    let path = root.join(rel);
    match direction {
        Direction::Download => {
            let meta = std::fs::metadata(&path).map_err(|_| format!("no such file: {name}"))?;
            if !meta.is_file() {
                return Err(format!("not a regular file: {name}"));
            }
            Ok((Target::File(path), meta.len()))
        }
        Direction::Upload => {
            let parent_ok = path.parent().is_some_and(|p| p.is_dir());
            if !parent_ok {
                return Err(format!("no such directory for {name}"));
            }
            match std::fs::metadata(&path) {
                Ok(m) if m.is_dir() => Err(format!("is a directory: {name}")),
                Ok(_) if !overwrite => Err(format!("file exists: {name}")),
                _ => Ok((Target::File(path), 0)),
            }
        }
    }
}

/// Strip a leading `/` and accept only plain components.
fn confine(name: &str) -> Result<PathBuf, String> {
    if name.contains('\0') {
        return Err("path contains NUL".into());
    }
    let trimmed = name.trim_start_matches('/');
    let mut out = PathBuf::new();
    for c in Path::new(trimmed).components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return Err(format!("path escapes the served root: {name}")),
        }
    }
    if out.as_os_str().is_empty() {
        return Err("empty path".into());
    }
    Ok(out)
}
