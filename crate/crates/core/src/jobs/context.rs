use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};

use crate::executor::dir_size;

/// Why a staged file name was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum StageRefusal {
    PathEscape(String),
    Quota { needed: u64, limit: u64 },
}

/// Relative path made only of normal components.
pub(crate) fn safe_relative(name: &str) -> Option<PathBuf> {
    if name.is_empty() || name.contains('\0') {
        return None;
    }
    let p = Path::new(name);
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::Normal(s) => out.push(s),
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

/// Writes `files` into `root`. Every name and the size budget are checked
/// before anything is written; each file then lands via rename so readers
/// never see partial content.
pub(crate) fn stage(
    root: &Path,
    files: &BTreeMap<String, Vec<u8>>,
    limit: u64,
) -> Result<Result<(), StageRefusal>, io::Error> {
    let mut targets = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let Some(rel) = safe_relative(name) else {
            return Ok(Err(StageRefusal::PathEscape(name.clone())));
        };
        // Refuse to follow links the job may have planted.
        let mut cur = root.to_path_buf();
        let parents: Vec<_> = rel.parent().into_iter().flat_map(|p| p.components()).collect();
        for c in parents {
            cur.push(c);
            match cur.symlink_metadata() {
                Ok(m) if m.file_type().is_symlink() || !m.is_dir() => {
                    return Ok(Err(StageRefusal::PathEscape(name.clone())));
                }
                _ => {}
            }
        }
        targets.push((root.join(&rel), bytes));
    }

    let existing = dir_size(root);
    let replaced: u64 = targets
        .iter()
        .filter_map(|(p, _)| p.symlink_metadata().ok())
        .filter(|m| m.is_file())
        .map(|m| m.len())
        .sum();
    let incoming: u64 = targets.iter().map(|(_, b)| b.len() as u64).sum();
    let needed = existing - replaced.min(existing) + incoming;
    if needed > limit {
        return Ok(Err(StageRefusal::Quota { needed, limit }));
    }

    for (path, bytes) in targets {
        let dir = path.parent().expect("joined onto root");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.staging",
            path.file_name().unwrap().to_string_lossy()
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
        fs::rename(&tmp, &path)?;
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_names() {
        assert_eq!(safe_relative("a.py"), Some(PathBuf::from("a.py")));
        assert_eq!(safe_relative("src/a.c"), Some(PathBuf::from("src/a.c")));
        for bad in ["", "../x", "/etc/passwd", "a/../../b", ".", "a\0b"] {
            assert_eq!(safe_relative(bad), None, "{bad:?}");
        }
    }

    #[test]
    fn stages_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let files = BTreeMap::from([
            ("hello.py".to_owned(), b"print(1)".to_vec()),
            ("lib/util.py".to_owned(), b"x = 2".to_vec()),
        ]);
        stage(dir.path(), &files, 100).unwrap().unwrap();
        assert_eq!(fs::read(dir.path().join("hello.py")).unwrap(), b"print(1)");
        assert_eq!(fs::read(dir.path().join("lib/util.py")).unwrap(), b"x = 2");
        // Replacing a file counts only the new size.
        let again = BTreeMap::from([("hello.py".to_owned(), vec![b'a'; 90])]);
        stage(dir.path(), &again, 100).unwrap().unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().flatten().map(|e| e.file_name()).collect();
        assert_eq!(names.len(), 2);
    }

    #[test]
    fn quota_is_checked_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let files = BTreeMap::from([
            ("a".to_owned(), vec![0u8; 60]),
            ("b".to_owned(), vec![0u8; 60]),
        ]);
        assert_eq!(
            stage(dir.path(), &files, 100).unwrap(),
            Err(StageRefusal::Quota { needed: 120, limit: 100 })
        );
        assert!(!dir.path().join("a").exists());
    }

    #[test]
    fn refuses_symlinked_parent() {
        let dir = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink("/tmp", dir.path().join("out")).unwrap();
        let files = BTreeMap::from([("out/x".to_owned(), b"x".to_vec())]);
        assert_eq!(
            stage(dir.path(), &files, 100).unwrap(),
            Err(StageRefusal::PathEscape("out/x".into()))
        );
    }
}
