//! Small file helpers shared by the CSV/JSON interfaces.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path) -> Result<(std::path::PathBuf, std::fs::File)> {
    // pid + counter keeps names unique within a process without extra deps
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{}", std::process::id(), n));
    let file = std::fs::File::create(&path)?;
    Ok((path, file))
}

/// Round to 6 significant digits, the serialization precision of the report
/// files.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    (v * scale).round() / scale
}

/// Format with 6 significant digits.
pub fn fmt6(v: f64) -> String {
    format!("{}", sig6(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_rounds() {
        assert_eq!(fmt6(1.2345678), "1.23457");
        assert_eq!(fmt6(0.000123456789), "0.000123457");
        assert_eq!(fmt6(123456789.0), "123457000");
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(-3.14159265), "-3.14159");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
    }
}
