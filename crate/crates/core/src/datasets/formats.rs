use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPCD_MAGIC: &[u8; 4] = b"SPCD";
pub const SPCD_VERSION: u32 = 1;

/// Reads whitespace-separated `x y z` lines; blank lines and lines starting
/// with `#` are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

pub(crate) fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0f32; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f32 = f
                .parse()
                .map_err(|_| parse_err(i + 1, format!("'{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(i + 1, format!("non-finite coordinate '{f}'")));
            }
            *slot = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::format(format!("{} contains no points", path.display())));
    }
    PointCloud::new(points)
}

/// One point per line; the shortest decimal form that reads back exactly.
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_names: Vec<String>,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// A directory holding `manifest.json` and one `.xyz` file per cloud.
    Manifest,
    /// A single packed binary file.
    Spcd,
}

/// Writes `ds` to `path` in the requested form.
pub fn save_dataset(ds: &LabeledDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    match format {
        DatasetFormat::Manifest => write_manifest_dataset(ds, path),
        DatasetFormat::Spcd => write_spcd(ds, path),
    }
}

/// Loads a manifest directory, or an SPCD file when `path` is a file.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    if path.is_dir() {
        read_manifest_dataset(path)
    } else {
        read_spcd(path)
    }
}

pub fn write_manifest_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for ((cloud, &label), id) in ds.clouds.iter().zip(&ds.labels).zip(&ds.ids) {
        let file = format!("{id}.xyz");
        write_xyz(cloud, &dir.join(&file))?;
        entries.push(ManifestEntry { file, label });
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_manifest_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut clouds = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut ids = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let file: PathBuf = dir.join(&entry.file);
        if !file.is_file() {
            return Err(Error::format(format!(
                "manifest {} references missing file {}",
                path.display(),
                entry.file
            )));
        }
        clouds.push(read_xyz(&file)?);
        labels.push(entry.label);
        let stem = Path::new(&entry.file).file_stem().and_then(|s| s.to_str()).unwrap_or(&entry.file);
        ids.push(stem.to_string());
    }
    LabeledDataset::new(clouds, labels, manifest.class_names, ids)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Packed layout, all integers little-endian:
/// `SPCD`, `u32` version, `u32` class count, `u64` cloud count,
/// `u32` point count per cloud, `u32` label per cloud, length-prefixed
/// (`u32`) UTF-8 class names then sample ids, then every coordinate as `f32`.
pub fn write_spcd(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let total: usize = ds.clouds.iter().map(PointCloud::len).sum();
    let mut out = Vec::with_capacity(32 + 8 * ds.len() + 12 * total);
    out.extend_from_slice(SPCD_MAGIC);
    out.extend_from_slice(&SPCD_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for c in &ds.clouds {
        out.extend_from_slice(&(c.len() as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for s in ds.class_names.iter().chain(&ds.ids) {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    for c in &ds.clouds {
        for v in c.points().iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_spcd(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: &str| Error::format(format!("{}: {m}", path.display()));
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4).ok_or_else(|| fail("truncated"))? != SPCD_MAGIC {
        return Err(fail("not an SPCD file (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| fail("truncated"))?;
    if version != SPCD_VERSION {
        return Err(fail(&format!("unsupported SPCD version {version}")));
    }
    let classes = r.u32().ok_or_else(|| fail("truncated"))? as usize;
    let n = r.u64().ok_or_else(|| fail("truncated"))?;
    let n = usize::try_from(n).map_err(|_| fail("cloud count overflows"))?;
    if n > bytes.len() {
        return Err(fail("cloud count exceeds file size"));
    }
    let counts: Vec<usize> = (0..n)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| fail("truncated point counts"))?;
    let labels: Vec<usize> = (0..n)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| fail("truncated labels"))?;
    let mut strings = Vec::with_capacity(classes + n);
    for _ in 0..classes + n {
        let len = r.u32().ok_or_else(|| fail("truncated string table"))? as usize;
        let raw = r.take(len).ok_or_else(|| fail("truncated string table"))?;
        strings.push(String::from_utf8(raw.to_vec()).map_err(|_| fail("string is not UTF-8"))?);
    }
    let ids = strings.split_off(classes);
    let mut clouds = Vec::with_capacity(n);
    for (i, &count) in counts.iter().enumerate() {
        let raw = r
            .take(count.checked_mul(12).ok_or_else(|| fail("point count overflows"))?)
            .ok_or_else(|| fail(&format!("truncated inside cloud {i}")))?;
        let pts: Vec<[f32; 3]> = raw
            .chunks_exact(12)
            .map(|c| [0, 1, 2].map(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"))))
            .collect();
        clouds.push(PointCloud::new(pts).map_err(|e| fail(&format!("cloud {i}: {e}")))?);
    }
    if r.at != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    LabeledDataset::new(clouds, labels, strings, ids).map_err(|e| fail(&e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
