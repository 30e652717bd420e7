use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::image::{load_image, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub class: usize,
}

/// Per-channel pixel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

/// Image list of one split, laid out as `root/<split>/<class>/<file>`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Pixel statistics of the decodable images of this split.
    pub stats: ChannelStats,
    pub warnings: Vec<String>,
}

const HEADER: &str = "# vprior-manifest v1";

fn sorted_dir(path: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Scans `root/<split>`; classes are indexed by sorted directory name and
/// entries are ordered by path.
pub fn load_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(Error::io(
            &split_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "split directory not found"),
        ));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for class_dir in sorted_dir(&split_dir)? {
        if !class_dir.path().is_dir() {
            continue;
        }
        let name = class_dir.file_name().to_string_lossy().into_owned();
        let class = class_names.len();
        let mut count = 0;
        for file in sorted_dir(&class_dir.path())? {
            if file.path().is_file() {
                entries.push(ManifestEntry {
                    path: PathBuf::from(split).join(&name).join(file.file_name()),
                    class,
                });
                count += 1;
            }
        }
        if count == 0 {
            let msg = format!("class directory {name} is empty");
            warn!("{msg}");
            warnings.push(msg);
        }
        class_names.push(name);
    }
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        class_names,
        entries,
        stats: ChannelStats::default(),
        warnings,
    };
    manifest.stats = manifest.compute_stats();
    Ok(manifest)
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn absolute_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Decodes every entry; undecodable files are skipped and logged.
    pub fn decode(&self) -> Vec<(Image, usize)> {
        self.entries
            .iter()
            .filter_map(|e| match load_image(&self.absolute_path(e)) {
                Ok(img) => Some((img, e.class)),
                Err(err) => {
                    warn!("skipping {}: {err}", e.path.display());
                    None
                }
            })
            .collect()
    }

    fn compute_stats(&mut self) -> ChannelStats {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for (img, _) in self.decode() {
            let hw = img.height * img.width;
            for c in 0..3 {
                for &v in &img.data[c * hw..(c + 1) * hw] {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
            count += hw;
        }
        if count == 0 {
            return ChannelStats::default();
        }
        let mut stats = ChannelStats::default();
        for c in 0..3 {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            stats.mean[c] = mean as f32;
            stats.std[c] = var.sqrt().max(1e-3) as f32;
        }
        stats
    }

    /// Errors if the two manifests share any image path.
    pub fn check_disjoint(&self, other: &DatasetManifest) -> Result<()> {
        let mine: std::collections::HashSet<_> = self.entries.iter().map(|e| self.absolute_path(e)).collect();
        if let Some(e) = other.entries.iter().find(|e| mine.contains(&other.absolute_path(e))) {
            return Err(Error::Validation(format!(
                "{} appears in both {} and {}",
                e.path.display(),
                self.split,
                other.split
            )));
        }
        Ok(())
    }

    /// Metadata header followed by one `path<TAB>class` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: &[f32; 3]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "# root: {}", self.root.display());
        let _ = writeln!(out, "# split: {}", self.split);
        let _ = writeln!(out, "# classes: {}", self.class_names.join(","));
        let _ = writeln!(out, "# mean: {}", join(&self.stats.mean));
        let _ = writeln!(out, "# std: {}", join(&self.stats.std));
        for w in &self.warnings {
            let _ = writeln!(out, "# warning: {w}");
        }
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.path.display(), e.class);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Validation(format!("manifest: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut m = DatasetManifest {
            root: PathBuf::new(),
            split: String::new(),
            class_names: Vec::new(),
            entries: Vec::new(),
            stats: ChannelStats::default(),
            warnings: Vec::new(),
        };
        let triple = |v: &str| -> Result<[f32; 3]> {
            let parts: Vec<f32> = v
                .split(',')
                .map(|p| p.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad statistic {v:?}: {e}")))?;
            parts.try_into().map_err(|_| bad(format!("expected 3 values in {v:?}")))
        };
        for line in lines {
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once(": ").unwrap_or((meta, ""));
                match key {
                    "root" => m.root = PathBuf::from(value),
                    "split" => m.split = value.to_string(),
                    "classes" => {
                        m.class_names = if value.is_empty() {
                            Vec::new()
                        } else {
                            value.split(',').map(str::to_string).collect()
                        }
                    }
                    "mean" => m.stats.mean = triple(value)?,
                    "std" => m.stats.std = triple(value)?,
                    "warning" => m.warnings.push(value.to_string()),
                    _ => {}
                }
                continue;
            }
            let (path, class) = line.split_once('\t').ok_or_else(|| bad(format!("bad entry line {line:?}")))?;
            let class: usize = class.parse().map_err(|e| bad(format!("bad class in {line:?}: {e}")))?;
            if class >= m.class_names.len() {
                return Err(bad(format!("class {class} out of range")));
            }
            m.entries.push(ManifestEntry {
                path: PathBuf::from(path),
                class,
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{Rgb, RgbImage};

    fn write_tree(root: &Path, split: &str, classes: &[&str], per_class: usize) {
        for (ci, c) in classes.iter().enumerate() {
            let dir = root.join(split).join(c);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let v = (40 * ci + 10 * i) as u8;
                RgbImage::from_pixel(4, 4, Rgb([v, v, 255 - v]))
                    .save(dir.join(format!("{i}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn two_classes_three_images() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["b", "a"], 3);
        let m = load_manifest(dir.path(), "train").unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.class_count(), 2);
        assert_eq!(m.class_names, vec!["a", "b"]);
        assert_eq!(m.entries[0].class, 0);
        assert!(m.entries[0].path.starts_with("train/a"));
        assert_eq!(m, load_manifest(dir.path(), "train").unwrap());
    }

    #[test]
    fn missing_split_and_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path(), "val"), Err(Error::Io { .. })));
        write_tree(dir.path(), "train", &["a"], 1);
        fs::create_dir_all(dir.path().join("train/empty")).unwrap();
        let m = load_manifest(dir.path(), "train").unwrap();
        assert_eq!(m.class_count(), 2);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn text_round_trip_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["x", "y"], 2);
        let m = load_manifest(dir.path(), "train").unwrap();
        let back = DatasetManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        // Blue channel is 255 - red, so the means sum to one.
        assert!((m.stats.mean[0] + m.stats.mean[2] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn disjoint_splits() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["a"], 2);
        write_tree(dir.path(), "val", &["a"], 2);
        let train = load_manifest(dir.path(), "train").unwrap();
        let val = load_manifest(dir.path(), "val").unwrap();
        train.check_disjoint(&val).unwrap();
        assert!(train.check_disjoint(&train).is_err());
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["a"], 2);
        fs::write(dir.path().join("train/a/zz.png"), b"not an image").unwrap();
        let m = load_manifest(dir.path(), "train").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.decode().len(), 2);
    }
}
