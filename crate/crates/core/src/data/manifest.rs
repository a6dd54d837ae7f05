//! Dataset manifests: a UTF-8 CSV with header
//! `path,count_label,volume_label,split`. Paths are relative to the
//! manifest's directory and may not contain commas.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::io::read_tensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "path,count_label,volume_label,split";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Which label column a task regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelKind {
    #[default]
    Count,
    Volume,
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(LabelKind::Count),
            "volume" => Ok(LabelKind::Volume),
            other => Err(Error::invalid(format!(
                "unknown label kind `{other}` (expected count or volume)"
            ))),
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Count => "count",
            LabelKind::Volume => "volume",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub count_label: u64,
    pub volume_label: u64,
    pub split: Split,
}

impl ImageRecord {
    pub fn label(&self, kind: LabelKind) -> f64 {
        match kind {
            LabelKind::Count => self.count_label as f64,
            LabelKind::Volume => self.volume_label as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub label_kind: LabelKind,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<ImageRecord>,
        label_kind: LabelKind,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            let p = r.image_path.to_string_lossy();
            if p.contains(',') || p.contains('\n') {
                return Err(Error::invalid(format!(
                    "manifest path `{p}` contains a comma or newline"
                )));
            }
            if !seen.insert(r.image_path.clone()) {
                return Err(Error::invalid(format!("duplicate manifest path `{p}`")));
            }
        }
        Ok(Self {
            records,
            label_kind,
            root: root.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_path.display(),
                r.count_label,
                r.volume_label,
                r.split
            ));
        }
        out
    }

    pub fn parse(
        text: &str,
        label_kind: LabelKind,
        root: impl Into<PathBuf>,
        origin: &Path,
    ) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::format(
                    origin,
                    format!("line 1: expected header `{MANIFEST_HEADER}`"),
                ))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let err = |m: String| Error::format(origin, format!("line {}: {m}", i + 1));
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            records.push(ImageRecord {
                image_path: PathBuf::from(fields[0]),
                count_label: fields[1]
                    .parse()
                    .map_err(|e| err(format!("count_label: {e}")))?,
                volume_label: fields[2]
                    .parse()
                    .map_err(|e| err(format!("volume_label: {e}")))?,
                split: fields[3].parse().map_err(|e: Error| err(e.to_string()))?,
            });
        }
        Self::new(records, label_kind, root).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>, label_kind: LabelKind) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, label_kind, root, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn load(&self, record: &ImageRecord) -> Result<Tensor> {
        read_tensor(self.resolve(record))
    }

    /// Images and labels of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let recs = self.split(split);
        let images = recs
            .iter()
            .map(|r| self.load(r))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            images,
            recs.iter().map(|r| r.label(self.label_kind)).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, c: u64, split: Split) -> ImageRecord {
        ImageRecord {
            image_path: PathBuf::from(p),
            count_label: c,
            volume_label: 10 * c,
            split,
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = DatasetManifest::new(
            vec![
                rec("a.sstf", 1, Split::Train),
                rec("b.sstf", 2, Split::Test),
            ],
            LabelKind::Volume,
            "/data",
        )
        .unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("path,count_label,volume_label,split\na.sstf,1,10,train\n"));
        let back =
            DatasetManifest::parse(&csv, LabelKind::Volume, "/data", Path::new("m.csv")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(Split::Test)[0].label(LabelKind::Volume), 20.0);
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        assert!(DatasetManifest::new(
            vec![rec("a", 1, Split::Train), rec("a", 2, Split::Val)],
            LabelKind::Count,
            "."
        )
        .is_err());
        let bad = "path,count_label,volume_label,split\na,1,2\n";
        let err =
            DatasetManifest::parse(bad, LabelKind::Count, ".", Path::new("m.csv")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let bad = "path,count,volume_label,split\n";
        assert!(DatasetManifest::parse(bad, LabelKind::Count, ".", Path::new("m.csv")).is_err());
    }
}
