//! Dataset manifest: one CSV row per image.
//!
//! Header (exact): `sample_id,relpath,subset,class_id,split,fold`. `fold` is
//! `-1` for rows without a fold assignment.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NUM_CLASSES;

pub const HEADER: [&str; 6] = ["sample_id", "relpath", "subset", "class_id", "split", "fold"];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["unfertilized", "_PKCa", "N_KCa", "NP_Ca", "NPK_", "NPKCa", "NPKCa+m+s"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest header must be `{expected}`, got `{0}`", expected = HEADER.join(","))]
    Header(String),
    #[error("line {line}: {detail}")]
    Row { line: usize, detail: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("image {path} for sample {id:?} does not exist")]
    MissingImage { id: String, path: String },
}

pub type Result<T, E = ManifestError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    A,
    B,
}

impl Subset {
    pub const ALL: [Subset; 2] = [Subset::A, Subset::B];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::A => "A",
            Subset::B => "B",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "A" => Ok(Subset::A),
            "B" => Ok(Subset::B),
            other => Err(format!("subset must be A or B, got {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be train or test, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub relpath: String,
    pub subset: Subset,
    pub class_id: usize,
    pub split: Split,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that `relpath`s are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.sample_id.clone()));
            }
        }
        Ok(Self { rows, root: root.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.relpath)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Parses manifest CSV text without touching the filesystem.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(ManifestError::Header(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |detail: String| ManifestError::Row { line, detail };
            let class_id: usize = rec[3].parse().map_err(|_| bad(format!("bad class_id {:?}", &rec[3])))?;
            if class_id >= NUM_CLASSES {
                return Err(bad(format!("class_id {class_id} outside 0..{NUM_CLASSES}")));
            }
            let fold: i64 = rec[5].parse().map_err(|_| bad(format!("bad fold {:?}", &rec[5])))?;
            if fold < -1 {
                return Err(bad(format!("fold must be -1 or non-negative, got {fold}")));
            }
            if rec[0].is_empty() {
                return Err(bad("empty sample_id".into()));
            }
            rows.push(ManifestRow {
                sample_id: rec[0].to_string(),
                relpath: rec[1].to_string(),
                subset: rec[2].parse().map_err(bad)?,
                class_id,
                split: rec[4].parse().map_err(bad)?,
                fold: usize::try_from(fold).ok(),
            });
        }
        Self::new(rows, root)
    }

    /// Loads and validates a manifest; `relpath`s resolve against its directory
    /// and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for r in &m.rows {
            let p = m.image_path(r);
            if !p.is_file() {
                return Err(ManifestError::MissingImage { id: r.sample_id.clone(), path: p.display().to_string() });
            }
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            let fold = r.fold.map_or("-1".to_string(), |f| f.to_string());
            w.write_record([
                r.sample_id.as_str(),
                &r.relpath,
                &r.subset.to_string(),
                &r.class_id.to_string(),
                &r.split.to_string(),
                &fold,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "sample_id,relpath,subset,class_id,split,fold\n";

    #[test]
    fn empty_body_is_valid() {
        let m = Manifest::parse(HEAD, "").unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = format!("{HEAD}a,x.ppm,A,0,train,-1\na,y.ppm,B,1,test,-1\n");
        match Manifest::parse(&text, "") {
            Err(ManifestError::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_rows_and_header() {
        assert!(matches!(Manifest::parse("id,relpath\n", ""), Err(ManifestError::Header(_))));
        let bad_class = format!("{HEAD}a,x.ppm,A,7,train,-1\n");
        assert!(matches!(Manifest::parse(&bad_class, ""), Err(ManifestError::Row { line: 2, .. })));
        let bad_subset = format!("{HEAD}a,x.ppm,C,0,train,-1\n");
        assert!(Manifest::parse(&bad_subset, "").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = format!("{HEAD}a,img/a.ppm,A,3,train,2\nb,img/b.ppm,B,6,test,-1\n");
        let m = Manifest::parse(&text, "").unwrap();
        assert_eq!(m.rows[0].fold, Some(2));
        assert_eq!(m.rows[1].fold, None);
        assert_eq!(m.to_csv(), text);
    }

    #[test]
    fn load_requires_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, format!("{HEAD}a,a.ppm,A,0,train,-1\n")).unwrap();
        assert!(matches!(Manifest::load(&path), Err(ManifestError::MissingImage { .. })));
        std::fs::write(dir.path().join("a.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
        assert_eq!(Manifest::load(&path).unwrap().len(), 1);
        assert!(matches!(Manifest::load(&dir.path().join("nope.csv")), Err(ManifestError::Io { .. })));
    }
}
