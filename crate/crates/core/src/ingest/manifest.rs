use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BrandId, Model};

pub const MANIFEST_COLUMNS: [&str; 4] = ["image_id", "path", "brand", "split"];
pub const ANNOTATION_COLUMNS: [&str; 3] = ["image_id", "group", "annotators"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

/// Human logo-visibility label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogoGroup {
    Logo,
    RepeatedLogo,
    NoLogo,
}

impl LogoGroup {
    pub const ALL: [LogoGroup; 3] = [LogoGroup::Logo, LogoGroup::RepeatedLogo, LogoGroup::NoLogo];

    pub fn as_str(self) -> &'static str {
        match self {
            LogoGroup::Logo => "logo",
            LogoGroup::RepeatedLogo => "repeated_logo",
            LogoGroup::NoLogo => "no_logo",
        }
    }
}

impl fmt::Display for LogoGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogoGroup {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "logo" => Ok(LogoGroup::Logo),
            "repeated_logo" => Ok(LogoGroup::RepeatedLogo),
            "no_logo" => Ok(LogoGroup::NoLogo),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// As written in the manifest; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub brand: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub category: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Brand of every entry, in manifest order; fails on labels the model lacks.
    pub fn brand_ids(&self, model: &Model) -> Result<Vec<BrandId>> {
        self.entries
            .iter()
            .map(|e| model.brand_by_label(&e.brand).ok_or_else(|| Error::UnknownBrand(e.brand.clone())))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# category: {}\n", self.category);
        out.push_str(&MANIFEST_COLUMNS.join(","));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.image_id,
                e.path.display(),
                e.brand,
                e.split.as_str()
            ));
        }
        out
    }
}

type Rows = Vec<(u64, csv::StringRecord)>;

fn read_table(path: &Path, columns: &[&str]) -> Result<(Option<String>, Rows)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let category = text
        .lines()
        .next()
        .and_then(|l| l.trim().strip_prefix('#'))
        .and_then(|l| l.trim().strip_prefix("category:"))
        .map(|c| c.trim().to_string());
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let table_err = |line: u64, message: String| Error::Table {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| table_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != columns {
        return Err(table_err(
            1,
            format!("expected header `{}`, found `{}`", columns.join(","), names.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            table_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record));
    }
    Ok((category, rows))
}

/// Reads an `image_id,path,brand,split` CSV. An optional first line
/// `# category: <name>` sets the category tag.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let (category, rows) = read_table(path, &MANIFEST_COLUMNS)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let image_id = rec[0].to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: image_id,
            });
        }
        let split = rec[3].parse().map_err(|_| Error::UnknownSplit {
            path: path.to_path_buf(),
            line,
            token: rec[3].to_string(),
        })?;
        entries.push(ManifestEntry {
            image_id,
            path: PathBuf::from(&rec[1]),
            brand: rec[2].to_string(),
            split,
        });
    }
    Ok(DatasetManifest {
        category: category.unwrap_or_else(|| "uncategorized".into()),
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub group: LogoGroup,
    pub annotators: u32,
}

/// Majority-voted logo-visibility labels, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationSet {
    pub entries: Vec<(String, Annotation)>,
}

impl AnnotationSet {
    pub fn get(&self, image_id: &str) -> Option<Annotation> {
        self.entries.iter().find(|(id, _)| id == image_id).map(|(_, a)| *a)
    }

    pub fn as_map(&self) -> std::collections::HashMap<&str, Annotation> {
        self.entries.iter().map(|(id, a)| (id.as_str(), *a)).collect()
    }

    /// Every annotated id must exist in the manifest.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let ids: HashSet<&str> = manifest.entries.iter().map(|e| e.image_id.as_str()).collect();
        match self.entries.iter().find(|(id, _)| !ids.contains(id.as_str())) {
            Some((id, _)) => Err(Error::Config(format!("annotated image `{id}` is not in the manifest"))),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = ANNOTATION_COLUMNS.join(",");
        out.push('\n');
        for (id, a) in &self.entries {
            out.push_str(&format!("{id},{},{}\n", a.group, a.annotators));
        }
        out
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let (_, rows) = read_table(path, &ANNOTATION_COLUMNS)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        let group = rec[1].parse().map_err(|_| Error::UnknownGroup {
            path: path.to_path_buf(),
            line,
            token: rec[1].to_string(),
        })?;
        let annotators = rec[2].parse().map_err(|_| Error::Table {
            path: path.to_path_buf(),
            line,
            message: format!("annotator count `{}` is not a non-negative integer", &rec[2]),
        })?;
        entries.push((id, Annotation { group, annotators }));
    }
    Ok(AnnotationSet { entries })
}
