//! The multilevel caption bank: captions tagged with a semantic level and a
//! category, each carrying a precomputed unit-norm text embedding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticLevel {
    Low,
    Mid,
    High,
}

impl fmt::Display for SemanticLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SemanticLevel::Low => "low",
            SemanticLevel::Mid => "mid",
            SemanticLevel::High => "high",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionCategory {
    pub name: String,
    pub level: SemanticLevel,
}

impl CaptionCategory {
    pub fn new(name: impl Into<String>, level: SemanticLevel) -> Self {
        Self {
            name: name.into(),
            level,
        }
    }
}

/// Category names that must be present in every taxonomy.
pub const REQUIRED_CATEGORIES: [&str; 3] = ["ObjectSnap", "SpatialLink", "ThemeTag"];
pub const CATEGORY_COUNT: usize = 10;

/// Ordered list of the ten caption categories. The order is the head order
/// of the encoder and the tie-break order everywhere else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    categories: Vec<CaptionCategory>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        use SemanticLevel::*;
        let categories = [
            ("ObjectSnap", Low),
            ("ColorField", Low),
            ("ClarityCue", Low),
            ("SceneFrame", Mid),
            ("SpatialLink", Mid),
            ("AngleView", Mid),
            ("MoodLens", High),
            ("ThemeTag", High),
            ("ActionPulse", High),
            ("SymbolCue", High),
        ]
        .into_iter()
        .map(|(n, l)| CaptionCategory::new(n, l))
        .collect();
        Self { categories }
    }
}

impl<'de> Deserialize<'de> for Taxonomy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let categories = Vec::<CaptionCategory>::deserialize(d)?;
        Taxonomy::new(categories).map_err(serde::de::Error::custom)
    }
}

impl Taxonomy {
    pub fn new(categories: Vec<CaptionCategory>) -> Result<Self> {
        if categories.len() != CATEGORY_COUNT {
            return Err(Error::Config(format!(
                "taxonomy needs exactly {CATEGORY_COUNT} categories, got {}",
                categories.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &categories {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate category {}", c.name)));
            }
        }
        for required in REQUIRED_CATEGORIES {
            if !seen.contains(required) {
                return Err(Error::Config(format!("taxonomy is missing category {required}")));
            }
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> &[CaptionCategory] {
        &self.categories
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&CaptionCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Category indices ordered Low → Mid → High, taxonomy order within a level.
    pub fn level_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.categories.len()).collect();
        idx.sort_by_key(|&i| (self.categories[i].level, i));
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub id: String,
    pub class_label: usize,
    pub category: String,
    pub level: SemanticLevel,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    class_label: i64,
    category: String,
    level: SemanticLevel,
    text: String,
    embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CaptionBank {
    entries: Vec<CaptionEntry>,
    dim: usize,
    classes: usize,
    taxonomy: Taxonomy,
    by_category: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
}

/// Normalises in f64 and rounds back to f32; vectors already unit-norm to
/// 1e-6 are left untouched so that reloading is bit-exact.
fn normalize_embedding(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return None;
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return Some(v.iter().map(|&x| x as f32).collect());
    }
    Some(v.iter().map(|&x| (x / norm) as f32).collect())
}

impl CaptionBank {
    /// Validates entries against the taxonomy; embeddings are re-normalised.
    pub fn from_entries(entries: Vec<CaptionEntry>, taxonomy: Taxonomy) -> Result<Self> {
        let mut checked = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let emb: Vec<f64> = e.embedding.iter().map(|&x| f64::from(x)).collect();
            checked.push((
                i + 1,
                RawEntry {
                    id: e.id,
                    class_label: e.class_label as i64,
                    category: e.category,
                    level: e.level,
                    text: e.text,
                    embedding: emb,
                },
            ));
        }
        Self::build(checked, taxonomy)
    }

    fn build(raw: Vec<(usize, RawEntry)>, taxonomy: Taxonomy) -> Result<Self> {
        let mut entries = Vec::with_capacity(raw.len());
        let mut by_id = HashMap::new();
        let mut dim = None;
        for (line, r) in raw {
            let schema = |message: String| Error::Schema { line, message };
            let category = taxonomy
                .get(&r.category)
                .ok_or_else(|| schema(format!("unknown category {:?}", r.category)))?;
            if category.level != r.level {
                return Err(schema(format!(
                    "category {} belongs to level {}, entry says {}",
                    r.category, category.level, r.level
                )));
            }
            if r.class_label < 0 {
                return Err(schema(format!("negative class_label {}", r.class_label)));
            }
            let d = *dim.get_or_insert(r.embedding.len());
            if r.embedding.len() != d {
                return Err(Error::Dimension(format!(
                    "caption {} has embedding length {} but the bank dimension is {d}",
                    r.id,
                    r.embedding.len()
                )));
            }
            let embedding = normalize_embedding(&r.embedding)
                .ok_or_else(|| schema(format!("caption {} has a zero or non-finite embedding", r.id)))?;
            if by_id.insert(r.id.clone(), entries.len()).is_some() {
                return Err(schema(format!("duplicate caption id {}", r.id)));
            }
            entries.push(CaptionEntry {
                id: r.id,
                class_label: r.class_label as usize,
                category: r.category,
                level: r.level,
                text: r.text,
                embedding,
            });
        }
        let dim = dim.ok_or_else(|| Error::Data("caption bank is empty".into()))?;
        if dim < 2 {
            return Err(Error::Dimension(format!("embedding dimension {dim} is below 2")));
        }
        let classes = entries.iter().map(|e| e.class_label).max().map_or(0, |m| m + 1);

        let mut present = vec![vec![false; taxonomy.len()]; classes];
        let mut by_category = vec![Vec::new(); taxonomy.len()];
        for (i, e) in entries.iter().enumerate() {
            let k = taxonomy.index_of(&e.category).expect("validated above");
            present[e.class_label][k] = true;
            by_category[k].push(i);
        }
        let gaps: Vec<(usize, String)> = (0..classes)
            .flat_map(|c| {
                let present = &present;
                taxonomy
                    .names()
                    .enumerate()
                    .filter(move |(k, _)| !present[c][*k])
                    .map(move |(_, n)| (c, n.to_string()))
            })
            .collect();
        if !gaps.is_empty() {
            return Err(Error::Coverage(gaps));
        }
        for idx in &mut by_category {
            idx.sort_by(|&a, &b| entries[a].id.cmp(&entries[b].id));
        }
        Ok(Self {
            entries,
            dim,
            classes,
            taxonomy,
            by_category,
            by_id,
        })
    }

    pub fn entries(&self) -> &[CaptionEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one category, ordered by id.
    pub fn category_subset(&self, category: &str) -> Result<Vec<&CaptionEntry>> {
        let k = self
            .taxonomy
            .index_of(category)
            .ok_or_else(|| Error::Lookup(format!("unknown category {category}")))?;
        Ok(self.by_category[k].iter().map(|&i| &self.entries[i]).collect())
    }

    /// Entries of one category and class, ordered by id.
    pub fn captions_for(&self, class_label: usize, category: &str) -> Result<Vec<&CaptionEntry>> {
        Ok(self
            .category_subset(category)?
            .into_iter()
            .filter(|e| e.class_label == class_label)
            .collect())
    }

    pub fn get(&self, id: &str) -> Result<&CaptionEntry> {
        self.by_id
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Lookup(format!("unknown caption id {id}")))
    }

    pub fn class_of(&self, id: &str) -> Result<usize> {
        self.get(id).map(|e| e.class_label)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(f);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }
}

pub fn load_bank(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<CaptionBank> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RawEntry = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        raw.push((i + 1, entry));
    }
    CaptionBank::build(raw, taxonomy.clone())
}
