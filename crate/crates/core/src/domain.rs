//! Catalog and outfit data model plus JSONL I/O.
//!
//! A dataset directory holds `items.jsonl` and `outfits.jsonl`, one JSON
//! object per line. Style indices are assigned by sorting the distinct style
//! names, so the same set of names always yields the same indices.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const OUTFITS_FILE: &str = "outfits.jsonl";

/// Largest outfit: one item per high-level category.
pub const MAX_OUTFIT_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighCategory {
    Topwear,
    Bottomwear,
    Footwear,
    Accessory,
    ClothingAccessory,
    Wholebody,
}

impl HighCategory {
    pub const COUNT: usize = 6;
    pub const ALL: [HighCategory; 6] = [
        HighCategory::Topwear,
        HighCategory::Bottomwear,
        HighCategory::Footwear,
        HighCategory::Accessory,
        HighCategory::ClothingAccessory,
        HighCategory::Wholebody,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HighCategory::Topwear => "topwear",
            HighCategory::Bottomwear => "bottomwear",
            HighCategory::Footwear => "footwear",
            HighCategory::Accessory => "accessory",
            HighCategory::ClothingAccessory => "clothing_accessory",
            HighCategory::Wholebody => "wholebody",
        }
    }

    /// Whole-body items replace both top and bottom wear.
    pub fn conflicts_with(self, other: HighCategory) -> bool {
        use HighCategory::*;
        matches!(
            (self, other),
            (Wholebody, Topwear) | (Wholebody, Bottomwear) | (Topwear, Wholebody) | (Bottomwear, Wholebody)
        )
    }
}

impl fmt::Display for HighCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HighCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::InvalidTemplate(format!("unknown high-level category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Category {
    pub high: HighCategory,
    pub fine: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Vector(Vec<f32>),
    /// Path relative to the dataset directory.
    Image(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub category: Category,
    pub features: FeatureSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleLabel {
    pub index: usize,
    pub name: String,
}

/// The `m` named styles, indexed in sorted-name order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSet {
    names: Vec<String>,
}

impl StyleSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        if names.len() != n {
            return Err(Error::Config("style names must be unique".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn label(&self, name: &str) -> Result<StyleLabel> {
        self.index_of(name)
            .map(|index| StyleLabel {
                index,
                name: name.to_string(),
            })
            .ok_or_else(|| Error::UnknownStyle(name.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// An unordered set of items with a style and split. Equality ignores item
/// order.
#[derive(Clone, Debug)]
pub struct Outfit {
    pub id: String,
    pub items: Vec<String>,
    pub style: StyleLabel,
    pub split: Split,
}

impl PartialEq for Outfit {
    fn eq(&self, other: &Self) -> bool {
        let a: BTreeSet<&String> = self.items.iter().collect();
        let b: BTreeSet<&String> = other.items.iter().collect();
        self.id == other.id
            && self.style == other.style
            && self.split == other.split
            && self.items.len() == other.items.len()
            && a == b
    }
}

impl Outfit {
    pub fn contains(&self, item: &str) -> bool {
        self.items.iter().any(|i| i == item)
    }
}

/// High-level categories to fill, in order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template(Vec<HighCategory>);

impl Template {
    pub fn new(slots: Vec<HighCategory>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::InvalidTemplate("template is empty".into()));
        }
        let mut seen = HashSet::new();
        for &c in &slots {
            if !seen.insert(c) {
                return Err(Error::InvalidTemplate(format!("category {c} repeated")));
            }
        }
        for (i, &a) in slots.iter().enumerate() {
            if let Some(&b) = slots[i + 1..].iter().find(|&&b| a.conflicts_with(b)) {
                return Err(Error::InvalidTemplate(format!("{a} cannot be combined with {b}")));
            }
        }
        Ok(Self(slots))
    }

    pub fn slots(&self) -> &[HighCategory] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: HighCategory) -> bool {
        self.0.contains(&c)
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let slots = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(HighCategory::from_str)
            .collect::<Result<Vec<_>>>()?;
        Template::new(slots)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|c| c.as_str()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Validated, immutable item catalog.
#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<String, usize>,
    feature_dim: Option<usize>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut fine_to_high: HashMap<&str, HighCategory> = HashMap::new();
        let mut feature_dim = None;
        let mut has_vector = false;
        let mut has_image = false;
        for (i, item) in items.iter().enumerate() {
            let bad = |message: String| Error::InvalidItem {
                item: item.id.clone(),
                message,
            };
            if item.id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(bad("duplicate item id".into()));
            }
            match fine_to_high.get(item.category.fine.as_str()) {
                Some(&h) if h != item.category.high => {
                    return Err(bad(format!(
                        "fine category {:?} already mapped to {h}, not {}",
                        item.category.fine, item.category.high
                    )))
                }
                _ => {
                    fine_to_high.insert(&item.category.fine, item.category.high);
                }
            }
            match &item.features {
                FeatureSource::Vector(v) => {
                    has_vector = true;
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(bad("non-finite feature".into()));
                    }
                    match feature_dim {
                        None => feature_dim = Some(v.len()),
                        Some(d) if d != v.len() => {
                            return Err(bad(format!("feature dimension {} differs from catalog dimension {d}", v.len())))
                        }
                        _ => {}
                    }
                }
                FeatureSource::Image(p) => {
                    has_image = true;
                    if p.is_empty() {
                        return Err(bad("empty image path".into()));
                    }
                }
            }
        }
        if has_vector && has_image {
            return Err(Error::InvalidItem {
                item: "<catalog>".into(),
                message: "catalog mixes vector and image features".into(),
            });
        }
        Ok(Self {
            items,
            index,
            feature_dim,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    /// Vector feature dimension, `None` for image catalogs.
    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    pub fn is_image_mode(&self) -> bool {
        self.items
            .first()
            .is_some_and(|i| matches!(i.features, FeatureSource::Image(_)))
    }

    /// Indices of items in a high-level category, catalog order.
    pub fn in_high(&self, high: HighCategory) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].category.high == high)
            .collect()
    }

    /// Distinct fine categories per high-level category, sorted.
    pub fn fine_categories(&self) -> Vec<(HighCategory, String)> {
        let set: BTreeSet<(HighCategory, String)> = self
            .items
            .iter()
            .map(|i| (i.category.high, i.category.fine.clone()))
            .collect();
        set.into_iter().collect()
    }

    /// Check an outfit against the catalog and the outfit invariants.
    pub fn validate_outfit(&self, outfit: &Outfit) -> Result<()> {
        let bad = |message: String| Error::InvalidOutfit {
            outfit: outfit.id.clone(),
            message,
        };
        if outfit.items.len() < 2 {
            return Err(bad(format!("{} item(s); at least 2 required", outfit.items.len())));
        }
        if outfit.items.len() > MAX_OUTFIT_LEN {
            return Err(bad(format!("{} items; at most {MAX_OUTFIT_LEN} allowed", outfit.items.len())));
        }
        let mut ids = HashSet::new();
        let mut cats: Vec<HighCategory> = Vec::new();
        for id in &outfit.items {
            if !ids.insert(id) {
                return Err(bad(format!("duplicate item id {id}")));
            }
            let item = self.get(id).ok_or_else(|| Error::DanglingReference {
                outfit: outfit.id.clone(),
                item: id.clone(),
            })?;
            let c = item.category.high;
            if cats.contains(&c) {
                return Err(bad(format!("more than one {c} item")));
            }
            if let Some(&other) = cats.iter().find(|&&o| o.conflicts_with(c)) {
                return Err(bad(format!("{c} cannot be combined with {other}")));
            }
            cats.push(c);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    high_cat: String,
    fine_cat: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct OutfitRecord {
    id: String,
    items: Vec<String>,
    style: String,
    split: String,
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Load `items.jsonl` and `outfits.jsonl` from a dataset directory.
pub fn load_catalog(dir: impl AsRef<Path>) -> Result<(Catalog, Vec<Outfit>)> {
    let dir = dir.as_ref();
    let items_path = dir.join(ITEMS_FILE);
    let items_name = items_path.display().to_string();
    let mut items = Vec::new();
    for (line, rec) in read_jsonl::<ItemRecord>(&items_path)? {
        let parse_err = |message: String| Error::Parse {
            file: items_name.clone(),
            line,
            message,
        };
        let high = HighCategory::from_str(&rec.high_cat).map_err(|e| parse_err(e.to_string()))?;
        let features = match (rec.features, rec.image) {
            (Some(v), None) => FeatureSource::Vector(v),
            (None, Some(p)) => FeatureSource::Image(p),
            _ => return Err(parse_err("exactly one of \"features\" or \"image\" is required".into())),
        };
        items.push(Item {
            id: rec.id,
            category: Category {
                high,
                fine: rec.fine_cat,
            },
            features,
        });
    }
    let catalog = Catalog::new(items)?;

    let outfits_path = dir.join(OUTFITS_FILE);
    let outfits_name = outfits_path.display().to_string();
    let records = if outfits_path.exists() {
        read_jsonl::<OutfitRecord>(&outfits_path)?
    } else {
        Vec::new()
    };
    let styles = StyleSet::new(
        records
            .iter()
            .map(|(_, r)| r.style.clone())
            .collect::<BTreeSet<_>>(),
    )?;
    let mut seen = HashSet::new();
    let mut outfits = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let split = Split::from_str(&rec.split).map_err(|e| Error::Parse {
            file: outfits_name.clone(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::InvalidOutfit {
                outfit: rec.id,
                message: "duplicate outfit id".into(),
            });
        }
        let outfit = Outfit {
            style: styles.label(&rec.style)?,
            id: rec.id,
            items: rec.items,
            split,
        };
        catalog.validate_outfit(&outfit)?;
        outfits.push(outfit);
    }
    Ok((catalog, outfits))
}

/// Write a dataset directory. Output order follows the inputs, so identical
/// inputs give byte-identical files.
pub fn save_catalog(catalog: &Catalog, outfits: &[Outfit], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(ITEMS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for item in catalog.items() {
        let (features, image) = match &item.features {
            FeatureSource::Vector(v) => (Some(v.clone()), None),
            FeatureSource::Image(p) => (None, Some(p.clone())),
        };
        let rec = ItemRecord {
            id: item.id.clone(),
            high_cat: item.category.high.as_str().to_string(),
            fine_cat: item.category.fine.clone(),
            features,
            image,
        };
        serde_json::to_writer(&mut w, &rec).expect("item record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(OUTFITS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for o in outfits {
        let rec = OutfitRecord {
            id: o.id.clone(),
            items: o.items.clone(),
            style: o.style.name.clone(),
            split: o.split.as_str().to_string(),
        };
        serde_json::to_writer(&mut w, &rec).expect("outfit record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Style set implied by a list of outfits.
pub fn styles_of(outfits: &[Outfit]) -> Result<StyleSet> {
    StyleSet::new(outfits.iter().map(|o| o.style.name.clone()).collect::<BTreeSet<_>>())
}
