//! Synthetic catalog and outfit generator with planted style and
//! compatibility structure, plus the hard/soft negative samplers.
//!
//! Feature vectors are laid out in blocks: `[hue | style prototype | one
//! block per style]`. Items in an outfit share a hue cluster (compatibility
//! signal independent of style). Each fine category carries the prototype of
//! the style it is the signature of, and a code that is zero in that style's
//! block and random in the others, so which items look alike depends on the
//! style the comparison is made under.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    save_catalog, Catalog, Category, FeatureSource, HighCategory, Item, Outfit, Split, StyleLabel, StyleSet,
};
use crate::error::{Error, Result};

pub const PLANTED_FILE: &str = "planted_structure.json";
pub const IMAGE_SIZE: u32 = 16;

const STYLE_NAMES: [&str; 8] = [
    "party",
    "outdoor",
    "summer",
    "formal",
    "athleisure",
    "winter",
    "casual",
    "celeb",
];

const FINE_NAMES: [[&str; 6]; 6] = [
    ["tee", "shirt", "blouse", "sweater", "hoodie", "tank"],
    ["jeans", "skirt", "chinos", "shorts", "joggers", "trousers"],
    ["sneakers", "heels", "boots", "sandals", "loafers", "flats"],
    ["watch", "bag", "sunglasses", "belt", "hat", "necklace"],
    ["scarf", "jacket", "blazer", "shrug", "vest", "cardigan"],
    ["dress", "jumpsuit", "gown", "romper", "kaftan", "overall"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Vector,
    Image,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(FeatureMode::Vector),
            "image" => Ok(FeatureMode::Image),
            _ => Err(Error::Config(format!("unknown feature mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub m_styles: usize,
    pub n_high_categories: usize,
    pub fines_per_high: usize,
    pub items_per_fine: usize,
    /// Number of outfit hue clusters.
    pub n_hues: usize,
    pub n_outfits: usize,
    pub d_f: usize,
    pub noise_scale: f64,
    pub hue_scale: f64,
    pub style_scale: f64,
    pub fine_scale: f64,
    /// Affinity of each style for its signature fine category.
    pub signature_weight: f64,
    pub seed: u64,
    pub mode: FeatureMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m_styles: 4,
            n_high_categories: 4,
            fines_per_high: 4,
            items_per_fine: 16,
            n_hues: 4,
            n_outfits: 5000,
            d_f: 48,
            noise_scale: 0.1,
            hue_scale: 0.5,
            style_scale: 1.0,
            fine_scale: 1.0,
            signature_weight: 0.7,
            seed: 7,
            mode: FeatureMode::Vector,
        }
    }
}

impl GenConfig {
    /// Width of each feature block.
    pub fn block(&self) -> usize {
        self.d_f / (self.m_styles + 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m_styles < 2 {
            return bad("m_styles must be at least 2".into());
        }
        if !(2..=HighCategory::COUNT).contains(&self.n_high_categories) {
            return bad(format!("n_high_categories must be in 2..={}", HighCategory::COUNT));
        }
        if self.fines_per_high < 1 || self.items_per_fine < 1 || self.n_hues < 1 || self.n_outfits < 1 {
            return bad("all counts must be at least 1".into());
        }
        if self.items_per_fine < self.n_hues {
            return bad(format!(
                "items_per_fine ({}) must be at least n_hues ({}) so every hue cluster can fill every fine category",
                self.items_per_fine, self.n_hues
            ));
        }
        if self.block() < 1 {
            return bad(format!("d_f must be at least m_styles + 2 = {}", self.m_styles + 2));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("hue_scale", self.hue_scale),
            ("style_scale", self.style_scale),
            ("fine_scale", self.fine_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.signature_weight > 0.0 && self.signature_weight <= 1.0) {
            return bad("signature_weight must be in (0, 1]".into());
        }
        Ok(())
    }
}

/// Rendering input for one item image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub hue: usize,
    pub n_hues: usize,
    /// Global fine-category index (across high categories).
    pub fine: usize,
    /// Owner style index, `None` when no style claims the fine category.
    pub style: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedItem {
    pub id: String,
    pub fine: String,
    pub hue: usize,
    pub owner_style: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedStructure {
    pub styles: Vec<String>,
    pub block: usize,
    pub style_prototypes: Vec<Vec<f64>>,
    pub hue_prototypes: Vec<Vec<f64>>,
    /// Fine-category prototype (fine code plus owner-style prototype).
    pub fine_prototypes: BTreeMap<String, Vec<f64>>,
    /// `affinity[style][fine]`; rows sum to 1 within each high category.
    pub affinity: Vec<BTreeMap<String, f64>>,
    /// `signature[style][high]` = fine category name.
    pub signature: Vec<BTreeMap<HighCategory, String>>,
    pub items: Vec<PlantedItem>,
}

impl PlantedStructure {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PLANTED_FILE);
        let text = serde_json::to_string_pretty(self).expect("planted structure serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PLANTED_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn item(&self, id: &str) -> Option<&PlantedItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Hue cluster of every item, by id.
    pub fn hue_map(&self) -> BTreeMap<String, usize> {
        self.items.iter().map(|i| (i.id.clone(), i.hue)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GenConfig,
    pub catalog: Catalog,
    pub outfits: Vec<Outfit>,
    pub planted: PlantedStructure,
    pub styles: StyleSet,
    /// Rendering specs by catalog position.
    pub specs: Vec<ItemSpec>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Outfit> {
        self.outfits.iter().filter(|o| o.split == split).collect()
    }
}

fn fine_name(high: usize, fine: usize) -> String {
    FINE_NAMES[high]
        .get(fine)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("{}_{fine}", HighCategory::ALL[high].as_str()))
}

fn style_name(i: usize) -> String {
    STYLE_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("style_{i}"))
}

/// Affinity weight for a fine category at `rank` steps from the signature.
fn rank_weight(rank: usize, n_fines: usize, w0: f64) -> f64 {
    match n_fines {
        1 => 1.0,
        2 => {
            if rank == 0 {
                w0
            } else {
                1.0 - w0
            }
        }
        _ => {
            if rank == 0 {
                w0
            } else if rank == n_fines - 1 {
                0.0
            } else {
                let k = n_fines - 2;
                let total: f64 = (0..k).map(|i| 0.5f64.powi(i as i32)).sum();
                (1.0 - w0) * 0.5f64.powi(rank as i32 - 1) / total
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Draw a template of high-level categories from the enabled set.
fn sample_template(rng: &mut ChaCha8Rng, highs: &[HighCategory]) -> Vec<HighCategory> {
    let n = highs.len();
    let target = if rng.random_bool(0.1) {
        2
    } else {
        rng.random_range(n - 1..=n)
    };
    let mut order = highs.to_vec();
    order.shuffle(rng);
    let mut chosen: Vec<HighCategory> = Vec::with_capacity(target);
    for c in order {
        if chosen.len() == target {
            break;
        }
        if chosen.iter().all(|o| !o.conflicts_with(c)) {
            chosen.push(c);
        }
    }
    chosen.sort();
    chosen
}

/// Generate a synthetic dataset. Deterministic given the config.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.m_styles;
    let nf = config.fines_per_high;
    let b = config.block();
    let highs: Vec<HighCategory> = HighCategory::ALL[..config.n_high_categories].to_vec();

    let mut names: Vec<String> = (0..m).map(style_name).collect();
    names.sort();
    let styles = StyleSet::new(names.clone())?;

    let hue_offset = 0;
    let proto_offset = b;
    let style_block = |s: usize| (2 + s) * b;

    let style_protos: Vec<Vec<f64>> = (0..m).map(|_| gaussian(&mut rng, b, config.style_scale)).collect();
    let hue_protos: Vec<Vec<f64>> = (0..config.n_hues)
        .map(|_| gaussian(&mut rng, b, config.hue_scale))
        .collect();

    let signature = |s: usize, c: usize| (s + c) % nf;
    let owner = |c: usize, f: usize| (0..m).find(|&s| signature(s, c) == f);

    // Fine prototypes over the full feature vector.
    let mut fine_protos: Vec<Vec<Vec<f64>>> = Vec::with_capacity(highs.len());
    for c in 0..highs.len() {
        let mut row = Vec::with_capacity(nf);
        for f in 0..nf {
            let mut v = vec![0.0; config.d_f];
            if let Some(s) = owner(c, f) {
                v[proto_offset..proto_offset + b].copy_from_slice(&style_protos[s]);
            }
            for s in 0..m {
                let code = gaussian(&mut rng, b, config.fine_scale);
                if signature(s, c) != f {
                    v[style_block(s)..style_block(s) + b].copy_from_slice(&code);
                }
            }
            row.push(v);
        }
        fine_protos.push(row);
    }

    // affinity[s][c][f]
    let affinity: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|s| {
            (0..highs.len())
                .map(|c| {
                    (0..nf)
                        .map(|f| rank_weight((f + nf - signature(s, c)) % nf, nf, config.signature_weight))
                        .collect()
                })
                .collect()
        })
        .collect();

    // Catalog.
    let mut items = Vec::new();
    let mut specs = Vec::new();
    let mut planted_items = Vec::new();
    // pool[c][f][hue] = catalog positions
    let mut pool = vec![vec![vec![Vec::<usize>::new(); config.n_hues]; nf]; highs.len()];
    for (c, &high) in highs.iter().enumerate() {
        for f in 0..nf {
            for j in 0..config.items_per_fine {
                let hue = j % config.n_hues;
                let idx = items.len();
                let id = format!("i{idx:05}");
                let mut v = fine_protos[c][f].clone();
                for (k, h) in hue_protos[hue].iter().enumerate() {
                    v[hue_offset + k] += h;
                }
                for x in v.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += config.noise_scale * z;
                }
                let features = match config.mode {
                    FeatureMode::Vector => FeatureSource::Vector(v.iter().map(|&x| x as f32).collect()),
                    FeatureMode::Image => FeatureSource::Image(format!("images/{id}.png")),
                };
                items.push(Item {
                    id: id.clone(),
                    category: Category {
                        high,
                        fine: fine_name(high.index(), f),
                    },
                    features,
                });
                specs.push(ItemSpec {
                    hue,
                    n_hues: config.n_hues,
                    fine: c * nf + f,
                    style: owner(c, f),
                });
                planted_items.push(PlantedItem {
                    id,
                    fine: fine_name(high.index(), f),
                    hue,
                    owner_style: owner(c, f),
                });
                pool[c][f][hue].push(idx);
            }
        }
    }
    let catalog = Catalog::new(items)?;

    // Outfits.
    let labels: Vec<StyleLabel> = names
        .iter()
        .enumerate()
        .map(|(index, name)| StyleLabel {
            index,
            name: name.clone(),
        })
        .collect();
    let mut drafts = Vec::with_capacity(config.n_outfits);
    for _ in 0..config.n_outfits {
        let s = rng.random_range(0..m);
        let template = sample_template(&mut rng, &highs);
        let hue = rng.random_range(0..config.n_hues);
        let mut ids = Vec::with_capacity(template.len());
        for high in template {
            let c = highs.iter().position(|&h| h == high).expect("enabled category");
            let f = sample_weighted(&mut rng, &affinity[s][c]);
            let &idx = pool[c][f][hue].choose(&mut rng).expect("validated pool");
            ids.push(catalog.item(idx).id.clone());
        }
        drafts.push((s, ids));
    }
    let n = config.n_outfits;
    let n_train = (0.7 * n as f64).round() as usize;
    let n_valid = (0.2 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let outfits = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (s, items))| Outfit {
            id: format!("o{i:05}"),
            items,
            style: labels[s].clone(),
            split: split[i],
        })
        .collect::<Vec<_>>();
    for o in &outfits {
        catalog.validate_outfit(o)?;
    }

    let mut fine_map = BTreeMap::new();
    for (c, &high) in highs.iter().enumerate() {
        for (f, proto) in fine_protos[c].iter().enumerate() {
            fine_map.insert(fine_name(high.index(), f), proto.clone());
        }
    }
    let planted = PlantedStructure {
        styles: names,
        block: b,
        style_prototypes: style_protos,
        hue_prototypes: hue_protos,
        fine_prototypes: fine_map,
        affinity: (0..m)
            .map(|s| {
                let mut row = BTreeMap::new();
                for (c, &high) in highs.iter().enumerate() {
                    for (f, &a) in affinity[s][c].iter().enumerate() {
                        row.insert(fine_name(high.index(), f), a);
                    }
                }
                row
            })
            .collect(),
        signature: (0..m)
            .map(|s| {
                highs
                    .iter()
                    .enumerate()
                    .map(|(c, &high)| (high, fine_name(high.index(), signature(s, c))))
                    .collect()
            })
            .collect(),
        items: planted_items,
    };
    Ok(Dataset {
        config: config.clone(),
        catalog,
        outfits,
        planted,
        styles,
        specs,
    })
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Write JSONL files, `planted_structure.json` and, in image mode, one PNG
/// per item under `images/`.
pub fn write_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    save_catalog(&data.catalog, &data.outfits, dir)?;
    data.planted.save(dir)?;
    if data.config.mode == FeatureMode::Image {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (item, spec) in data.catalog.items().iter().zip(&data.specs) {
            let path = img_dir.join(format!("{}.png", item.id));
            image_render(spec).save(&path).map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// HSV (all components in [0, 1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([c(r), c(g), c(b)])
}

/// Hue (in [0, 1)) used for a hue cluster.
pub fn cluster_hue(hue: usize, n_hues: usize) -> f64 {
    0.8 * hue as f64 / n_hues.max(1) as f64
}

pub const GLYPH_ROWS: std::ops::Range<u32> = 6..12;
pub const GLYPH_COLS: std::ops::Range<u32> = 5..11;
pub const STRIPE_ROWS: std::ops::Range<u32> = 0..4;

/// Render an item: background hue from the hue cluster, a stripe band at the
/// top from the owner style, and a 6×6 glyph in the centre from the fine
/// category. All marks are brightness variants of the background hue.
pub fn image_render(spec: &ItemSpec) -> RgbImage {
    let h = cluster_hue(spec.hue, spec.n_hues);
    let background = hsv_to_rgb(h, 0.6, 0.8);
    let stripe = hsv_to_rgb(h, 0.6, 0.45);
    let mark = hsv_to_rgb(h, 0.9, 1.0);
    let mut img = RgbImage::from_pixel(IMAGE_SIZE, IMAGE_SIZE, background);
    if let Some(s) = spec.style {
        let period = 2 + s as u32;
        for y in STRIPE_ROWS {
            for x in 0..IMAGE_SIZE {
                if x % period == 0 {
                    img.put_pixel(x, y, stripe);
                }
            }
        }
    }
    // 36 glyph cells; bit k of a per-fine hash decides cell k.
    let code = (spec.fine as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 20;
    for (k, (y, x)) in GLYPH_ROWS
        .flat_map(|y| GLYPH_COLS.map(move |x| (y, x)))
        .enumerate()
    {
        if code >> k & 1 == 1 {
            img.put_pixel(x, y, mark);
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    Soft,
    Hard,
}

impl NegativeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeKind::Soft => "soft",
            NegativeKind::Hard => "hard",
        }
    }
}

impl std::str::FromStr for NegativeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(NegativeKind::Soft),
            "hard" => Ok(NegativeKind::Hard),
            _ => Err(Error::Config(format!("unknown negative kind {s:?}"))),
        }
    }
}

/// Indexes the catalog by high-level and fine category for negative draws.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    by_high: BTreeMap<HighCategory, Vec<usize>>,
    by_fine: BTreeMap<String, Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(catalog: &Catalog) -> Self {
        let mut by_high: BTreeMap<HighCategory, Vec<usize>> = BTreeMap::new();
        let mut by_fine: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in catalog.items().iter().enumerate() {
            by_high.entry(item.category.high).or_default().push(i);
            by_fine.entry(item.category.fine.clone()).or_default().push(i);
        }
        Self { by_high, by_fine }
    }

    pub fn eligible(&self, catalog: &Catalog, replaced: usize, kind: NegativeKind) -> &[usize] {
        let cat = &catalog.item(replaced).category;
        let list = match kind {
            NegativeKind::Soft => self.by_high.get(&cat.high),
            NegativeKind::Hard => self.by_fine.get(&cat.fine),
        };
        list.map(Vec::as_slice).unwrap_or(&[])
    }

    /// Draw `count` distinct negatives for the item at catalog position
    /// `replaced`, never returning the replaced item itself.
    pub fn sample(
        &self,
        catalog: &Catalog,
        replaced: usize,
        kind: NegativeKind,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let pool = self.eligible(catalog, replaced, kind);
        let n = pool.len() - usize::from(pool.contains(&replaced));
        if n < count {
            return Err(Error::Insufficient(format!(
                "{} negatives requested for item {} but only {n} eligible",
                count,
                catalog.item(replaced).id
            )));
        }
        // Sample positions in the pool with the replaced item skipped.
        let skip = pool.iter().position(|&i| i == replaced);
        let picks = rand::seq::index::sample(rng, n, count);
        Ok(picks
            .into_iter()
            .map(|p| match skip {
                Some(s) if p >= s => pool[p + 1],
                _ => pool[p],
            })
            .collect())
    }
}

/// Convenience wrapper over [`NegativeSampler`] taking item ids and a seed.
pub fn sample_negatives(
    catalog: &Catalog,
    outfit: &Outfit,
    replaced_item: &str,
    kind: NegativeKind,
    count: usize,
    seed: u64,
) -> Result<Vec<Item>> {
    if !outfit.contains(replaced_item) {
        return Err(Error::InvalidRequest(format!(
            "item {replaced_item} is not in outfit {}",
            outfit.id
        )));
    }
    let pos = catalog
        .position(replaced_item)
        .ok_or_else(|| Error::UnknownItem(replaced_item.to_string()))?;
    let sampler = NegativeSampler::new(catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler
        .sample(catalog, pos, kind, count, &mut rng)?
        .into_iter()
        .map(|i| catalog.item(i).clone())
        .collect())
}
