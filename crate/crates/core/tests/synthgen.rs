mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylefit::domain::{load_catalog, Split};
use stylefit::encoder::FeatureTable;
use stylefit::synthgen::{cluster_hue, generate, write_dataset, FeatureMode, GenConfig, NegativeKind, NegativeSampler, PlantedStructure, IMAGE_SIZE};

fn config(n_outfits: usize) -> GenConfig {
    GenConfig {
        n_outfits,
        ..GenConfig::default()
    }
}

/// Hue in [0, 1) of an RGB triple with components in [0, 1].
fn rgb_hue(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn same_seed_same_dataset() {
    let a = generate(&config(500)).unwrap();
    let b = generate(&config(500)).unwrap();
    assert_eq!(a.catalog, b.catalog);
    assert_eq!(a.outfits, b.outfits);
    assert_eq!(a.planted, b.planted);
    let c = generate(&GenConfig { seed: 8, ..config(500) }).unwrap();
    assert_ne!(a.outfits, c.outfits);
}

#[test]
fn split_sizes_and_style_balance() {
    let ds = generate(&config(2000)).unwrap();
    let n = ds.outfits.len() as f64;
    assert_eq!(ds.split(Split::Train).len(), 1400);
    assert_eq!(ds.split(Split::Valid).len(), 400);
    assert_eq!(ds.split(Split::Test).len(), 200);
    let mut per_style = BTreeMap::new();
    for o in &ds.outfits {
        *per_style.entry(o.style.index).or_insert(0usize) += 1;
    }
    assert_eq!(per_style.len(), 4);
    assert!(per_style.values().all(|&c| c as f64 > 0.2 * n));
}

#[test]
fn affinity_recovered_from_outfits() {
    let ds = generate(&config(5000)).unwrap();
    let planted = &ds.planted;
    // counts[style][fine], totals[style][high]
    let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); 4];
    let mut totals: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); 4];
    for o in &ds.outfits {
        for id in &o.items {
            let item = ds.catalog.get(id).unwrap();
            *counts[o.style.index].entry(item.category.fine.clone()).or_default() += 1;
            *totals[o.style.index].entry(item.category.high.to_string()).or_default() += 1;
        }
    }
    let mut worst = 0.0f64;
    for s in 0..4 {
        for (fine, &a) in &planted.affinity[s] {
            let high = ds.catalog.items().iter().find(|i| &i.category.fine == fine).unwrap().category.high;
            let total = totals[s][&high.to_string()] as f64;
            let got = counts[s].get(fine).copied().unwrap_or(0) as f64 / total;
            worst = worst.max((got - a).abs());
        }
    }
    assert!(worst <= 0.05, "max affinity error {worst}");
}

#[test]
fn outfit_items_share_hue_cluster() {
    let ds = generate(&config(800)).unwrap();
    let hues = ds.planted.hue_map();
    for o in &ds.outfits {
        let h = hues[&o.items[0]];
        assert!(o.items.iter().all(|i| hues[i] == h), "{}", o.id);
    }
}

#[test]
fn images_encode_hue_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        mode: FeatureMode::Image,
        ..config(200)
    };
    let ds = generate(&cfg).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let table = FeatureTable::from_catalog(&ds.catalog, dir.path()).unwrap();
    let n = (IMAGE_SIZE * IMAGE_SIZE) as usize;
    assert_eq!(table.dim(), 3 * n);
    let planted = PlantedStructure::load(dir.path()).unwrap();
    let mut measured = Vec::new();
    let mut truth = Vec::new();
    for (i, item) in ds.catalog.items().iter().enumerate() {
        let row = table.raw().row(i);
        let hue: f64 = (0..n)
            .map(|k| rgb_hue(row[k] as f64, row[n + k] as f64, row[2 * n + k] as f64))
            .sum::<f64>()
            / n as f64;
        measured.push(hue);
        truth.push(cluster_hue(planted.item(&item.id).unwrap().hue, cfg.n_hues));
    }
    let r = pearson(&measured, &truth);
    assert!(r >= 0.9, "hue correlation {r}");
}

#[test]
fn written_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&config(300)).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let (catalog, outfits) = load_catalog(dir.path()).unwrap();
    assert_eq!(catalog, ds.catalog);
    assert_eq!(outfits, ds.outfits);
    assert_eq!(PlantedStructure::load(dir.path()).unwrap(), ds.planted);
}

#[test]
fn negatives_respect_category_and_exclude_original() {
    let ds = generate(&config(300)).unwrap();
    let sampler = NegativeSampler::new(&ds.catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pos in (0..ds.catalog.len()).step_by(7) {
        let item = ds.catalog.item(pos);
        for kind in [NegativeKind::Soft, NegativeKind::Hard] {
            let negs = sampler.sample(&ds.catalog, pos, kind, 3, &mut rng).unwrap();
            let mut uniq = negs.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 3);
            for n in negs {
                assert_ne!(n, pos);
                let c = &ds.catalog.item(n).category;
                match kind {
                    NegativeKind::Soft => assert_eq!(c.high, item.category.high),
                    NegativeKind::Hard => assert_eq!(c.fine, item.category.fine),
                }
            }
        }
    }
    assert!(sampler.sample(&ds.catalog, 0, NegativeKind::Hard, 16, &mut rng).is_err());
}
