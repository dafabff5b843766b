//! Evaluation metrics: fill-in-the-blank, compatibility AU-ROC, correct-style
//! rank statistics, style entropy of generated outfits, parent-child
//! selection accuracy and the discriminative fine-category rate.
//!
//! Metrics are written against the [`Scorer`] trait so random and oracle
//! scorers can be plugged in alongside trained models.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, HighCategory, Outfit, Split, Template};
use crate::encoder::FeatureTable;
use crate::error::{Error, Result};
use crate::generation::{id_ranks, top_outfits, SlotPlan, SweepStep};
use crate::model::{outfit_score, positive_distance, Context, Model, Scorer};
use crate::synthgen::{NegativeKind, NegativeSampler, PlantedStructure};
use crate::Real;

/// Mean and standard deviation over replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub sd: f64,
    pub replications: usize,
}

impl MetricValue {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            sd: var.sqrt(),
            replications: xs.len(),
        }
    }
}

/// Which representation conditions FITB/AU-ROC scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepSource {
    /// The outfit's own Gaussian, computed from the items that stay fixed.
    #[default]
    Outfit,
    /// The pooled Gaussian of the outfit's style.
    Pooled,
}

fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn positions(catalog: &Catalog, outfit: &Outfit) -> Result<Vec<usize>> {
    outfit
        .items
        .iter()
        .map(|id| catalog.position(id).ok_or_else(|| Error::UnknownItem(id.clone())))
        .collect()
}

fn reps_for<S: Scorer + ?Sized>(scorer: &S, source: RepSource, contexts: Vec<Context>) -> Result<Vec<S::Rep>> {
    match source {
        RepSource::Outfit => scorer.context_reps(&contexts),
        RepSource::Pooled => Ok(contexts.iter().map(|c| scorer.style_rep(c.style)).collect()),
    }
}

/// Shared inputs for the metrics.
pub struct EvalInput<'a> {
    pub catalog: &'a Catalog,
    pub sampler: &'a NegativeSampler,
}

/// Fill-in-the-blank accuracy: for every outfit and position, the true item
/// competes with `n_candidates − 1` negatives; the candidate with the lowest
/// mean distance to the remaining items wins.
pub fn fitb<S: Scorer + ?Sized>(
    scorer: &S,
    input: &EvalInput<'_>,
    outfits: &[&Outfit],
    kind: NegativeKind,
    n_candidates: usize,
    replications: usize,
    source: RepSource,
    seed: u64,
) -> Result<MetricValue> {
    if outfits.is_empty() {
        return Err(Error::InvalidRequest("FITB needs at least one outfit".into()));
    }
    if n_candidates < 2 || replications == 0 {
        return Err(Error::InvalidRequest("FITB needs ≥ 2 candidates and ≥ 1 replication".into()));
    }
    let mut questions = Vec::new();
    let mut contexts = Vec::new();
    for o in outfits {
        let items = positions(input.catalog, o)?;
        for k in 0..items.len() {
            let mut query = items.clone();
            let answer = query.remove(k);
            contexts.push(Context {
                items: query.clone(),
                style: o.style.index,
            });
            questions.push((answer, query));
        }
    }
    let reps = reps_for(scorer, source, contexts)?;
    let mut accs = Vec::with_capacity(replications);
    for r in 0..replications {
        let mut rng = replication_rng(seed, r);
        let mut correct = 0usize;
        for ((answer, query), rep) in questions.iter().zip(&reps) {
            let mut cands = input
                .sampler
                .sample(input.catalog, *answer, kind, n_candidates - 1, &mut rng)?;
            cands.push(*answer);
            cands.shuffle(&mut rng);
            let mut best = (usize::MAX, f64::INFINITY);
            for &c in &cands {
                let d = positive_distance(scorer, rep, c, query)?;
                if d < best.1 {
                    best = (c, d);
                }
            }
            correct += usize::from(best.0 == *answer);
        }
        accs.push(correct as f64 / questions.len() as f64);
    }
    Ok(MetricValue::from_samples(&accs))
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties counting ½.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // Sum of (average) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Compatibility AU-ROC: each outfit is paired with a negative outfit in
/// which one uniformly chosen item (or every item, with `replace_all`) is
/// swapped for a negative of the given kind.
#[allow(clippy::too_many_arguments)]
pub fn compat_auroc<S: Scorer + ?Sized>(
    scorer: &S,
    input: &EvalInput<'_>,
    outfits: &[&Outfit],
    kind: NegativeKind,
    replications: usize,
    source: RepSource,
    replace_all: bool,
    seed: u64,
) -> Result<MetricValue> {
    if outfits.is_empty() || replications == 0 {
        return Err(Error::InvalidRequest("AU-ROC needs outfits and ≥ 1 replication".into()));
    }
    let items: Vec<Vec<usize>> = outfits
        .iter()
        .map(|o| positions(input.catalog, o))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(replications);
    for r in 0..replications {
        let mut rng = replication_rng(seed, r);
        let mut negs = Vec::with_capacity(items.len());
        let mut contexts = Vec::with_capacity(items.len());
        for (o, pos) in outfits.iter().zip(&items) {
            let mut neg = pos.clone();
            if replace_all {
                for slot in neg.iter_mut() {
                    *slot = input.sampler.sample(input.catalog, *slot, kind, 1, &mut rng)?[0];
                }
                contexts.push(Context {
                    items: Vec::new(),
                    style: o.style.index,
                });
            } else {
                let k = rng.random_range(0..pos.len());
                neg[k] = input.sampler.sample(input.catalog, pos[k], kind, 1, &mut rng)?[0];
                let mut kept = pos.clone();
                kept.remove(k);
                contexts.push(Context {
                    items: kept,
                    style: o.style.index,
                });
            }
            negs.push(neg);
        }
        let reps = reps_for(scorer, source, contexts)?;
        let mut ps = Vec::with_capacity(items.len());
        let mut ns = Vec::with_capacity(items.len());
        for ((pos, neg), rep) in items.iter().zip(&negs).zip(&reps) {
            ps.push(outfit_score(scorer, rep, pos)?);
            ns.push(outfit_score(scorer, rep, neg)?);
        }
        values.push(auroc(&ps, &ns));
    }
    Ok(MetricValue::from_samples(&values))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub mrr: f64,
    pub pct_rank1: f64,
    pub pct_top3: f64,
    pub mean_rank: f64,
    pub n: usize,
}

/// Expected MRR when the true style's rank is uniform over `m` positions.
pub fn random_mrr(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum::<f64>() / m as f64
}

/// Rank of `truth` when styles are ordered by score descending, ties by
/// style index.
pub fn style_rank(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(s, &v)| v > t || (v == t && s < truth))
        .count()
}

pub fn rank_report(ranks: &[usize]) -> RankReport {
    let n = ranks.len().max(1) as f64;
    RankReport {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        pct_rank1: 100.0 * ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        pct_top3: 100.0 * ranks.iter().filter(|&&r| r <= 3).count() as f64 / n,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        n: ranks.len(),
    }
}

/// Score every outfit under each style's representation and report where
/// its true style ranks.
pub fn style_rank_metrics<S: Scorer + ?Sized>(scorer: &S, catalog: &Catalog, outfits: &[&Outfit]) -> Result<RankReport> {
    let m = scorer.n_styles();
    if m < 2 {
        return Err(Error::InvalidRequest("style ranking needs at least two styles".into()));
    }
    let reps: Vec<S::Rep> = (0..m).map(|s| scorer.style_rep(s)).collect();
    let mut ranks = Vec::with_capacity(outfits.len());
    for o in outfits {
        let items = positions(catalog, o)?;
        let scores = reps
            .iter()
            .map(|r| outfit_score(scorer, r, &items))
            .collect::<Result<Vec<_>>>()?;
        ranks.push(style_rank(&scores, o.style.index));
    }
    Ok(rank_report(&ranks))
}

/// Shannon entropy (nats) of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Ground-truth outfits indexed by item.
pub struct GroundTruth<'a> {
    pub outfits: Vec<&'a Outfit>,
    /// catalog position → indices into `outfits`, ascending outfit id
    by_item: BTreeMap<usize, Vec<usize>>,
    positions: Vec<Vec<usize>>,
    templates: Vec<Vec<HighCategory>>,
}

impl<'a> GroundTruth<'a> {
    pub fn new(catalog: &Catalog, outfits: &'a [Outfit]) -> Result<Self> {
        let mut sorted: Vec<&Outfit> = outfits.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_item: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut pos_all = Vec::with_capacity(sorted.len());
        let mut templates = Vec::with_capacity(sorted.len());
        for (k, o) in sorted.iter().enumerate() {
            let pos = positions(catalog, o)?;
            for &p in &pos {
                by_item.entry(p).or_default().push(k);
            }
            let mut t: Vec<HighCategory> = pos.iter().map(|&p| catalog.item(p).category.high).collect();
            t.sort();
            templates.push(t);
            pos_all.push(pos);
        }
        Ok(Self {
            outfits: sorted,
            by_item,
            positions: pos_all,
            templates,
        })
    }

    pub fn containing(&self, item: usize) -> &[usize] {
        self.by_item.get(&item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn items(&self, k: usize) -> &[usize] {
        &self.positions[k]
    }

    /// Test-split items that appear in test outfits of at least two styles,
    /// in catalog order.
    pub fn cross_style_anchors(&self) -> Vec<usize> {
        self.by_item
            .iter()
            .filter(|(_, ks)| {
                let styles: BTreeSet<usize> = ks
                    .iter()
                    .filter(|&&k| self.outfits[k].split == Split::Test)
                    .map(|&k| self.outfits[k].style.index)
                    .collect();
                styles.len() >= 2
            })
            .map(|(&i, _)| i)
            .collect()
    }

    /// Styles (ascending) of the outfits containing `item`, each with the
    /// first such outfit by id.
    pub fn styles_of(&self, item: usize) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &k in self.containing(item) {
            out.entry(self.outfits[k].style.index).or_insert(k);
        }
        out
    }
}

/// Select up to `max` anchors with a seeded draw, returned in catalog order.
pub fn pick_anchors(anchors: &[usize], max: usize, seed: u64) -> Vec<usize> {
    if anchors.len() <= max {
        return anchors.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = anchors.choose_multiple(&mut rng, max).copied().collect();
    picked.sort();
    picked
}

/// One generated outfit for an (anchor, requested style) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRecord {
    pub anchor: usize,
    pub style: usize,
    /// Items in fill order, anchor first.
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mean_entropy: f64,
    pub anchors: usize,
    pub kept_fraction: f64,
}

/// Generate the top outfit for each anchor under each style it has
/// ground-truth outfits in, using the template of the first such outfit.
pub fn generate_per_style<S: Scorer + ?Sized>(
    scorer: &S,
    catalog: &Catalog,
    gt: &GroundTruth<'_>,
    anchors: &[usize],
    beam: usize,
) -> Result<Vec<GeneratedRecord>> {
    let rank = id_ranks(catalog);
    let mut out = Vec::new();
    for &a in anchors {
        for (style, first) in gt.styles_of(a) {
            let template = Template::new(gt.templates[first].clone())?;
            let plan = SlotPlan::new(catalog, &catalog.item(a).id, &template)?;
            let rep = scorer.style_rep(style);
            let best = top_outfits(scorer, &rep, &plan, beam, 1, &rank)?.remove(0);
            out.push(GeneratedRecord {
                anchor: a,
                style,
                items: best.items,
            });
        }
    }
    Ok(out)
}

/// Whether a generated outfit reproduces a ground-truth outfit of its anchor
/// and style: some outfit with the same template shares at least half of
/// the generated non-anchor items.
pub fn matches_ground_truth(gt: &GroundTruth<'_>, catalog: &Catalog, rec: &GeneratedRecord) -> bool {
    let mut template: Vec<HighCategory> = rec.items.iter().map(|&i| catalog.item(i).category.high).collect();
    template.sort();
    let children: Vec<usize> = rec.items.iter().copied().filter(|&i| i != rec.anchor).collect();
    gt.containing(rec.anchor).iter().any(|&k| {
        gt.outfits[k].style.index == rec.style && gt.templates[k] == template && {
            let shared = children.iter().filter(|c| gt.items(k).contains(c)).count();
            2 * shared >= children.len()
        }
    })
}

/// Mean per-anchor entropy of the styles whose generated outfit matched
/// ground truth. Anchors with nothing kept contribute 0.
pub fn style_entropy(gt: &GroundTruth<'_>, catalog: &Catalog, records: &[GeneratedRecord], m: usize) -> EntropyReport {
    let mut per_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut kept = 0usize;
    for r in records {
        let hist = per_anchor.entry(r.anchor).or_insert_with(|| vec![0; m]);
        if matches_ground_truth(gt, catalog, r) {
            hist[r.style] += 1;
            kept += 1;
        }
    }
    let n = per_anchor.len();
    EntropyReport {
        mean_entropy: if n == 0 {
            0.0
        } else {
            per_anchor.values().map(|h| entropy(h)).sum::<f64>() / n as f64
        },
        anchors: n,
        kept_fraction: if records.is_empty() { 0.0 } else { kept as f64 / records.len() as f64 },
    }
}

/// Entropy for a style-independent model: its top-`n` outfits per anchor
/// (template of the anchor's first ground-truth outfit) labelled by
/// `classify`, without filtering.
pub fn ablation_entropy<S: Scorer + ?Sized>(
    scorer: &S,
    catalog: &Catalog,
    gt: &GroundTruth<'_>,
    anchors: &[usize],
    n: usize,
    beam: usize,
    classify: impl Fn(&[Vec<usize>]) -> Result<Vec<usize>>,
    m: usize,
) -> Result<EntropyReport> {
    let rank = id_ranks(catalog);
    let rep = scorer.style_rep(0);
    let mut total = 0.0;
    for &a in anchors {
        let first = gt.containing(a)[0];
        let template = Template::new(gt.templates[first].clone())?;
        let plan = SlotPlan::new(catalog, &catalog.item(a).id, &template)?;
        let outs: Vec<Vec<usize>> = top_outfits(scorer, &rep, &plan, beam.max(n), n, &rank)?
            .into_iter()
            .map(|r| r.items)
            .collect();
        let mut hist = vec![0; m];
        for s in classify(&outs)? {
            hist[s] += 1;
        }
        total += entropy(&hist);
    }
    Ok(EntropyReport {
        mean_entropy: if anchors.is_empty() { 0.0 } else { total / anchors.len() as f64 },
        anchors: anchors.len(),
        kept_fraction: 1.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub parent: HighCategory,
    pub child: HighCategory,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentChildReport {
    pub pairs: Vec<PairAccuracy>,
    pub overall: f64,
}

/// For each anchor's test outfits: given the anchor (parent) and the
/// outfit's style, pick the true child among candidates drawn from the
/// anchor's outfits in other styles (topped up with soft negatives).
pub fn parent_child_accuracy<S: Scorer + ?Sized>(
    scorer: &S,
    input: &EvalInput<'_>,
    gt: &GroundTruth<'_>,
    anchors: &[usize],
    n_candidates: usize,
    seed: u64,
) -> Result<ParentChildReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: BTreeMap<(HighCategory, HighCategory), (usize, usize)> = BTreeMap::new();
    for &a in anchors {
        let ks = gt.containing(a);
        for &k in ks {
            let o = gt.outfits[k];
            if o.split != Split::Test {
                continue;
            }
            let rep = scorer.style_rep(o.style.index);
            for &child in gt.items(k) {
                if child == a {
                    continue;
                }
                let cc = input.catalog.item(child).category.high;
                let mut others: Vec<usize> = ks
                    .iter()
                    .filter(|&&k2| gt.outfits[k2].style.index != o.style.index)
                    .flat_map(|&k2| gt.items(k2).iter().copied())
                    .filter(|&i| i != child && input.catalog.item(i).category.high == cc)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                others.shuffle(&mut rng);
                others.truncate(n_candidates - 1);
                if others.len() < n_candidates - 1 {
                    let need = n_candidates - 1 - others.len();
                    let extra = input
                        .sampler
                        .sample(input.catalog, child, NegativeKind::Soft, need + others.len(), &mut rng)?;
                    for e in extra {
                        if others.len() == n_candidates - 1 {
                            break;
                        }
                        if !others.contains(&e) {
                            others.push(e);
                        }
                    }
                }
                let mut cands = others;
                cands.push(child);
                cands.shuffle(&mut rng);
                let mut best = (usize::MAX, f64::INFINITY);
                for &c in &cands {
                    let d = scorer.distance(&rep, a, c);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                let pc = input.catalog.item(a).category.high;
                let e = table.entry((pc, cc)).or_insert((0, 0));
                e.0 += usize::from(best.0 == child);
                e.1 += 1;
            }
        }
    }
    let (c, t) = table.values().fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    Ok(ParentChildReport {
        pairs: table
            .into_iter()
            .map(|((parent, child), (correct, total))| PairAccuracy {
                parent,
                child,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
        overall: if t == 0 { 0.0 } else { c as f64 / t as f64 },
    })
}

/// Most discriminative fine categories per style: tf = P̂(fine | style,
/// high category) over ground-truth outfits, idf = ln(m / #styles using the
/// fine category); the top `d` per high category with positive score.
pub fn discriminative_sets(catalog: &Catalog, outfits: &[Outfit], m: usize, d: usize) -> Result<Vec<BTreeSet<String>>> {
    // counts[style][(high, fine)]
    let mut counts: Vec<BTreeMap<(HighCategory, String), usize>> = vec![BTreeMap::new(); m];
    for o in outfits {
        for id in &o.items {
            let item = catalog.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
            *counts[o.style.index]
                .entry((item.category.high, item.category.fine.clone()))
                .or_default() += 1;
        }
    }
    for (s, c) in counts.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::Insufficient(format!("style #{s} has no ground-truth outfits")));
        }
    }
    let mut df: BTreeMap<&(HighCategory, String), usize> = BTreeMap::new();
    for c in &counts {
        for k in c.keys() {
            *df.entry(k).or_default() += 1;
        }
    }
    let mut sets = Vec::with_capacity(m);
    for c in &counts {
        let mut per_high: BTreeMap<HighCategory, Vec<(f64, &String)>> = BTreeMap::new();
        let mut high_total: BTreeMap<HighCategory, usize> = BTreeMap::new();
        for ((h, _), &n) in c {
            *high_total.entry(*h).or_default() += n;
        }
        for (key, &n) in c {
            let tf = n as f64 / high_total[&key.0] as f64;
            let idf = (m as f64 / df[key] as f64).ln();
            per_high.entry(key.0).or_default().push((tf * idf, &key.1));
        }
        let mut set = BTreeSet::new();
        for (_, mut v) in per_high {
            v.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then_with(|| a.1.cmp(b.1)));
            set.extend(v.into_iter().filter(|x| x.0 > 0.0).take(d).map(|x| x.1.clone()));
        }
        sets.push(set);
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeReport {
    pub per_style: Vec<f64>,
    pub overall: f64,
}

/// Fraction of generated non-anchor items whose fine category is in the
/// discriminative set of the requested style.
pub fn discriminative_category_rate(
    catalog: &Catalog,
    sets: &[BTreeSet<String>],
    records: &[GeneratedRecord],
) -> DiscriminativeReport {
    let m = sets.len();
    let mut hit = vec![0usize; m];
    let mut tot = vec![0usize; m];
    for r in records {
        for &i in r.items.iter().filter(|&&i| i != r.anchor) {
            tot[r.style] += 1;
            hit[r.style] += usize::from(sets[r.style].contains(&catalog.item(i).category.fine));
        }
    }
    let all_tot: usize = tot.iter().sum();
    DiscriminativeReport {
        per_style: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        overall: if all_tot == 0 {
            0.0
        } else {
            hit.iter().sum::<usize>() as f64 / all_tot as f64
        },
    }
}

/// Fraction of the non-parent items of each sweep step whose fine category
/// the planted affinity favours for `style_b` over `style_a`.
pub fn sweep_affine_fraction(
    catalog: &Catalog,
    planted: &PlantedStructure,
    parent: usize,
    steps: &[SweepStep],
    style_a: usize,
    style_b: usize,
) -> Vec<(f64, f64)> {
    let aff = |s: usize, fine: &str| planted.affinity[s].get(fine).copied().unwrap_or(0.0);
    steps
        .iter()
        .map(|step| {
            let children: Vec<usize> = step.outfit.items.iter().copied().filter(|&i| i != parent).collect();
            let hits = children
                .iter()
                .filter(|&&i| {
                    let fine = &catalog.item(i).category.fine;
                    aff(style_b, fine) > aff(style_a, fine)
                })
                .count();
            (step.t, hits as f64 / children.len().max(1) as f64)
        })
        .collect()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            ranks[k] = (i + j + 1) as f64 / 2.0;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub negatives: NegativeKind,
    pub n_candidates: usize,
    pub replications: usize,
    pub seed: u64,
    pub rep_source: RepSource,
    /// AU-ROC negatives replace every item instead of one.
    pub replace_all: bool,
    /// Cap on entropy / parent-child anchors.
    pub max_anchors: usize,
    pub beam: usize,
    /// Discriminative fine categories kept per (style, high category).
    pub discriminative_top: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            negatives: NegativeKind::Soft,
            n_candidates: 4,
            replications: 5,
            seed: 11,
            rep_source: RepSource::Outfit,
            replace_all: false,
            max_anchors: 200,
            beam: 10,
            discriminative_top: 2,
        }
    }
}

/// Style-conditioning metrics for the style-independent ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub style_rank: RankReport,
    pub entropy: EntropyReport,
    pub discriminative: DiscriminativeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub test_outfits: usize,
    pub fitb: MetricValue,
    pub auroc: MetricValue,
    pub style_rank: RankReport,
    pub random_mrr: f64,
    pub entropy: EntropyReport,
    pub parent_child: ParentChildReport,
    pub discriminative: DiscriminativeReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
}

/// All metrics on the test split. `ablation` (a model trained with r = 0)
/// adds the paired style-conditioning comparison.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    ablation: Option<&Model<T>>,
    catalog: &Catalog,
    outfits: &[Outfit],
    table: &FeatureTable,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let m = model.styles.len();
    let test: Vec<&Outfit> = outfits.iter().filter(|o| o.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Insufficient("no test outfits".into()));
    }
    let scorer = model.scorer(catalog, table)?;
    let sampler = NegativeSampler::new(catalog);
    let input = EvalInput { catalog, sampler: &sampler };
    let o = options;
    let fitb_v = fitb(&scorer, &input, &test, o.negatives, o.n_candidates, o.replications, o.rep_source, o.seed)?;
    let auroc_v = compat_auroc(&scorer, &input, &test, o.negatives, o.replications, o.rep_source, o.replace_all, o.seed)?;
    let style_rank = style_rank_metrics(&scorer, catalog, &test)?;
    let gt = GroundTruth::new(catalog, outfits)?;
    let anchors = pick_anchors(&gt.cross_style_anchors(), o.max_anchors, o.seed);
    let records = generate_per_style(&scorer, catalog, &gt, &anchors, o.beam)?;
    let entropy_r = style_entropy(&gt, catalog, &records, m);
    let parent_child = parent_child_accuracy(&scorer, &input, &gt, &anchors, o.n_candidates, o.seed)?;
    let sets = discriminative_sets(catalog, outfits, m, o.discriminative_top)?;
    let discriminative = discriminative_category_rate(catalog, &sets, &records);
    let ablation = match ablation {
        None => None,
        Some(abl) => {
            let a_scorer = abl.scorer(catalog, table)?;
            let a_records = generate_per_style(&a_scorer, catalog, &gt, &anchors, o.beam)?;
            Some(AblationReport {
                style_rank: style_rank_metrics(&a_scorer, catalog, &test)?,
                entropy: ablation_entropy(
                    &a_scorer,
                    catalog,
                    &gt,
                    &anchors,
                    m,
                    o.beam,
                    |outs| abl.predict_styles(table, outs),
                    m,
                )?,
                discriminative: discriminative_category_rate(catalog, &sets, &a_records),
            })
        }
    };
    Ok(EvalReport {
        options: options.clone(),
        test_outfits: test.len(),
        fitb: fitb_v,
        auroc: auroc_v,
        style_rank,
        random_mrr: random_mrr(m),
        entropy: entropy_r,
        parent_child,
        discriminative,
        ablation,
    })
}

/// Human-readable summary of a report.
pub fn render_table(r: &EvalReport) -> String {
    let mut out = String::new();
    let kind = r.options.negatives.as_str();
    let mut row = |name: &str, value: String| out.push_str(&format!("{name:<34} {value}\n"));
    row(&format!("FITB ({kind})"), format!("{:.4} ± {:.4}", r.fitb.mean, r.fitb.sd));
    row(&format!("compat AU-ROC ({kind})"), format!("{:.4} ± {:.4}", r.auroc.mean, r.auroc.sd));
    row(
        "correct-style MRR",
        format!("{:.4} (random {:.4})", r.style_rank.mrr, r.random_mrr),
    );
    row(
        "rank1 / top3 / mean rank",
        format!("{:.1}% / {:.1}% / {:.3}", r.style_rank.pct_rank1, r.style_rank.pct_top3, r.style_rank.mean_rank),
    );
    row(
        "style entropy (nats)",
        format!("{:.4} over {} anchors", r.entropy.mean_entropy, r.entropy.anchors),
    );
    row("parent-child accuracy", format!("{:.4}", r.parent_child.overall));
    row("discriminative-category rate", format!("{:.4}", r.discriminative.overall));
    if let Some(a) = &r.ablation {
        row("ablation MRR", format!("{:.4}", a.style_rank.mrr));
        row("ablation style entropy", format!("{:.4}", a.entropy.mean_entropy));
        row("ablation discriminative rate", format!("{:.4}", a.discriminative.overall));
    }
    for p in &r.parent_child.pairs {
        row(
            &format!("  {} -> {}", p.parent, p.child),
            format!("{:.4} ({}/{})", p.accuracy, p.correct, p.total),
        );
    }
    out
}

/// Scorer with pseudo-random distances, for chance baselines.
pub struct RandomScorer {
    pub seed: u64,
    pub m: usize,
}

impl Scorer for RandomScorer {
    type Rep = u64;

    fn n_styles(&self) -> usize {
        self.m
    }

    fn style_rep(&self, style: usize) -> u64 {
        style as u64
    }

    fn context_reps(&self, contexts: &[Context]) -> Result<Vec<u64>> {
        Ok((0..contexts.len() as u64).map(|i| 1000 + i).collect())
    }

    fn distance(&self, rep: &u64, a: usize, b: usize) -> f64 {
        let (lo, hi) = (a.min(b) as u64, a.max(b) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ rep.wrapping_mul(0x9E37_79B9) ^ (lo << 32) ^ hi);
        rng.random::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_extremes_and_ties() {
        assert_eq!(auroc(&[1.0, 1.0], &[0.0, 0.0]), 1.0);
        assert_eq!(auroc(&[0.0], &[1.0]), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5, 0.5]), 0.5);
        // One inversion out of four pairs.
        assert_eq!(auroc(&[0.9, 0.2], &[0.1, 0.3]), 0.75);
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[1, 1, 1, 1]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[3, 0, 0]), 0.0);
        assert_eq!(entropy(&[0, 0]), 0.0);
    }

    #[test]
    fn random_mrr_for_four() {
        assert!((random_mrr(4) - 0.520_833_333).abs() < 1e-8);
    }

    #[test]
    fn rank_ties_by_index() {
        assert_eq!(style_rank(&[1.0, 1.0, 0.0], 1), 2);
        assert_eq!(style_rank(&[1.0, 1.0, 0.0], 0), 1);
        assert_eq!(style_rank(&[0.0, 2.0, 3.0], 0), 3);
        let r = rank_report(&[1, 1, 1]);
        assert_eq!(r.mrr, 1.0);
        assert_eq!(r.pct_rank1, 100.0);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }

    #[test]
    fn metric_value_sd() {
        let v = MetricValue::from_samples(&[1.0, 3.0]);
        assert_eq!(v.mean, 2.0);
        assert!((v.sd - 2f64.sqrt()).abs() < 1e-12);
    }
}
