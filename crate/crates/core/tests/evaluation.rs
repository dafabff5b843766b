mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use stylefit::domain::{Outfit, Split};
use stylefit::evaluation::{
    compat_auroc, discriminative_sets, evaluate, fitb, random_mrr, render_table, style_rank_metrics, EvalInput, EvalOptions,
    RandomScorer, RepSource,
};
use stylefit::model::{Context, Scorer};
use stylefit::synthgen::{NegativeKind, NegativeSampler};
use stylefit::{Error, Result};

use common::{trained, Fixture, Trained};

fn shared() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| trained(800, 3))
}

/// Knows the test outfits: two items are at distance 0 when both belong to
/// an outfit containing the whole conditioning set.
struct OracleScorer {
    outfits: Vec<BTreeSet<usize>>,
}

impl Scorer for OracleScorer {
    type Rep = BTreeSet<usize>;

    fn n_styles(&self) -> usize {
        4
    }

    fn style_rep(&self, _style: usize) -> Self::Rep {
        BTreeSet::new()
    }

    fn context_reps(&self, contexts: &[Context]) -> Result<Vec<Self::Rep>> {
        Ok(contexts.iter().map(|c| c.items.iter().copied().collect()).collect())
    }

    fn distance(&self, rep: &Self::Rep, a: usize, b: usize) -> f64 {
        let hit = self
            .outfits
            .iter()
            .any(|o| rep.is_subset(o) && o.contains(&a) && o.contains(&b));
        if hit {
            0.0
        } else {
            1.0
        }
    }
}

fn test_outfits(fx: &Fixture) -> Vec<&Outfit> {
    fx.ds.split(Split::Test)
}

#[test]
fn random_scorer_sits_at_chance() {
    let fx = Fixture::small(2000);
    let sampler = NegativeSampler::new(&fx.ds.catalog);
    let input = EvalInput {
        catalog: &fx.ds.catalog,
        sampler: &sampler,
    };
    let scorer = RandomScorer { seed: 3, m: 4 };
    let test = test_outfits(&fx);
    let f = fitb(&scorer, &input, &test, NegativeKind::Soft, 4, 5, RepSource::Outfit, 1).unwrap();
    assert!((f.mean - 0.25).abs() < 0.03, "random FITB {}", f.mean);
    assert_eq!(f.replications, 5);
    let a = compat_auroc(&scorer, &input, &test, NegativeKind::Soft, 5, RepSource::Outfit, false, 1).unwrap();
    assert!((a.mean - 0.5).abs() < 0.06, "random AU-ROC {}", a.mean);
    let ranks = style_rank_metrics(&scorer, &fx.ds.catalog, &test).unwrap();
    assert!((ranks.mrr - random_mrr(4)).abs() < 0.05, "random MRR {}", ranks.mrr);
}

#[test]
fn oracle_scorer_is_perfect() {
    let fx = Fixture::small(1000);
    let catalog = &fx.ds.catalog;
    let test = test_outfits(&fx);
    let scorer = OracleScorer {
        outfits: test
            .iter()
            .map(|o| o.items.iter().map(|id| catalog.position(id).unwrap()).collect())
            .collect(),
    };
    let sampler = NegativeSampler::new(catalog);
    let input = EvalInput { catalog, sampler: &sampler };
    for kind in [NegativeKind::Soft, NegativeKind::Hard] {
        let f = fitb(&scorer, &input, &test, kind, 4, 2, RepSource::Outfit, 5).unwrap();
        // Only questions whose query items sit in several test outfits are
        // ambiguous; everything else is answered.
        assert!(f.mean >= 0.99, "{kind:?} FITB {}", f.mean);
        let a = compat_auroc(&scorer, &input, &test, kind, 2, RepSource::Outfit, false, 5).unwrap();
        assert!(a.mean >= 0.99, "{kind:?} AU-ROC {}", a.mean);
    }
}

#[test]
fn discriminative_sets_contain_signatures() {
    let fx = Fixture::small(3000);
    let sets = discriminative_sets(&fx.ds.catalog, &fx.ds.outfits, 4, 2).unwrap();
    assert_eq!(sets.len(), 4);
    for (s, sig) in fx.ds.planted.signature.iter().enumerate() {
        for fine in sig.values() {
            assert!(sets[s].contains(fine), "style {s} misses {fine}");
        }
    }
}

#[test]
fn full_report_is_sane_and_repeatable() {
    let t = shared();
    let ds = &t.fx.ds;
    let opts = EvalOptions {
        replications: 2,
        max_anchors: 30,
        ..EvalOptions::default()
    };
    let r = evaluate(&t.model, Some(&t.ablation), &ds.catalog, &ds.outfits, &t.fx.table, &opts).unwrap();
    assert_eq!(r.test_outfits, test_outfits(&t.fx).len());
    for v in [r.fitb.mean, r.auroc.mean, r.style_rank.mrr, r.parent_child.overall, r.discriminative.overall] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert!(r.fitb.mean > 0.3, "trained FITB {}", r.fitb.mean);
    assert!(r.entropy.mean_entropy >= 0.0 && r.entropy.mean_entropy <= 4f64.ln() + 1e-9);
    assert!(r.entropy.anchors <= 30);
    assert_eq!(r.random_mrr, random_mrr(4));
    let again = evaluate(&t.model, Some(&t.ablation), &ds.catalog, &ds.outfits, &t.fx.table, &opts).unwrap();
    assert_eq!(r, again);
    let table = render_table(&r);
    for needle in ["FITB (soft)", "correct-style MRR", "ablation style entropy"] {
        assert!(table.contains(needle), "{needle}");
    }
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<stylefit::evaluation::EvalReport>(&json).unwrap(), r);
}

#[test]
fn pooled_source_and_replace_all_run() {
    let t = shared();
    let ds = &t.fx.ds;
    let opts = EvalOptions {
        replications: 1,
        max_anchors: 10,
        rep_source: RepSource::Pooled,
        replace_all: true,
        negatives: NegativeKind::Hard,
        ..EvalOptions::default()
    };
    let r = evaluate(&t.model, None, &ds.catalog, &ds.outfits, &t.fx.table, &opts).unwrap();
    assert!(r.ablation.is_none());
    assert!((0.0..=1.0).contains(&r.auroc.mean));
}

#[test]
fn evaluation_needs_test_outfits() {
    let t = shared();
    let ds = &t.fx.ds;
    let train_only: Vec<Outfit> = ds.outfits.iter().filter(|o| o.split == Split::Train).cloned().collect();
    let r = evaluate(&t.model, None, &ds.catalog, &train_only, &t.fx.table, &EvalOptions::default());
    assert!(matches!(r, Err(Error::Insufficient(_))));
}

#[test]
fn stage_one_checkpoint_cannot_score() {
    let t = shared();
    let mut m = t.model.clone();
    m.scanet = None;
    assert!(matches!(m.scorer(&t.fx.ds.catalog, &t.fx.table), Err(Error::Checkpoint(_))));
}
