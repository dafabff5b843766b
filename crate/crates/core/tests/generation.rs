mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use stylefit::domain::{HighCategory, Template};
use stylefit::evaluation::sweep_affine_fraction;
use stylefit::generation::{
    blend_style_rep, exhaustive_search, generate, id_ranks, style_sweep, top_outfits, GenerationRequest, SlotPlan,
};
use stylefit::model::{outfit_score, Scorer};
use stylefit::style_rep::{RepVariant, StyleRepConfig};
use stylefit::Error;

use common::{trained, Trained};

fn shared() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| trained(800, 3))
}

fn parent(t: &Trained, high: HighCategory) -> String {
    t.fx.ds.catalog.items().iter().find(|i| i.category.high == high).unwrap().id.clone()
}

fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn request(t: &Trained, w: BTreeMap<String, f64>) -> GenerationRequest {
    GenerationRequest {
        parent_id: parent(t, HighCategory::Bottomwear),
        template: "topwear,bottomwear,footwear".parse().unwrap(),
        style_weights: w,
        beam: 10,
        top_k: 5,
        sample_seed: None,
        normalize: false,
    }
}

#[test]
fn outfits_follow_the_template() {
    let t = shared();
    let catalog = &t.fx.ds.catalog;
    let scorer = t.model.scorer(catalog, &t.fx.table).unwrap();
    let style = t.model.styles[2].clone();
    let req = request(t, weights(&[(&style, 1.0)]));
    let out = generate(&scorer, catalog, &req).unwrap();
    assert_eq!(out.len(), 5);
    let pos = catalog.position(&req.parent_id).unwrap();
    let rep = scorer.rep_from_vector(&blend_style_rep(&t.model, &req.style_weights, false, None).unwrap()).unwrap();
    for w in out.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for r in &out {
        assert_eq!(r.items[1], pos);
        let cats: Vec<HighCategory> = r.items.iter().map(|&i| catalog.item(i).category.high).collect();
        assert_eq!(cats, req.template.slots());
        let mut uniq = r.items.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        assert!((outfit_score(&scorer, &rep, &r.items).unwrap() - r.score).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_matches_exhaustive_on_the_model() {
    let t = shared();
    let catalog = &t.fx.ds.catalog;
    let scorer = t.model.scorer(catalog, &t.fx.table).unwrap();
    let template: Template = "topwear,bottomwear,footwear".parse().unwrap();
    let plan = SlotPlan::new(catalog, &parent(t, HighCategory::Topwear), &template).unwrap();
    let rank = id_ranks(catalog);
    let rep = scorer.style_rep(1);
    let total = plan.slots[0].len() * plan.slots[1].len();
    let beam = top_outfits(&scorer, &rep, &plan, plan.slots[0].len(), 50, &rank).unwrap();
    let exact = exhaustive_search(plan.parent, &plan.slots, 50, &rank, |items| {
        outfit_score(&scorer, &rep, items).unwrap()
    });
    assert_eq!(beam, exact);
    assert!(total > 50);
}

#[test]
fn blend_is_linear_in_weights() {
    let t = shared();
    let [a, b] = [&t.model.styles[0], &t.model.styles[3]];
    let ra = blend_style_rep(&t.model, &weights(&[(a, 1.0)]), false, None).unwrap();
    let rb = blend_style_rep(&t.model, &weights(&[(b, 1.0)]), false, None).unwrap();
    let mix = blend_style_rep(&t.model, &weights(&[(a, 0.3), (b, 0.7)]), false, None).unwrap();
    let expect = &ra * 0.3 + &rb * 0.7;
    assert!(mix.iter().zip(&expect).all(|(x, y)| (x - y).abs() <= 1e-5 * y.abs().max(1.0)));
    assert_eq!(ra, t.model.style_rep(0).unwrap());

    let normalized = blend_style_rep(&t.model, &weights(&[(a, 2.0), (b, 2.0)]), true, None).unwrap();
    let half = blend_style_rep(&t.model, &weights(&[(a, 0.5), (b, 0.5)]), false, None).unwrap();
    assert_eq!(normalized, half);
    let with_zero = blend_style_rep(&t.model, &weights(&[(a, 1.0), (b, 0.0)]), false, None).unwrap();
    assert_eq!(with_zero, ra);
}

#[test]
fn sampling_only_matters_for_sample_reps() {
    let t = shared();
    let w = weights(&[(&t.model.styles[1], 1.0)]);
    let mean = blend_style_rep(&t.model, &w, false, None).unwrap();
    assert_eq!(blend_style_rep(&t.model, &w, false, Some(4)).unwrap(), mean);

    let mut sampled = t.model.clone();
    sampled.scanet.as_mut().unwrap().config.rep = StyleRepConfig::new(RepVariant::Sample);
    let s1 = blend_style_rep(&sampled, &w, false, Some(4)).unwrap();
    let s2 = blend_style_rep(&sampled, &w, false, Some(4)).unwrap();
    let s3 = blend_style_rep(&sampled, &w, false, Some(5)).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1, s3);
}

#[test]
fn sweep_endpoints_equal_pure_styles() {
    let t = shared();
    let catalog = &t.fx.ds.catalog;
    let scorer = t.model.scorer(catalog, &t.fx.table).unwrap();
    let (a, b) = (t.model.styles[0].clone(), t.model.styles[2].clone());
    let base = request(t, BTreeMap::new());
    let steps = style_sweep(&scorer, catalog, &base.parent_id, &base.template, &a, &b, 5, 10).unwrap();
    assert_eq!(steps.len(), 5);
    assert_eq!(steps.iter().map(|s| s.t).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let pure = |s: &str| {
        let mut r = request(t, weights(&[(s, 1.0)]));
        r.top_k = 1;
        generate(&scorer, catalog, &r).unwrap().remove(0)
    };
    assert_eq!(steps[0].outfit, pure(&a));
    assert_eq!(steps[4].outfit, pure(&b));
    let pos = catalog.position(&base.parent_id).unwrap();
    let frac = sweep_affine_fraction(catalog, &t.fx.ds.planted, pos, &steps, 0, 2);
    assert_eq!(frac.len(), 5);
    assert!(frac.iter().all(|p| (0.0..=1.0).contains(&p.1)));
}

#[test]
fn request_errors() {
    let t = shared();
    let catalog = &t.fx.ds.catalog;
    let scorer = t.model.scorer(catalog, &t.fx.table).unwrap();
    let style = t.model.styles[0].clone();
    let run = |f: &dyn Fn(&mut GenerationRequest)| {
        let mut r = request(t, weights(&[(&style, 1.0)]));
        f(&mut r);
        generate(&scorer, catalog, &r)
    };
    assert!(matches!(run(&|r| r.parent_id = "nope".into()), Err(Error::UnknownItem(_))));
    assert!(matches!(
        run(&|r| r.style_weights = weights(&[("nope", 1.0)])),
        Err(Error::UnknownStyle(_))
    ));
    assert!(matches!(
        run(&|r| r.style_weights = weights(&[(&style, 0.0)])),
        Err(Error::InvalidRequest(_))
    ));
    assert!(matches!(
        run(&|r| r.style_weights = weights(&[(&style, -1.0)])),
        Err(Error::InvalidRequest(_))
    ));
    assert!(matches!(run(&|r| r.style_weights.clear()), Err(Error::InvalidRequest(_))));
    assert!(matches!(
        run(&|r| r.template = "topwear,footwear".parse().unwrap()),
        Err(Error::InvalidTemplate(_))
    ));
    assert!(matches!(
        run(&|r| r.template = "bottomwear".parse().unwrap()),
        Err(Error::InvalidTemplate(_))
    ));
    assert!(matches!(run(&|r| r.beam = 0), Err(Error::InvalidRequest(_))));
}
