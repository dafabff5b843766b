mod common;

use stylefit::domain::Split;
use stylefit::senet::StyleDistribution;
use stylefit::style_rep::{RepVariant, StyleRepConfig};
use stylefit::training::{mean_kl, style_accuracy, train_stage1, train_stage2, write_csv, Stage1Epoch};
use stylefit::{checkpoint, Error};

use common::{quick_train, Fixture};

#[test]
fn stage1_learns_and_logs_every_epoch() {
    let fx = Fixture::small(1000);
    let mut cfg = quick_train(4);
    cfg.stage1.lr = 1e-3;
    let out = train_stage1::<f32>(&fx.data(), &cfg).unwrap();
    assert!(out.last_loss < out.first_loss, "{} -> {}", out.first_loss, out.last_loss);
    assert_eq!(out.log.len(), 4);
    assert_eq!(out.log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(style_accuracy(&out.model, &fx.data(), Split::Valid).unwrap() > 0.4);
    assert!(out.model.scanet.is_none());
    assert_eq!(out.model.pooled.as_ref().unwrap().len(), 4);
}

#[test]
fn kl_weight_lowers_kl() {
    let fx = Fixture::small(800);
    let mut cfg = quick_train(3);
    cfg.stage1.alpha_kl = 0.0;
    let free = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    cfg.stage1.alpha_kl = 1.0;
    let tied = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    let (a, b) = (
        mean_kl(&free, &fx.data(), Split::Train).unwrap(),
        mean_kl(&tied, &fx.data(), Split::Train).unwrap(),
    );
    assert!(b < a, "KL with weight 1 ({b}) should be below KL without ({a})");
}

#[test]
fn pooled_stats_match_per_outfit_encoding() {
    let fx = Fixture::small(600);
    let model = train_stage1::<f32>(&fx.data(), &quick_train(1)).unwrap().model;
    let pooled = model.pooled.as_ref().unwrap();
    for (s, stats) in pooled.styles.iter().enumerate() {
        let dists: Vec<StyleDistribution<f32>> = fx
            .ds
            .outfits
            .iter()
            .filter(|o| o.split == Split::Train && o.style.index == s)
            .map(|o| {
                let idx: Vec<usize> = o.items.iter().map(|id| fx.ds.catalog.position(id).unwrap()).collect();
                model.senet.encode_outfit(&fx.table.rows(&idx)).unwrap()
            })
            .collect();
        let n = dists.len() as f64;
        assert_eq!(stats.count, dists.len());
        for k in 0..stats.mean.len() {
            let mu = dists.iter().map(|d| d.mean[k] as f64).sum::<f64>() / n;
            let var = dists.iter().map(|d| d.var[k] as f64).sum::<f64>() / (n * n);
            assert!((stats.mean[k] - mu).abs() <= 1e-5 * mu.abs().max(1.0), "mean {k}");
            assert!((stats.var[k] - var).abs() <= 1e-5 * var.abs().max(1e-3), "var {k}");
        }
    }
}

#[test]
fn stage2_freezes_senet_and_learns() {
    let fx = Fixture::small(800);
    let cfg = quick_train(3);
    let s1 = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    let out = train_stage2(&fx.data(), s1.clone(), StyleRepConfig::new(RepVariant::Params), &cfg).unwrap();
    assert_eq!(out.model.senet.store.digest(), s1.senet.store.digest());
    assert_eq!(out.model.pooled, s1.pooled);
    assert!(out.last_loss < out.first_loss, "{} -> {}", out.first_loss, out.last_loss);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|e| (0.0..=1.0).contains(&e.valid_fitb)));
}

#[test]
fn training_is_reproducible_through_a_checkpoint() {
    let fx = Fixture::small(600);
    let cfg = quick_train(2);
    let s1 = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    let again = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    assert_eq!(s1.senet.store.digest(), again.senet.store.digest());
    assert_eq!(s1.rng, again.rng);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    checkpoint::save(&s1, &path).unwrap();
    let loaded = checkpoint::load::<f32>(&path).unwrap();
    let rep = StyleRepConfig::new(RepVariant::Params);
    let a = train_stage2(&fx.data(), s1, rep.clone(), &cfg).unwrap().model;
    let b = train_stage2(&fx.data(), loaded, rep, &cfg).unwrap().model;
    assert_eq!(
        a.scanet.as_ref().unwrap().store.digest(),
        b.scanet.as_ref().unwrap().store.digest()
    );
}

#[test]
fn other_seed_other_weights() {
    let fx = Fixture::small(400);
    let mut cfg = quick_train(1);
    let a = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    cfg.seed += 1;
    let b = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    assert_ne!(a.senet.store.digest(), b.senet.store.digest());
}

#[test]
fn double_precision_training_runs() {
    let fx = Fixture::small(300);
    let cfg = quick_train(1);
    let s1 = train_stage1::<f64>(&fx.data(), &cfg).unwrap();
    assert!(s1.last_loss.is_finite());
    let s2 = train_stage2(&fx.data(), s1.model, StyleRepConfig::new(RepVariant::Sample), &cfg).unwrap();
    assert!(s2.model.scanet.unwrap().store.all_finite());
}

#[test]
fn invalid_configs_rejected() {
    let fx = Fixture::small(200);
    let mut cfg = quick_train(1);
    cfg.stage1.lr = 0.0;
    assert!(matches!(train_stage1::<f32>(&fx.data(), &cfg), Err(Error::Config(_))));
    let mut cfg = quick_train(1);
    cfg.stage2.batch = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = quick_train(1);
    cfg.model.heads = 3;
    assert!(train_stage1::<f32>(&fx.data(), &cfg).is_err());
}

#[test]
fn missing_validation_split_is_reported() {
    let mut fx = Fixture::small(200);
    for o in &mut fx.ds.outfits {
        if o.split == Split::Valid {
            o.split = Split::Train;
        }
    }
    assert!(matches!(
        train_stage1::<f32>(&fx.data(), &quick_train(1)),
        Err(Error::Insufficient(_))
    ));
}

#[test]
fn epoch_log_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let rows = vec![Stage1Epoch {
        epoch: 1,
        loss: 1.5,
        classif: 1.25,
        kl: 5.0,
        valid_accuracy: 0.5,
    }];
    write_csv(&path, &rows).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "epoch,loss,classif,kl,valid_accuracy\n1,1.5,1.25,5.0,0.5\n"
    );
}
