mod oracles;

use mgrank_core::simlab::{
    cross_domain_experiment, generate_corpus, policy_srcc, prop1_experiment, relabel_domains, run_training,
    DomainTransform, Prop1Config, JOINT_TRAIN_SET,
};
use mgrank_core::{
    srcc, Checkpoint, DimensionId, GroundTruthMode, SyntheticSpec, TrainConfig, Trainer, WeightParams,
};

fn corpus() -> mgrank_core::Dataset {
    generate_corpus(&SyntheticSpec::default()).unwrap()
}

#[test]
fn default_run_learns_every_dimension() {
    let ds = corpus();
    let (policy, report) = run_training(&ds, &TrainConfig::default(), 300).unwrap();
    let initial = report.initial_srcc.unwrap();
    assert!(initial.abs() <= 0.25, "initial {initial}");
    let last = report.rows.last().unwrap();
    assert!(last.srcc_overall.unwrap() >= 0.8, "{last:?}");
    for (a, s) in last.srcc_attributes.iter().enumerate() {
        assert!(s.unwrap() >= 0.6, "attribute {a}: {s:?}");
    }
    assert_eq!(policy_srcc(&policy, &ds, DimensionId::OVERALL).unwrap(), last.srcc_overall);

    assert_eq!(report.rows.len(), 30);
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_reward) && r.kl >= 0.0));
    let early = oracles::mean(&report.rows[..3].iter().map(|r| r.mean_reward).collect::<Vec<_>>());
    let late = oracles::mean(&report.rows[27..].iter().map(|r| r.mean_reward).collect::<Vec<_>>());
    assert!(late > early, "{early} -> {late}");
    let s_early = report.rows[0].srcc_overall.unwrap();
    assert!(last.srcc_overall.unwrap() > s_early);
}

#[test]
fn zero_steps_leave_the_policy_at_initialization() {
    let ds = corpus();
    let cfg = TrainConfig::default();
    let trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    let (policy, report) = run_training(&ds, &cfg, 0).unwrap();
    assert_eq!(&policy, &trainer.state().policy);
    assert!(report.rows.is_empty());
}

#[test]
fn checkpoint_resume_reproduces_the_uninterrupted_run() {
    let ds = corpus();
    let cfg = TrainConfig::default();
    let mut straight = Trainer::new(&ds, cfg.clone()).unwrap();
    straight.run_until(120).unwrap();

    let mut first = Trainer::new(&ds, cfg.clone()).unwrap();
    first.run_until(70).unwrap();
    let json = Checkpoint::new(&cfg, first.state()).to_json().unwrap();
    let restored: Checkpoint = serde_json::from_str(&json).unwrap();
    let (cfg2, state) = restored.into_parts().unwrap();
    let mut second = Trainer::resume(&ds, cfg2, state).unwrap();
    second.run_until(120).unwrap();

    assert_eq!(second.state(), straight.state());
    assert_eq!(
        Checkpoint::new(&cfg, second.state()).to_json().unwrap(),
        Checkpoint::new(&cfg, straight.state()).to_json().unwrap()
    );
}

#[test]
fn hard_mode_trajectory_ignores_domain_relabeling() {
    let ds = corpus();
    let moved = relabel_domains(
        &ds,
        &[DomainTransform::new("domain_0", 0.5, 1.0), DomainTransform::new("domain_1", 0.75, 0.5)],
    )
    .unwrap();
    assert_ne!(ds, moved);
    let cfg = TrainConfig::default();
    let run = |d| {
        let mut t = Trainer::new(d, cfg.clone()).unwrap();
        t.run_until(60).unwrap();
        t.into_state()
    };
    assert_eq!(run(&ds), run(&moved));

    let mut soft = cfg.clone();
    soft.reward.comparison.gt_mode = GroundTruthMode::Soft;
    let run_soft = |d| {
        let mut t = Trainer::new(d, soft.clone()).unwrap();
        t.run_until(60).unwrap();
        t.into_state()
    };
    assert_ne!(run_soft(&ds).policy, run_soft(&moved).policy);
}

#[test]
fn corpus_is_deterministic_and_domain_order_preserving() {
    let a = corpus();
    assert_eq!(a, corpus());
    assert_eq!(a.len(), 64);
    let other = generate_corpus(&SyntheticSpec {
        seed: 43,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_ne!(a, other);
    for domain in a.domains() {
        let recs: Vec<_> = a.domain_records(domain).collect();
        let mos: Vec<f64> = recs.iter().map(|r| r.mos).collect();
        let latent: Vec<f64> = recs.iter().map(|r| r.true_quality(DimensionId::OVERALL).unwrap()).collect();
        // clipping can create ties but never reverses an order
        assert!(srcc(&mos, &latent).unwrap() > 0.99, "{domain}");
    }
}

#[test]
fn variance_reduction_matches_prediction() {
    let report = prop1_experiment(&Prop1Config::default(), &WeightParams::uniform(4)).unwrap();
    assert!(report.inequality_holds());
    assert!(report.matches_prediction(), "{report:?}");
    assert!((report.predicted_margin - 0.01 * 0.8).abs() < 1e-15);
    // var of a mean of five i.i.d. terms, within three standard errors
    let v = 0.01;
    let se = v / 5.0 * (2.0 / (report.trials as f64 - 1.0)).sqrt();
    assert!((report.var_composite - v / 5.0).abs() <= 3.0 * se, "{}", report.var_composite);
    let se = v * (2.0 / (report.trials as f64 - 1.0)).sqrt();
    assert!((report.var_single - v).abs() <= 3.0 * se, "{}", report.var_single);
}

#[test]
fn variance_without_attributes_is_unchanged() {
    let cfg = Prop1Config {
        trials: 5000,
        ..Prop1Config::default()
    };
    let report = prop1_experiment(&cfg, &WeightParams::uniform(0)).unwrap();
    assert_eq!(report.var_composite, report.var_single);
    assert_eq!(report.margin, 0.0);
}

#[test]
fn cross_domain_report_structure() {
    let spec = SyntheticSpec {
        num_images: 48,
        domains: mgrank_core::simlab::default_domain_transforms(3),
        seed: 7,
        ..SyntheticSpec::default()
    };
    let ds = generate_corpus(&spec).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let report = cross_domain_experiment(&ds, &cfg, 60).unwrap();
    assert_eq!(report.rows.len(), 4 * 3);
    assert_eq!(report.gaps.len(), 12);
    for train in ["domain_0", "domain_1", "domain_2", JOINT_TRAIN_SET] {
        for eval in ["domain_0", "domain_1", "domain_2"] {
            let row = report.rows.iter().find(|r| r.train_set == train && r.eval_domain == eval);
            assert_eq!(row.map(|r| r.n), Some(16), "{train}->{eval}");
        }
    }
    for g in report.gaps.iter().filter(|g| g.train_set == g.eval_domain) {
        assert_eq!(g.gap, 0.0);
    }
    assert!(report.single_gap.is_finite() && report.joint_gap.is_finite());
    assert_eq!(report.eval_report().rows.len(), 12);
}
