//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mgrank_core::grpo::{clipped_term, compute_advantages, grpo_gradient, grpo_loss, kl_penalty, PolicyGradient};
use mgrank_core::reward::{batch_rewards, effective_weights, fidelity};
use mgrank_core::simlab::{generate_corpus, prop1_experiment, relabel_domains, DomainTransform, Prop1Config};
use mgrank_core::thurstone::{comparison_prob, std_normal_cdf};
use mgrank_core::{
    parse_response, plcc, save_dataset, serialize_response, srcc, AttributeSchema, Checkpoint, ComparisonConfig,
    DataFormat, DimensionId, DomainWeightParams, GrpoConfig, ImageRecord, ParsedResponse, ResponseGroup,
    RewardConfig, ScoreGrid, ScoreSample, ScoredGroup, SyntheticSpec, TabularPolicy, WeightParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {took:.2?}, limit {limit:?}"))
}

fn thurstone_suite() -> Outcome {
    let start = Instant::now();
    let cfg = ComparisonConfig::default();
    let fine = ComparisonConfig {
        variance_floor: 1e-12,
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 10_000;
    for _ in 0..cases {
        let (mi, mj) = (rng.random_range(1.0..5.0), rng.random_range(1.0..5.0));
        let (vi, vj) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
        let p = comparison_prob(mi, vi, mj, vj, &cfg).unwrap();
        let q = comparison_prob(mj, vj, mi, vi, &cfg).unwrap();
        ensure((p + q - 1.0).abs() <= 1e-9, || format!("antisymmetry at ({mi},{vi},{mj},{vj})"))?;

        let d = rng.random_range(0.0..2.0);
        let up = comparison_prob(mi + d, vi, mj, vj, &cfg).unwrap();
        ensure(up >= p, || format!("monotonicity at ({mi},{vi},{mj},{vj}) + {d}"))?;

        let (vi, vj) = (vi + 0.01, vj + 0.01);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-20.0..20.0));
        let p = comparison_prob(mi, vi, mj, vj, &fine).unwrap();
        let q = comparison_prob(a * mi + b, a * a * vi, a * mj + b, a * a * vj, &fine).unwrap();
        ensure((p - q).abs() <= 1e-9, || format!("affine invariance a={a} b={b}: {p} vs {q}"))?;
    }
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let z = -8.0 + 16.0 * i as f64 / 999.0;
        worst = worst.max((std_normal_cdf(z) - oracles::phi(z)).abs());
    }
    ensure(worst <= 1e-10, || format!("cdf deviates from oracle by {worst:e}"))?;
    within(start, Duration::from_secs(5), "thurstone suite")?;
    Ok(format!("{cases} cases x 3 properties, cdf max error {worst:.1e}, {:.2?}", start.elapsed()))
}

fn record(id: &str, domain: &str, mos: f64, attrs: &[f64]) -> ImageRecord {
    ImageRecord::new(id, domain, mos, attrs.iter().map(|&v| Some(v)).collect()).unwrap()
}

fn group(id: &str, rows: &[Vec<f64>]) -> ResponseGroup {
    ResponseGroup::new(id, rows.iter().map(|r| ScoreSample::from_scores(r.clone())).collect())
}

fn reward_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (p, q) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let f = fidelity(p, q).unwrap();
        ensure((0.0..=1.0).contains(&f) && fidelity(p, p).unwrap() == 1.0, || format!("fidelity({p},{q})"))?;
    }

    // hand-built batch: two images, three responses each, four attributes
    let records = [
        record("a", "d", 4.0, &[3.5, 2.0, 4.5, 3.0]),
        record("b", "d", 2.5, &[4.0, 2.0, 1.5, 3.5]),
    ];
    let groups = [
        group("a", &[vec![4.0, 3.0, 2.5, 4.0, 3.0], vec![3.5, 3.5, 2.0, 5.0, 2.5], vec![4.5, 3.0, 1.5, 4.5, 3.5]]),
        group("b", &[vec![2.0, 4.0, 2.0, 1.5, 3.0], vec![3.0, 4.5, 2.5, 2.0, 3.0], vec![2.5, 3.0, 2.0, 1.0, 4.0]]),
    ];
    let weights = WeightParams::uniform(4);
    let domains = DomainWeightParams::zeros(["d"], 4);
    let pairs: Vec<_> = records.iter().zip(&groups).collect();
    let got = batch_rewards(&pairs, &RewardConfig::default(), &weights, &domains).unwrap();
    let w = effective_weights(&weights, &domains, "d").unwrap();
    let mut worst = 0.0f64;
    for i in 0..2 {
        for k in 0..3 {
            let mut composite = 0.0;
            for (d, wd) in w.iter().enumerate() {
                let dim = DimensionId::new(d);
                let scores: Vec<Vec<f64>> = groups.iter().map(|g| g.scores(dim).collect()).collect();
                let truth: Vec<f64> = records.iter().map(|r| r.ground_truth(dim).unwrap()).collect();
                let want = oracles::fidelity_reward(&scores, &truth, i, k);
                worst = worst.max((got.groups[i].responses[k].per_dimension[d].unwrap() - want).abs());
                composite += wd * want;
            }
            worst = worst.max((got.groups[i].responses[k].composite - composite).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("batch rewards deviate from the direct formula by {worst:e}"))?;

    // strictly increasing relabeling of one domain's scores
    let ds = generate_corpus(&SyntheticSpec::default()).unwrap();
    let warp = |v: f64| 1.0 + 4.0 * ((v - 1.0) / 4.0).powf(1.7);
    let sampled = |records: &[ImageRecord]| {
        let policy = TabularPolicy::jittered(records.iter().map(|r| r.image_id.clone()), 5, ScoreGrid::default(), 1.0, 3)
            .unwrap();
        let groups: Vec<ResponseGroup> = records
            .iter()
            .enumerate()
            .map(|(i, r)| mgrank_core::grpo::sample_group(&policy, &r.image_id, 6, i as u64).unwrap())
            .collect();
        let pairs: Vec<_> = records.iter().zip(&groups).collect();
        batch_rewards(&pairs, &RewardConfig::default(), &weights, &DomainWeightParams::zeros(["domain_0"], 4)).unwrap()
    };
    let base: Vec<ImageRecord> = ds.domain_records("domain_0").take(8).cloned().collect();
    let warped: Vec<ImageRecord> = base
        .iter()
        .map(|r| {
            let attrs: Vec<f64> = r.attr_mos.iter().map(|v| warp(v.unwrap())).collect();
            record(&r.image_id, &r.domain_id, warp(r.mos), &attrs)
        })
        .collect();
    ensure(sampled(&base) == sampled(&warped), || "rewards changed under monotone relabeling".into())?;
    Ok(format!("direct-formula error {worst:.1e}; relabeled batch bit-identical"))
}

fn toy_policy(logits: [[f64; 3]; 4]) -> TabularPolicy {
    let map: BTreeMap<String, Vec<Vec<f64>>> = [
        ("a".to_string(), vec![logits[0].to_vec(), logits[1].to_vec()]),
        ("b".to_string(), vec![logits[2].to_vec(), logits[3].to_vec()]),
    ]
    .into();
    TabularPolicy::from_logits(ScoreGrid::new(vec![1.0, 3.0, 5.0]).unwrap(), map).unwrap()
}

fn grpo_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let r: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let adv = compute_advantages(&r, 1e-8).unwrap();
        let spread = |v: &[f64]| {
            let m = oracles::mean(v);
            (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let sigma = spread(&r);
        let unit = if sigma == 0.0 { 0.0 } else { sigma / (sigma + 1e-8) };
        ensure(oracles::mean(&adv).abs() < 1e-9 && (spread(&adv) - unit).abs() < 1e-9, || {
            format!("advantages of {r:?}")
        })?;
    }

    let policy = toy_policy([[0.3, -0.2, 0.5], [0.0, 0.8, -0.4], [-0.6, 0.1, 0.2], [0.4, 0.4, -0.9]]);
    let old = toy_policy([[0.35, -0.2, 0.45], [0.0, 0.75, -0.4], [-0.6, 0.15, 0.2], [0.4, 0.4, -0.85]]).snapshot();
    let reference = toy_policy([[0.0; 3]; 4]).snapshot();
    let batch = vec![
        ScoredGroup {
            group: group("a", &[vec![1.0, 3.0], vec![5.0, 5.0], vec![3.0, 3.0]]),
            advantages: vec![-1.1, 1.3, -0.2],
        },
        ScoredGroup {
            group: group("b", &[vec![3.0, 1.0], vec![3.0, 5.0], vec![1.0, 1.0]]),
            advantages: vec![0.4, 0.9, -1.3],
        },
    ];
    let cfg = GrpoConfig {
        beta: 0.5,
        ..GrpoConfig::default()
    };
    let (_, analytic) = grpo_gradient(&policy, &old, &reference, &batch, &cfg).unwrap();
    let h = 1e-5;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for id in ["a", "b"] {
        for d in 0..2 {
            for c in 0..3 {
                let shifted = |delta: f64| {
                    let mut p = policy.clone();
                    p.image_logits_mut(id).unwrap()[d][c] += delta;
                    grpo_loss(&p, &old, &reference, &batch, &cfg).unwrap()
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let g: &PolicyGradient = &analytic;
                diff = diff.max((numeric - g[id][d][c]).abs());
                scale = scale.max(numeric.abs());
            }
        }
    }
    let rel = diff / scale;
    ensure(rel < 1e-4, || format!("gradient relative error {rel:e}"))?;

    let kl_self = kl_penalty(&policy, &policy.snapshot(), ["a", "b"]).unwrap();
    ensure(kl_self == 0.0, || format!("KL(pi, pi) = {kl_self}"))?;

    let branches = [
        (clipped_term(1.0, 1.0, 0.2), 1.0),
        (clipped_term(1.5, 1.0, 0.2), 1.2),
        (clipped_term(0.5, -1.0, 0.2), -0.8),
        (clipped_term(0.5, 1.0, 0.2), 0.5),
        (clipped_term(1.5, -1.0, 0.2), -1.5),
    ];
    for (got, want) in branches {
        ensure((got - want).abs() < 1e-15, || format!("clip term {got}, expected {want}"))?;
    }
    Ok(format!("finite-difference relative error {rel:.1e}; KL(pi,pi)=0; 5 clip branches"))
}

fn prop1_check() -> Outcome {
    let start = Instant::now();
    let r = prop1_experiment(&Prop1Config::default(), &WeightParams::uniform(4)).map_err(|e| e.to_string())?;
    ensure(r.trials == 100_000, || format!("{} trials", r.trials))?;
    ensure(r.margin > 0.0 && r.inequality_holds(), || format!("composite {} vs single {}", r.var_composite, r.var_single))?;
    let predicted = 0.01 * (1.0 - 1.0 / 5.0);
    ensure((r.predicted_margin - predicted).abs() < 1e-15, || format!("prediction {}", r.predicted_margin))?;
    ensure(r.matches_prediction(), || {
        format!("margin {:.4e} vs predicted {predicted:.4e} (3se {:.2e})", r.margin, 3.0 * r.margin_se)
    })?;
    within(start, Duration::from_secs(10), "prop1")?;
    Ok(format!(
        "var_single {:.4e}, var_composite {:.4e}, margin {:.4e} +/- {:.1e} vs predicted {predicted:.4e}, {:.2?}",
        r.var_single,
        r.var_composite,
        r.margin,
        3.0 * r.margin_se,
        start.elapsed()
    ))
}

fn mgrank(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mgrank"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning mgrank: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "mgrank {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Result<Vec<u8>, String> {
    let mut args = vec!["train", "--data", s(data), "--steps", "300", "--threads", "1", "--out", s(out)];
    args.extend_from_slice(extra);
    mgrank(&args)?;
    std::fs::read(out.join("checkpoint.json")).map_err(|e| e.to_string())
}

fn end_to_end(dir: &Path) -> Outcome {
    let corpus = dir.join("corpus.jsonl");
    mgrank(&["gen", "--images", "64", "--domains", "2", "--seed", "42", "--out", s(&corpus)])?;

    let start = Instant::now();
    let run_a = dir.join("run_a");
    let bytes_a = train(&corpus, &run_a, &[])?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("training took {took:.2?}"))?;

    let ckpt = Checkpoint::load(&run_a.join("checkpoint.json")).map_err(|e| e.to_string())?;
    let initial = ckpt.report.initial_srcc.ok_or("no initial srcc")?;
    let last = ckpt.report.rows.last().ok_or("empty report")?;
    let fin = last.srcc_overall.ok_or("no final srcc")?;
    ensure(initial.abs() <= 0.25, || format!("initial SRCC {initial}"))?;
    ensure(fin >= 0.8, || format!("final SRCC {fin}"))?;
    let attrs: Vec<f64> = last.srcc_attributes.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    ensure(attrs.iter().all(|v| *v >= 0.6), || format!("attribute SRCC {attrs:?}"))?;

    let csv = std::fs::read_to_string(run_a.join("report.csv")).map_err(|e| e.to_string())?;
    let data_rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    ensure(data_rows == 30, || format!("report.csv has {data_rows} rows"))?;

    let bytes_b = train(&corpus, &dir.join("run_b"), &[])?;
    ensure(bytes_a == bytes_b, || "second run differs".into())?;

    let part = dir.join("run_part");
    mgrank(&["train", "--data", s(&corpus), "--steps", "150", "--threads", "1", "--out", s(&part)])?;
    let resumed = dir.join("run_resumed");
    let ck = part.join("checkpoint.json");
    let bytes_c = train(&corpus, &resumed, &["--resume", s(&ck)])?;
    ensure(bytes_a == bytes_c, || "resumed checkpoint differs".into())?;
    let report_a = std::fs::read(run_a.join("report.csv")).map_err(|e| e.to_string())?;
    let report_c = std::fs::read(resumed.join("report.csv")).map_err(|e| e.to_string())?;
    ensure(report_a == report_c, || "resumed report.csv differs".into())?;

    Ok(format!(
        "SRCC {initial:.3} -> {fin:.3}, attributes {}, {took:.2?}; rerun and resume byte-identical",
        attrs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
    ))
}

fn scale_invariance(dir: &Path) -> Outcome {
    let corpus = dir.join("corpus.jsonl");
    if !corpus.exists() {
        mgrank(&["gen", "--images", "64", "--domains", "2", "--seed", "42", "--out", s(&corpus)])?;
    }
    let ds = mgrank_core::load_dataset(&corpus, DataFormat::Jsonl, &AttributeSchema::default()).map_err(|e| e.to_string())?;
    let moved = relabel_domains(
        &ds,
        &[DomainTransform::new("domain_0", 0.5, 1.0), DomainTransform::new("domain_1", 0.75, 0.5)],
    )
    .map_err(|e| e.to_string())?;
    ensure(moved != ds, || "relabeling changed nothing".into())?;
    let moved_path = dir.join("relabeled.jsonl");
    save_dataset(&moved, &moved_path, DataFormat::Jsonl).map_err(|e| e.to_string())?;

    let hard_a = train(&corpus, &dir.join("hard_a"), &[])?;
    let hard_b = train(&moved_path, &dir.join("hard_b"), &[])?;
    ensure(hard_a == hard_b, || "hard-mode trajectories differ".into())?;
    let soft_a = train(&corpus, &dir.join("soft_a"), &["--gt-mode", "soft"])?;
    let soft_b = train(&moved_path, &dir.join("soft_b"), &["--gt-mode", "soft"])?;
    ensure(soft_a != soft_b, || "soft-mode trajectories are identical".into())?;
    Ok("hard: byte-identical checkpoints; soft: checkpoints differ".into())
}

fn metrics_suite() -> Outcome {
    let mut perms = 0usize;
    let mut worst = 0.0f64;
    for n in 2..=8 {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 + 0.25).collect();
        oracles::for_each_permutation(n, |perm| {
            let y: Vec<f64> = perm.iter().map(|&i| (i * i) as f64 - 3.0).collect();
            worst = worst.max((srcc(&x, &y).unwrap() - oracles::spearman_no_ties(&x, &y)).abs());
            worst = worst.max((plcc(&x, &y).unwrap() - oracles::pearson(&x, &y)).abs());
            perms += 1;
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tied = 0;
    while tied < 1000 {
        let n = rng.random_range(3..40);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        if let Ok(v) = srcc(&x, &y) {
            worst = worst.max((v - oracles::spearman(&x, &y)).abs());
            tied += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("{perms} permutations, {tied} tied inputs, max deviation {worst:.1e}"))
}

fn parser_suite() -> Outcome {
    let schema = AttributeSchema::default();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/parser_golden.jsonl");
    let cases = oracles::golden_cases(&golden);
    ensure(cases.len() == 50, || format!("{} golden cases", cases.len()))?;
    for c in &cases {
        let got = parse_response(&c.text, &schema);
        let ok = match (&c.scores, &c.error, &got) {
            (Some(want), None, Ok(p)) => &p.scores == want,
            (None, Some(code), Err(e)) => e.code() == code,
            _ => false,
        };
        ensure(ok, || format!("golden case `{}`: {got:?}", c.name))?;
    }

    let pieces = [
        "<think>", "</think>", "Overall", "Sharpness", "Color", "Noise Level", ": ", ", ", "\n", "**", "[1-5]", "3.5",
        "6", "-1", "é", "\u{0}", "  ", ".", "#",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fuzz = 10_000;
    for _ in 0..fuzz {
        let mut text = String::new();
        for _ in 0..rng.random_range(0..30) {
            if rng.random_bool(0.2) {
                text.push(char::from_u32(rng.random_range(0..0x800)).unwrap_or('?'));
            } else {
                text.push_str(pieces[rng.random_range(0..pieces.len())]);
            }
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| parse_response(&text, &schema)));
        ensure(outcome.is_ok(), || format!("parser panicked on {text:?}"))?;
    }

    let round_trips = 500;
    for i in 0..round_trips {
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(100..=500) as f64 / 100.0).collect();
        let reasoning = (i % 2 == 0).then(|| schema.dimensions().map(|d| (d, format!("segment {i} of {}", d.index()))).collect());
        let p = ParsedResponse {
            reasoning,
            scores,
            raw: String::new(),
        };
        let back = parse_response(&serialize_response(&p, &schema), &schema).map_err(|e| e.to_string())?;
        ensure(back.scores == p.scores && back.reasoning == p.reasoning, || format!("round trip {i}"))?;
    }
    Ok(format!("50 golden cases, {fuzz} fuzz inputs without panic, {round_trips} round trips"))
}

fn main() {
    let dir: PathBuf = tempfile::tempdir().expect("temp dir").keep();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("thurstone", Box::new(thurstone_suite)),
        ("reward", Box::new(reward_suite)),
        ("grpo", Box::new(grpo_suite)),
        ("variance reduction", Box::new(prop1_check)),
        ("end-to-end training", Box::new(|| end_to_end(&dir))),
        ("scale invariance", Box::new(|| scale_invariance(&dir))),
        ("metrics", Box::new(metrics_suite)),
        ("parser", Box::new(parser_suite)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
