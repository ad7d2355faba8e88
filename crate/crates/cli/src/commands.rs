use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mgrank_core::dataset::write_jsonl;
use mgrank_core::grpo::compute_advantages;
use mgrank_core::metrics::eval_report;
use mgrank_core::responsefmt::{parse_response, render_prompt};
use mgrank_core::reward::batch_rewards;
use mgrank_core::simlab::{cross_domain_experiment, generate_corpus, prop1_experiment, Checkpoint, Trainer};
use mgrank_core::{
    load_dataset, AttributeSchema, DataFormat, Dataset, DomainWeightParams, Error as CoreError,
    GroundTruthMode, ImageRecord, ResponseGroup, ScoreSample, TabularPolicy, WeightMode, WeightParams,
};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::{
    Cli, Command, Common, DataArgs, EvalArgs, GenArgs, ParseArgs, Prop1Args, RewardArgs, TrainArgs, UsageError,
    XdomainArgs,
};

const TRAIN_SECTIONS: [&str; 3] = ["grpo", "reward", "train"];

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| usage("missing required --out"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn schema_from(names: &[String]) -> Result<AttributeSchema> {
    if names.is_empty() {
        return Ok(AttributeSchema::default());
    }
    Ok(AttributeSchema::from_names(names)?)
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let schema = schema_from(&args.attributes)?;
    Ok(load_dataset(&args.data, DataFormat::from_path(&args.data), &schema)?)
}

fn parse_flag<T: std::str::FromStr<Err = CoreError>>(flag: &str, raw: &Option<String>) -> Result<Option<T>> {
    raw.as_deref()
        .map(|s| s.parse().map_err(|e: CoreError| usage(format!("--{flag}: {e}"))))
        .transpose()
}

/// Objects of a JSONL file with their 1-based line numbers.
fn jsonl_objects(path: &Path) -> Result<Vec<(usize, Map<String, Value>)>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |detail: String| CoreError::MalformedRow {
            line: i + 1,
            field: "<row>".into(),
            detail,
        };
        match serde_json::from_str(line).map_err(|e| malformed(e.to_string()))? {
            Value::Object(obj) => rows.push((i + 1, obj)),
            _ => return Err(malformed("expected a JSON object".into()).into()),
        }
    }
    Ok(rows)
}

fn number(obj: &Map<String, Value>, line: usize, field: &str) -> Result<f64> {
    obj.get(field).and_then(Value::as_f64).ok_or_else(|| {
        CoreError::MalformedRow {
            line,
            field: field.into(),
            detail: "expected a number".into(),
        }
        .into()
    })
}

/// Scores of one `{"overall", "attrs": {..}}` object, overall first;
/// attributes absent from `attrs` are `None`.
fn dimension_scores(obj: &Map<String, Value>, line: usize, schema: &AttributeSchema) -> Result<Vec<Option<f64>>> {
    let mut scores = vec![None; schema.num_dimensions()];
    scores[0] = Some(number(obj, line, "overall")?);
    if let Some(attrs) = obj.get("attrs") {
        let attrs = attrs.as_object().ok_or_else(|| CoreError::MalformedRow {
            line,
            field: "attrs".into(),
            detail: "expected an object".into(),
        })?;
        for name in attrs.keys() {
            let dim = schema.lookup(name).filter(|d| !d.is_overall()).ok_or_else(|| CoreError::MalformedRow {
                line,
                field: format!("attrs.{name}"),
                detail: "unknown attribute".into(),
            })?;
            scores[dim.index()] = Some(number(attrs, line, name)?);
        }
    }
    Ok(scores)
}

fn keyed(schema: &AttributeSchema, values: impl IntoIterator<Item = Value>) -> Value {
    Value::Object(
        schema
            .dimensions()
            .zip(values)
            .map(|(d, v)| (schema.key(d).to_string(), v))
            .collect(),
    )
}

pub fn run(cli: Cli) -> Result<u8> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg.apply_file(path)?;
    }
    for assignment in &cli.common.set {
        cfg.set_assignment(assignment)?;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Gen(args) => gen(cfg, &cli.common, args),
        Command::Train(args) => train(cfg, &cli.common, args),
        Command::Reward(args) => reward(cfg, &cli.common, args),
        Command::Eval(args) => eval(cfg, &cli.common, args),
        Command::Parse(args) => parse(cfg, &cli.common, args),
        Command::Prop1(args) => prop1(cfg, &cli.common, args),
        Command::Xdomain(args) => xdomain(cfg, &cli.common, args),
    }
}

fn gen(mut cfg: RunConfig, common: &Common, args: &GenArgs) -> Result<u8> {
    let out = required_out(common)?;
    if let Some(n) = args.images {
        cfg.synth.images = n;
    }
    if let Some(n) = args.domains {
        cfg.synth.domains = n;
    }
    if let Some(s) = args.noise {
        cfg.synth.noise_sigma = s;
    }
    let dataset = generate_corpus(&cfg.synthetic_spec())?;
    let mut buf = Vec::new();
    write_jsonl(&dataset, &mut buf)?;
    let mut text = String::with_capacity(buf.len() + 16 * dataset.len());
    for line in String::from_utf8(buf).expect("JSON is UTF-8").lines() {
        let mut obj: Map<String, Value> = serde_json::from_str(line)?;
        obj.insert("seed".into(), json!(cfg.seed));
        text.push_str(&Value::Object(obj).to_string());
        text.push('\n');
    }
    write_file(out, text)?;
    println!(
        "n={} domains={} A={} seed={} out={}",
        dataset.len(),
        dataset.domains().len(),
        dataset.schema().arity(),
        cfg.seed,
        out.display()
    );
    Ok(0)
}

fn train(mut cfg: RunConfig, common: &Common, args: &TrainArgs) -> Result<u8> {
    let out = required_out(common)?;
    let dataset = load_data(&args.data)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let overrides = common.config.is_some()
                || !common.set.is_empty()
                || common.seed.is_some()
                || args.batch_size.is_some()
                || args.log_every.is_some()
                || args.learn_weights.is_some()
                || args.gt_mode.is_some();
            if overrides {
                return Err(usage("--resume takes its configuration from the checkpoint; only --steps may change"));
            }
            let (tcfg, state) = Checkpoint::load(path)?.into_parts()?;
            cfg = RunConfig::from_train_config(&tcfg, args.steps.unwrap_or(cfg.train.steps))?;
            Trainer::resume(&dataset, tcfg, state)?
        }
        None => {
            if let Some(n) = args.steps {
                cfg.train.steps = n;
            }
            if let Some(n) = args.batch_size {
                cfg.train.batch_size = n;
            }
            if let Some(n) = args.log_every {
                cfg.train.log_every = n;
            }
            if let Some(mode) = parse_flag::<WeightMode>("learn-weights", &args.learn_weights)? {
                cfg.reward.weight_mode = mode;
            }
            if let Some(mode) = parse_flag::<GroundTruthMode>("gt-mode", &args.gt_mode)? {
                cfg.reward.comparison.gt_mode = mode;
            }
            Trainer::new(&dataset, cfg.train_config()?)?
        }
    };
    let steps = cfg.train.steps;
    if trainer.state().step > steps {
        return Err(usage(format!(
            "checkpoint is at step {}, beyond --steps {steps}",
            trainer.state().step
        )));
    }
    trainer.run_until(steps)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let checkpoint = Checkpoint::new(trainer.config(), trainer.state());
    checkpoint.save(&out.join("checkpoint.json"))?;
    let mut csv = cfg.echo_line(&TRAIN_SECTIONS).into_bytes();
    trainer.state().report.write_csv(dataset.schema(), &mut csv)?;
    write_file(&out.join("report.csv"), csv)?;

    let report = &trainer.state().report;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("seed={} steps={} initial_srcc={}", cfg.seed, steps, fmt(report.initial_srcc));
    if let Some(last) = report.rows.last() {
        let attrs: Vec<String> = last.srcc_attributes.iter().map(|v| fmt(*v)).collect();
        println!(
            "step={} mean_reward={:.4} kl={:.5} srcc_overall={} srcc_attributes=[{}]",
            last.step,
            last.mean_reward,
            last.kl,
            fmt(last.srcc_overall),
            attrs.join(", ")
        );
    }
    Ok(0)
}

fn read_groups(path: &Path, schema: &AttributeSchema) -> Result<Vec<ResponseGroup>> {
    jsonl_objects(path)?
        .into_iter()
        .map(|(line, obj)| {
            let image_id = obj.get("image_id").and_then(Value::as_str).ok_or_else(|| CoreError::MalformedRow {
                line,
                field: "image_id".into(),
                detail: "expected a string".into(),
            })?;
            let samples = obj.get("samples").and_then(Value::as_array).ok_or_else(|| CoreError::MalformedRow {
                line,
                field: "samples".into(),
                detail: "expected an array".into(),
            })?;
            let samples = samples
                .iter()
                .map(|s| {
                    let s = s.as_object().ok_or_else(|| CoreError::MalformedRow {
                        line,
                        field: "samples".into(),
                        detail: "expected objects".into(),
                    })?;
                    let scores = dimension_scores(s, line, schema)?;
                    let scores = schema
                        .dimensions()
                        .zip(scores)
                        .map(|(d, v)| {
                            v.ok_or_else(|| CoreError::MalformedRow {
                                line,
                                field: format!("samples.attrs.{}", schema.key(d)),
                                detail: "missing".into(),
                            })
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    Ok(ScoreSample::from_scores(scores))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResponseGroup::new(image_id, samples))
        })
        .collect()
}

fn reward(mut cfg: RunConfig, common: &Common, args: &RewardArgs) -> Result<u8> {
    let out = required_out(common)?;
    if let Some(mode) = parse_flag::<GroundTruthMode>("gt-mode", &args.gt_mode)? {
        cfg.reward.comparison.gt_mode = mode;
    }
    let dataset = load_data(&args.data)?;
    let schema = dataset.schema();
    let groups = read_groups(&args.samples, schema)?;
    let records: Vec<&ImageRecord> = groups
        .iter()
        .map(|g| dataset.get(&g.image_id).ok_or_else(|| CoreError::UnknownImage(g.image_id.clone())))
        .collect::<std::result::Result<_, _>>()?;
    let pairs: Vec<_> = records.into_iter().zip(&groups).collect();
    let weights = WeightParams::uniform(schema.arity());
    let domain_weights = DomainWeightParams::zeros(dataset.domains().iter(), schema.arity());
    let rewards = batch_rewards(&pairs, &cfg.reward, &weights, &domain_weights)?;

    let mut text = String::new();
    for g in &rewards.groups {
        let advantages = compute_advantages(&g.composites(), cfg.grpo.eps_adv)?;
        for (k, (resp, adv)) in g.responses.iter().zip(advantages).enumerate() {
            let row = json!({
                "seed": cfg.seed,
                "image_id": g.image_id,
                "k": k,
                "domain": g.domain_id,
                "rewards": keyed(schema, resp.per_dimension.iter().map(|v| json!(v))),
                "composite": resp.composite,
                "advantage": adv,
                "weights": keyed(schema, g.weights.iter().map(|w| json!(w))),
            });
            text.push_str(&row.to_string());
            text.push('\n');
        }
    }
    write_file(out, text)?;
    println!(
        "seed={} images={} mean_composite={:.6}",
        cfg.seed,
        rewards.groups.len(),
        rewards.mean_composite()
    );
    Ok(0)
}

fn eval(cfg: RunConfig, common: &Common, args: &EvalArgs) -> Result<u8> {
    let out = required_out(common)?;
    let dataset = load_data(&args.data)?;
    let schema = dataset.schema();
    let mut predictions = BTreeMap::new();
    if let Some(path) = &args.predictions {
        for (line, obj) in jsonl_objects(path)? {
            let id = obj.get("image_id").and_then(Value::as_str).ok_or_else(|| CoreError::MalformedRow {
                line,
                field: "image_id".into(),
                detail: "expected a string".into(),
            })?;
            for (d, v) in schema.dimensions().zip(dimension_scores(&obj, line, schema)?) {
                if let Some(v) = v {
                    predictions.insert((id.to_string(), d), v);
                }
            }
        }
    } else if let Some(path) = &args.checkpoint {
        let checkpoint = Checkpoint::load(path)?;
        let policy = TabularPolicy::from_logits(checkpoint.grid, checkpoint.logits)?;
        if policy.num_dimensions() != schema.num_dimensions() {
            return Err(CoreError::KeyMismatch("checkpoint dimensions differ from the dataset schema".into()).into());
        }
        for r in dataset.records() {
            for d in schema.dimensions() {
                predictions.insert((r.image_id.clone(), d), policy.mean_score(&r.image_id, d)?);
            }
        }
    }
    let report = eval_report(&dataset, &predictions)?;
    let mut csv = cfg.echo_line(&[]).into_bytes();
    report.write_csv(&mut csv)?;
    write_file(out, csv)?;
    for row in &report.rows {
        println!(
            "{} {} n={} srcc={:.4} plcc={:.4}",
            row.domain, row.dimension, row.n, row.srcc, row.plcc
        );
    }
    Ok(0)
}

fn parse(cfg: RunConfig, common: &Common, args: &ParseArgs) -> Result<u8> {
    let schema = schema_from(&args.attributes)?;
    if args.prompt {
        let prompt = render_prompt(&schema);
        match &common.out {
            Some(out) => write_file(out, prompt)?,
            None => print!("{prompt}"),
        }
        return Ok(0);
    }
    let input = args.input.as_deref().expect("clap requires --input");
    let is_jsonl = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    let responses: Vec<(Value, String)> = if is_jsonl {
        jsonl_objects(input)?
            .into_iter()
            .map(|(line, obj)| {
                let text = obj.get("text").and_then(Value::as_str).ok_or_else(|| CoreError::MalformedRow {
                    line,
                    field: "text".into(),
                    detail: "expected a string".into(),
                })?;
                let id = obj.get("id").cloned().unwrap_or_else(|| json!(line));
                Ok((id, text.to_string()))
            })
            .collect::<Result<_>>()?
    } else {
        let stem = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        vec![(json!(stem), read_file(input)?)]
    };

    let mut text = String::new();
    let mut failed = 0;
    for (id, response) in &responses {
        let row = match parse_response(response, &schema) {
            Ok(parsed) => json!({
                "seed": cfg.seed,
                "id": id,
                "ok": true,
                "scores": keyed(&schema, parsed.scores.iter().map(|s| json!(s))),
                "reasoning": parsed.reasoning.map(|r| {
                    r.into_iter()
                        .map(|(d, t)| (schema.key(d).to_string(), Value::String(t)))
                        .collect::<Map<_, _>>()
                }),
            }),
            Err(e) => {
                failed += 1;
                eprintln!("{id}: {e}");
                json!({"seed": cfg.seed, "id": id, "ok": false, "error": e.code(), "message": e.to_string()})
            }
        };
        text.push_str(&row.to_string());
        text.push('\n');
    }
    match &common.out {
        Some(out) => write_file(out, text)?,
        None => print!("{text}"),
    }
    if failed > 0 {
        eprintln!("{failed} of {} responses failed to parse", responses.len());
        return Ok(3);
    }
    Ok(0)
}

fn prop1(mut cfg: RunConfig, common: &Common, args: &Prop1Args) -> Result<u8> {
    if let Some(n) = args.trials {
        cfg.prop1.trials = n;
    }
    if let Some(a) = args.attributes {
        cfg.prop1.attributes = a;
    }
    if let Some(v) = args.noise_var {
        cfg.prop1.noise_var = v;
    }
    let report = prop1_experiment(&cfg.prop1_config(), &WeightParams::uniform(cfg.prop1.attributes))?;
    let pass = report.inequality_holds();
    println!("seed: {}", cfg.seed);
    println!("trials: {}", report.trials);
    println!("var_single: {:.6e}", report.var_single);
    println!("var_composite: {:.6e}", report.var_composite);
    println!("margin: {:.6e} +/- {:.2e} (3 standard errors)", report.margin, 3.0 * report.margin_se);
    println!("predicted_margin: {:.6e}", report.predicted_margin);
    println!(
        "var_composite <= var_single: {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &common.out {
        let doc = json!({
            "seed": cfg.seed,
            "config": cfg.echo(&["prop1"]),
            "report": report,
            "pass": pass,
            "matches_prediction": report.matches_prediction(),
        });
        write_file(out, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(if pass { 0 } else { 3 })
}

fn xdomain(mut cfg: RunConfig, common: &Common, args: &XdomainArgs) -> Result<u8> {
    if let Some(n) = args.images {
        cfg.synth.images = n;
    }
    if let Some(n) = args.domains {
        cfg.synth.domains = n;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    if let Some(mode) = parse_flag::<GroundTruthMode>("gt-mode", &args.gt_mode)? {
        cfg.reward.comparison.gt_mode = mode;
    }
    let dataset = generate_corpus(&cfg.synthetic_spec())?;
    let report = cross_domain_experiment(&dataset, &cfg.train_config()?, cfg.train.steps)?;
    let doc = json!({
        "seed": cfg.seed,
        "config": cfg.echo(&["synth", "grpo", "reward", "train"]),
        "report": report,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match &common.out {
        Some(out) => {
            write_file(out, text)?;
            for row in &report.rows {
                println!("{} -> {}: srcc={:.4} n={}", row.train_set, row.eval_domain, row.srcc, row.n);
            }
            println!(
                "single_gap={:.4} joint_gap={:.4} reduction={:.4}",
                report.single_gap, report.joint_gap, report.reduction
            );
        }
        None => print!("{text}"),
    }
    Ok(0)
}
