use std::path::{Path, PathBuf};

use anaconv::dataio::{self, load_checkpoint, load_mnist, render, save_checkpoint, write_atomic, Split};
use anaconv::fitting::{self, FitProblem};
use anaconv::gradcheck::{self, GradcheckConfig};
use anaconv::nn::{evaluate, models, sgd_epoch, EpochMetrics, TrainConfig};
use anaconv::{parse_pattern, Arrangement, KernelFamily, KernelSize, Pattern};
use anyhow::{bail, Context, Result};
use serde_json::json;

use crate::{
    Command, CompactArgs, EvalArgs, FitArgs, GradcheckArgs, InvariantViolation, NetKind, RenderArgs, SplitArg,
    TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render(a),
        Command::Compact(a) => compact(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn echo(config: serde_json::Value) {
    eprintln!("config: {config}");
}

fn parse_pair(text: &str, what: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split('x').collect();
    let num = |s: &str| -> Result<usize> {
        s.trim().parse::<usize>().ok().filter(|&n| n > 0).with_context(|| format!("invalid {what} {text:?}"))
    };
    match parts.as_slice() {
        [n] => {
            let n = num(n)?;
            Ok((n, n))
        }
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => bail!("invalid {what} {text:?}"),
    }
}

fn bind(pattern: &Pattern, channels: Option<&str>) -> Result<Arrangement> {
    Ok(match (pattern, channels) {
        (Pattern::Counts(a), None) => a.clone(),
        (p, Some(c)) => {
            let (ci, co) = parse_pair(c, "channels")?;
            p.bind(ci, co)?
        }
        (Pattern::Ratios(r), None) => match r.channels {
            Some((ci, co)) => pattern.bind(ci, co)?,
            None => bail!("ratio pattern needs --channels CIxCO"),
        },
    })
}

fn metrics_json(m: &EpochMetrics) -> serde_json::Value {
    json!({"loss": m.mean_loss, "accuracy": m.accuracy})
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig { learning_rate: a.lr, batch_size: a.batch, epochs: a.epochs, seed: a.seed };
    config.validate()?;
    let pattern_text = match (a.net, &a.arrangement) {
        (NetKind::Lenet, Some(_)) => bail!("--arrangement applies only to --net anann-lenet"),
        (NetKind::Lenet, None) => "P1.0".to_string(),
        (NetKind::AnannLenet, p) => p.clone().unwrap_or_else(|| models::EXP3_RATIOS.to_string()),
    };
    let pattern = parse_pattern(&pattern_text)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let net_name = match a.net {
        NetKind::Lenet => "lenet",
        NetKind::AnannLenet => "anann-lenet",
    };
    let resolved = json!({
        "command": "train",
        "net": net_name,
        "arrangement": pattern.to_string(),
        "data_dir": a.data_dir,
        "epochs": a.epochs,
        "lr": a.lr,
        "batch": a.batch,
        "seed": a.seed,
        "train_limit": a.train_limit,
        "test_limit": a.test_limit,
        "out": a.out,
        "metrics": metrics_path,
    });
    echo(resolved.clone());

    let mut train_set = load_mnist(&a.data_dir, Split::Train).context("loading training split")?;
    if let Some(n) = a.train_limit {
        train_set = train_set.take(n);
    }
    let test_set = match load_mnist(&a.data_dir, Split::Test) {
        Ok(t) => Some(match a.test_limit {
            Some(n) => t.take(n),
            None => t,
        }),
        Err(dataio::DataError::Io { .. }) => None,
        Err(e) => return Err(e).context("loading test split"),
    };

    let mut net = match a.net {
        NetKind::Lenet => models::plain_lenet(a.seed)?,
        NetKind::AnannLenet => models::anann_lenet(&pattern, a.seed)?,
    };
    let training =
        |epoch: usize, last: serde_json::Value| json!({"config": resolved, "epochs_completed": epoch, "last": last});
    save_checkpoint(&net, &training(0, serde_json::Value::Null), &a.out)?;
    let mut log = String::new();
    write_atomic(&metrics_path, log.as_bytes())?;
    for epoch in 0..a.epochs {
        let m = sgd_epoch(&mut net, &train_set, &config, epoch as u64)?;
        let mut line = json!({"epoch": epoch + 1, "train": metrics_json(&m)});
        if let Some(t) = &test_set {
            line["test"] = metrics_json(&evaluate(&net, t)?);
        }
        println!("{line}");
        log.push_str(&line.to_string());
        log.push('\n');
        write_atomic(&metrics_path, log.as_bytes())?;
        save_checkpoint(&net, &training(epoch + 1, line), &a.out)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    echo(json!({
        "command": "eval",
        "ckpt": a.ckpt,
        "data_dir": a.data_dir,
        "split": format!("{:?}", a.split).to_lowercase(),
        "limit": a.limit,
    }));
    let ckpt = load_checkpoint(&a.ckpt)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let mut data = load_mnist(&a.data_dir, split)?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let m = evaluate(&ckpt.network, &data)?;
    println!("{}", json!({"items": data.len(), "loss": m.mean_loss, "accuracy": m.accuracy}));
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let family = KernelFamily::from_code(&a.family).with_context(|| format!("unknown family code {:?}", a.family))?;
    echo(json!({
        "command": "fit",
        "targets": a.targets,
        "family": family.code(),
        "restarts": a.restarts,
        "max_iters": a.max_iters,
        "tol": a.tol,
        "seed": a.seed,
        "out": a.out,
    }));
    let targets = dataio::read_targets(&a.targets)?;
    let problem = FitProblem {
        restarts: a.restarts,
        max_iters: a.max_iters,
        tol: a.tol,
        seed: a.seed,
        ..FitProblem::new(targets, family)
    };
    let result = fitting::fit(&problem)?;
    let report = fitting::fit_report(&result)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    echo(json!({
        "command": "render",
        "ckpt": a.ckpt,
        "layer": a.layer,
        "out": a.out,
        "rows": a.rows,
        "cols": a.cols,
    }));
    let ckpt = load_checkpoint(&a.ckpt)?;
    let count = ckpt.network.acl_layers().count();
    let (_, layer) = ckpt
        .network
        .acl_layers()
        .nth(a.layer)
        .with_context(|| format!("layer index {} out of range: checkpoint has {count} ACLs", a.layer))?;
    let layout = match (a.rows, a.cols) {
        (Some(rows), Some(cols)) => render::RenderLayout::Grid { rows, cols },
        _ => render::RenderLayout::auto(layer),
    };
    render::write_render(layer, layout, Path::new(&a.out))?;
    Ok(())
}

fn compact(a: CompactArgs) -> Result<()> {
    let (h, w) = parse_pair(&a.kernel, "kernel size")?;
    echo(json!({
        "command": "compact",
        "arrangement": a.arrangement,
        "kernel": format!("{h}x{w}"),
        "channels": a.channels,
    }));
    let pattern = parse_pattern(&a.arrangement)?;
    let arr = bind(&pattern, a.channels.as_deref())?;
    println!("{:.4}", arr.compact_factor(KernelSize::new(h, w)));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let (h, w) = parse_pair(&a.kernel, "kernel size")?;
    let text = a.arrangement.clone().unwrap_or_else(|| gradcheck::DEFAULT_PATTERN.to_string());
    let pattern = parse_pattern(&text)?;
    let arr = bind(&pattern, a.channels.as_deref())?;
    if a.points == 0 {
        bail!("--points must be at least 1");
    }
    echo(json!({
        "command": "gradcheck",
        "arrangement": arr.serialize(),
        "kernel": format!("{h}x{w}"),
        "points": a.points,
        "tolerance": a.tolerance,
        "seed": a.seed,
        "inject_fault": a.inject_fault,
    }));
    let config = GradcheckConfig {
        kernel_size: KernelSize::new(h, w),
        points: a.points,
        tolerance: a.tolerance,
        seed: a.seed,
        inject_sign_fault: a.inject_fault,
    };
    let rows = gradcheck::gradcheck(&arr, &config)?;
    print!("{}", gradcheck::render_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.family.as_str()).collect();
    if !failed.is_empty() {
        return Err(InvariantViolation(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
