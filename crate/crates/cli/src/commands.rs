use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use caser::ablation::{ablation_csv, run_ablation, Popularity};
use caser::checkpoint;
use caser::config::{expand_grid, RunConfig};
use caser::data::{
    build_sequences, chronological_split, generate_instances, load_interactions, write_instance_cache, IndexMaps,
    InstancePart, SplitDataset, SplitRatios, UserSequence,
};
use caser::eval::{evaluate as eval_model, recommend_top_n, EvalOptions, EvalTarget};
use caser::gradcheck::{gradient_check_with, toy_hyperparams, GradCheckOptions};
use caser::rules::{mine_rules as mine, rules_to_csv, MiningConfig};
use caser::train::{train_with_callback, EpochLog};
use caser::{ComponentMask, HyperParams, ModelParams};

use crate::UsageError;

struct Dataset {
    sequences: Vec<UserSequence>,
    maps: IndexMaps,
    split: SplitDataset,
    interactions: usize,
}

fn log_config(cfg: &RunConfig) {
    eprintln!("# resolved configuration");
    for line in cfg.to_text().lines() {
        eprintln!("#   {line}");
    }
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| UsageError("no data file: pass --data or set `data` in the config".into()))?;
    let rows = load_interactions(path, cfg.format).with_context(|| format!("loading {}", path.display()))?;
    let (sequences, maps) = build_sequences(&rows, cfg.min_feedback)?;
    let split = chronological_split(&sequences, SplitRatios::default(), maps.users.len(), maps.item_count())?;
    Ok(Dataset {
        interactions: sequences.iter().map(|s| s.items.len()).sum(),
        sequences,
        maps,
        split,
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// Loads a checkpoint and checks it was trained on this dataset.
fn load_model(path: Option<PathBuf>, cfg: &RunConfig, data: &Dataset) -> Result<(ModelParams, HyperParams)> {
    let path = path
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| UsageError("no checkpoint: pass --checkpoint or set `checkpoint`".into()))?;
    let (params, hp) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if params.user_count() != data.split.user_count || params.item_count() != data.split.item_count {
        bail!(
            "checkpoint has {} users / {} items but the data has {} / {}",
            params.user_count(),
            params.item_count(),
            data.split.user_count,
            data.split.item_count
        );
    }
    Ok((params, hp))
}

pub fn prepare(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    log_config(cfg);
    let hp = cfg.hyperparams()?;
    let data = load(cfg)?;
    let instances = generate_instances(&data.split, hp.markov_order, hp.targets, InstancePart::Train);
    let count = |f: fn(&caser::data::UserSplit) -> usize| data.split.users.iter().map(f).sum::<usize>();
    println!("interactions  {}", data.interactions);
    println!("users         {}", data.split.user_count);
    println!("items         {}", data.split.item_count);
    println!("train         {}", count(|u| u.train.len()));
    println!("validation    {}", count(|u| u.validation.len()));
    println!("test          {}", count(|u| u.test.len()));
    println!(
        "instances     {} (L={}, T={})",
        instances.len(),
        hp.markov_order,
        hp.targets
    );
    if let Some(p) = out {
        let w = BufWriter::new(File::create(&p)?);
        write_instance_cache(
            w,
            &instances,
            hp.markov_order,
            hp.targets,
            data.split.user_count,
            data.split.item_count,
        )?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    if out.is_some() {
        cfg.checkpoint = out;
    }
    if log.is_some() {
        cfg.log = log;
    }
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| UsageError("no checkpoint path: pass --out or set `checkpoint`".into()))?;
    log_config(&cfg);
    let hp = cfg.hyperparams()?;
    let data = load(&cfg)?;
    let mut log_file = match &cfg.log {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            writeln!(f, "{}", EpochLog::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut write_err = None;
    let outcome = train_with_callback(&data.split, &hp, &cfg.train_config(), |e| {
        eprintln!("{e}");
        if let Some(f) = log_file.as_mut() {
            if let Err(err) = writeln!(f, "{}", e.csv_row()) {
                write_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(err) = write_err {
        return Err(err.into());
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    checkpoint::save(&ckpt, &outcome.params, &hp)?;
    eprintln!("best epoch {}; wrote {}", outcome.best_epoch, ckpt.display());
    let report = eval_model(
        &outcome.params,
        &hp,
        &data.split,
        EvalTarget::Test,
        &cfg.eval_options(),
        cfg.mask,
    )?;
    println!("{report}");
    Ok(())
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    target: &str,
    csv: bool,
    per_user: Option<PathBuf>,
) -> Result<()> {
    log_config(cfg);
    let data = load(cfg)?;
    let (params, hp) = load_model(checkpoint, cfg, &data)?;
    let target = if target == "validation" {
        EvalTarget::Validation
    } else {
        EvalTarget::Test
    };
    let opts = EvalOptions {
        keep_per_user: per_user.is_some(),
        ..cfg.eval_options()
    };
    let report = eval_model(&params, &hp, &data.split, target, &opts, cfg.mask)?;
    if csv {
        println!("{}", report.csv_header());
        println!("{}", report.csv_row());
    } else {
        println!("{report}");
    }
    if let Some(p) = per_user {
        fs::write(&p, report.per_user_tsv())?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

pub fn recommend(cfg: &RunConfig, checkpoint: Option<PathBuf>, user: &str, n: usize, include_seen: bool) -> Result<()> {
    if n == 0 {
        return Err(UsageError("--N must be >= 1".into()).into());
    }
    log_config(cfg);
    let data = load(cfg)?;
    let (params, hp) = load_model(checkpoint, cfg, &data)?;
    let u = data
        .maps
        .user_index(user)
        .ok_or_else(|| anyhow::anyhow!("user `{user}` is not in the filtered data"))?;
    let history = &data.sequences[u as usize].items;
    let list = recommend_top_n(&params, &hp, u, history, n, !include_seen, cfg.mask)?;
    println!("rank\titem\tscore");
    for (rank, (item, score)) in list.items.iter().zip(&list.scores).enumerate() {
        println!("{}\t{}\t{score:.6}", rank + 1, data.maps.items[*item as usize]);
    }
    Ok(())
}

pub fn mine_rules(cfg: &RunConfig, mining: &MiningConfig, out: Option<PathBuf>) -> Result<()> {
    log_config(cfg);
    let data = load(cfg)?;
    let seqs: Vec<&[u32]> = data.sequences.iter().map(|s| s.items.as_slice()).collect();
    let rules = mine(&seqs, mining)?;
    let mut w = output(out.as_deref())?;
    w.write_all(rules_to_csv(&rules, |i| data.maps.items[i as usize].clone()).as_bytes())?;
    w.flush()?;
    let si = rules.len() as f64 / seqs.len() as f64;
    let summary = format!("rules {} users {} SI {si:.4}", rules.len(), seqs.len());
    if out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, masks: &[ComponentMask], pop: bool, out: Option<PathBuf>) -> Result<()> {
    log_config(cfg);
    let hp = cfg.hyperparams()?;
    let data = load(cfg)?;
    let tc = cfg.train_config();
    let rows = run_ablation(&data.split, &hp, masks, &tc)?;
    let mut text = ablation_csv(&rows);
    if pop {
        let r = Popularity::from_split(&data.split).evaluate(&data.split, EvalTarget::Test, &tc.eval)?;
        text.push_str(&format!(
            "pop,{:.6},{:.6},0,{}\n",
            r.map,
            r.precision_at(1).unwrap_or(f64::NAN),
            cfg.seed
        ));
    }
    let mut w = output(out.as_deref())?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn grad_check(seed: u64, tolerance: f64, dropout: f64, mask: ComponentMask) -> Result<()> {
    let hp = HyperParams {
        dropout,
        ..toy_hyperparams()
    };
    hp.validate().map_err(|e| UsageError(e.to_string()))?;
    let opts = GradCheckOptions {
        components: mask,
        ..Default::default()
    };
    let report = gradient_check_with(&hp, seed, &opts)?;
    println!("{report}");
    if !report.passed(tolerance) {
        bail!(
            "max relative error {:.3e} is not below {tolerance:e}",
            report.max_error()
        );
    }
    println!("PASS (max relative error {:.3e} < {tolerance:e})", report.max_error());
    Ok(())
}

pub fn inspect(path: &Path, filters: bool) -> Result<()> {
    let (params, hp) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if filters {
        let header: Vec<String> = (1..=hp.markov_order).map(|i| format!("w{i}")).collect();
        println!("filter,{}", header.join(","));
        for k in 0..params.vertical.rows() {
            let row: Vec<String> = params.vertical.row(k).iter().map(f64::to_string).collect();
            println!("{k},{}", row.join(","));
        }
        return Ok(());
    }
    print!("{}", caser::config::hyperparams_to_text(&hp));
    println!("users = {}", params.user_count());
    println!("items = {}", params.item_count());
    for (kind, m) in params.tensors() {
        let (r, c) = m.shape();
        println!("{kind:?}: {r} x {c}");
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig, axes: &[(String, Vec<String>)], out: Option<PathBuf>) -> Result<()> {
    log_config(cfg);
    let combos = expand_grid(axes);
    let mut runs = Vec::with_capacity(combos.len());
    for combo in &combos {
        let mut c = cfg.clone();
        for (k, v) in combo {
            c.set(k, v).map_err(|e| UsageError(e.to_string()))?;
        }
        c.hyperparams().map_err(|e| UsageError(e.to_string()))?;
        runs.push(c);
    }
    let data = load(cfg)?;
    let results = runs
        .par_iter()
        .map(|c| -> Result<(f64, usize, ModelParams, HyperParams)> {
            let hp = c.hyperparams()?;
            let o = train_with_callback(&data.split, &hp, &c.train_config(), |_| {})?;
            let val = o
                .log
                .iter()
                .find(|e| e.epoch == o.best_epoch)
                .map_or(0.0, |e| e.val_map);
            Ok((val, o.best_epoch, o.params, hp))
        })
        .collect::<Result<Vec<_>>>()?;

    let keys: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    let mut w = output(out.as_deref())?;
    writeln!(w, "{},val_MAP,best_epoch", keys.join(","))?;
    let mut best = 0;
    for (i, (combo, (val, epoch, _, _))) in combos.iter().zip(&results).enumerate() {
        let values: Vec<&str> = combo.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(w, "{},{val:.6},{epoch}", values.join(","))?;
        if *val > results[best].0 {
            best = i;
        }
    }
    w.flush()?;
    let choice: Vec<String> = combos[best].iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("best: {} (val MAP {:.4})", choice.join(" "), results[best].0);
    if let Some(p) = &cfg.checkpoint {
        let (_, _, params, hp) = &results[best];
        checkpoint::save(p, params, hp)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
