//! Full pipeline on the default synthetic city, printing per-task metrics,
//! band coverage and stage timings. Optional arguments: a RunConfig JSON file,
//! then any number of JSON objects overriding head settings, each run on the
//! same embeddings.

use std::time::Instant;

use urbanrep::config::RunConfig;
use urbanrep::eval::quantile;
use urbanrep::io::{generate_synthetic, SyntheticSpec, Targets};
use urbanrep::pipeline::*;

fn main() -> urbanrep::Result<()> {
    env_logger::init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::from_json_file(p.as_ref())?,
        None => RunConfig::default(),
    };
    let clock = Instant::now();
    let spec = SyntheticSpec::default();
    let (city, _) = generate_synthetic(&spec, cfg.seed)?;
    for u in 0..city.targets.tasks() {
        let v: Vec<f64> = city.targets.rows.iter().filter(|r| r.1 == u).map(|r| r.2).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        println!("task {u}: mean {m:.3} std {sd:.3} sigma {}", spec.tasks[u].sigma);
    }
    let (enc, hist) = pretrain_encoder(&[&city.cells], &cfg)?;
    println!(
        "pretrain {:.1}s loss {:?} -> {:?}",
        clock.elapsed().as_secs_f64(),
        hist.first(),
        hist.last()
    );
    let emb = embed_cells(&enc, &city.cells, &cfg)?;
    let regions = aggregate_regions(&city.regions, &city.cells, &emb)?;
    let tasks = city.targets.tasks();
    let ids: Vec<u64> = regions.iter().map(|r| r.region_id).collect();
    let (train_ids, test_ids) = split_regions(&ids, 0.2, cfg.seed)?;
    let rows = region_rows(&regions, &city.targets, tasks);
    let train: Vec<_> = rows
        .iter()
        .filter(|r| train_ids.binary_search(&r.region_id).is_ok())
        .cloned()
        .collect();
    let test_emb: Vec<_> = regions
        .iter()
        .filter(|r| test_ids.binary_search(&r.region_id).is_ok())
        .cloned()
        .collect();
    let reqs = requests(&test_emb, &(0..tasks).collect::<Vec<_>>());
    println!("embed {:.1}s", clock.elapsed().as_secs_f64());
    let mut variants: Vec<String> = std::env::args().skip(2).collect();
    if variants.is_empty() {
        variants.push("{}".into());
    }
    for v in variants {
        let mut base = serde_json::to_value(&cfg).unwrap();
        let over: serde_json::Value = serde_json::from_str(&v).unwrap();
        for (k, x) in over.as_object().unwrap() {
            base[k] = x.clone();
        }
        let cfg: RunConfig = serde_json::from_value(base).unwrap();
        let start = Instant::now();
        let (head, _) = train_head(&train, &cfg)?;
        let trained = start.elapsed().as_secs_f64();
        let preds = predict_head(&head, &reqs, &cfg)?;
        let truth: Targets = city.targets.clone();
        let inside = preds
            .iter()
            .filter(|p| {
                let y = truth.get(p.region_id, p.task).unwrap();
                quantile(&p.samples, 0.025) <= y && y <= quantile(&p.samples, 0.975)
            })
            .count();
        let spread: f64 = preds
            .iter()
            .map(|p| {
                let m = p.samples.iter().sum::<f64>() / p.samples.len() as f64;
                let sd = (p.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.samples.len() as f64).sqrt();
                sd / head.repository().stats[p.task].std
            })
            .sum::<f64>()
            / preds.len() as f64;
        let resid: f64 = (preds
            .iter()
            .map(|p| {
                ((p.point - truth.get(p.region_id, p.task).unwrap()) / head.repository().stats[p.task].std).powi(2)
            })
            .sum::<f64>()
            / preds.len() as f64)
            .sqrt();
        println!("  normalized sample std {spread:.4} residual rms {resid:.4}");
        let r2: Vec<String> = evaluate(&preds, &city.targets)?
            .iter()
            .map(|m| format!("{:.4}", m.r2))
            .collect();
        println!(
            "{v}: r2 [{}] coverage {:.3} train {trained:.1}s total {:.1}s",
            r2.join(", "),
            inside as f64 / preds.len() as f64,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
