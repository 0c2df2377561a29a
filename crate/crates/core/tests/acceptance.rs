//! Runs the ten acceptance criteria in order, one line each, and exits
//! non-zero if any fails. Runs sequentially so the runtime limits are fair.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use urbanrep::config::{Head, RunConfig};
use urbanrep::diffusion::{self, Conditioning, PredictRequest, PredictionSet, PriorMode, RegionRow};
use urbanrep::eval::quantile;
use urbanrep::io::{generate_synthetic, City, SyntheticSpec};
use urbanrep::numerics::Seeds;
use urbanrep::pipeline::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The shipped synthetic city with embeddings and an 80/20 split.
struct Synthetic {
    cfg: RunConfig,
    city: City,
    train: Vec<RegionRow>,
    test: Vec<PredictRequest>,
    setup: Duration,
}

fn shipped_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    RunConfig::from_json_file(&path).expect("configs/synthetic.json")
}

fn synthetic() -> Synthetic {
    let start = Instant::now();
    let cfg = shipped_config();
    let (city, _) = generate_synthetic(&SyntheticSpec::default(), cfg.seed).unwrap();
    let (enc, _) = pretrain_encoder(&[&city.cells], &cfg).unwrap();
    let emb = embed_cells(&enc, &city.cells, &cfg).unwrap();
    let regions = aggregate_regions(&city.regions, &city.cells, &emb).unwrap();
    let ids: Vec<u64> = regions.iter().map(|r| r.region_id).collect();
    let (train_ids, test_ids) = split_regions(&ids, 0.2, cfg.seed).unwrap();
    let tasks = city.targets.tasks();
    let train = region_rows(&regions, &city.targets, tasks)
        .into_iter()
        .filter(|r| train_ids.binary_search(&r.region_id).is_ok())
        .collect();
    let test_emb: Vec<_> = regions
        .into_iter()
        .filter(|r| test_ids.binary_search(&r.region_id).is_ok())
        .collect();
    let test = requests(&test_emb, &(0..tasks).collect::<Vec<_>>());
    Synthetic {
        cfg,
        city,
        train,
        test,
        setup: start.elapsed(),
    }
}

fn r2s(preds: &[PredictionSet], s: &Synthetic) -> Vec<f64> {
    evaluate(preds, &s.city.targets).unwrap().iter().map(|m| m.r2).collect()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fit_predict(rows: &[RegionRow], reqs: &[PredictRequest], cfg: &RunConfig) -> Vec<PredictionSet> {
    let (head, _) = train_head(rows, cfg).unwrap();
    predict_head(&head, reqs, cfg).unwrap()
}

fn c1() -> Outcome {
    let err = common::coefficient_identity_error();
    outcome(err < 1e-10, format!("worst error {err:.2e}"))
}

fn c2() -> Outcome {
    let err = common::ddpm_degeneration_error(256);
    outcome(err < 1e-12, format!("worst gap {err:.2e} over 256 chains"))
}

fn c3() -> Outcome {
    let z = common::forward_composition_z(100_000);
    let worst = z.iter().map(|x| x.1.max(x.2)).fold(0.0, f64::max);
    outcome(
        worst < 3.0,
        format!("worst deviation {worst:.2} SE at t in {{1, 50, 100}}"),
    )
}

fn c4() -> Outcome {
    let mut errs = vec![common::encoder_gradient_error(0)];
    for mode in [Conditioning::Em, Conditioning::Concat, Conditioning::Xattn] {
        errs.push(common::denoiser_gradient_error(mode, 0));
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 1e-4,
        format!("worst relative error {worst:.2e} (encoder, denoiser em/concat/xattn)"),
    )
}

fn c5() -> Outcome {
    let (same, err) = common::topk_oracle(200, 500);
    outcome(
        same && err < 1e-9,
        format!("neighbours match: {same}, worst error {err:.2e}"),
    )
}

fn c6() -> Outcome {
    let overlap = common::overlap_vs_sampling(20, 1000, 1);
    let partition = [450.0, 317.0]
        .iter()
        .flat_map(|&t| common::partition_sums(t))
        .map(|(sum, inside)| (sum - inside).abs())
        .fold(0.0, f64::max);
    outcome(
        overlap < 1e-3 && partition < 1e-6,
        format!("overlap vs 10^6-point sampling {overlap:.2e}, tiling sum error {partition:.2e}"),
    )
}

/// Criteria 7 and 8 share the full model's predictions.
fn c7_c8(s: &Synthetic) -> ((Outcome, Duration), (Outcome, Duration)) {
    let start = Instant::now();
    let full = fit_predict(&s.train, &s.test, &s.cfg);
    let full_time = start.elapsed();
    let full_r2 = r2s(&full, s);

    let inside = full
        .iter()
        .filter(|p| {
            let y = s.city.targets.get(p.region_id, p.task).unwrap();
            quantile(&p.samples, 0.025) <= y && y <= quantile(&p.samples, 0.975)
        })
        .count();
    let coverage = inside as f64 / full.len() as f64;
    let rounds = full.iter().map(|p| p.samples.len()).min().unwrap_or(0);
    let c8 = outcome(
        coverage >= 0.90 && rounds >= 100,
        format!(
            "{:.1}% of {} test region-task pairs inside the 95% band of {rounds} samples",
            100.0 * coverage,
            full.len()
        ),
    );

    let point_cfg = RunConfig {
        head: Head::Point,
        ..s.cfg.clone()
    };
    let point_r2 = r2s(&fit_predict(&s.train, &s.test, &point_cfg), s);
    let gauss_cfg = RunConfig {
        prior: PriorMode::Gaussian,
        ..s.cfg.clone()
    };
    let gauss_r2 = r2s(&fit_predict(&s.train, &s.test, &gauss_cfg), s);
    let ok = full_r2.iter().all(|&r| r >= 0.80)
        && full_r2.iter().zip(&point_r2).all(|(f, p)| *f >= p - 0.05)
        && full_r2.iter().zip(&gauss_r2).all(|(f, g)| *g <= f + 0.02);
    let c7 = outcome(
        ok,
        format!(
            "R² full {} point {} w/o-Prior {}",
            fmt(&full_r2),
            fmt(&point_r2),
            fmt(&gauss_r2)
        ),
    );
    ((c7, s.setup + start.elapsed()), (c8, full_time))
}

fn c9(s: &Synthetic) -> Outcome {
    let held_out = 2;
    let two_task: Vec<RegionRow> = s
        .train
        .iter()
        .map(|r| RegionRow {
            y: r.y[..held_out].to_vec(),
            ..r.clone()
        })
        .collect();
    let dcfg = s.cfg.diffusion();
    let seeds = Seeds::new(s.cfg.seed);
    let (base, _) = diffusion::train(&two_task, &dcfg, &seeds).unwrap();
    let (tuned, _) = diffusion::finetune(&base, &s.train, &[held_out], dcfg.epochs, &seeds).unwrap();
    let reqs: Vec<PredictRequest> = s.test.iter().filter(|r| r.task == held_out).cloned().collect();
    let tuned_preds = tuned
        .predict(&reqs, s.cfg.rounds, s.cfg.point_estimate, &seeds)
        .unwrap();
    let (scratch, _) = diffusion::train(&s.train, &dcfg, &seeds).unwrap();
    let scratch_preds = scratch
        .predict(&reqs, s.cfg.rounds, s.cfg.point_estimate, &seeds)
        .unwrap();
    let tuned_r2 = r2s(&tuned_preds, s)[0];
    let scratch_r2 = r2s(&scratch_preds, s)[0];
    outcome(
        tuned_r2 >= scratch_r2 - 0.05,
        format!("held-out task R² fine-tuned {tuned_r2:.3} vs from scratch {scratch_r2:.3}"),
    )
}

fn c10() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for head in [Head::Diffusion, Head::Point] {
        let cfg = RunConfig {
            head,
            ..common::tiny_run_config(3)
        };
        let a = common::stage_fingerprints(&cfg);
        let b = common::stage_fingerprints(&cfg);
        let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0).collect();
        ok &= differing.is_empty() && a.iter().all(|x| !x.1.is_empty());
        if !differing.is_empty() {
            detail.push(format!("{head:?} head differs in {}", differing.join(", ")));
        }
    }
    if detail.is_empty() {
        detail.push("synth, walks, pretrain, embed, aggregate, train, predict, eval reproduce bit-for-bit".into());
    }
    outcome(ok, detail.join("; "))
}

fn report(n: usize, name: &str, limit: Option<Duration>, o: Outcome, elapsed: Duration) -> bool {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let limit = limit
        .map(|l| format!(" / limit {:.0} s", l.as_secs_f64()))
        .unwrap_or_default();
    println!(
        "criterion {n:>2} {} {name}: {} ({:.1} s{limit})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut all = true;
    let quick: [(usize, &str, Option<Duration>, fn() -> Outcome); 6] = [
        (1, "posterior coefficient identities", secs(1), c1),
        (2, "zero prior reduces to a plain DDPM", secs(5), c2),
        (3, "forward steps compose to the marginal", secs(30), c3),
        (4, "analytic gradients match finite differences", secs(60), c4),
        (5, "top-K prior matches brute force", secs(5), c5),
        (6, "overlap weights match sampling", secs(60), c6),
    ];
    for (n, name, limit, f) in quick {
        if wanted(n) {
            let (o, t) = timed(f);
            all &= report(n, name, limit, o, t);
        }
    }
    if wanted(7) || wanted(8) || wanted(9) {
        let s = synthetic();
        if wanted(7) || wanted(8) {
            let ((o7, t7), (o8, t8)) = c7_c8(&s);
            if wanted(7) {
                all &= report(7, "end-to-end synthetic recovery", secs(15 * 60), o7, t7);
            }
            if wanted(8) {
                all &= report(8, "ground truth inside the sample band", secs(5 * 60), o8, t8);
            }
        }
        if wanted(9) {
            let (o, t) = timed(|| c9(&s));
            all &= report(
                9,
                "fine-tuning a held-out task vs joint training",
                secs(20 * 60),
                o,
                s.setup + t,
            );
        }
    }
    if wanted(10) {
        let (o, t) = timed(c10);
        all &= report(10, "stage reruns are bit-identical", None, o, t);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
