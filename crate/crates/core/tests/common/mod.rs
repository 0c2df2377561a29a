//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use urbanrep::diffusion::{Conditioning, DenoiseInput, Denoiser, DenoiserConfig};
use urbanrep::diffusion::{InfoRepository, RegionRow};
use urbanrep::encoder::{Batch, CellEncoder, EncoderConfig, MaskSet};
use urbanrep::geometry;
use urbanrep::geometry::Point;
use urbanrep::grid::{build_hex_grid, hexagon, region_cell_overlap, BBox, CellSet, Region, DEFAULT_EDGE_M, POI_DIM};
use urbanrep::numerics::{ParamStore, Seeds, Tape, Tensor};

/// Plain DDPM with its own schedule arithmetic: `x_T ~ N(0,1)`, posterior
/// mean on the reconstructed `x0`, last step returns `x0`.
pub struct ReferenceDdpm {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl ReferenceDdpm {
    pub fn new(steps: usize, b1: f64, bt: f64) -> Self {
        let mut beta = vec![0.0];
        let mut alpha_bar = vec![1.0];
        for i in 0..steps {
            let b = b1 + (bt - b1) * i as f64 / (steps - 1) as f64;
            beta.push(b);
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        ReferenceDdpm { beta, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn q_sample(&self, x0: f64, t: usize, eps: f64) -> f64 {
        self.alpha_bar[t].sqrt() * x0 + (1.0 - self.alpha_bar[t]).sqrt() * eps
    }

    /// Posterior `q(x_{t-1} | x_t, x0)` mean and variance.
    pub fn posterior(&self, x0: f64, xt: f64, t: usize) -> (f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0 * x0 + ct * xt, (1.0 - ab_prev) / (1.0 - ab) * b)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, eps_model: impl Fn(f64, usize) -> f64) -> f64 {
        let mut x: f64 = StandardNormal.sample(rng);
        for t in (1..=self.steps()).rev() {
            let e = eps_model(x, t);
            let x0 = (x - (1.0 - self.alpha_bar[t]).sqrt() * e) / self.alpha_bar[t].sqrt();
            if t == 1 {
                return x0;
            }
            let (m, v) = self.posterior(x0, x, t);
            let z: f64 = StandardNormal.sample(rng);
            x = m + v.sqrt() * z;
        }
        x
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Brute-force retrieval: scores every candidate, full sort, softmax.
pub fn brute_force_prior(
    entries: &[(u64, Vec<f32>, Vec<Option<f64>>)],
    h: &[f32],
    task: usize,
    k: usize,
    exclude: Option<u64>,
) -> (f64, Vec<u64>, Vec<f64>) {
    let nh = dot(h, h).sqrt();
    let mut scored: Vec<(f64, u64, f64)> = entries
        .iter()
        .filter(|e| e.2[task].is_some() && Some(e.0) != exclude)
        .map(|e| {
            let ne = dot(&e.1, &e.1).sqrt();
            let s = if ne == 0.0 { 0.0 } else { dot(h, &e.1) / (nh * ne) };
            (s, e.0, e.2[task].unwrap())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let m = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scored.iter().map(|s| (s.0 - m).exp()).sum();
    let w: Vec<f64> = scored.iter().map(|s| (s.0 - m).exp() / z).collect();
    let value = scored.iter().zip(&w).map(|(s, w)| s.2 * w).sum();
    (value, scored.iter().map(|s| s.1).collect(), w)
}

/// Point-in-convex-polygon by edge cross products (CCW vertices).
pub fn inside_convex(poly: &[Point], p: Point) -> bool {
    (0..poly.len()).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Even-odd ray casting.
pub fn inside_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Monte Carlo estimate of the fraction of a hexagon covered by `region`.
pub fn mc_fraction<R: Rng>(center: Point, edge: f64, region: &[Point], n: usize, rng: &mut R) -> f64 {
    let hex = hexagon(center, edge);
    let w = 3f64.sqrt() * edge;
    let (x0, y0) = (center[0] - w / 2.0, center[1] - edge);
    let (mut in_hex, mut in_both) = (0usize, 0usize);
    while in_hex < n {
        let p = [x0 + rng.random::<f64>() * w, y0 + rng.random::<f64>() * 2.0 * edge];
        if inside_convex(&hex, p) {
            in_hex += 1;
            if inside_polygon(region, p) {
                in_both += 1;
            }
        }
    }
    in_both as f64 / n as f64
}

/// Worst per-element relative error between analytic and central-difference
/// gradients, `|a − n| / max(|a|, |n|, floor)`.
pub fn fd_check(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(analytic) {
        for j in 0..g.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
    }
    worst
}

pub fn perturb(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = Seeds::new(seed).stream("perturb", &[]);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += scale * z;
        }
    }
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        positions: true,
        seq_len: 5,
    }
}

/// Worst relative gradient error of the masked-reconstruction loss of a tiny encoder.
pub fn encoder_gradient_error(seed: u64) -> f64 {
    let cfg = tiny_encoder_config();
    let model = CellEncoder::<f32>::new(cfg.clone(), &Seeds::new(seed)).unwrap();
    let mut model: CellEncoder<f64> = model.cast();
    perturb(&mut model.store, 0.05, seed);
    let mut rng = Seeds::new(seed).stream("features", &[]);
    let b = 2;
    let feats: Vec<f64> = (0..b * cfg.seq_len * POI_DIM)
        .map(|_| rng.random_range(0..4) as f64)
        .collect();
    let batch = Batch {
        features: Tensor::new(&[b * cfg.seq_len, POI_DIM], feats).unwrap(),
        masks: vec![MaskSet { positions: vec![1, 3] }, MaskSet { positions: vec![2] }],
    };
    let eval = |store: &ParamStore<f64>, m: &CellEncoder<f64>| -> (f64, Option<Vec<Tensor<f64>>>) {
        let mut tape = Tape::new(true);
        let p = store.bind(&mut tape, true);
        let mut r = Seeds::new(0).stream("dropout", &[]);
        let loss = m.loss(&mut tape, &p, &batch, &mut r).unwrap().unwrap();
        let v = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (v, Some(store.collect_grads(&g, &p)))
    };
    let (_, grads) = eval(&model.store, &model);
    let grads = grads.unwrap();
    let shadow = model.clone();
    fd_check(&mut model.store, &grads, 1e-5, 1e-3, |s| eval(s, &shadow).0)
}

/// Worst relative gradient error of the noise-regression loss for one conditioning mode.
pub fn denoiser_gradient_error(mode: Conditioning, seed: u64) -> f64 {
    let cfg = DenoiserConfig {
        input_dim: 8,
        hidden: 16,
        tasks: 3,
        steps: 10,
        conditioning: mode,
    };
    let mut d = Denoiser::<f64>::new(cfg, &Seeds::new(seed)).unwrap();
    perturb(&mut d.store, 0.2, seed);
    let mut rng = Seeds::new(seed).stream("inputs", &[]);
    let b = 3;
    let hv: Vec<f64> = (0..b * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
    let yv: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ev: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
    let h = Tensor::new(&[b, 8], hv).unwrap();
    let y = Tensor::new(&[b, 1], yv).unwrap();
    let ts = [1usize, 5, 10];
    let us = [0usize, 2, 1];
    let eval = |store: &ParamStore<f64>, m: &Denoiser<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new(true);
        let p = store.bind(&mut tape, true);
        let out = m
            .forward(
                &mut tape,
                &p,
                &DenoiseInput {
                    h: &h,
                    y_t: &y,
                    t: &ts,
                    task: &us,
                },
            )
            .unwrap();
        let target = tape.constant(Tensor::new(&[b, 1], ev.clone()).unwrap());
        let diff = tape.sub(out, target).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean(sq);
        let v = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (v, store.collect_grads(&g, &p))
    };
    let (_, grads) = eval(&d.store, &d);
    let shadow = d.clone();
    fd_check(&mut d.store, &grads, 1e-5, 1e-3, |s| eval(s, &shadow).0)
}

/// Small enough that the whole pipeline runs in a few seconds.
pub fn tiny_run_config(seed: u64) -> urbanrep::config::RunConfig {
    urbanrep::config::RunConfig {
        seed,
        d: 16,
        heads: 2,
        enc_layers: 1,
        k: 2,
        l: 2,
        pretrain_epochs: 1,
        lr_pre: 1e-3,
        diff_epochs: 20,
        steps: 20,
        rounds: 5,
        d_dn: 16,
        ..Default::default()
    }
}

pub fn small_city_spec() -> urbanrep::io::SyntheticSpec {
    urbanrep::io::SyntheticSpec {
        bbox: urbanrep::grid::BBox::new(0.0, 0.0, 1800.0, 1800.0).unwrap(),
        ..Default::default()
    }
}

fn f32_bits(v: &[f32]) -> impl Iterator<Item = u64> + '_ {
    v.iter().map(|x| x.to_bits() as u64)
}

fn store_bits(store: &ParamStore<f32>) -> Vec<u64> {
    store
        .iter()
        .flat_map(|(_, t)| f32_bits(t.data()).collect::<Vec<_>>())
        .collect()
}

/// Bit patterns of every stage's output, from city generation to metrics.
pub fn stage_fingerprints(cfg: &urbanrep::config::RunConfig) -> Vec<(&'static str, Vec<u64>)> {
    use urbanrep::pipeline::*;
    use urbanrep::walks::{walk_corpus, CellGraph};
    let (city, _) = urbanrep::io::generate_synthetic(&small_city_spec(), cfg.seed).unwrap();
    let mut out = Vec::new();
    out.push((
        "synth",
        city.cells
            .cells()
            .iter()
            .flat_map(|c| c.poi.iter().map(|&x| x as u64))
            .chain(city.targets.rows.iter().map(|r| r.2.to_bits()))
            .collect(),
    ));
    let graph = CellGraph::from_cells(&city.cells).unwrap();
    let walks = walk_corpus(&graph, &cfg.walks(), &Seeds::new(cfg.seed), 0, 0).unwrap();
    out.push((
        "walks",
        walks.iter().flat_map(|w| w.nodes.iter().map(|&n| n as u64)).collect(),
    ));
    let (enc, hist) = pretrain_encoder(&[&city.cells], cfg).unwrap();
    out.push((
        "pretrain",
        store_bits(&enc.store)
            .into_iter()
            .chain(hist.iter().map(|x| x.to_bits()))
            .collect(),
    ));
    let emb = embed_cells(&enc, &city.cells, cfg).unwrap();
    out.push((
        "embed",
        emb.sorted()
            .iter()
            .flat_map(|(id, x)| std::iter::once(*id as u64).chain(f32_bits(x)))
            .collect(),
    ));
    let regions = aggregate_regions(&city.regions, &city.cells, &emb).unwrap();
    out.push((
        "aggregate",
        regions
            .iter()
            .flat_map(|r| f32_bits(&r.h).collect::<Vec<_>>())
            .collect(),
    ));
    let ids: Vec<u64> = regions.iter().map(|r| r.region_id).collect();
    let (train_ids, _) = split_regions(&ids, 0.25, cfg.seed).unwrap();
    let rows: Vec<_> = region_rows(&regions, &city.targets, city.targets.tasks())
        .into_iter()
        .filter(|r| train_ids.binary_search(&r.region_id).is_ok())
        .collect();
    let (head, hist) = train_head(&rows, cfg).unwrap();
    let params = match &head {
        TrainedHead::Diffusion(m) => store_bits(&m.denoiser.store),
        TrainedHead::Point(m) => store_bits(&m.store),
    };
    out.push((
        "train",
        params.into_iter().chain(hist.iter().map(|x| x.to_bits())).collect(),
    ));
    let reqs = requests(&regions, &(0..city.targets.tasks()).collect::<Vec<_>>());
    let preds = predict_head(&head, &reqs, cfg).unwrap();
    out.push((
        "predict",
        preds
            .iter()
            .flat_map(|p| {
                std::iter::once(p.point)
                    .chain(p.samples.iter().copied())
                    .chain([p.prior])
            })
            .map(f64::to_bits)
            .collect(),
    ));
    let reports = evaluate(&preds, &city.targets).unwrap();
    out.push((
        "eval",
        reports
            .iter()
            .flat_map(|m| [m.r2.to_bits(), m.mae.to_bits(), m.rmse.to_bits()])
            .collect(),
    ));
    out
}

pub fn grid(w: f64, h: f64) -> CellSet {
    build_hex_grid(BBox::new(0.0, 0.0, w, h).unwrap(), DEFAULT_EDGE_M).unwrap()
}

/// Stratified estimate over a `side × side` jittered lattice covering the hexagon's bounding box.
pub fn stratified_fraction(center: Point, edge: f64, region: &[Point], side: usize, seed: u64) -> f64 {
    let hex = hexagon(center, edge);
    let w = 3f64.sqrt() * edge;
    let (x0, y0) = (center[0] - w / 2.0, center[1] - edge);
    let (dx, dy) = (w / side as f64, 2.0 * edge / side as f64);
    let mut rng = Seeds::new(seed).stream("stratified", &[]);
    let (mut in_hex, mut in_both) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let p = [
                x0 + (i as f64 + rng.random::<f64>()) * dx,
                y0 + (j as f64 + rng.random::<f64>()) * dy,
            ];
            if inside_convex(&hex, p) {
                in_hex += 1;
                if inside_polygon(region, p) {
                    in_both += 1;
                }
            }
        }
    }
    in_both as f64 / in_hex as f64
}

/// Random simple polygon: a star-shaped ring around `c` with jittered radii.
pub fn random_region(c: Point, scale: f64, rng: &mut impl Rng) -> Vec<Point> {
    let n = rng.random_range(3..9);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    angles
        .iter()
        .map(|a| {
            let r = scale * (0.3 + rng.random::<f64>());
            [c[0] + r * a.cos(), c[1] + r * a.sin()]
        })
        .collect()
}

/// Overlap weights of random regions against the hexagons they touch, checked
/// against stratified sampling; returns the worst absolute error.
pub fn overlap_vs_sampling(pairs: usize, side: usize, seed: u64) -> f64 {
    let cells = grid(3000.0, 3000.0);
    let mut rng = Seeds::new(seed).stream("regions", &[]);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < pairs {
        let c = [
            500.0 + rng.random::<f64>() * 2000.0,
            500.0 + rng.random::<f64>() * 2000.0,
        ];
        let ring = random_region(c, 250.0, &mut rng);
        if ring.len() < 3 || geometry::self_intersects(&ring) {
            continue;
        }
        let region = Region::new(done as u64, vec![ring.clone()]).unwrap();
        let w = region_cell_overlap(&region, &cells);
        // pick a partially covered cell when there is one, otherwise any overlapping cell
        let Some(&(id, om)) = w
            .weights
            .iter()
            .find(|x| x.1 > 0.05 && x.1 < 0.95)
            .or(w.weights.first())
        else {
            continue;
        };
        let cell = cells.get(id).unwrap();
        let mc = stratified_fraction(cell.center, cells.edge_m(), &region.parts[0], side, seed + done as u64);
        worst = worst.max((om - mc).abs());
        done += 1;
    }
    worst
}

/// Σ over a tiling of the box of each cell's weight, for every cell.
pub fn partition_sums(tile: f64) -> Vec<(f64, f64)> {
    let (w, h) = (2700.0, 1950.0);
    let cells = grid(w, h);
    let mut sums = vec![0.0; cells.len()];
    let (nx, ny) = ((w / tile).ceil() as usize, (h / tile).ceil() as usize);
    for j in 0..ny {
        for i in 0..nx {
            let (x0, y0) = (i as f64 * tile, j as f64 * tile);
            let r = Region::new(0, vec![geometry::rect(x0, y0, (x0 + tile).min(w), (y0 + tile).min(h))]).unwrap();
            for (id, om) in region_cell_overlap(&r, &cells).weights {
                sums[cells.position(id).unwrap()] += om;
            }
        }
    }
    let bbox = geometry::rect(0.0, 0.0, w, h);
    cells
        .cells()
        .iter()
        .zip(sums)
        .map(|(c, s)| {
            (
                s,
                geometry::area(&geometry::clip_convex(&bbox, &c.polygon)) / cells.cell_area(),
            )
        })
        .collect()
}

pub fn random_repository(
    n: usize,
    dim: usize,
    tasks: usize,
    seed: u64,
) -> (InfoRepository, Vec<(u64, Vec<f32>, Vec<Option<f64>>)>) {
    let mut rng = Seeds::new(seed).stream("repo", &[]);
    let rows: Vec<RegionRow> = (0..n)
        .map(|i| RegionRow {
            region_id: 1000 + i as u64,
            h: (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
            y: (0..tasks)
                .map(|_| {
                    if rng.random::<f64>() < 0.85 {
                        Some(rng.random::<f64>() * 10.0)
                    } else {
                        None
                    }
                })
                .collect(),
        })
        .collect();
    let repo = InfoRepository::build(&rows, tasks, false).unwrap();
    let raw = rows.into_iter().map(|r| (r.region_id, r.h, r.y)).collect();
    (repo, raw)
}

pub fn default_schedule() -> urbanrep::diffusion::DiffusionSchedule {
    urbanrep::diffusion::DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap()
}

/// Worst error of `γ0+γ1+γ2 = 1` and of β̃ against its closed form over `t ∈ [2, T]`.
pub fn coefficient_identity_error() -> f64 {
    let s = default_schedule();
    let mut worst: f64 = 0.0;
    for t in 2..=s.steps() {
        let c = s.posterior_coeffs(t).unwrap();
        let want = (1.0 - s.alpha_bar(t - 1)) * s.beta(t) / (1.0 - s.alpha_bar(t));
        worst = worst
            .max((c.g0 + c.g1 + c.g2 - 1.0).abs())
            .max((c.beta_tilde - want).abs());
    }
    worst
}

/// A fixed, nonlinear stand-in for a trained noise predictor.
pub fn eps_model(y: f64, t: usize) -> f64 {
    0.4 * (y * 1.3).sin() + 0.002 * t as f64 - 0.1
}

/// Worst gap between the zero-prior paths and [`ReferenceDdpm`]: forward
/// marginal, posterior, and `chains` full reverse chains on shared streams.
pub fn ddpm_degeneration_error(chains: usize) -> f64 {
    let s = default_schedule();
    let r = ReferenceDdpm::new(100, 1e-4, 0.02);
    let mut worst: f64 = 0.0;
    for t in [1, 2, 37, 100] {
        for (y0, e) in [(0.3, -1.2), (-2.0, 0.5)] {
            worst = worst.max((s.forward_sample(y0, 0.0, t, e) - r.q_sample(y0, t, e)).abs());
        }
    }
    for t in [2, 50, 100] {
        let c = s.posterior_coeffs(t).unwrap();
        let (m, v) = r.posterior(0.7, -0.4, t);
        worst = worst
            .max((c.g0 * 0.7 - c.g1 * 0.4 - m).abs())
            .max((c.beta_tilde - v).abs());
    }
    let seeds = Seeds::new(11);
    let mut rngs: Vec<_> = (0..chains as u64).map(|i| seeds.stream("chain", &[i])).collect();
    let ours = urbanrep::diffusion::reverse_chain(&s, &vec![0.0; chains], &mut rngs, |y, t| {
        Ok(y.iter().map(|&v| eps_model(v, t)).collect())
    })
    .unwrap();
    for (i, &o) in ours.iter().enumerate() {
        let mut rng = seeds.stream("chain", &[i as u64]);
        worst = worst.max((o - r.sample(&mut rng, eps_model)).abs());
    }
    worst
}

/// Iterates the single-step kernel `n` times per `t` and returns, per `t`, the
/// deviations of the empirical mean and variance from the closed-form
/// marginal in units of their standard errors.
pub fn forward_composition_z(n: usize) -> Vec<(usize, f64, f64)> {
    let s = default_schedule();
    let (y0, prior) = (1.5, -0.8);
    let mut rng = Seeds::new(2).stream("mc", &[]);
    [1usize, 50, 100]
        .iter()
        .map(|&t| {
            let (mut sum, mut sum2) = (0.0, 0.0);
            for _ in 0..n {
                let mut y = y0;
                for k in 1..=t {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    y = s.forward_step(y, prior, k, e);
                }
                sum += y;
                sum2 += y * y;
            }
            let mean = sum / n as f64;
            let var = sum2 / n as f64 - mean * mean;
            let ab = s.alpha_bar(t);
            let want_mean = ab.sqrt() * y0 + (1.0 - ab.sqrt()) * prior;
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n as f64).sqrt();
            // variance of a Gaussian sample variance is 2σ⁴/(n−1)
            let se_var = (2.0 * want_var * want_var / (n as f64 - 1.0)).sqrt();
            (t, (mean - want_mean).abs() / se_mean, (var - want_var).abs() / se_var)
        })
        .collect()
}

/// Top-K retrieval against [`brute_force_prior`]; returns whether every
/// neighbour list matched and the worst value or weight error.
pub fn topk_oracle(queries: u64, entries: usize) -> (bool, f64) {
    use urbanrep::diffusion::RetrievalMode;
    let (repo, raw) = random_repository(entries, 16, 3, 4);
    let mut rng = Seeds::new(9).stream("queries", &[]);
    let mut same = true;
    let mut worst: f64 = 0.0;
    for q in 0..queries {
        let h: Vec<f32> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let task = (q % 3) as usize;
        let exclude = if q % 4 == 0 {
            Some(raw[q as usize % raw.len()].0)
        } else {
            None
        };
        let got = repo
            .retrieve_prior(q, &h, task, 5, RetrievalMode::Topk, exclude, &mut rng)
            .unwrap();
        let (value, ids, w) = brute_force_prior(&raw, &h, task, 5, exclude);
        same &= got.neighbors == ids;
        // the repository stores z-scored targets; the weights sum to one so scoring commutes with it
        worst = worst.max((got.value - repo.normalize(task, value)).abs());
        for (a, b) in got.weights.iter().zip(&w) {
            worst = worst.max((a - b).abs());
        }
    }
    (same, worst)
}
