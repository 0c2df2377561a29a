mod common;

use common::{grid, overlap_vs_sampling, partition_sums, random_region};
use proptest::prelude::*;
use rand::Rng;
use urbanrep::geometry;
use urbanrep::grid::{assign_pois, region_cell_overlap, Poi, Region, DEFAULT_EDGE_M, POI_DIM};
use urbanrep::numerics::Seeds;

#[test]
fn overlap_weights_match_sampling() {
    let err = overlap_vs_sampling(20, 1000, 1);
    assert!(err < 1e-3, "worst error {err}");
}

#[test]
fn half_hexagon_has_half_weight() {
    let cells = grid(3000.0, 3000.0);
    let cell = cells.cells().iter().find(|c| c.neighbors.len() == 6).unwrap();
    let [cx, cy] = cell.center;
    let region = Region::new(0, vec![geometry::rect(cx - 400.0, cy - 400.0, cx, cy + 400.0)]).unwrap();
    let w = region_cell_overlap(&region, &cells);
    let om = w.weights.iter().find(|x| x.0 == cell.id).unwrap().1;
    assert!((om - 0.5).abs() < 1e-12);
    let mut rng = Seeds::new(3).stream("mc", &[]);
    let mc = common::mc_fraction(cell.center, cells.edge_m(), &region.parts[0], 200_000, &mut rng);
    assert!((mc - 0.5).abs() < 5.0 * (0.25f64 / 200_000.0).sqrt());
}

#[test]
fn tiling_partitions_each_cell() {
    for tile in [450.0, 317.0] {
        for (sum, inside) in partition_sums(tile) {
            assert!((sum - inside).abs() < 1e-6, "sum {sum} vs covered fraction {inside}");
        }
    }
    // interior cells are covered exactly once
    assert!(partition_sums(450.0)
        .iter()
        .filter(|p| p.1 > 1.0 - 1e-12)
        .all(|p| (p.0 - 1.0).abs() < 1e-6));
}

#[test]
fn poi_counts_match_brute_force() {
    let mut cells = grid(3000.0, 2000.0);
    let mut rng = Seeds::new(5).stream("pois", &[]);
    let pois: Vec<Poi> = (0..10_000)
        .map(|_| Poi {
            x: -200.0 + rng.random::<f64>() * 3400.0,
            y: -200.0 + rng.random::<f64>() * 2400.0,
            category: rng.random_range(0..POI_DIM),
        })
        .collect();
    let mut want = vec![[0u32; POI_DIM]; cells.len()];
    let mut dropped = 0;
    for p in &pois {
        // lowest id wins on shared boundaries
        match cells
            .cells()
            .iter()
            .position(|c| common::inside_convex(&c.polygon, [p.x, p.y]))
        {
            Some(i) => want[i][p.category] += 1,
            None => dropped += 1,
        }
    }
    let report = assign_pois(&mut cells, &pois).unwrap();
    assert_eq!(report.dropped, dropped);
    assert_eq!(report.assigned + report.dropped, pois.len());
    for (c, w) in cells.cells().iter().zip(&want) {
        assert_eq!(&c.poi, w, "cell {}", c.id);
    }
}

#[test]
fn grid_covers_its_box() {
    let cells = grid(2000.0, 1300.0);
    let mut rng = Seeds::new(8).stream("cover", &[]);
    for _ in 0..5000 {
        let p = [rng.random::<f64>() * 2000.0, rng.random::<f64>() * 1300.0];
        assert!(cells.locate(p).is_some(), "{p:?} not covered");
    }
    for c in cells.cells() {
        for n in &c.neighbors {
            assert!(cells.get(*n).unwrap().neighbors.contains(&c.id));
            let d = ((c.center[0] - cells.get(*n).unwrap().center[0]).powi(2)
                + (c.center[1] - cells.get(*n).unwrap().center[1]).powi(2))
            .sqrt();
            assert!((d - 3f64.sqrt() * DEFAULT_EDGE_M).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_are_fractions_and_conserve_area(seed in 0u64..100_000) {
        let cells = grid(3000.0, 3000.0);
        let mut rng = Seeds::new(seed).stream("prop", &[]);
        let c = [600.0 + rng.random::<f64>() * 1800.0, 600.0 + rng.random::<f64>() * 1800.0];
        let ring = random_region(c, 300.0, &mut rng);
        prop_assume!(ring.len() >= 3 && !geometry::self_intersects(&ring));
        let region = Region::new(1, vec![ring]).unwrap();
        let w = region_cell_overlap(&region, &cells);
        prop_assert!(w.weights.iter().all(|x| x.1 > 0.0 && x.1 <= 1.0));
        prop_assert!(w.weights.windows(2).all(|p| p[0].0 < p[1].0));
        let covered: f64 = w.weights.iter().map(|x| x.1).sum::<f64>() * cells.cell_area();
        prop_assert!((covered - region.area()).abs() < 1e-6 * region.area().max(1.0));
    }
}
