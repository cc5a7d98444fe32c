use planlab::datakit::{generate_synthetic, Sample, SplitTag, SyntheticConfig};
use planlab::evaluator::{eval_planning, OffsetPlanner, StraightLinePlanner};

fn tagged(n: usize, tag: SplitTag) -> Vec<Sample> {
    let cfg = SyntheticConfig {
        train_count: n,
        val_count: 0,
        ood_count: 0,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, 11)
        .train
        .into_iter()
        .map(|s| Sample { tag, ..s })
        .collect()
}

fn two_decimals(v: f64) -> f64 {
    format!("{v:.2}").parse().unwrap()
}

/// Written out from the definition: continue the first step for every waypoint,
/// print at two decimals, compare the last point per axis in resolution units.
fn straight_fde_pct(samples: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let gt: Vec<(f64, f64)> = s.trajectory.points().iter().map(|p| (p.x, p.y)).collect();
        let (x0, y0) = gt[0];
        let (dx, dy) = (gt[1].0 - x0, gt[1].1 - y0);
        let k = (gt.len() - 1) as f64;
        let (px, py) = (two_decimals(x0 + k * dx), two_decimals(y0 + k * dy));
        let (gx, gy) = gt[gt.len() - 1];
        let ex = (px - gx) / s.width;
        let ey = (py - gy) / s.height;
        total += 100.0 * (ex * ex + ey * ey).sqrt();
    }
    total / samples.len() as f64
}

#[test]
fn straight_line_fde_matches_script() {
    let hard = tagged(150, SplitTag::ValHard);
    let eval = eval_planning(&StraightLinePlanner, &hard);
    let m = eval.subset("val_hard").unwrap();
    assert_eq!(m.decoded, hard.len());
    let want = straight_fde_pct(&hard);
    assert!(want > 1.0, "{want}");
    let got = m.fde_pct.unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn constant_offset_is_five_percent() {
    let easy = tagged(40, SplitTag::ValEasy);
    let dx = 0.05 * easy[0].width;
    let eval = eval_planning(&OffsetPlanner { dx, dy: 0.0 }, &easy);
    let m = eval.subset("val_easy").unwrap();
    assert!((m.ade_pct.unwrap() - 5.0).abs() < 1e-3, "{m:?}");
    assert!((m.fde_pct.unwrap() - 5.0).abs() < 1e-3, "{m:?}");
    let oracle = eval_planning(&OffsetPlanner { dx: 0.0, dy: 0.0 }, &easy);
    assert!(oracle.subset("val_easy").unwrap().ade_pct.unwrap() < 1e-3);
}
