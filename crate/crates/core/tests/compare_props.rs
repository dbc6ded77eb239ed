use proptest::prelude::*;
use refscale::compare::{
    align, fit_trend, kendall_tau, parse_points, points_jsonl, rank_consistency, rank_datasets, scatter_svg, RunPoint,
    TrendMode,
};
use refscale::ledger::fixtures;

fn table3() -> Vec<RunPoint> {
    parse_points(fixtures::TABLE3_OVERVIEW).unwrap()
}

fn shuffle<T: Clone>(v: &[T], keys: &[u32]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by_key(|&i| (keys[i % keys.len()], i));
    idx.into_iter().map(|i| v[i].clone()).collect()
}

#[test]
fn collinear_slope() {
    let pts: Vec<(f64, f64)> = (0..6).map(|i| 10f64.powf(19.0 + i as f64 * 0.7)).map(|c| (c, 0.05 * c.log10() - 0.6)).collect();
    let fit = fit_trend(&pts).unwrap();
    assert!((fit.slope - 0.05).abs() < 1e-9);
    assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
}

#[test]
fn identical_and_reversed_rankings() {
    let order: Vec<String> = ["Nemotron", "DCLM", "FineWeb-Edu", "C4"].map(String::from).to_vec();
    let rev: Vec<String> = order.iter().rev().cloned().collect();
    assert_eq!(kendall_tau(&order, &order).unwrap(), 1.0);
    assert_eq!(kendall_tau(&order, &rev).unwrap(), -1.0);
    let c = rank_consistency(&[("a".into(), order.clone()), ("b".into(), order.clone()), ("c".into(), rev)]).unwrap();
    assert_eq!(c.min_tau, -1.0);
    assert!(rank_consistency(&[("a".into(), order)]).is_err());
}

#[test]
fn align_never_trusts_input_compute() {
    let mut pts = table3();
    for p in &mut pts {
        p.compute = Some(1.0);
    }
    let a = align(&pts).unwrap();
    for s in &a.series {
        for p in &s.points {
            assert_eq!(p.compute, Some(6.0 * p.params.unwrap() * p.tokens.unwrap()));
        }
    }
}

#[test]
fn svg_is_deterministic() {
    let a = align(&table3()).unwrap();
    for mode in [TrendMode::Fit, TrendMode::Connect] {
        assert_eq!(scatter_svg("t", &a.series, mode), scatter_svg("t", &align(&table3()).unwrap().series, mode));
    }
}

proptest! {
    #[test]
    fn align_is_order_independent_and_idempotent(keys in prop::collection::vec(any::<u32>(), 10)) {
        let base = align(&table3()).unwrap();
        let shuffled = align(&shuffle(&table3(), &keys)).unwrap();
        prop_assert_eq!(&base.series, &shuffled.series);
        let flat: Vec<RunPoint> = base.series.iter().flat_map(|s| s.points.clone()).collect();
        let again = align(&parse_points(&points_jsonl(&flat)).unwrap()).unwrap();
        prop_assert_eq!(base.series, again.series);
    }

    #[test]
    fn fit_ignores_order_and_duplication(
        pts in prop::collection::vec((19.0f64..24.0, 0.2f64..0.8), 3..10),
        keys in prop::collection::vec(any::<u32>(), 10),
    ) {
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|(x, y)| (10f64.powf(x), y)).collect();
        let Some(a) = fit_trend(&pts) else { return Ok(()) };
        let b = fit_trend(&shuffle(&pts, &keys)).unwrap();
        let doubled: Vec<(f64, f64)> = pts.iter().chain(&pts).copied().collect();
        let c = fit_trend(&doubled).unwrap();
        for other in [b, c] {
            prop_assert!((a.slope - other.slope).abs() < 1e-9 && (a.intercept - other.intercept).abs() < 1e-8);
        }
    }

    #[test]
    fn ranking_is_permutation_invariant(keys in prop::collection::vec(any::<u32>(), 3)) {
        let at_scale: Vec<RunPoint> = table3()
            .into_iter()
            .filter(|p| p.procedure == "open-sci-ref" && p.tokens == Some(1e12))
            .collect();
        let a = rank_datasets(&at_scale, 0.001).unwrap();
        let b = rank_datasets(&shuffle(&at_scale, &keys), 0.001).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.entries.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
