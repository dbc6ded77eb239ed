use std::collections::BTreeMap;

use refscale::compare::{
    align, dominance_markdown, flag_all, parse_points, rank_consistency, rank_datasets, ranking_csv, ranking_markdown,
    ranking_svg, scatter_svg, table_csv, table_markdown, trend_csv, Provenance, Ranking, RunPoint, TrendMode,
};
use refscale::ledger::round_sig;

use crate::{usage, write_file, CliError, CompareArgs, CompareMode};

fn load(args: &CompareArgs) -> Result<Vec<RunPoint>, CliError> {
    let mut points = Vec::new();
    for path in &args.points {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let pts = parse_points(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        points.extend(pts);
    }
    if points.is_empty() {
        return Err(usage("no points in the given files"));
    }
    for (i, p) in points.iter().enumerate() {
        p.validate().map_err(|m| usage(format!("record {}: {m}", i + 1)))?;
    }
    Ok(points)
}

/// Internal points grouped into `(procedure, N, D)` scales with at least two
/// datasets. N is keyed at two significant figures; ranking rechecks the 5% band.
fn scales(points: &[RunPoint], resolution: f64) -> Vec<(String, Ranking)> {
    let mut groups: BTreeMap<(String, u64, u64), Vec<RunPoint>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.provenance == Provenance::Internal) {
        let (n, d) = (p.params.expect("validated"), p.tokens.expect("validated"));
        groups
            .entry((p.procedure().to_string(), round_sig(n, 2).to_bits(), d.to_bits()))
            .or_default()
            .push(p.clone());
    }
    groups
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 2)
        .filter_map(|((proc_, n, d), pts)| {
            let title = format!(
                "{proc_} {:.2}B @ {}",
                f64::from_bits(n) / 1e9,
                refscale::compare::format_tokens(f64::from_bits(d))
            );
            rank_datasets(&pts, resolution).ok().map(|r| (title, r))
        })
        .collect()
}

pub fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    if !(args.resolution >= 0.0) {
        return Err(usage(format!("resolution {} must be nonnegative", args.resolution)));
    }
    let points = load(&args)?;
    let out = &args.out;
    match args.mode {
        CompareMode::Rank => {
            let mut md = String::from("## Models by average score\n\n");
            md.push_str(&table_markdown(&points));
            let mut csv = String::new();
            let mut rankings = Vec::new();
            for (title, r) in scales(&points, args.resolution) {
                md.push('\n');
                md.push_str(&ranking_markdown(&title, &r));
                let body = ranking_csv(&title, &r);
                if csv.is_empty() {
                    csv.push_str(&body);
                } else {
                    csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
                }
                rankings.push((title, r));
            }
            // Kendall tau only between scales ranking the same datasets
            let mut by_set: BTreeMap<Vec<String>, Vec<(String, Vec<String>)>> = BTreeMap::new();
            for (title, r) in &rankings {
                let mut key = r.order();
                key.sort();
                by_set.entry(key).or_default().push((title.clone(), r.order()));
            }
            for group in by_set.values().filter(|g| g.len() >= 2) {
                let c = rank_consistency(group).map_err(usage)?;
                md.push_str(&format!("\nRank consistency (Kendall tau) across {}: min {:.3}\n", c.labels.join(", "), c.min_tau));
            }
            write_file(&out.join("rank.md"), &md)?;
            write_file(&out.join("rank.csv"), if csv.is_empty() { "scale,rank,dataset,average,tied_with_next\n" } else { &csv })?;
            write_file(&out.join("points.csv"), &table_csv(&points))?;
            write_file(&out.join("rank.svg"), &ranking_svg("Dataset ranking by scale", &rankings))?;
        }
        CompareMode::Trend => {
            let a = align(&points).map_err(usage)?;
            let mut md = String::from("| Series | Points | Trend slope per decade | Intercept |\n|---|---|---|---|\n");
            for s in &a.series {
                let (slope, icpt) = match &s.trend {
                    Some(t) => (format!("{:.4}", t.slope), format!("{:.4}", t.intercept)),
                    None => ("-".into(), "-".into()),
                };
                md.push_str(&format!("| {} | {} | {slope} | {icpt} |\n", s.label(), s.points.len()));
            }
            md.push_str("\nTrends are least-squares guides over log10 compute, not scaling laws.\n");
            write_file(&out.join("trend.md"), &md)?;
            write_file(&out.join("trend.csv"), &trend_csv(&a.series))?;
            write_file(&out.join("trend_fit.svg"), &scatter_svg("Average score vs compute", &a.series, TrendMode::Fit))?;
            write_file(
                &out.join("trend_connect.svg"),
                &scatter_svg("Average score vs compute", &a.series, TrendMode::Connect),
            )?;
        }
        CompareMode::Flag => {
            let reports = flag_all(&points);
            let mut csv = String::from("point,compute,average,flagged,dominated_by\n");
            for r in &reports {
                let field = |s: &str| if s.contains([',', '"']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
                csv.push_str(&format!(
                    "{},{:e},{},{},{}\n",
                    field(&r.point),
                    r.compute,
                    r.average,
                    r.flagged,
                    field(&r.dominated_by.join("; "))
                ));
            }
            write_file(&out.join("flag.md"), &dominance_markdown(&reports))?;
            write_file(&out.join("flag.csv"), &csv)?;
            let a = align(&points).map_err(usage)?;
            write_file(&out.join("flag.svg"), &scatter_svg("Average score vs compute", &a.series, TrendMode::Connect))?;
        }
    }
    Ok(())
}
