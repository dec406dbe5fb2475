use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::env_of_run_id;
use crate::agent::{EpisodeStats, PolicyMode};
use crate::error::{Error, Result};

pub fn read_stats(path: &Path) -> Result<Vec<EpisodeStats>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Per-episode mean and population standard deviation across runs, truncated
/// to the shortest run.
pub(crate) fn band(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let n = curves.len() as f64;
    (0..len)
        .map(|i| {
            let mean = curves.iter().map(|c| c[i]).sum::<f64>() / n;
            let var = curves.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

type Band = (PolicyMode, usize, Vec<(f64, f64)>);

type Curves = BTreeMap<String, BTreeMap<PolicyMode, Vec<Vec<f64>>>>;

/// One SVG per environment with a mean return curve and a ±1 standard
/// deviation band over runs for every policy mode. Stats files are only read.
pub fn cmd_plot(stats_glob: &str, output: &Path) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = glob::glob(stats_glob)
        .map_err(|e| Error::invalid(format!("bad glob `{stats_glob}`: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!(
            "no stats files match `{stats_glob}`"
        )));
    }
    let mut curves: Curves = BTreeMap::new();
    for path in &paths {
        let rows = read_stats(path)?;
        let Some(first) = rows.first() else { continue };
        let returns = rows.iter().map(|r| r.episode_return).collect();
        curves
            .entry(env_of_run_id(&first.run_id).to_string())
            .or_default()
            .entry(first.policy_mode)
            .or_default()
            .push(returns);
    }
    if curves.is_empty() {
        return Err(Error::invalid("all matched stats files are empty"));
    }
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut written = Vec::new();
    for (env, modes) in &curves {
        let path = output.join(format!("{env}.svg"));
        draw(&path, env, modes)
            .map_err(|e| Error::Format(format!("plotting {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

fn draw(
    path: &Path,
    env: &str,
    modes: &BTreeMap<PolicyMode, Vec<Vec<f64>>>,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let bands: Vec<Band> = modes.iter().map(|(m, c)| (*m, c.len(), band(c))).collect();
    let episodes = bands.iter().map(|b| b.2.len()).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, _, b) in &bands {
        for (m, s) in b {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() || lo == hi {
        lo = if lo.is_finite() { lo - 1.0 } else { -1.0 };
        hi = lo + 2.0;
    }
    let pad = 0.05 * (hi - lo);

    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(env, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..(episodes - 1) as f64, (lo - pad)..(hi + pad))?;
    chart
        .configure_mesh()
        .x_desc("episode")
        .y_desc("return")
        .draw()?;
    for (i, (mode, runs, b)) in bands.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let upper = b.iter().enumerate().map(|(x, (m, s))| (x as f64, m + s));
        let lower = b
            .iter()
            .enumerate()
            .rev()
            .map(|(x, (m, s))| (x as f64, m - s));
        chart.draw_series(std::iter::once(Polygon::new(
            upper.chain(lower).collect::<Vec<_>>(),
            color.mix(0.2).filled(),
        )))?;
        chart
            .draw_series(LineSeries::new(
                b.iter().enumerate().map(|(x, (m, _))| (x as f64, *m)),
                color.stroke_width(2),
            ))?
            .label(format!("{mode} ({runs} runs)"))
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
