//! HTML summary of the artifacts in a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_csv, read_json, write_atomic};
use crate::waveguides::{escape, histogram, histogram_svg, misalign_stats, DeviceRow};
use crate::workflow::{GroupStatsRow, MisalignSummary, QdGlobalRow, SquareTransform, StarkSummary};

/// Bin width of the localization-uncertainty histogram, nm.
const DELTA_BIN_NM: f64 = 0.5;

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    out.push_str("<table>\n<tr>");
    for h in header {
        let _ = write!(out, "<th>{}</th>", escape(h));
    }
    out.push_str("</tr>\n");
    for r in rows {
        out.push_str("<tr>");
        for c in r {
            let _ = write!(out, "<td>{}</td>", escape(c));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
}

fn f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

fn localization(dir: &Path, out: &mut String) -> Result<bool> {
    let qd = dir.join("qd_global.csv");
    let tf = dir.join("transform.json");
    if !qd.is_file() && !tf.is_file() {
        return Ok(false);
    }
    out.push_str("<h2>Localization</h2>\n");
    if tf.is_file() {
        let squares: BTreeMap<String, SquareTransform> = read_json(&tf)?;
        let rows: Vec<Vec<String>> = squares
            .iter()
            .map(|(id, s)| {
                vec![
                    id.clone(),
                    s.crosses.to_string(),
                    s.labels_read.to_string(),
                    f(s.rotation_deg, 3),
                    f(s.marker_unc_nm, 2),
                    f(s.transform.residual_rms_nm, 2),
                    s.emitters.to_string(),
                    s.skipped_merged.to_string(),
                ]
            })
            .collect();
        table(
            out,
            &["square", "crosses", "labels", "rotation (deg)", "cross unc (nm)", "residual rms (nm)", "emitters", "merged"],
            &rows,
        );
    }
    if qd.is_file() {
        let rows: Vec<QdGlobalRow> = read_csv(&qd)?;
        let deltas: Vec<f64> = rows.iter().map(|r| r.delta_nm).collect();
        if !deltas.is_empty() {
            let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
            let _ = writeln!(out, "<p>{} emitters, mean accuracy δ = {:.2} nm</p>", deltas.len(), mean);
            out.push_str(&histogram_svg(&histogram(&deltas, DELTA_BIN_NM), DELTA_BIN_NM, None, "Accuracy δ (nm)"));
        } else {
            out.push_str("<p>No emitters located.</p>\n");
        }
    }
    Ok(true)
}

fn misalignment(dir: &Path, out: &mut String) -> Result<bool> {
    let csv = dir.join("misalignment.csv");
    if !csv.is_file() {
        return Ok(false);
    }
    out.push_str("<h2>Misalignment</h2>\n");
    let rows: Vec<DeviceRow> = read_csv(&csv)?;
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta_nm).collect();
    let summary: Option<MisalignSummary> = {
        let p = dir.join("misalignment.json");
        if p.is_file() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let stats = match summary.as_ref().and_then(|s| s.stats) {
        Some(s) => Some(s),
        None if deltas.len() >= 2 => Some(misalign_stats(&deltas)?),
        None => None,
    };
    match &stats {
        Some(s) => {
            let _ = writeln!(out, "<p>Δ = ({:.1} ± {:.1}) nm over {} devices</p>", s.mean, s.std, s.n);
        }
        None => {
            let _ = writeln!(out, "<p>{} devices measured</p>", deltas.len());
        }
    }
    if let Some(s) = &summary {
        if !s.unmatched.is_empty() {
            let rows: Vec<Vec<String>> = s
                .unmatched
                .iter()
                .map(|u| vec![u.device_id.clone(), u.stage.to_string(), u.reason.clone()])
                .collect();
            out.push_str("<h3>Unmatched devices</h3>\n");
            table(out, &["device", "stage", "reason"], &rows);
        }
    }
    let bin = 20.0;
    out.push_str(&histogram_svg(&histogram(&deltas, bin), bin, stats.as_ref(), "Misalignment Δ (nm)"));
    Ok(true)
}

fn stark(dir: &Path, out: &mut String) -> Result<bool> {
    let json = dir.join("stark.json");
    if !json.is_file() {
        return Ok(false);
    }
    out.push_str("<h2>Stark shifts</h2>\n");
    let s: StarkSummary = read_json(&json)?;
    let mut rows = Vec::new();
    for m in &s.maps {
        for c in &m.comparisons {
            rows.push(vec![
                m.map_id.clone(),
                c.label.to_string(),
                f(c.before.lambda0_nm, 4),
                f(c.after.lambda0_nm, 4),
                f(c.mean_shift_nm, 4),
                f(c.before.p_z, 5),
                f(c.after.p_z, 5),
                f(c.before.alpha, 6),
                f(c.after.alpha, 6),
            ]);
        }
    }
    if !rows.is_empty() {
        table(
            out,
            &["map", "line", "λ₀ before (nm)", "λ₀ after (nm)", "mean shift (nm)", "p_z before", "p_z after", "α before", "α after"],
            &rows,
        );
    }
    let stats_path = dir.join("shift_stats.csv");
    let stats: Vec<GroupStatsRow> = if stats_path.is_file() {
        read_csv(&stats_path)?
    } else {
        Vec::new()
    };
    if !stats.is_empty() {
        let rows: Vec<Vec<String>> = stats
            .iter()
            .map(|g| {
                vec![
                    g.group.clone(),
                    g.n.to_string(),
                    f(g.mean_nm, 3),
                    g.std_nm.map_or_else(|| "undefined".to_string(), |v| f(v, 3)),
                ]
            })
            .collect();
        out.push_str("<h3>Line shifts by group</h3>\n");
        table(out, &["group", "n", "mean (nm)", "std (nm)"], &rows);
    }
    if !s.failures.is_empty() {
        let rows: Vec<Vec<String>> = s.failures.iter().map(|x| vec![x.id.clone(), x.reason.clone()]).collect();
        out.push_str("<h3>Failed inputs</h3>\n");
        table(out, &["id", "reason"], &rows);
    }
    Ok(true)
}

/// Builds `report.html` from whatever artifacts `dir` holds and returns
/// its contents. Fails when `dir` holds none.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut body = String::new();
    let mut any = localization(dir, &mut body)?;
    any |= misalignment(dir, &mut body)?;
    any |= stark(dir, &mut body)?;
    if !any {
        return Err(Error::InvalidInput(format!(
            "{} holds no locate, misalign or stark artifacts",
            dir.display()
        )));
    }
    Ok(format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>qdalign report</title>\n\
         <style>body{{font-family:sans-serif;margin:2em}}table{{border-collapse:collapse;margin:1em 0}}\
         td,th{{border:1px solid #999;padding:2px 8px;text-align:right}}</style>\n</head>\n<body>\n\
         <h1>qdalign report</h1>\n{body}</body>\n</html>\n"
    ))
}

pub fn write_report(dir: &Path, out: &Path) -> Result<()> {
    let html = render_report(dir)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("report.html"), html.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_report(dir.path()).is_err());
    }

    #[test]
    fn cells_are_escaped() {
        let mut s = String::new();
        table(&mut s, &["a<b"], &[vec!["x&y".into()]]);
        assert!(s.contains("a&lt;b") && s.contains("x&amp;y"));
    }
}
