//! Loss-curve SVG and summary CSV from epinet metrics logs.

use anyhow::{Context, Result};
use enndola_core::epinet::EpochRecord;
use std::path::Path;

pub struct MetricsLog {
    pub source: String,
    pub records: Vec<EpochRecord>,
}

pub fn read_metrics_log(path: &Path) -> Result<MetricsLog> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading metrics log {}", path.display()))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        records.push(record);
    }
    if records.is_empty() {
        anyhow::bail!("metrics log {} has no records", path.display());
    }
    Ok(MetricsLog {
        source: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string()),
        records,
    })
}

pub fn summary_csv(logs: &[MetricsLog]) -> String {
    let mut out = String::from("source,epoch,loss,lr,masked_target_count,wall_ms\n");
    for log in logs {
        for r in &log.records {
            out.push_str(&format!(
                "{},{},{:.6},{:.6e},{},{}\n",
                log.source, r.epoch, r.loss, r.lr, r.masked_target_count, r.wall_ms
            ));
        }
    }
    out
}

const CURVE_COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// One polyline per log, one circle marker per epoch record.
pub fn loss_curve_svg(logs: &[MetricsLog]) -> String {
    let (width, height) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 20.0, 24.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let max_epoch = logs
        .iter()
        .flat_map(|l| l.records.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_loss = logs
        .iter()
        .flat_map(|l| l.records.iter().map(|r| r.loss))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let x = |epoch: usize| left + (epoch as f64 / max_epoch) * plot_w;
    let y = |loss: f64| top + (1.0 - (loss / max_loss).clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">epoch</text>\n",
        left + plot_w / 2.0,
        height - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 16 {})\" \
         text-anchor=\"middle\">training loss</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\">{:.3}</text>\n",
        8.0,
        top + 6.0,
        max_loss
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
        left + plot_w - 8.0,
        top + plot_h + 16.0,
        max_epoch as usize
    ));

    for (i, log) in logs.iter().enumerate() {
        let color = CURVE_COLORS[i % CURVE_COLORS.len()];
        let points: Vec<String> = log
            .records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.epoch), y(r.loss)))
            .collect();
        if points.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
        for r in &log.records {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                x(r.epoch),
                y(r.loss)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            left + plot_w - 150.0,
            top + 16.0 + 16.0 * i as f64,
            log.source
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(n: usize) -> MetricsLog {
        MetricsLog {
            source: "epinet_metrics".into(),
            records: (1..=n)
                .map(|epoch| EpochRecord {
                    epoch,
                    loss: 1.0 / epoch as f64,
                    lr: 0.1,
                    masked_target_count: 0,
                    wall_ms: 3,
                })
                .collect(),
        }
    }

    #[test]
    fn svg_has_one_marker_per_record_and_csv_one_row() {
        let logs = vec![log(3)];
        let svg = loss_curve_svg(&logs);
        assert_eq!(svg.matches("<circle").count(), 3);
        let csv = summary_csv(&logs);
        assert_eq!(csv.lines().count(), 4); // header + 3 rows
    }

    #[test]
    fn metrics_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut text = String::new();
        for r in &log(2).records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let loaded = read_metrics_log(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[1].epoch, 2);
    }
}
