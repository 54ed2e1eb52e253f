//! Minimal SVG figures. Every figure writes its data as CSV next to the image.

use std::fmt::Write as _;
use std::path::Path;

use diffant::config::RunConfig;
use diffant::data::write_atomic;
use diffant::eval::to_csv;
use diffant::infer::{parse_dump, DumpKind, Payload};
use diffant::{Error, Result};

use crate::commands::{load_split, load_vocab, sibling};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1b9e77", "#7570b3",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Line chart of a CSV whose first column is x and remaining columns are
/// series.
pub fn curve(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::data(input, format!("cannot read: {e}")))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::data(input, "empty csv"))?
        .split(',')
        .collect();
    if header.len() < 2 {
        return Err(Error::data(
            input,
            "need an x column and at least one series",
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, l) in lines.enumerate() {
        let r: std::result::Result<Vec<f64>, _> = l.split(',').map(|v| v.trim().parse()).collect();
        let r = r.map_err(|_| Error::data(input, format!("row {}: non-numeric value", i + 2)))?;
        if r.len() != header.len() {
            return Err(Error::data(
                input,
                format!("row {}: expected {} columns", i + 2, header.len()),
            ));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::data(input, "no data rows"));
    }
    let bounds = |col: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = bounds(&mut rows.iter().map(|r| r[0]));
    let (y0, y1) = bounds(&mut rows.iter().flat_map(|r| r[1..].to_vec()));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut svg = open_svg(W, H);
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"##,
        W / 2.0,
        H - 12.0,
        header[0]
    );
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{y}" font-size="11" text-anchor="end">{v:.3}</text>"##,
            PAD - 4.0
        );
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            svg,
            r##"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{v}</text>"##,
            H - PAD + 14.0
        );
    }
    for (k, name) in header.iter().enumerate().skip(1) {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r[0]), sy(r[k])))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"##,
            color(k - 1),
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="12" fill="{}">{name}</text>"##,
            W - PAD + 4.0,
            PAD + 14.0 * k as f64,
            color(k - 1)
        );
    }
    svg.push_str("</svg>\n");
    write_atomic(out, svg.as_bytes())?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(f64::to_string).collect())
        .collect();
    write_atomic(&sibling(out, "csv"), to_csv(&header, &csv_rows).as_bytes())
}

/// Colour strips of ground truth and every predicted sample for one video.
pub fn timeline(
    cfg: &RunConfig,
    predictions: &Path,
    data: &Path,
    video: Option<&str>,
    out: &Path,
) -> Result<()> {
    let vocab = load_vocab(data)?;
    let text = std::fs::read_to_string(predictions)
        .map_err(|e| Error::data(predictions, format!("cannot read: {e}")))?;
    let records = parse_dump(&text, &vocab, DumpKind::Frames)?;
    let id = match video {
        Some(v) => v.to_string(),
        None => records
            .first()
            .map(|r| r.video_id.clone())
            .ok_or_else(|| Error::data(predictions, "no predictions"))?,
    };
    let mut samples: Vec<(usize, f64, Vec<usize>)> = records
        .into_iter()
        .filter(|r| r.video_id == id)
        .filter_map(|r| match r.payload {
            Payload::Frames(f) => Some((r.sample_id, r.alpha, f)),
            _ => None,
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::data(
            predictions,
            format!("no frame predictions for `{id}`"),
        ));
    }
    samples.sort_by_key(|s| s.0);
    let mut gt = None;
    for split in ["test", "train"] {
        if let Ok(vs) = load_split(data, &vocab, split, cfg.data.stride) {
            if let Some(v) = vs.into_iter().find(|v| v.video_id == id) {
                gt = Some(v.frame_labels);
                break;
            }
        }
    }
    let gt = gt.ok_or_else(|| Error::data(data, format!("video `{id}` not found")))?;
    let observed = gt.len() - samples[0].2.len().min(gt.len());

    let mut rows: Vec<(String, Vec<usize>)> = vec![("truth".into(), gt.clone())];
    for (sid, _, f) in &samples {
        let mut full = gt[..observed].to_vec();
        full.extend_from_slice(f);
        rows.push((format!("sample {sid}"), full));
    }
    let row_h = 22.0;
    let label_w = 80.0;
    let height = PAD + row_h * (rows.len() as f64 + 1.0) + 40.0;
    let t = gt.len().max(1) as f64;
    let fw = (W - label_w - 16.0) / t;
    let mut svg = open_svg(W, height);
    let mut csv_rows = Vec::new();
    for (k, (name, frames)) in rows.iter().enumerate() {
        let y = PAD / 2.0 + k as f64 * row_h;
        let _ = writeln!(
            svg,
            r##"<text x="4" y="{}" font-size="12">{name}</text>"##,
            y + 14.0
        );
        let mut start = 0;
        for i in 1..=frames.len() {
            if i == frames.len() || frames[i] != frames[start] {
                let c = frames[start];
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.2}" y="{y}" width="{:.2}" height="{}" fill="{}"><title>{}</title></rect>"##,
                    label_w + start as f64 * fw,
                    (i - start) as f64 * fw,
                    row_h - 4.0,
                    color(c),
                    vocab.name(c)
                );
                csv_rows.push(vec![
                    name.clone(),
                    start.to_string(),
                    i.to_string(),
                    vocab.name(c).to_string(),
                ]);
                start = i;
            }
        }
    }
    let cut = label_w + observed as f64 * fw;
    let _ = writeln!(
        svg,
        r##"<line x1="{cut:.2}" y1="{}" x2="{cut:.2}" y2="{:.2}" stroke="black" stroke-dasharray="4 2"/>"##,
        PAD / 4.0,
        PAD / 2.0 + rows.len() as f64 * row_h
    );
    let legend_y = PAD / 2.0 + rows.len() as f64 * row_h + 20.0;
    let mut x = 4.0;
    for c in 0..vocab.num_classes() {
        let name = vocab.name(c);
        let _ = writeln!(
            svg,
            r##"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"##,
            legend_y - 9.0,
            color(c)
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{legend_y}" font-size="10">{name}</text>"##,
            x + 13.0
        );
        x += 18.0 + 6.0 * name.len() as f64;
    }
    svg.push_str("</svg>\n");
    write_atomic(out, svg.as_bytes())?;
    write_atomic(
        &sibling(out, "csv"),
        to_csv(&["row", "start", "end", "class"], &csv_rows).as_bytes(),
    )
}

fn open_svg(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}
