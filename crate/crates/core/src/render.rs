//! Line heatmaps for a single sample, as ANSI text or standalone HTML.
//!
//! Intensities are line scores divided by the sample's maximum and bucketed
//! into ten classes.

use std::fmt::Write as _;

pub const LEVELS: usize = 10;

/// Intensity class in `0..LEVELS` for each line.
pub fn intensity_classes(scores: &[f64]) -> Vec<usize> {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    scores
        .iter()
        .map(|&s| {
            if max <= 0.0 {
                0
            } else {
                ((s / max * LEVELS as f64) as usize).min(LEVELS - 1)
            }
        })
        .collect()
}

// 256-colour background ramp from dark grey to red.
const ANSI_RAMP: [u8; LEVELS] = [236, 237, 52, 88, 124, 160, 196, 202, 208, 214];

pub fn ansi(lines: &[&str], scores: &[f64]) -> String {
    let classes = intensity_classes(scores);
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let c = classes.get(i).copied().unwrap_or(0);
        let s = scores.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "\x1b[48;5;{}m{:>4} {:.4} \x1b[0m {}",
            ANSI_RAMP[c],
            i + 1,
            s,
            line
        );
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(ch),
        }
    }
    out
}

/// One sample to render: a title, its source lines and per-line scores.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub lines: &'a [&'a str],
    pub scores: &'a [f64],
}

pub fn html(title: &str, lines: &[&str], scores: &[f64]) -> String {
    html_page(
        title,
        &[Heatmap {
            title,
            lines,
            scores,
        }],
    )
}

/// Standalone HTML document with one section per sample.
pub fn html_page(page_title: &str, samples: &[Heatmap<'_>]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>",
        escape(page_title)
    );
    out.push_str("<style>pre{font-family:monospace}span{display:block;white-space:pre}");
    for c in 0..LEVELS {
        let alpha = c as f64 / (LEVELS - 1) as f64 * 0.8;
        let _ = write!(out, ".h{c}{{background:rgba(220,40,40,{alpha:.3})}}");
    }
    out.push_str("</style></head><body>\n");
    for sample in samples {
        let classes = intensity_classes(sample.scores);
        let _ = writeln!(out, "<h3>{}</h3>\n<pre>", escape(sample.title));
        for (i, line) in sample.lines.iter().enumerate() {
            let c = classes.get(i).copied().unwrap_or(0);
            let s = sample.scores.get(i).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "<span class=\"h{c}\" title=\"{s:.6}\">{:>4} {}</span>",
                i + 1,
                escape(line)
            );
        }
        out.push_str("</pre>\n");
    }
    out.push_str("</body></html>\n");
    out
}
