//! Plot-ready CSV and JSON renderings of analysis results. Numbers use the
//! shortest round-trip decimal form; undefined values are empty cells.

use serde::Serialize;

use super::bias::{CurvePoint, HeadScore};
use super::LayerGamma;

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn gamma_csv(rows: &[LayerGamma]) -> String {
    let mut out = String::from("layer,gamma_local,gamma_syntactic,gamma_unrelated\n");
    for r in rows {
        out += &format!("{},{},{},{}\n", r.layer, cell(r.gamma.local), cell(r.gamma.syntactic), cell(r.gamma.unrelated));
    }
    out
}

pub fn bias_csv(scores: &[HeadScore]) -> String {
    let mut out = String::from("layer,head,mask,locality_score,syntactic_score\n");
    for s in scores {
        let mask = s.mask.map(|m| m.to_string()).unwrap_or_else(|| "none".into());
        out += &format!("{},{},{},{},{}\n", s.layer, s.head, mask, cell(s.locality), cell(s.syntactic));
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,fraction_local,fraction_syntactic\n");
    for p in points {
        out += &format!("{},{},{}\n", p.threshold, p.fraction_local, p.fraction_syntactic);
    }
    out
}

#[derive(Serialize)]
struct MapCell {
    head: usize,
    mask: Option<String>,
    locality: Option<f64>,
    syntactic: Option<f64>,
    local_biased: bool,
    syntactic_biased: bool,
}

#[derive(Serialize)]
struct HeadMap {
    threshold: f64,
    layers: Vec<Vec<MapCell>>,
}

/// Layer-major grid of heads, each flagged when its score exceeds `threshold`.
pub fn headmap_json(scores: &[HeadScore], threshold: f64) -> String {
    let n_layers = scores.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    let mut layers: Vec<Vec<MapCell>> = (0..n_layers).map(|_| Vec::new()).collect();
    for s in scores {
        layers[s.layer].push(MapCell {
            head: s.head,
            mask: s.mask.map(|m| m.to_string()),
            locality: s.locality,
            syntactic: s.syntactic,
            local_biased: s.locality.is_some_and(|v| v > threshold),
            syntactic_biased: s.syntactic.is_some_and(|v| v > threshold),
        });
    }
    serde_json::to_string_pretty(&HeadMap { threshold, layers }).expect("plain data serializes")
}
