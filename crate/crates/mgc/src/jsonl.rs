//! JSON Lines records emitted by the CLI.

use mgc_core::geometry::LocalizedCell;
use mgc_core::matching::PatchMatch;
use mgc_core::types::CorrespondenceTable;
use serde::{Deserialize, Serialize};

/// One query cell of a correspondence table: `keys` holds `[s, t, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrLine {
    pub c: usize,
    pub k: usize,
    pub l: usize,
    pub keys: Vec<(usize, usize, f64)>,
}

/// Lines for every query with at least one positive key.
pub fn corr_lines(table: &CorrespondenceTable) -> Vec<CorrLine> {
    table
        .overlapping()
        .map(|q| CorrLine { c: table.c, k: q.k, l: q.l, keys: q.keys.iter().map(|e| (e.s, e.t, e.weight)).collect() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeLine {
    pub k: usize,
    pub l: usize,
    pub x: f64,
    pub y: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub valid_x: bool,
    pub valid_y: bool,
    pub error_x: f64,
    pub error_y: f64,
}

impl From<&LocalizedCell> for LocalizeLine {
    fn from(c: &LocalizedCell) -> Self {
        Self {
            k: c.k,
            l: c.l,
            x: c.x,
            y: c.y,
            true_x: c.true_x,
            true_y: c.true_y,
            valid_x: c.valid_x,
            valid_y: c.valid_y,
            error_x: c.error_x(),
            error_y: c.error_y(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchLine {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

impl From<&PatchMatch> for MatchLine {
    fn from(m: &PatchMatch) -> Self {
        Self { a: m.a, b: m.b, similarity: m.score }
    }
}

pub fn to_lines<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("plain records serialize") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgc_core::geometry::correspondence_weights;
    use mgc_core::types::{CropBox, PatchGrid};

    #[test]
    fn identical_crops_give_singletons() {
        let crop = CropBox::new(0.0, 0.0, 224.0, 224.0).unwrap();
        let t = correspondence_weights(&crop, &crop, PatchGrid::square(14), 1).unwrap();
        let lines = corr_lines(&t);
        assert_eq!(lines.len(), 196);
        let text = to_lines(&lines);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, serde_json::json!({"c": 1, "k": 0, "l": 0, "keys": [[0, 0, 1.0]]}));
        let back: CorrLine = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(back, lines[195]);
    }
}
