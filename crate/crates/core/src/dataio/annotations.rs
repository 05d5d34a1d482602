//! One JSON object per line:
//! `{"clip_id": ..., "num_classes": K, "T_raw": T, "intervals": [[class, start, end], ...]}`
//! with `end` exclusive.

use serde::{Deserialize, Serialize};

use crate::error::{CfnError, Result};
use crate::losseval::FrameLabels;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub num_classes: usize,
    #[serde(rename = "T_raw")]
    pub t_raw: usize,
    pub intervals: Vec<[usize; 3]>,
}

impl AnnotationRecord {
    pub fn new(clip_id: &str, labels: &FrameLabels) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            num_classes: labels.num_classes(),
            t_raw: labels.frames(),
            intervals: labels.intervals().into_iter().map(|(k, s, e)| [k, s, e]).collect(),
        }
    }

    pub fn labels(&self) -> Result<FrameLabels> {
        let iv: Vec<(usize, usize, usize)> = self.intervals.iter().map(|&[k, s, e]| (k, s, e)).collect();
        FrameLabels::from_intervals(self.num_classes, self.t_raw, &iv)
            .map_err(|e| CfnError::Data(format!("clip {}: {e}", self.clip_id)))
    }
}

pub fn to_jsonl(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("annotation records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CfnError::Data(format!("annotation line {}: {e}", i + 1)))
        })
        .collect()
}
