//! On-disk dataset split: `annotations.jsonl` plus `features/<clip_id>.cfnt`.

use std::fs;
use std::path::Path;

use crate::dataio::annotations::{parse_jsonl, to_jsonl, AnnotationRecord};
use crate::dataio::tensor_file::{read_tensor, write_tensor};
use crate::dataio::DetectionClip;
use crate::error::{CfnError, Result};

pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const FEATURES: &str = "features";

pub fn write_split(dir: &Path, clips: &[DetectionClip]) -> Result<()> {
    let feat_dir = dir.join(FEATURES);
    fs::create_dir_all(&feat_dir).map_err(|e| CfnError::io(format!("creating {}", feat_dir.display()), e))?;
    let records: Vec<AnnotationRecord> = clips.iter().map(|c| AnnotationRecord::new(&c.clip_id, &c.labels)).collect();
    let path = dir.join(ANNOTATIONS);
    fs::write(&path, to_jsonl(&records)).map_err(|e| CfnError::io(format!("writing {}", path.display()), e))?;
    for c in clips {
        write_tensor(&feat_dir.join(format!("{}.cfnt", c.clip_id)), &c.features)?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, stride: usize) -> Result<Vec<DetectionClip>> {
    let path = dir.join(ANNOTATIONS);
    let text = fs::read_to_string(&path).map_err(|e| CfnError::io(format!("reading {}", path.display()), e))?;
    let mut clips = Vec::new();
    for rec in parse_jsonl(&text)? {
        let features = read_tensor(&dir.join(FEATURES).join(format!("{}.cfnt", rec.clip_id)))?;
        let labels = rec.labels()?;
        if features.ndim() < 2 || features.shape()[1] != labels.frames() {
            return Err(CfnError::Data(format!(
                "clip {}: features {:?} do not have {} frames",
                rec.clip_id,
                features.shape(),
                labels.frames()
            )));
        }
        if !features.is_finite() {
            return Err(CfnError::Data(format!("clip {}: non-finite features", rec.clip_id)));
        }
        clips.push(DetectionClip {
            clip_id: rec.clip_id,
            features,
            labels,
            stride,
        });
    }
    Ok(clips)
}
