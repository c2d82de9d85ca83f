//! Descriptor edit scripts, shared by the command line and the service.

use serde::{Deserialize, Serialize};

use super::bundle::DescriptorBundle;
use super::histogram::shift_histogram;
use super::segments::recolour_region;
use crate::error::Result;

/// One edit. Serialized as `{"op": ..., "args": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum EditOp {
    /// Replace one cluster's centroid with a new (a, b).
    Recolour { cluster: usize, ab: [f64; 2] },
    /// Shift the grey-level histogram by `delta_l` L units.
    ShiftHist { delta_l: f64 },
}

pub fn apply_edit(bundle: &DescriptorBundle, op: &EditOp) -> Result<DescriptorBundle> {
    let mut out = bundle.clone();
    match *op {
        EditOp::Recolour { cluster, ab } => {
            out.segmentation = recolour_region(&bundle.segmentation, cluster, ab)?;
        }
        EditOp::ShiftHist { delta_l } => {
            out.histogram = shift_histogram(&bundle.histogram, delta_l)?;
        }
    }
    Ok(out)
}

/// Applies edits in order; fails on the first invalid one.
pub fn apply_edits(bundle: &DescriptorBundle, ops: &[EditOp]) -> Result<DescriptorBundle> {
    ops.iter().try_fold(bundle.clone(), |b, op| apply_edit(&b, op))
}

pub fn parse_script(json: &str) -> Result<Vec<EditOp>> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_format() {
        let ops = parse_script(r#"[{"op":"recolour","args":{"cluster":2,"ab":[0,60]}},{"op":"shift_hist","args":{"delta_l":-15}}]"#).unwrap();
        assert_eq!(
            ops,
            vec![
                EditOp::Recolour { cluster: 2, ab: [0.0, 60.0] },
                EditOp::ShiftHist { delta_l: -15.0 }
            ]
        );
        let back = serde_json::to_string(&ops[1]).unwrap();
        assert_eq!(back, r#"{"op":"shift_hist","args":{"delta_l":-15.0}}"#);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(parse_script(r#"[{"op":"blur","args":{}}]"#).is_err());
    }
}
