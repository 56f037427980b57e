//! Line-oriented, versioned predictions file.
//!
//! ```text
//! SEG3DPRED v1
//! config_hash=<16 hex digits>
//! num_points=<N>
//! instance class=<id> confidence=<float> points=<comma-separated indices>
//! instance ...
//! ```
//!
//! One `instance` line per predicted object; the header's `num_points` is the
//! scene's point count so masks can be reconstructed without the scene file.

use std::fs;
use std::path::Path;

use seg3d_core::evaluation::InstancePrediction;
use seg3d_core::{Error, Result};

const HEADER: &str = "SEG3DPRED v1";

pub struct PredictionFile {
    pub config_hash: String,
    pub num_points: usize,
    pub instances: Vec<InstancePrediction>,
}

impl PredictionFile {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        s.push_str(&format!("config_hash={}\n", self.config_hash));
        s.push_str(&format!("num_points={}\n", self.num_points));
        for inst in &self.instances {
            let points: Vec<String> = inst
                .point_mask
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then(|| i.to_string()))
                .collect();
            s.push_str(&format!(
                "instance class={} confidence={:.9} points={}\n",
                inst.class_id,
                inst.confidence,
                points.join(",")
            ));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        if head != HEADER {
            return Err(Error::Format(format!(
                "not a predictions file: expected '{}', found '{}'",
                HEADER, head
            )));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String> {
            let line = line.ok_or_else(|| Error::Format(format!("missing '{}' line", key)))?;
            line.strip_prefix(&format!("{}=", key))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected '{}=', found '{}'", key, line)))
        };
        let config_hash = field(lines.next(), "config_hash")?;
        let num_points: usize = field(lines.next(), "num_points")?
            .parse()
            .map_err(|e| Error::Format(format!("bad num_points: {}", e)))?;

        let mut instances = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("instance line {}: {}", n + 1, msg));
            let rest = line
                .strip_prefix("instance ")
                .ok_or_else(|| bad("expected 'instance '"))?;
            let mut class_id = None;
            let mut confidence = None;
            let mut points = None;
            for tok in rest.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                match k {
                    "class" => {
                        class_id =
                            Some(v.parse::<usize>().map_err(|e| bad(&format!("class: {}", e)))?)
                    }
                    "confidence" => {
                        confidence = Some(
                            v.parse::<f64>().map_err(|e| bad(&format!("confidence: {}", e)))?,
                        )
                    }
                    "points" => {
                        let mut mask = vec![false; num_points];
                        if !v.is_empty() {
                            for idx in v.split(',') {
                                let i: usize =
                                    idx.parse().map_err(|e| bad(&format!("point: {}", e)))?;
                                if i >= num_points {
                                    return Err(bad(&format!(
                                        "point index {} out of range ({} points)",
                                        i, num_points
                                    )));
                                }
                                mask[i] = true;
                            }
                        }
                        points = Some(mask);
                    }
                    other => return Err(bad(&format!("unknown key '{}'", other))),
                }
            }
            instances.push(InstancePrediction {
                point_mask: points.ok_or_else(|| bad("missing points"))?,
                class_id: class_id.ok_or_else(|| bad("missing class"))?,
                confidence: confidence.ok_or_else(|| bad("missing confidence"))?,
            });
        }
        Ok(PredictionFile { config_hash, num_points, instances })
    }
}
