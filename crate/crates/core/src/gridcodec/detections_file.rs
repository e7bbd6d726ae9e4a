//! Line-delimited detection records, one frame per line:
//! `{"id":…, "dets":[{"cx":…,"cy":…,"w":…,"h":…,"class":…,"score":…}]}`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use super::Detection;
use crate::geometry::BoxCWH;
use crate::numfmt::sig17;
use crate::{Error, Result, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub id: u64,
    pub dets: Vec<Detection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDet {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
    score: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    id: u64,
    dets: Vec<RawDet>,
}

pub fn write_detections(path: impl AsRef<Path>, frames: &[FrameDetections]) -> Result<()> {
    let mut out = Vec::new();
    for f in frames {
        write!(out, "{{\"id\":{},\"dets\":[", f.id)?;
        for (i, d) in f.dets.iter().enumerate() {
            if i > 0 {
                out.push(b',');
            }
            write!(
                out,
                "{{\"cx\":{},\"cy\":{},\"w\":{},\"h\":{},\"class\":{},\"score\":{}}}",
                sig17(d.bbox.cx),
                sig17(d.bbox.cy),
                sig17(d.bbox.w),
                sig17(d.bbox.h),
                d.class_id,
                sig17(d.score)
            )?;
        }
        out.extend_from_slice(b"]}\n");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<FrameDetections>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let raw: RawFrame = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut dets = Vec::with_capacity(raw.dets.len());
        for d in raw.dets {
            if d.class >= NUM_CLASSES {
                return Err(bad(format!(
                    "class {} out of range 0..{NUM_CLASSES}",
                    d.class
                )));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(bad(format!("score {} outside [0,1]", d.score)));
            }
            let bbox = BoxCWH::try_new(d.cx, d.cy, d.w, d.h).map_err(|e| bad(e.to_string()))?;
            dets.push(Detection::new(bbox, d.class, d.score));
        }
        frames.push(FrameDetections { id: raw.id, dets });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let frames = vec![
            FrameDetections {
                id: 3,
                dets: vec![
                    Detection::new(BoxCWH::new(0.1, 0.2, 0.3, 0.4), 2, 0.9),
                    Detection::new(
                        BoxCWH::new(1.0 / 3.0, 0.7, 1e-3, 0.25),
                        5,
                        0.5000000000000001,
                    ),
                ],
            },
            FrameDetections {
                id: 4,
                dets: vec![],
            },
        ];
        write_detections(&p, &frames).unwrap();
        assert_eq!(read_detections(&p).unwrap(), frames);

        std::fs::write(&p, "{\"id\":0,\"dets\":[]}\n{\"id\":1,\"dets\":[{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"h\":0.1,\"class\":9,\"score\":0.5}]}\n").unwrap();
        match read_detections(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
