//! Deterministic synthetic street scenes.
//!
//! Each scene holds one to three labeled boxes with class-dependent shapes and
//! a coarse `F × F` occupancy raster that the toy model reads as input. Boxes
//! always lie inside the image, at most one box center falls in any grid cell,
//! and centers stay `border_cells` cells away from the image edge.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{contains, BoxCWH};
use crate::gridcodec::{GridConfig, GroundTruth};
use crate::numfmt::sig17;
use crate::{Error, Result, NUM_CLASSES};

const MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects_min: usize,
    pub objects_max: usize,
    /// Mean box size per class id.
    pub class_shapes: [ClassShape; NUM_CLASSES],
    /// Relative half-width of the uniform size jitter.
    pub jitter: f64,
    /// Probability that the second object is nested inside the first.
    pub occlusion_rate: f64,
    pub feature_resolution: usize,
    pub grid_n: usize,
    pub border_cells: usize,
}

impl Default for SceneSpec {
    /// One class per anchor shape, sized like the n=9 priors.
    fn default() -> Self {
        let s = |w: f64, h: f64| ClassShape {
            w: w / 9.0,
            h: h / 9.0,
        };
        Self {
            objects_min: 1,
            objects_max: 3,
            class_shapes: [
                s(1.5, 3.0), // pedestrian, 1:2
                s(1.5, 1.5), // bicycle, 1:1
                s(3.0, 1.5), // motorcycle, 2:1
                s(6.0, 3.0), // car, 4:2
                s(3.0, 6.0), // truck, 2:4
                s(3.0, 3.0), // bus, 2:2
            ],
            jitter: 0.1,
            occlusion_rate: 0.2,
            feature_resolution: 36,
            grid_n: 9,
            border_cells: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.objects_min == 0 && self.objects_max == 0 {
            // background-only scenes are allowed
        } else if self.objects_min > self.objects_max {
            return bad(format!(
                "objects_min {} exceeds objects_max {}",
                self.objects_min, self.objects_max
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!(
                "occlusion_rate {} outside [0, 1]",
                self.occlusion_rate
            ));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if self.feature_resolution == 0 {
            return bad("feature_resolution must be positive".into());
        }
        GridConfig::new(self.grid_n)?;
        if 2 * self.border_cells >= self.grid_n {
            return bad(format!(
                "border of {} cells leaves no room on a {}-grid",
                self.border_cells, self.grid_n
            ));
        }
        for (c, s) in self.class_shapes.iter().enumerate() {
            if !(s.w > 0.0
                && s.h > 0.0
                && s.w * (1.0 + self.jitter) <= 1.0
                && s.h * (1.0 + self.jitter) <= 1.0)
            {
                return bad(format!("class {c} shape {s:?} does not fit the image"));
            }
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.feature_resolution * self.feature_resolution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub id: u64,
    /// Row-major `F × F` raster in `[0, 1]`.
    pub features: Vec<f64>,
    pub gts: Vec<GroundTruth>,
}

/// Generates `count` scenes; scene `i` depends only on `(spec, seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let gts = sample_scene(spec, &mut rng).ok_or_else(|| {
                Error::Generation(format!(
                    "scene {i}: no valid layout after {MAX_RETRIES} retries"
                ))
            })?;
            Ok(LabeledScene {
                id: i,
                features: render_features(&gts, spec.feature_resolution),
                gts,
            })
        })
        .collect()
}

fn sample_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Vec<GroundTruth>> {
    let grid = GridConfig::new(spec.grid_n).ok()?;
    let s = 1.0 / spec.grid_n as f64;
    let lo = spec.border_cells as f64 * s;
    let hi = 1.0 - lo;

    let jittered = |rng: &mut ChaCha8Rng, class: usize| {
        let shape = spec.class_shapes[class];
        let j = spec.jitter;
        let w = shape.w * (1.0 + rng.gen_range(-j..=j));
        let h = shape.h * (1.0 + rng.gen_range(-j..=j));
        (w, h)
    };
    // half-open so centers never reach the first border cell on the far side
    let center_in = |rng: &mut ChaCha8Rng, a: f64, b: f64| -> Option<f64> {
        (a < b).then(|| rng.gen_range(a..b))
    };

    for _ in 0..MAX_RETRIES {
        let k = rng.gen_range(spec.objects_min..=spec.objects_max);
        let nested = k >= 2 && rng.gen_bool(spec.occlusion_rate);
        let mut gts: Vec<GroundTruth> = Vec::with_capacity(k);
        let mut cells: Vec<usize> = Vec::with_capacity(k);
        let mut ok = true;

        for i in 0..k {
            let class = rng.gen_range(0..NUM_CLASSES);
            let (mut w, mut h) = jittered(rng, class);
            let bbox = if i == 1 && nested {
                let outer = gts[0].bbox;
                w = w.min(0.6 * outer.w);
                h = h.min(0.6 * outer.h);
                let cx = center_in(
                    rng,
                    (outer.x1() + w / 2.0).max(lo),
                    (outer.x2() - w / 2.0).min(hi),
                );
                let cy = center_in(
                    rng,
                    (outer.y1() + h / 2.0).max(lo),
                    (outer.y2() - h / 2.0).min(hi),
                );
                match (cx, cy) {
                    (Some(cx), Some(cy)) => BoxCWH::new(cx, cy, w, h),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            } else {
                let cx = center_in(rng, (w / 2.0).max(lo), (1.0 - w / 2.0).min(hi));
                let cy = center_in(rng, (h / 2.0).max(lo), (1.0 - h / 2.0).min(hi));
                match (cx, cy) {
                    (Some(cx), Some(cy)) => BoxCWH::new(cx, cy, w, h),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            };
            let cell = grid.cell_of(bbox.cx, bbox.cy);
            if cells.contains(&cell) || !bbox.inside_unit_square() {
                ok = false;
                break;
            }
            if i == 1 && nested && !contains(&gts[0].bbox, &bbox) {
                ok = false;
                break;
            }
            cells.push(cell);
            gts.push(GroundTruth::new(bbox, class));
        }
        if ok {
            return Some(gts);
        }
    }
    None
}

/// Additive soft occupancy: each box adds its pixel coverage times `(class + 1) / 6`.
pub fn render_features(gts: &[GroundTruth], res: usize) -> Vec<f64> {
    let mut f = vec![0.0; res * res];
    let px = 1.0 / res as f64;
    for g in gts {
        let b = &g.bbox;
        let gain = (g.class_id + 1) as f64 / NUM_CLASSES as f64;
        let j0 = ((b.x1() / px).floor().max(0.0)) as usize;
        let j1 = ((b.x2() / px).ceil() as usize).min(res);
        let i0 = ((b.y1() / px).floor().max(0.0)) as usize;
        let i1 = ((b.y2() / px).ceil() as usize).min(res);
        for i in i0..i1 {
            let oy = ((i + 1) as f64 * px).min(b.y2()) - (i as f64 * px).max(b.y1());
            if oy <= 0.0 {
                continue;
            }
            for j in j0..j1 {
                let ox = ((j + 1) as f64 * px).min(b.x2()) - (j as f64 * px).max(b.x1());
                if ox > 0.0 {
                    f[i * res + j] += gain * ox * oy / (px * px);
                }
            }
        }
    }
    for v in &mut f {
        *v = v.min(1.0);
    }
    f
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGt {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    id: u64,
    gts: Vec<RawGt>,
    features: Vec<f64>,
}

/// One JSON object per line, every float written with 17 significant digits.
pub fn write_annotations(scenes: &[LabeledScene], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for s in scenes {
        write!(out, "{{\"id\":{},\"gts\":[", s.id)?;
        for (i, g) in s.gts.iter().enumerate() {
            if i > 0 {
                out.push(b',');
            }
            write!(
                out,
                "{{\"cx\":{},\"cy\":{},\"w\":{},\"h\":{},\"class\":{}}}",
                sig17(g.bbox.cx),
                sig17(g.bbox.cy),
                sig17(g.bbox.w),
                sig17(g.bbox.h),
                g.class_id
            )?;
        }
        out.extend_from_slice(b"],\"features\":[");
        for (i, v) in s.features.iter().enumerate() {
            if i > 0 {
                out.push(b',');
            }
            out.extend_from_slice(sig17(*v).as_bytes());
        }
        out.extend_from_slice(b"]}\n");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<LabeledScene>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut scenes = Vec::new();
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
        let raw: RawScene = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut gts = Vec::with_capacity(raw.gts.len());
        for (k, g) in raw.gts.into_iter().enumerate() {
            let gt = GroundTruth::new(BoxCWH::new(g.cx, g.cy, g.w, g.h), g.class);
            gt.validate(k).map_err(|e| bad(e.to_string()))?;
            gts.push(gt);
        }
        if let Some(k) = raw.features.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("feature {k} is not finite")));
        }
        scenes.push(LabeledScene {
            id: raw.id,
            features: raw.features,
            gts,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcodec::encode;

    #[test]
    fn same_seed_same_data() {
        let spec = SceneSpec::default();
        let a = generate_dataset(&spec, 50, 42).unwrap();
        let b = generate_dataset(&spec, 50, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 50, 43).unwrap();
        assert_ne!(a, c);
        // a prefix of a larger run is identical
        let d = generate_dataset(&spec, 80, 42).unwrap();
        assert_eq!(&d[..50], &a[..]);
    }

    #[test]
    fn scenes_respect_layout_rules() {
        let spec = SceneSpec::default();
        let grid = GridConfig::new(spec.grid_n).unwrap();
        for s in generate_dataset(&spec, 300, 1).unwrap() {
            assert!((1..=3).contains(&s.gts.len()));
            assert_eq!(s.features.len(), 36 * 36);
            assert!(s.features.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut cells: Vec<usize> = s
                .gts
                .iter()
                .map(|g| grid.cell_of(g.bbox.cx, g.bbox.cy))
                .collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), s.gts.len());
            for g in &s.gts {
                assert!(g.bbox.inside_unit_square());
                let (r, c) = grid.cell_rc(grid.cell_of(g.bbox.cx, g.bbox.cy));
                assert!((1..8).contains(&r) && (1..8).contains(&c));
            }
            let (_, asg) = encode(&s.gts, &grid).unwrap();
            assert_eq!(asg.object_slots().len(), s.gts.len());
        }
    }

    #[test]
    fn full_occlusion_nests_second_box() {
        let spec = SceneSpec {
            objects_min: 2,
            objects_max: 2,
            occlusion_rate: 1.0,
            ..SceneSpec::default()
        };
        for s in generate_dataset(&spec, 200, 9).unwrap() {
            assert!(contains(&s.gts[0].bbox, &s.gts[1].bbox));
        }
    }

    #[test]
    fn car_aspect_matches_table() {
        let spec = SceneSpec::default();
        let cars: Vec<f64> = generate_dataset(&spec, 1000, 5)
            .unwrap()
            .iter()
            .flat_map(|s| {
                s.gts
                    .iter()
                    .filter(|g| g.class_id == 3)
                    .map(|g| g.bbox.w / g.bbox.h)
            })
            .collect();
        assert!(cars.len() > 100);
        let mean = cars.iter().sum::<f64>() / cars.len() as f64;
        assert!((mean - 2.0).abs() <= 0.3, "{mean}");
    }

    #[test]
    fn impossible_spec_fails() {
        let spec = SceneSpec {
            objects_min: 60,
            objects_max: 60,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_dataset(&spec, 1, 0),
            Err(Error::Generation(_))
        ));
        assert!(generate_dataset(&SceneSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn rendering_covers_box_area() {
        let g = GroundTruth::new(BoxCWH::new(0.5, 0.5, 0.25, 0.125), 5);
        let f = render_features(&[g], 36);
        let mass: f64 = f.iter().sum::<f64>() / (36.0 * 36.0);
        assert!((mass - 0.25 * 0.125).abs() < 1e-12);
    }

    #[test]
    fn annotation_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let mut scenes = generate_dataset(&SceneSpec::default(), 100, 3).unwrap();
        scenes[7].gts.clear();
        write_annotations(&scenes, &p).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), scenes);
    }

    #[test]
    fn invalid_class_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        for class in [6usize, 7, 100] {
            let text = format!(
                "{{\"id\":0,\"gts\":[],\"features\":[]}}\n{{\"id\":1,\"gts\":[{{\"cx\":0.5,\"cy\":0.5,\"w\":0.1,\"h\":0.1,\"class\":{class}}}],\"features\":[0.0]}}\n"
            );
            std::fs::write(&p, text).unwrap();
            match read_annotations(&p) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("{other:?}"),
            }
        }
        std::fs::write(&p, "{\"id\":0,\"gts\":[],\"features\":[0.5]}\nnot json\n").unwrap();
        assert!(matches!(
            read_annotations(&p),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
