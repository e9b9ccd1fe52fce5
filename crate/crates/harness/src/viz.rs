//! `mvacon viz-clusters` and `mvacon viz-deform`.

use std::io::Write;
use std::path::{Path, PathBuf};

use mvacon_core::model::Lifter;
use mvacon_core::train::Trainer;
use mvacon_core::{Graph, Tensor};

use crate::error::{HarnessError, Result};
use crate::output::{self, LineFile};

/// Row-major `height×width` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Per-token cluster response `Σ_channels (A·Z)`, i.e. each token's
/// assignment-weighted sum of channel-summed clusters.
pub fn token_response(assignment: &Tensor<f64>, clusters: &Tensor<f64>) -> Result<Vec<f64>> {
    let (n, m) = assignment.dims2()?;
    let (mz, _) = clusters.dims2()?;
    if m != mz {
        return Err(HarnessError::Usage(format!("{m} assignment columns vs {mz} clusters")));
    }
    let sums: Vec<f64> = (0..m).map(|j| clusters.row(j).iter().sum()).collect();
    Ok((0..n)
        .map(|i| assignment.row(i).iter().zip(&sums).map(|(a, s)| a * s).sum())
        .collect())
}

/// Bilinear resize of an `h×w` grid to `height×width` with pixel-centre
/// alignment and edge clamping.
pub fn upsample(src: &[f64], h: usize, w: usize, height: usize, width: usize) -> Vec<f64> {
    let coord = |dst: usize, n_src: usize, n_dst: usize| {
        let x = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(n_src - 1), x - i0 as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let (y0, y1, fy) = coord(r, h, height);
        for c in 0..width {
            let (x0, x1, fx) = coord(c, w, width);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Min–max normalization; a constant map becomes all zeros.
pub fn normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Cluster heatmap of every view at image resolution, from the first
/// contextualization module on the finest pyramid level.
pub fn cluster_heatmaps(trainer: &Trainer<f64>) -> Result<Vec<Heatmap>> {
    if trainer.detector.mvacon.is_empty() {
        return Err(HarnessError::Usage("cluster visualization needs mvacon.enabled".into()));
    }
    let mut g = Graph::new();
    let frame = trainer
        .detector
        .forward_frame(&mut g, &trainer.store, &trainer.frames[0], &trainer.geometry)?;
    let (lh, lw) = trainer.geometry.levels[0];
    frame
        .clusters
        .iter()
        .zip(&trainer.scene.rig.cameras)
        .map(|(trace, cam)| {
            let resp = token_response(g.value(trace.assignments[0]), g.value(trace.raw[0]))?;
            let mut values = upsample(&resp, lh, lw, cam.height, cam.width);
            normalize(&mut values);
            Ok(Heatmap {
                width: cam.width,
                height: cam.height,
                values,
            })
        })
        .collect()
}

/// Binary 16-bit PGM with a `# config <hash>` comment.
pub fn encode_pgm16(map: &Heatmap, hash: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(map.values.len() * 2 + 64);
    let _ = write!(buf, "P5\n# config {hash}\n{} {}\n65535\n", map.width, map.height);
    for v in &map.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    buf
}

pub fn write_cluster_heatmaps(maps: &[Heatmap], out: &Path, hash: &str) -> Result<Vec<PathBuf>> {
    maps.iter()
        .enumerate()
        .map(|(v, m)| {
            let p = out.join(format!("clusters_view{v}.pgm"));
            output::write_file(&p, &encode_pgm16(m, hash))?;
            Ok(p)
        })
        .collect()
}

/// One deformable sampling location of one BEV query, in full-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformPoint {
    pub view: usize,
    pub level: usize,
    pub u: f64,
    pub v: f64,
    /// Share of the query's update; sums to 1 over all points of a layer.
    pub weight: f64,
}

/// Visible sampling points of BEV cell `cell` in every encoder layer.
pub fn deform_points(trainer: &Trainer<f64>, cell: usize) -> Result<Vec<Vec<DeformPoint>>> {
    let Lifter::Bev(enc) = &trainer.detector.lifter else {
        return Err(HarnessError::Usage("deformable points need lift.mode = bevformer".into()));
    };
    let table = trainer
        .geometry
        .table
        .as_ref()
        .ok_or_else(|| HarnessError::Usage("missing projection table".into()))?;
    if cell >= table.cells {
        return Err(HarnessError::Usage(format!("cell {cell} outside the {}-cell grid", table.cells)));
    }
    let mut g = Graph::new();
    let frame = trainer
        .detector
        .forward_frame(&mut g, &trainer.store, &trainer.frames[0], &trainer.geometry)?;
    let layout = enc.layers[0].cross.layout;
    let cams = &trainer.scene.rig.cameras;
    Ok(frame
        .traces
        .iter()
        .map(|trace| {
            let hits = trace.hits[cell];
            let offsets = g.value(trace.offsets).row(cell);
            let mut pts = Vec::new();
            for (view, ds) in trace.per_view.iter().enumerate() {
                if !ds.hit[cell] {
                    continue;
                }
                let weights = g.value(ds.weights).row(cell);
                let (sx, sy) = (cams[view].width as f64, cams[view].height as f64);
                for level in 0..layout.levels {
                    let (lh, lw) = table.levels[level];
                    for p in 0..layout.pillars {
                        let e = table.get(cell, p, view, level);
                        if !e.visible {
                            continue;
                        }
                        for s in 0..layout.points {
                            let col = (level * layout.pillars + p) * layout.points + s;
                            pts.push(DeformPoint {
                                view,
                                level,
                                u: (e.u + offsets[2 * col]) * sx / lw as f64,
                                v: (e.v + offsets[2 * col + 1]) * sy / lh as f64,
                                weight: weights[col] / hits as f64,
                            });
                        }
                    }
                }
            }
            pts
        })
        .collect())
}

pub fn write_deform_points(layers: &[Vec<DeformPoint>], out: &Path, hash: &str) -> Result<Vec<PathBuf>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            let p = out.join(format!("deform_layer{i}.csv"));
            let mut csv = LineFile::csv(&p, hash, "view,level,u,v,weight")?;
            for d in pts {
                csv.line(&format!("{},{},{},{},{}", d.view, d.level, d.u, d.v, d.weight))?;
            }
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_responses_give_constant_heatmap() {
        let a = Tensor::full(&[12, 3], 1.0 / 12.0);
        let z = Tensor::full(&[3, 4], 0.7);
        let resp = token_response(&a, &z).unwrap();
        let mut up = upsample(&resp, 3, 4, 30, 40);
        assert!(up.iter().all(|&x| (x - resp[0]).abs() < 1e-15));
        normalize(&mut up);
        assert!(up.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn upsample_of_a_ramp_stays_monotone_and_bounded() {
        let src: Vec<f64> = (0..6).map(f64::from).collect();
        let up = upsample(&src, 1, 6, 2, 24);
        assert!(up[..24].windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((up[0], up[23]), (0.0, 5.0));
    }

    #[test]
    fn pgm_layout() {
        let m = Heatmap {
            width: 2,
            height: 1,
            values: vec![0.0, 1.0],
        };
        let b = encode_pgm16(&m, "h");
        assert!(b.starts_with(b"P5\n# config h\n2 1\n65535\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 0, 255, 255]);
    }
}
