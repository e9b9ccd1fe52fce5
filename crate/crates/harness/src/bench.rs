//! `mvacon bench`: wall time of cluster attention against dense token-token
//! attention as the token count grows.

use std::path::Path;
use std::time::Instant;

use mvacon_core::cluster::{cluster_assign, compute_clusters, Clustering, PacaAttention};
use mvacon_core::config::RunConfig;
use mvacon_core::nn::{LayerNorm, MultiHeadAttention};
use mvacon_core::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};
use crate::output::LineFile;

pub const REPORT_FILE: &str = "bench.csv";
pub const SIZES: [usize; 4] = [1024, 2048, 4096, 8192];
pub const MIN_REPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Paca,
    Dense,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Self::Paca => "paca",
            Self::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub median_ms: f64,
}

/// Most square `h×w` layout of `n` tokens.
fn layout(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while n % h != 0 {
        h -= 1;
    }
    (h, n / h)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

struct Modules {
    clustering: Clustering,
    norm: LayerNorm,
    paca: PacaAttention,
    dense: MultiHeadAttention,
}

fn paca_forward(store: &ParamStore<f64>, m: &Modules, tokens: &Tensor<f64>, hw: (usize, usize)) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone())?;
    let a = cluster_assign(&mut g, store, &m.clustering, t, Some(hw))?;
    let (z, _) = compute_clusters(&mut g, store, t, a, &m.norm)?;
    let y = m.paca.attend(&mut g, store, t, z)?;
    Ok(g.value(y).clone())
}

/// `x + O(softmax(QKᵀ/√d) V)` with one score row alive at a time, so memory
/// stays linear while time is quadratic.
fn dense_forward(store: &ParamStore<f64>, mha: &MultiHeadAttention, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone())?;
    let q = mha.q.forward(&mut g, store, x)?;
    let k = mha.k.forward(&mut g, store, x)?;
    let v = mha.v.forward(&mut g, store, x)?;
    let (n, width) = g.value(q).dims2()?;
    let dh = width / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let per_head = |t: &Tensor<f64>, h: usize| -> Vec<f64> {
        (0..n).flat_map(|i| t.row(i)[h * dh..(h + 1) * dh].to_vec()).collect()
    };
    let mut merged = vec![0.0; n * width];
    let mut scores = vec![0.0; n];
    for h in 0..mha.heads {
        let (qh, kh, vh) = (per_head(g.value(q), h), per_head(g.value(k), h), per_head(g.value(v), h));
        for i in 0..n {
            let qi = &qh[i * dh..(i + 1) * dh];
            let mut mx = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &kh[j * dh..(j + 1) * dh];
                *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                mx = mx.max(*s);
            }
            let mut z = 0.0;
            let out = &mut merged[i * width + h * dh..i * width + (h + 1) * dh];
            for (j, s) in scores.iter().enumerate() {
                let p = (s - mx).exp();
                z += p;
                for (o, vv) in out.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                    *o += p * vv;
                }
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
    }
    let m = g.constant(Tensor::new(vec![n, width], merged)?)?;
    let o = mha.o.forward(&mut g, store, m)?;
    let y = g.add(x, o)?;
    Ok(g.value(y).clone())
}

/// Median wall time per mechanism and size on one worker thread.
pub fn bench(cfg: &RunConfig, sizes: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    if reps < MIN_REPS {
        return Err(HarnessError::Usage(format!("bench needs at least {MIN_REPS} repetitions")));
    }
    let c = cfg.model.backbone.channels;
    let mv = &cfg.model.mvacon;
    mv.cluster().validate(c)?;
    let mut store = ParamStore::new(cfg.training.seed);
    let modules = Modules {
        clustering: Clustering::new(&mut store, "bench.cluster", mv.clustering_op, c, mv.clusters)?,
        norm: LayerNorm::new(&mut store, "bench.norm", c)?,
        paca: PacaAttention::new(&mut store, "bench.paca", c, mv.heads)?,
        dense: MultiHeadAttention::new(&mut store, "bench.dense", c, c, c, mv.heads)?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| HarnessError::Usage(format!("worker pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut rows = Vec::new();
    for mech in [Mechanism::Paca, Mechanism::Dense] {
        let inputs: Vec<_> = sizes
            .iter()
            .map(|&n| (layout(n), Tensor::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let run = |(hw, tokens): &((usize, usize), Tensor<f64>)| -> Result<f64> {
            let t0 = Instant::now();
            let y = match mech {
                Mechanism::Paca => paca_forward(&store, &modules, tokens, *hw)?,
                Mechanism::Dense => dense_forward(&store, &modules.dense, tokens)?,
            };
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(y);
            Ok(ms)
        };
        // Sizes alternate within each rep so slow drifts in machine load hit all of them alike.
        let mut times = vec![Vec::with_capacity(reps); sizes.len()];
        pool.install(|| -> Result<()> {
            for input in &inputs {
                run(input)?;
            }
            for _ in 0..reps {
                for (t, input) in times.iter_mut().zip(&inputs) {
                    t.push(run(input)?);
                }
            }
            Ok(())
        })?;
        for (&n, t) in sizes.iter().zip(times) {
            rows.push(BenchRow {
                mechanism: mech,
                n,
                median_ms: median(t),
            });
        }
    }
    Ok(rows)
}

/// `median(n_hi) / median(n_lo)` for one mechanism.
pub fn ratio(rows: &[BenchRow], mech: Mechanism, n_lo: usize, n_hi: usize) -> Option<f64> {
    let at = |n| rows.iter().find(|r| r.mechanism == mech && r.n == n).map(|r| r.median_ms);
    Some(at(n_hi)? / at(n_lo)?)
}

pub fn write_report(rows: &[BenchRow], out: &Path, hash: &str) -> Result<()> {
    let mut csv = LineFile::csv(&out.join(REPORT_FILE), hash, "mechanism,n,median_ms")?;
    for r in rows {
        csv.line(&format!("{},{},{:.4}", r.mechanism.name(), r.n, r.median_ms))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_are_exact() {
        assert_eq!(layout(1024), (32, 32));
        assert_eq!(layout(2048), (32, 64));
        assert_eq!(layout(7), (1, 7));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn streaming_dense_matches_graph_attention() {
        let mut store = ParamStore::new(3);
        let mha = MultiHeadAttention::new(&mut store, "m", 8, 8, 8, 2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[37, 8], |_| r.gen_range(-1.0..1.0));
        let got = dense_forward(&store, &mha, &x).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let a = mha.forward(&mut g, &store, xv, xv).unwrap();
        let want = g.add(xv, a.out).unwrap();
        assert!(got.max_abs_diff(g.value(want)) < 1e-12);
    }
}
