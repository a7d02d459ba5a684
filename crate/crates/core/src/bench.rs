//! Timing of one subspace-loss backward step (`thin_svd` + `svd_vjp`) as
//! the row count grows at fixed width.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::grassmann::{self, Subspace};
use crate::gradcheck;
use crate::linalg::{self, Matrix};
use crate::svd_backprop;

pub const DEFAULT_DS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
pub const DEFAULT_P: usize = 16;
pub const DEFAULT_M: usize = 5;
const RUNS: usize = 7;
/// Each timed run repeats the call until at least this long has passed.
const MIN_RUN_NANOS: f64 = 10e6;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub reps: usize,
    pub median_ns: f64,
}

fn one_call(f: &Matrix, reference: &Subspace, m: usize) -> f64 {
    let svd = linalg::thin_svd(f).expect("finite input");
    let t = grassmann::truncate(svd, m).expect("valid truncation");
    let g = grassmann::grad_wrt_basis(&t.subspace, reference).expect("same ambient dim");
    let eps = svd_backprop::default_eps(&t.svd.s);
    let out = svd_backprop::svd_vjp(f, &t.svd, &g, m, eps).expect("well conditioned");
    out.grad[(0, 0)]
}

struct Case {
    d: usize,
    f: Matrix,
    reference: Subspace,
    reps: usize,
}

impl Case {
    fn new(d: usize, p: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gradcheck::gapped_matrix(d, p, gradcheck::MIN_GAP, &mut rng);
        let q = linalg::thin_svd(&gradcheck::gapped_matrix(d, m, 0.1, &mut rng)).expect("finite").u;
        let reference = Subspace::from_basis(q).expect("orthonormal");
        let mut case = Self { d, f, reference, reps: 1 };
        while case.time_run(m) * (case.reps as f64) < MIN_RUN_NANOS && case.reps < 1 << 20 {
            case.reps *= 2;
        }
        case
    }

    /// Per-call nanoseconds over one run of `reps` calls.
    fn time_run(&self, m: usize) -> f64 {
        let start = Instant::now();
        for _ in 0..self.reps {
            std::hint::black_box(one_call(&self.f, &self.reference, m));
        }
        start.elapsed().as_nanos() as f64 / self.reps as f64
    }
}

/// Median over 7 runs of the per-call time in nanoseconds.
pub fn time_size(d: usize, p: usize, m: usize, seed: u64) -> BenchRow {
    run(&[d], p, m, seed).remove(0)
}

/// Times every size once per round, so drift in machine speed during the
/// benchmark hits all sizes alike.
pub fn run(ds: &[usize], p: usize, m: usize, seed: u64) -> Vec<BenchRow> {
    let cases: Vec<Case> = ds.iter().map(|&d| Case::new(d, p, m, seed)).collect();
    let mut times = vec![Vec::with_capacity(RUNS); cases.len()];
    for _ in 0..RUNS {
        for (case, t) in cases.iter().zip(&mut times) {
            t.push(case.time_run(m));
        }
    }
    cases
        .iter()
        .zip(times)
        .map(|(case, mut t)| {
            t.sort_by(|a, b| a.total_cmp(b));
            BenchRow {
                d: case.d,
                p,
                m,
                reps: case.reps,
                median_ns: t[RUNS / 2],
            }
        })
        .collect()
}

/// Least-squares slope of `ln(time)` against `ln(d)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.d as f64).ln(), r.median_ns.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn write_csv(rows: &[BenchRow], w: impl Write) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "d,p,m,reps,median_ns")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:.1}", r.d, r.p, r.m, r.reps, r.median_ns)?;
    }
    Ok(())
}
