//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Reference implementations in this file are written from the formulas,
//! not by calling the library routines they check.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use midm_core::denoise::{ddim_sample_from, predict_x0, OracleModel, ReplayModel};
use midm_core::grid::{FeatureGrid, LatentGrid, RgbImage};
use midm_core::losses::{
    contextual_similarity, fd_grad_check, loss_cycle, loss_diff, loss_diff_grad, loss_dom, loss_dom_grad, loss_perc,
    loss_src, loss_style_contextual, ContextualConfig, FeatureExtractor, PyramidExtractor,
};
use midm_core::matching::{
    cycle_confidence_mask, cycle_mask_from_flows, soft_argmax_flow, soft_warp, CorrelationMap, CorrespondenceEncoder,
    DescriptorConfig, FlowField, PatchEncoder,
};
use midm_core::midm::{initial_warp, midm_iteration, IterationContext, LatentCodec, MidmConfig, MidmSampler, RenoiseConfig};
use midm_core::registry::model_fitters;
use midm_core::rng::Rng;
use midm_core::schedule::{forward_diffuse, linear_beta_schedule, make_subsequence};
use midm_core::Result as CoreResult;
use midm_harness::codec::ToyCodec;
use midm_harness::synthetic::gen_synthetic_pair;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn midm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_midm"))
        .args(args)
        .env_remove("MIDM_SEED")
        .output()
        .expect("spawn midm");
    assert!(out.status.success(), "midm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn uniform_grid(rng: &mut Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> LatentGrid {
    let (c, h, w) = shape;
    LatentGrid::new(c, h, w, (0..c * h * w).map(|_| lo + (hi - lo) * rng.next_f64()).collect()).unwrap()
}

fn random_map(rng: &mut Rng, q: (usize, usize), s: (usize, usize), scale: f64) -> CorrelationMap {
    let n = q.0 * q.1 * s.0 * s.1;
    CorrelationMap::new(q, s, (0..n).map(|_| scale * (2.0 * rng.next_f64() - 1.0)).collect()).unwrap()
}

// --- reference formulas ---

fn ref_weights(row: &[f64], t: f64) -> Vec<f64> {
    let mut m = row[0];
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let mut z = 0.0;
    for v in &e {
        z += v;
    }
    e.iter().map(|v| v / z).collect()
}

fn ref_row(c: &CorrelationMap, u: usize) -> Vec<f64> {
    (0..c.cols()).map(|v| c.get(u, v)).collect()
}

fn ref_warp(c: &CorrelationMap, src: &LatentGrid, t: f64) -> Vec<f64> {
    let (ch, _, sw) = src.shape();
    let rows = c.rows();
    let mut out = vec![0.0; ch * rows];
    for u in 0..rows {
        let w = ref_weights(&ref_row(c, u), t);
        for k in 0..ch {
            let mut acc = 0.0;
            for (v, wv) in w.iter().enumerate() {
                acc += wv * src.get(k, v / sw, v % sw);
            }
            out[k * rows + u] = acc;
        }
    }
    out
}

fn ref_flow(c: &CorrelationMap, t: f64) -> Vec<(f64, f64)> {
    let sw = c.source_dims().1;
    (0..c.rows())
        .map(|u| {
            let w = ref_weights(&ref_row(c, u), t);
            let (mut y, mut x) = (0.0, 0.0);
            for (v, wv) in w.iter().enumerate() {
                y += wv * (v / sw) as f64;
                x += wv * (v % sw) as f64;
            }
            (y, x)
        })
        .collect()
}

/// Edge-replicated, mean-subtracted `(2r+1)²·c` patches, one vector per position.
fn ref_patches(g: &LatentGrid, r: i64) -> Vec<Vec<f64>> {
    let (c, h, w) = g.shape();
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut v = Vec::new();
            for k in 0..c {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).max(0).min(h as i64 - 1) as usize;
                        let xx = (x + dx).max(0).min(w as i64 - 1) as usize;
                        v.push(g.get(k, yy, xx));
                    }
                }
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            out.push(v.into_iter().map(|e| e - mean).collect());
        }
    }
    out
}

fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = match (na > 0.0, nb > 0.0) {
        (true, true) => dot / (na * nb),
        _ => 0.0,
    };
    s.clamp(-1.0, 1.0)
}

/// `τ_n` with `τ_0 = 0`.
fn tau(taus: &[usize], n: usize) -> usize {
    if n == 0 {
        0
    } else {
        taus[n - 1]
    }
}

fn ref_corr(q: &[Vec<f64>], s: &[Vec<f64>], qd: (usize, usize), sd: (usize, usize)) -> CorrelationMap {
    let values = q.iter().flat_map(|a| s.iter().map(move |b| ref_cosine(a, b))).collect();
    CorrelationMap::new(qd, sd, values).unwrap()
}

// --- criteria ---

fn c1_oracle_contraction() -> Outcome {
    let start = Instant::now();
    let sched = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
    let subseq = make_subsequence(1000, 16).unwrap();
    let z = Rng::new(11).gaussian((3, 16, 16)).unwrap();
    let oracle = OracleModel::standard_normal(z.shape(), sched.clone()).unwrap();
    let out = ddim_sample_from(&z, 16, &subseq, &oracle, &sched).unwrap();
    // Each step maps z to (sqrt(a_to·a_from) + sqrt((1−a_to)(1−a_from)))·z.
    let mut gain = 1.0;
    for n in (1..=16).rev() {
        let (tf, tt) = (tau(subseq.taus(), n), tau(subseq.taus(), n - 1));
        let prod = |t: usize| (1..=t).map(|s| 1.0 - sched.betas()[s - 1]).product::<f64>();
        let (af, at) = (prod(tf), prod(tt));
        gain *= (af * at).sqrt() + ((1.0 - af) * (1.0 - at)).sqrt();
    }
    let worst = out.data().iter().zip(z.data()).map(|(o, v)| ((o - gain * v) / (gain * v)).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(worst < 1e-9 && elapsed < Duration::from_secs(1), format!("max rel err {worst:.2e}, {elapsed:.2?}"))
}

fn c2_exact_inversion() -> Outcome {
    let sched = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x0 = uniform_grid(&mut rng, (3, 4, 4), -1.0, 1.0);
        let eps = rng.gaussian((3, 4, 4)).unwrap();
        let t = 1 + rng.below(1000);
        let z = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        let back = predict_x0(&z, t, &ReplayModel::new(eps), &sched).unwrap();
        worst = worst.max(back.max_abs_diff(&x0).unwrap());
    }
    outcome(worst <= 1e-12, format!("max |x0' − x0| = {worst:.2e} over 100 fixtures"))
}

fn c3_reduction_law() -> Outcome {
    let codec = ToyCodec::default();
    let fitters = model_fitters();
    let encoder = midm_core::matching::StructureEncoder::default();
    let mut exact = 0;
    for seed in 0..10u64 {
        let pair = gen_synthetic_pair(seed, (64, 64), 3, 4).unwrap();
        let (d_x, d_y) = (codec.encode(&pair.condition).unwrap(), codec.encode(&pair.exemplar).unwrap());
        let cfg = MidmConfig {
            gamma: 0.0,
            seed,
            skip_last_warp: seed % 2 == 0,
            renoise_refine: RenoiseConfig { enabled: false, fraction: 0.1 },
            ..MidmConfig::default()
        };
        let sched = cfg.schedule().unwrap();
        let subseq = cfg.subsequence().unwrap();
        let model = fitters.get("mixture").unwrap().fit(&d_y, &sched).unwrap();
        let trace = MidmSampler::new(cfg.clone(), model.as_ref(), &encoder).sample_latent(&d_x, &d_y).unwrap();

        let start = cfg.start_index().unwrap();
        let warped = initial_warp(&d_x, &d_y, cfg.temperature, &encoder).unwrap().warped;
        let eps = Rng::new(seed).gaussian(d_y.shape()).unwrap();
        let r_start = forward_diffuse(&warped, tau(subseq.taus(), start), &eps, &sched).unwrap();
        let plain = ddim_sample_from(&r_start, start, &subseq, model.as_ref(), &sched).unwrap();
        if trace.r0.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            && codec.decode(&trace.r0).unwrap() == codec.decode(&plain).unwrap()
        {
            exact += 1;
        }
    }
    outcome(exact == 10, format!("{exact}/10 fixtures bit-exact"))
}

fn c4_dual_implementation() -> Outcome {
    let sched = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
    let subseq = make_subsequence(1000, 16).unwrap();
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    let mut mask_mismatch = 0;
    for case in 0..50 {
        let shape = (3, 4, 4);
        let (r_n, d_x, d_y) =
            (rng.gaussian(shape).unwrap(), uniform_grid(&mut rng, shape, -1.0, 1.0), uniform_grid(&mut rng, shape, -1.0, 1.0));
        let n = 2 + rng.below(15);
        let temperature = [0.01, 0.1, 1.0][case % 3];
        let gamma = 2.0 * rng.next_f64();
        let desc = DescriptorConfig { patch_radius: 1, condition_weight: 0.25 + rng.next_f64() };
        let enc = PatchEncoder::new(desc);
        let model = OracleModel::standard_normal(shape, sched.clone()).unwrap();
        let s_y = enc.exemplar_iteration_features(&d_y).unwrap();
        let ctx = IterationContext {
            d_x: &d_x,
            d_y: &d_y,
            s_y: &s_y,
            model: &model,
            encoder: &enc,
            sched: &sched,
            subseq: &subseq,
            temperature,
            gamma,
        };
        let got = midm_iteration(&r_n, n, &ctx, false).unwrap();

        // straight-line reference
        let ab = |t: usize| (1..=t).map(|s| 1.0 - sched.betas()[s - 1]).product::<f64>();
        let (a_n, a_prev) = (ab(tau(subseq.taus(), n)), ab(tau(subseq.taus(), n - 1)));
        let eps: Vec<f64> = r_n.data().iter().map(|z| (1.0 - a_n).sqrt() * z).collect();
        let r_tilde: Vec<f64> =
            r_n.data().iter().zip(&eps).map(|(z, e)| (z - (1.0 - a_n).sqrt() * e) / a_n.sqrt()).collect();
        let rt = LatentGrid::new(3, 4, 4, r_tilde.clone()).unwrap();
        let concat = |own: Vec<Vec<f64>>, cond: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            own.into_iter()
                .zip(cond)
                .map(|(mut a, b)| {
                    a.extend(b.iter().map(|v| v * desc.condition_weight));
                    a
                })
                .collect()
        };
        let q = concat(ref_patches(&rt, 1), ref_patches(&d_x, 1));
        let s = concat(ref_patches(&d_y, 1), ref_patches(&d_y, 1));
        let c = ref_corr(&q, &s, (4, 4), (4, 4));
        let warped = ref_warp(&c, &d_y, temperature);
        let fwd = ref_flow(&c, temperature);
        let ct = CorrelationMap::new((4, 4), (4, 4), (0..256).map(|i| c.get(i % 16, i / 16)).collect()).unwrap();
        let bwd = ref_flow(&ct, temperature);
        let mask: Vec<bool> = (0..16)
            .map(|u| {
                let (fy, fx) = fwd[u];
                let v = (fy.round().clamp(0.0, 3.0) as usize) * 4 + fx.round().clamp(0.0, 3.0) as usize;
                let (by, bx) = bwd[v];
                let (uy, ux) = ((u / 4) as f64, (u % 4) as f64);
                (uy - by).powi(2) + (ux - bx).powi(2) < gamma
            })
            .collect();
        let r_prev: Vec<f64> = (0..48)
            .map(|i| {
                let blended = if mask[i % 16] { warped[i] } else { r_tilde[i] };
                a_prev.sqrt() * blended + (1.0 - a_prev).sqrt() * eps[i]
            })
            .collect();

        if got.mask.flags() != mask.as_slice() {
            mask_mismatch += 1;
        }
        for (a, b) in got.r_prev.data().iter().zip(&r_prev) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.r_tilde.data().iter().zip(&r_tilde) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.warped.data().iter().zip(&warped) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-12 && mask_mismatch == 0,
        format!("max abs diff {worst:.2e}, mask mismatches {mask_mismatch} over 50 cases"),
    )
}

fn c5_matching_brute_force() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst: f64 = 0.0;
    let mut maps = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            for k in 0..100 {
                let t = [0.01, 0.1, 1.0, 5.0][k % 4];
                let c = random_map(&mut rng, (h, w), (h, w), 1.0);
                let src = uniform_grid(&mut rng, (3, h, w), -1.0, 1.0);
                let got = soft_warp(&c, &src, t).unwrap();
                for (a, b) in got.data().iter().zip(ref_warp(&c, &src, t)) {
                    worst = worst.max((a - b).abs());
                }
                let flow = soft_argmax_flow(&c, t).unwrap();
                for (p, (y, x)) in flow.positions().iter().zip(ref_flow(&c, t)) {
                    worst = worst.max((p.y - y).abs()).max((p.x - x).abs());
                }
                maps += 1;
            }
        }
    }
    outcome(worst <= 1e-9, format!("max abs diff {worst:.2e} over {maps} maps (all sizes 1x1..8x8)"))
}

fn c6_convexity() -> Outcome {
    let mut rng = Rng::new(6);
    let (mut escapes, mut worst_row, mut worst_escape): (usize, f64, f64) = (0, 0.0, 0.0);
    for _ in 0..1000 {
        let q = (1 + rng.below(8), 1 + rng.below(8));
        let s = (1 + rng.below(8), 1 + rng.below(8));
        let c = random_map(&mut rng, q, s, 5.0);
        let t = 10f64.powf(-3.0 + 4.0 * rng.next_f64());
        let src = uniform_grid(&mut rng, (3, s.0, s.1), -2.0, 2.0);
        let out = soft_warp(&c, &src, t).unwrap();
        for (k, (lo, hi)) in src.channel_bounds().into_iter().enumerate() {
            let plane = &out.data()[k * q.0 * q.1..(k + 1) * q.0 * q.1];
            for &v in plane {
                if v < lo || v > hi {
                    escapes += 1;
                    worst_escape = worst_escape.max(lo - v).max(v - hi);
                }
            }
        }
        for u in 0..c.rows() {
            worst_row = worst_row.max((c.softmax_row(u, t).iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(escapes == 0 && worst_row <= 1e-9, format!("{escapes} bound escapes (worst {worst_escape:.1e}), max |Σ row − 1| = {worst_row:.2e}"))
}

fn c7_mask_degeneracies() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let id = FlowField::identity(6, 5);
    for gamma in [0.3, 0.5] {
        let ok = cycle_mask_from_flows(&id, &id, gamma).unwrap().all();
        pass &= ok;
        notes.push(format!("identity γ={gamma} all-true {ok}"));
    }
    let mut rng = Rng::new(7);
    let c = random_map(&mut rng, (4, 4), (4, 4), 1.0);
    let none = cycle_confidence_mask(&c, &c.transpose(), 0.0, 0.01).unwrap().none()
        && cycle_mask_from_flows(&id, &id, 0.0).unwrap().none();
    pass &= none;
    notes.push(format!("γ=0 all-false {none}"));

    // 1×2 grid, C = I, T = 1: rows softmax to (e, 1)/(1 + e), so the forward
    // and backward flows are x₀ = 1/(1+e), x₁ = e/(1+e); both round back to
    // their own cell and the cycle error is (1/(1+e))² ≈ 0.0723 at both cells.
    let c = CorrelationMap::new((1, 2), (1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let e = std::f64::consts::E;
    let flow = soft_argmax_flow(&c, 1.0).unwrap();
    let flows_ok = (flow.at(0, 0).x - 1.0 / (1.0 + e)).abs() < 1e-15
        && (flow.at(0, 1).x - e / (1.0 + e)).abs() < 1e-15
        && flow.at(0, 0).y == 0.0;
    let err = (1.0 / (1.0 + e)).powi(2);
    let at = |g: f64| cycle_confidence_mask(&c, &c.transpose(), g, 1.0).unwrap().flags().to_vec();
    let hand = flows_ok && at(0.3) == [true, true] && at(0.07) == [false, false] && at(err + 1e-12) == [true, true];
    pass &= hand;
    notes.push(format!("two-pixel trace {hand}"));
    outcome(pass, notes.join(", "))
}

fn parse_summary(stdout: &str, noise: &str) -> Option<(f64, f64)> {
    let line = stdout.lines().find(|l| l.starts_with(&format!("noise {noise}:")))?;
    let field = |key: &str| -> Option<f64> {
        let mut it = line.split_whitespace();
        it.find(|w| *w == key)?;
        it.next()?.parse().ok()
    };
    Some((field("initial_epe_median")?, field("final_epe_median")?))
}

fn c8_interleave_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    let start = Instant::now();
    let out = midm(&["sweep", "--noise", "0.25", "--runs", "100", "--report", path_str(&report)]);
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows = std::fs::read_to_string(&report).unwrap().lines().count() - 1;
    match parse_summary(&stdout, "0.25") {
        Some((initial, last)) => outcome(
            last <= initial && rows == 100 && elapsed < Duration::from_secs(300),
            format!("median EPE initial {initial:.4} → final {last:.4} over {rows} pairs, {elapsed:.1?}"),
        ),
        None => outcome(false, format!("unparsable sweep output: {stdout}")),
    }
}

fn c9_noise_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    midm(&["sweep", "--noise", "0.20,0.25,0.30,0.35", "--runs", "100", "--report", path_str(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("noise_fraction,seed,edge_f1,color_hist_l1,flow_epe_median");
    let (mut rows, mut rows_25, mut out_of_bounds) = (0, 0, 0);
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        rows += 1;
        if f[0] == 0.25 {
            rows_25 += 1;
        }
        let ok = (0.0..=1.0).contains(&f[2]) && (0.0..=2.0).contains(&f[3]) && f[4].is_finite() && f[4] >= 0.0;
        out_of_bounds += usize::from(!ok);
    }
    outcome(
        header_ok && rows == 400 && rows_25 == 100 && out_of_bounds == 0,
        format!("{rows} rows, {rows_25} at 25%, {out_of_bounds} out of bounds"),
    )
}

/// One feature per level: the mean colour of the image.
struct MeanColour;

impl FeatureExtractor for MeanColour {
    fn name(&self) -> &str {
        "mean-colour"
    }

    fn levels(&self, img: &RgbImage) -> CoreResult<Vec<FeatureGrid>> {
        let n = (img.width() * img.height()) as f64;
        let mean: Vec<f64> =
            (0..3).map(|c| img.data().chunks_exact(3).map(|p| p[c] as f64).sum::<f64>() / n / 255.0 + 0.1).collect();
        Ok(vec![FeatureGrid::new(3, 1, 1, mean)?])
    }
}

fn ref_contextual(x: &[Vec<f64>], y: &[Vec<f64>], h: f64, eps: f64) -> f64 {
    let mut cx = vec![vec![0.0; y.len()]; x.len()];
    for i in 0..x.len() {
        let d: Vec<f64> = y.iter().map(|yj| 1.0 - ref_cosine(&x[i], yj)).collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|dij| ((1.0 - dij / (dmin + eps)) / h).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..y.len() {
            cx[i][j] = w[j] / z;
        }
    }
    (0..y.len()).map(|j| (0..x.len()).map(|i| cx[i][j]).fold(f64::MIN, f64::max)).sum::<f64>() / y.len() as f64
}

fn c10_loss_suite() -> Outcome {
    let mut rng = Rng::new(10);
    let pyramid = PyramidExtractor::default();
    let pair = gen_synthetic_pair(10, (32, 32), 2, 4).unwrap();
    let img = &pair.exemplar;
    let f: FeatureGrid = uniform_grid(&mut rng, (4, 3, 3), -1.0, 1.0).into();
    let d_y = uniform_grid(&mut rng, (3, 4, 4), -1.0, 1.0);
    let e = rng.gaussian((3, 4, 4)).unwrap();
    let identities = [
        loss_dom(&f, &f).unwrap(),
        loss_cycle(&[d_y.clone(), d_y.clone()], &d_y).unwrap(),
        loss_src(img, img, &pyramid).unwrap(),
        loss_perc(img, img, &pyramid).unwrap(),
        loss_style_contextual(img, img, &MeanColour, &ContextualConfig::default()).unwrap(),
        loss_diff(std::slice::from_ref(&e), std::slice::from_ref(&e)).unwrap(),
    ];
    let identity_ok = identities.iter().all(|&v| v == 0.0);

    let x = uniform_grid(&mut rng, (3, 4, 4), -1.0, 1.0);
    let target = LatentGrid::filled(3, 4, 4, 0.05).unwrap();
    let tf: FeatureGrid = target.clone().into();
    let dom_f = |g: &LatentGrid| loss_dom(&tf, &g.clone().into()).unwrap();
    let dom_g: LatentGrid = loss_dom_grad(&tf, &x.clone().into()).unwrap().into();
    let dom_err = fd_grad_check(&dom_f, &dom_g, &x, 1e-6).unwrap();
    let eps_t = rng.gaussian((3, 4, 4)).unwrap();
    let diff_f = |g: &LatentGrid| loss_diff(std::slice::from_ref(g), std::slice::from_ref(&eps_t)).unwrap();
    let diff_err = fd_grad_check(&diff_f, &loss_diff_grad(&x, &eps_t).unwrap(), &x, 1e-4).unwrap();

    let mut cx_worst: f64 = 0.0;
    for case in 0..200 {
        let dim = 2 + case % 3;
        let (nx, ny) = (1 + rng.below(8), 1 + rng.below(8));
        let xs: Vec<Vec<f64>> = (0..nx).map(|_| (0..dim).map(|_| rng.next_f64() - 0.3).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..ny).map(|_| (0..dim).map(|_| rng.next_f64() - 0.3).collect()).collect();
        let cfg = ContextualConfig { bandwidth: 0.1 + rng.next_f64(), epsilon: 1e-5 };
        let got = contextual_similarity(
            &FeatureGrid::from_vectors(dim, 1, nx, &xs).unwrap(),
            &FeatureGrid::from_vectors(dim, 1, ny, &ys).unwrap(),
            &cfg,
        )
        .unwrap();
        cx_worst = cx_worst.max((got - ref_contextual(&xs, &ys, cfg.bandwidth, cfg.epsilon)).abs());
    }
    let hand = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let hand_got = contextual_similarity(
        &FeatureGrid::from_vectors(2, 1, 2, &hand).unwrap(),
        &FeatureGrid::from_vectors(2, 1, 2, &hand).unwrap(),
        &ContextualConfig::default(),
    )
    .unwrap();
    cx_worst = cx_worst.max((hand_got - ref_contextual(&hand, &hand, 0.5, 1e-5)).abs());

    outcome(
        identity_ok && dom_err <= 1e-4 && diff_err <= 1e-4 && cx_worst <= 1e-9,
        format!(
            "identities {identity_ok}, fd dom {dom_err:.1e}, fd diff {diff_err:.1e}, contextual max diff {cx_worst:.1e}"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out_{k}.ppm"));
        midm(&[
            "sample",
            "--config",
            path_str(&fx.join("cfg.json")),
            "--condition",
            path_str(&fx.join("pair/condition.ppm")),
            "--exemplar",
            path_str(&fx.join("pair/exemplar.ppm")),
            "--out",
            path_str(&out),
        ]);
        outputs.push(std::fs::read(&out).unwrap());
    }
    let elapsed = start.elapsed();
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    outcome(same && elapsed < Duration::from_secs(30), format!("byte-identical {same}, {elapsed:.2?} for two runs"))
}

fn sample_metrics(cfg: &str, condition: &str, exemplar: &str) -> serde_json::Value {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let out = midm(&[
        "sample",
        "--config",
        path_str(&fx.join(cfg)),
        "--condition",
        path_str(&fx.join(condition)),
        "--exemplar",
        path_str(&fx.join(exemplar)),
        "--out",
        path_str(&dir.path().join("out.ppm")),
    ]);
    serde_json::from_slice(&out.stdout).unwrap()
}

fn c12_self_translation_gate() -> Outcome {
    let m = sample_metrics("self/cfg.json", "pair/self_condition.ppm", "pair/exemplar.ppm");
    let (f1, hist) = (m["edge_f1"].as_f64().unwrap(), m["color_hist_l1"].as_f64().unwrap());
    let d = sample_metrics("cfg.json", "pair/self_condition.ppm", "pair/exemplar.ppm");
    outcome(
        f1 >= 0.6 && hist <= 0.3,
        format!(
            "edge_f1 {f1:.3} (≥ 0.6), color_hist_l1 {hist:.3} (≤ 0.3); with re-noise refinement enabled: edge_f1 {:.3}, color_hist_l1 {:.3}",
            d["edge_f1"].as_f64().unwrap(),
            d["color_hist_l1"].as_f64().unwrap()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("oracle contraction", c1_oracle_contraction),
        ("exact inversion", c2_exact_inversion),
        ("reduction law", c3_reduction_law),
        ("dual-implementation equivalence", c4_dual_implementation),
        ("matching brute force", c5_matching_brute_force),
        ("convexity suite", c6_convexity),
        ("mask degeneracies", c7_mask_degeneracies),
        ("interleave trend", c8_interleave_trend),
        ("noise-level sweep", c9_noise_sweep),
        ("loss suite", c10_loss_suite),
        ("end-to-end determinism", c11_determinism),
        ("self-translation quality gate", c12_self_translation_gate),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failures += usize::from(!o.pass);
        println!("criterion {:>2} {name}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
