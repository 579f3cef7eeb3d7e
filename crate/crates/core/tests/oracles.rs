//! Library results checked against independent reimplementations.

use entangle_core::attribution::bilinear_resize;
use entangle_core::denoiser::{sampler_step, LatentState, NoiseSchedule, SamplerMode};
use entangle_core::softselect::{sinkhorn_solve, soft_iou_gradient, Stopping, TransportProblem};
use entangle_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Multiplicative-scaling Sinkhorn, `iters` full (u, v) sweeps from v = 1.
fn plain_sinkhorn(m: &[f64], k: usize, tau: f64, iters: usize) -> Vec<[f64; 2]> {
    let n = m.len();
    let kern: Vec<[f64; 2]> = m
        .iter()
        .map(|&x| [(-(x * x) / tau).exp(), (-((x - 1.0) * (x - 1.0)) / tau).exp()])
        .collect();
    let nu = [(n - k) as f64 / n as f64, k as f64 / n as f64];
    let mut u = vec![0.0; n];
    let mut v = [1.0, 1.0];
    for _ in 0..iters {
        for i in 0..n {
            u[i] = (1.0 / n as f64) / (kern[i][0] * v[0] + kern[i][1] * v[1]);
        }
        for j in 0..2 {
            let s: f64 = (0..n).map(|i| kern[i][j] * u[i]).sum();
            v[j] = nu[j] / s;
        }
    }
    (0..n).map(|i| [u[i] * kern[i][0] * v[0], u[i] * kern[i][1] * v[1]]).collect()
}

fn minmax(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn oracle_energy(a: &[f64], b: &[f64], k: usize, tau: f64, iters: [usize; 2]) -> f64 {
    let n = a.len() as f64;
    let ma: Vec<f64> = plain_sinkhorn(&minmax(a), k, tau, iters[0]).iter().map(|g| (n * g[1]).clamp(0.0, 1.0)).collect();
    let mb: Vec<f64> = plain_sinkhorn(&minmax(b), k, tau, iters[1]).iter().map(|g| (n * g[1]).clamp(0.0, 1.0)).collect();
    let inter: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    inter / (ma.iter().sum::<f64>() + mb.iter().sum::<f64>() - inter)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn log_domain_plan_matches_scaling_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(n, tau) in &[(16, 0.1), (64, 0.2), (40, 1.0)] {
        let m = uniform(&mut rng, n);
        let k = n / 3;
        let plan = sinkhorn_solve(&TransportProblem::new(m.clone(), k, tau).unwrap(), 5000, 1e-13);
        assert!(plan.converged);
        let reference = plain_sinkhorn(&m, k, tau, 5000);
        for i in 0..n {
            for j in 0..2 {
                assert!((plan.gamma.get(i, j) - reference[i][j]).abs() < 1e-12, "n={n} tau={tau} i={i}");
            }
        }
    }
}

#[test]
fn soft_iou_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..6 {
        let n = 36;
        let k = 11;
        let a = uniform(&mut rng, n);
        let b = uniform(&mut rng, n);
        let stop = Stopping::Tolerance { max_iters: 200, tol: 1e-6 };
        let g = soft_iou_gradient(&a, &b, k, 0.1, [stop; 2]).unwrap();
        let e = oracle_energy(&a, &b, k, 0.1, g.iterations);
        assert!((e - g.energy).abs() < 1e-12, "trial {trial}: {e} vs {}", g.energy);
        let h = 1e-6;
        let scale = g.grad_a.iter().chain(&g.grad_b).fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for (which, analytic) in [(0, g.grad_a[i]), (1, g.grad_b[i])] {
                let (mut p, mut m) = ((a.clone(), b.clone()), (a.clone(), b.clone()));
                if which == 0 {
                    p.0[i] += h;
                    m.0[i] -= h;
                } else {
                    p.1[i] += h;
                    m.1[i] -= h;
                }
                let fd = (oracle_energy(&p.0, &p.1, k, 0.1, g.iterations) - oracle_energy(&m.0, &m.1, k, 0.1, g.iterations)) / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3 * scale);
                assert!(err < 1e-5, "trial {trial} map {which} entry {i}: {analytic} vs {fd}");
            }
        }
    }
}

#[test]
fn bilinear_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(sh, sw, dh, dw) in &[(2, 2, 16, 16), (4, 4, 16, 16), (8, 8, 16, 16), (3, 5, 7, 2), (16, 16, 4, 4)] {
        let src = uniform(&mut rng, sh * sw);
        let got = bilinear_resize(&src, sh, sw, dh, dw).unwrap();
        let coord = |d: usize, dst: usize, s: usize| ((d as f64 + 0.5) * s as f64 / dst as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        for y in 0..dh {
            for x in 0..dw {
                let (cy, cx) = (coord(y, dh, sh), coord(x, dw, sw));
                let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
                let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
                let at = |r: usize, c: usize| src[r * sw + c];
                let want = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                assert!((got[y * dw + x] - want).abs() < 1e-14, "{sh}x{sw}->{dh}x{dw} at ({y},{x})");
            }
        }
    }
}

#[test]
fn ddim_with_zero_noise_rescales() {
    let s = NoiseSchedule::linear(50, 0.002, 0.4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = Mat::from_fn(16, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 2.0);
    for t in [50, 20, 2] {
        let z = LatentState::new(data.clone(), 4, 4, t).unwrap();
        let out = sampler_step(&s, &z, &Mat::zeros(16, 3), SamplerMode::Ddim, &mut rng).unwrap();
        let ratio = (s.alpha_bar_at(t - 1).unwrap() / s.alpha_bar_at(t).unwrap()).sqrt();
        assert_eq!(out.timestep, t - 1);
        for (o, d) in out.data.data().iter().zip(data.data()) {
            assert!((o - ratio * d).abs() < 1e-12);
        }
    }
}

#[test]
fn ddpm_approaches_ddim_as_beta_vanishes() {
    let s = NoiseSchedule::linear(10, 1e-8, 1e-8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = Mat::from_fn(16, 3, |r, c| ((r + c) % 5) as f64 * 0.3 - 0.6);
    let eps = Mat::from_fn(16, 3, |r, c| ((r * 7 + c) % 3) as f64 - 1.0);
    let z = LatentState::new(data, 4, 4, 6).unwrap();
    let ddim = sampler_step(&s, &z, &eps, SamplerMode::Ddim, &mut rng).unwrap();
    let ddpm = sampler_step(&s, &z, &eps, SamplerMode::Ddpm, &mut rng).unwrap();
    for (a, b) in ddim.data.data().iter().zip(ddpm.data.data()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}
