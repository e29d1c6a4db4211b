//! Reconstruction quality: MSE, PSNR, SSIM, and label-aware batch alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty images".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak² / mse)`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Renders a metric for CSV/JSON: infinities become `inf`, other values use
/// the shortest round-trip representation.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

pub fn parse_metric(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| Error::InvalidArgument(format!("not a metric value: {t:?}"))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Weighted local statistics over one window; `w` gives the weight at `(dy, dx)`.
fn window_ssim(x: &[f64], y: &[f64], stride: usize, (h, w): (usize, usize), weight: impl Fn(usize, usize) -> f64) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..h {
        for dx in 0..w {
            let k = weight(dy, dx);
            let (a, b) = (x[dy * stride + dx], y[dy * stride + dx]);
            mx += k * a;
            my += k * b;
            xx += k * a * a;
            yy += k * b * b;
            xy += k * a * b;
        }
    }
    let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean local SSIM of two `[C, H, W]` images in `[0, 1]`: 11×11 Gaussian
/// window (σ 1.5) over every fully contained position, per channel, then
/// averaged over channels. Images smaller than the window use one global
/// uniform window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(Error::shape("ssim", "non-empty [C, H, W]", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut total = 0.0;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        log::warn!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window; using one global window");
        let k = 1.0 / plane as f64;
        for ch in 0..c {
            let (x, y) = (&a.data()[ch * plane..], &b.data()[ch * plane..]);
            total += window_ssim(x, y, w, (h, w), |_, _| k);
        }
        return Ok(total / c as f64);
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for ch in 0..c {
        let (x, y) = (&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane]);
        let mut sum = 0.0;
        for i in 0..oh {
            for j in 0..ow {
                let at = i * w + j;
                sum += window_ssim(&x[at..], &y[at..], w, (SSIM_WINDOW, SSIM_WINDOW), |dy, dx| g[dy] * g[dx]);
            }
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Per-image scores of a reconstruction against its reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score(recon: &Tensor, truth: &Tensor) -> Result<ImageScore> {
    let m = mse(recon, truth)?;
    Ok(ImageScore { mse: m, psnr: psnr_from_mse(m, 1.0), ssim: ssim(recon, truth)? })
}

/// Row `i` of a batch as a `[C, H, W]` tensor.
pub fn image(batch: &Tensor, i: usize) -> Tensor {
    Tensor::new(batch.shape()[1..].to_vec(), batch.row(i).to_vec()).expect("row of a batch")
}

/// Minimum-cost perfect matching on a square cost matrix (row-major `n × n`).
/// Returns `assign[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // potentials u (rows), v (columns); p[col] = row matched to col, 1-based with 0 as the virtual root
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Matches reconstructions to references within each label group by minimum
/// total MSE. Returns `perm` with `recon[perm[j]]` paired to `truth[j]`.
/// If the two label multisets differ the whole batch is matched at once.
pub fn align_batches(recon: &Tensor, truth: &Tensor, recon_labels: &[usize], truth_labels: &[usize]) -> Result<Vec<usize>> {
    same_shape("align_batches", recon, truth)?;
    let n = truth.batch();
    if recon_labels.len() != n || truth_labels.len() != n {
        return Err(Error::shape("align_batches", format!("{n} labels per side"), format!("{} and {}", recon_labels.len(), truth_labels.len())));
    }
    let pair_cost = |r: usize, t: usize| -> f64 {
        recon.row(r).iter().zip(truth.row(t)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut sorted_r = recon_labels.to_vec();
    let mut sorted_t = truth_labels.to_vec();
    sorted_r.sort_unstable();
    sorted_t.sort_unstable();
    let groups: Vec<(Vec<usize>, Vec<usize>)> = if sorted_r == sorted_t {
        let mut labels = sorted_t.clone();
        labels.dedup();
        labels
            .into_iter()
            .map(|l| {
                let pick = |ls: &[usize]| (0..n).filter(|&i| ls[i] == l).collect::<Vec<_>>();
                (pick(recon_labels), pick(truth_labels))
            })
            .collect()
    } else {
        log::warn!("label multisets differ between reconstruction and reference; aligning globally");
        vec![((0..n).collect(), (0..n).collect())]
    };
    let mut perm = vec![0; n];
    for (rs, ts) in groups {
        let k = rs.len();
        let cost: Vec<f64> = ts.iter().flat_map(|&t| rs.iter().map(move |&r| (t, r))).map(|(t, r)| pair_cost(r, t)).collect();
        for (ti, ri) in hungarian(&cost, k).into_iter().enumerate() {
            perm[ts[ti]] = rs[ri];
        }
    }
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn mse_and_psnr_closed_forms() {
        let a = img(1, 4, 4, |_| 0.25);
        let b = img(1, 4, 4, |_| 0.75);
        assert_eq!(mse(&a, &b).unwrap(), 0.25);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_metric(f64::INFINITY), "inf");
        assert_eq!(parse_metric("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_metric(&format_metric(0.1 + 0.2)).unwrap(), 0.1 + 0.2);
        assert!(mse(&a, &img(1, 4, 5, |_| 0.0)).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let (a, b) = (0.3, 0.8);
        let c1 = 1e-4;
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&img(2, 16, 16, |_| a), &img(2, 16, 16, |_| b)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_identity_and_negative() {
        let checker = img(1, 16, 16, |i| if (i / 16 + i % 16) % 2 == 0 { 0.9 } else { 0.1 });
        assert!((ssim(&checker, &checker).unwrap() - 1.0).abs() < 1e-12);
        let neg = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &neg).unwrap() < 0.0);
    }

    #[test]
    fn small_images_use_a_global_window() {
        let a = img(1, 4, 4, |i| i as f64 / 16.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0], 3), vec![1, 0, 2]);
        assert_eq!(hungarian(&[], 0), Vec::<usize>::new());
        assert_eq!(hungarian(&[7.0], 1), vec![0]);
    }

    #[test]
    fn align_swapped_same_label_pair() {
        let truth = Tensor::new(vec![3, 1, 1, 2], vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.5]).unwrap();
        let recon = truth.select_rows(&[1, 0, 2]);
        assert_eq!(align_batches(&truth, &truth, &[4, 4, 2], &[4, 4, 2]).unwrap(), vec![0, 1, 2]);
        assert_eq!(align_batches(&recon, &truth, &[4, 4, 2], &[4, 4, 2]).unwrap(), vec![1, 0, 2]);
        // different labels keep rows in their own group even if another group is closer
        assert_eq!(align_batches(&recon, &truth, &[4, 2, 4], &[2, 4, 4]).unwrap()[0], 1);
    }
}
