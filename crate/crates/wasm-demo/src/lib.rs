//! Browser bindings. Every export returns a JSON string so the page needs no
//! generated type glue beyond wasm-bindgen itself.

use fedrecon_core::attack::{run_attack, AttackConfig, AttackMode, Optimizer};
use fedrecon_core::dataio::{dirichlet_partition, synthetic};
use fedrecon_core::fedsim::{capture_pair, UnlearnMode, UnlearnScenario};
use fedrecon_core::metrics::{self, format_metric};
use fedrecon_core::{build_model, Arch, ArchSpec, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

const SIDE: usize = 8;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
}

/// Runs one attack on 8x8 synthetic digits with an MLP: `total` images,
/// the last `forget` of them forgotten. `mode` is `dragd`, `dragdp` or
/// `dlg_baseline`; `adam` swaps plain descent for Adam.
pub fn attack_json(mode: &str, total: usize, forget: usize, iterations: usize, eta: f64, adam: bool, seed: u64) -> Result<String, String> {
    let mode = AttackMode::parse(mode).map_err(err)?;
    if total < 2 || forget == 0 || forget >= total || total > 10 {
        return Err("need 2 <= total <= 10 and 0 < forget < total".into());
    }
    if iterations > 2000 {
        return Err("at most 2000 iterations in the browser".into());
    }
    let data = synthetic::digits(total + 20, SIDE, seed).map_err(err)?;
    let d = data.subset(&(0..total).collect::<Vec<_>>()).map_err(err)?;
    let public = data.subset(&(total..total + 20).collect::<Vec<_>>()).map_err(err)?;
    let model = build_model(&ArchSpec::new(Arch::Mlp, [1, SIDE, SIDE], 10), seed).map_err(err)?;
    let sc = UnlearnScenario::new(d, (total - forget..total).collect(), None, UnlearnMode::Simulated).map_err(err)?;
    let pair = capture_pair(&model, &model, &sc).map_err(err)?;
    let mut cfg = AttackConfig::new(mode, iterations, eta, seed);
    if adam {
        cfg.optimizer = Optimizer::Adam { beta1: 0.9, beta2: 0.999 };
    }
    let r = run_attack(&pair, &cfg, &sc, Some(&public), true).map_err(err)?;
    let summary = |set: &str| r.summary(set).map(|s| json!({"mse": s.mse, "psnr": format_metric(s.psnr), "ssim": s.ssim}));
    Ok(json!({
        "side": SIDE,
        "truth_remaining": rows(&sc.remaining_set().map_err(err)?.images),
        "truth_forgotten": rows(&sc.forgotten_set().map_err(err)?.images),
        "recon_remaining": rows(&r.state.n_r),
        "recon_forgotten": rows(&r.state.n_f),
        "loss_step1": r.state.loss_step1,
        "loss_step2": r.state.loss_step2,
        "remaining": summary("remaining"),
        "forgotten": summary("forgotten"),
        "full": summary("full"),
    })
    .to_string())
}

/// MSE, PSNR (peak 1) and SSIM of two `channels x height x width` images in `[0, 1]`.
pub fn metrics_json(a: Vec<f64>, b: Vec<f64>, channels: usize, height: usize, width: usize) -> Result<String, String> {
    let shape = vec![channels, height, width];
    let (a, b) = (Tensor::new(shape.clone(), a).map_err(err)?, Tensor::new(shape, b).map_err(err)?);
    let s = metrics::score(&a, &b).map_err(err)?;
    Ok(json!({"mse": s.mse, "psnr": format_metric(s.psnr), "ssim": s.ssim}).to_string())
}

/// Per-client label histograms of a Dirichlet split of 500 synthetic digits.
pub fn histogram_json(clients: usize, alpha: f64, seed: u64) -> Result<String, String> {
    let data = synthetic::digits(500, 8, seed).map_err(err)?;
    let p = dirichlet_partition(&data, clients, alpha, seed).map_err(err)?;
    let hist: Vec<Vec<usize>> = p
        .client_indices
        .iter()
        .map(|c| {
            let mut h = vec![0; data.num_classes];
            c.iter().for_each(|&i| h[data.labels[i]] += 1);
            h
        })
        .collect();
    Ok(json!({"classes": data.num_classes, "clients": hist}).to_string())
}

#[wasm_bindgen]
pub fn demo_attack(mode: &str, total: usize, forget: usize, iterations: usize, eta: f64, adam: bool, seed: u64) -> Result<String, JsError> {
    attack_json(mode, total, forget, iterations, eta, adam, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn image_metrics(a: Vec<f64>, b: Vec<f64>, channels: usize, height: usize, width: usize) -> Result<String, JsError> {
    metrics_json(a, b, channels, height, width).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn dirichlet_histogram(clients: usize, alpha: f64, seed: u64) -> Result<String, JsError> {
    histogram_json(clients, alpha, seed).map_err(|e| JsError::new(&e))
}
