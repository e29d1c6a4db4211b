//! Two-stage gradient-difference reconstruction.
//!
//! Step I recovers the remaining set D_r from the post-unlearning gradient at
//! θu. Step II recovers the forgotten set D_f from the pre-unlearning gradient
//! at θ*, with the Step-I images concatenated in and held fixed. The DLG
//! baseline matches the pre-unlearning gradient over the whole batch in one
//! stage.

use std::path::Path;
use web_time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_image_grid, LabeledDataset};
use crate::error::{Error, Result};
use crate::fedsim::{CapturedPair, UnlearnScenario};
use crate::gradients::{apply_row_mask, label_tensor, match_loss_and_grads, MatchLoss, VirtualLabels};
use crate::layout::FlatGradient;
use crate::metrics::{self, format_metric, ImageScore};
use crate::models::Model;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Dragd,
    Dragdp,
    DlgBaseline,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Dragd => "dragd",
            AttackMode::Dragdp => "dragdp",
            AttackMode::DlgBaseline => "dlg_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "dragd" => Ok(AttackMode::Dragd),
            "dragdp" => Ok(AttackMode::Dragdp),
            "dlg_baseline" | "dlg" => Ok(AttackMode::DlgBaseline),
            other => Err(Error::Config(format!("unknown attack mode {other:?} (dragd, dragdp, dlg_baseline)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    UniformNoise,
    PublicPrior,
    CplTile,
}

/// Update rule for the virtual data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `x ← x − η ∇x`.
    #[default]
    Gd,
    /// Adam with the given moment decays; exploration only.
    Adam { beta1: f64, beta2: f64 },
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eta_r: f64,
    pub eta_f: f64,
    pub iterations: usize,
    pub mode: AttackMode,
    #[serde(default = "default_true")]
    pub freeze_part: bool,
    pub init: InitKind,
    #[serde(default = "default_true")]
    pub clamp_pixels: bool,
    #[serde(default = "default_true")]
    pub labels_known: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub match_loss: MatchLoss,
}

impl AttackConfig {
    /// Plain-GD, known-label, clamped configuration for `mode`.
    pub fn new(mode: AttackMode, iterations: usize, eta: f64, seed: u64) -> Self {
        AttackConfig {
            eta_r: eta,
            eta_f: eta,
            iterations,
            mode,
            freeze_part: true,
            init: if mode == AttackMode::Dragdp { InitKind::PublicPrior } else { InitKind::UniformNoise },
            clamp_pixels: true,
            labels_known: true,
            seed,
            optimizer: Optimizer::Gd,
            match_loss: MatchLoss::SquaredL2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_r > 0.0 && self.eta_f > 0.0 && self.eta_r.is_finite() && self.eta_f.is_finite()) {
            return Err(Error::Config(format!("learning rates must be positive (eta_r {}, eta_f {})", self.eta_r, self.eta_f)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.mode == AttackMode::Dragdp && self.init != InitKind::PublicPrior {
            return Err(Error::Config("dragdp requires init = public_prior".into()));
        }
        Ok(())
    }
}

/// Virtual batches and loss traces.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub n_r: Tensor,
    pub labels_r: Vec<usize>,
    pub n_f: Tensor,
    pub labels_f: Vec<usize>,
    pub loss_step1: Vec<f64>,
    pub loss_step2: Vec<f64>,
}

/// Seeded initial virtual batch of `shape = [B, C, H, W]`.
pub fn init_virtual(
    shape: &[usize],
    labels: &[usize],
    init: InitKind,
    public_pool: Option<&LabeledDataset>,
    seed: u64,
) -> Result<Tensor> {
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::shape("init_virtual", format!("[{}, C, H, W]", labels.len()), format!("{shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    match init {
        InitKind::UniformNoise => Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()),
        InitKind::CplTile => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let (qh, qw) = (h.div_ceil(2), w.div_ceil(2));
            let quads: Vec<f64> = (0..b * c * qh * qw).map(|_| rng.random()).collect();
            let mut data = Vec::with_capacity(n);
            for plane in 0..b * c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(quads[plane * qh * qw + (y % qh) * qw + x % qw]);
                    }
                }
            }
            Tensor::new(shape.to_vec(), data)
        }
        InitKind::PublicPrior => {
            let pool = public_pool
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::InvalidArgument("public_prior init needs a non-empty public pool".into()))?;
            if pool.images.shape()[1..] != shape[1..] {
                return Err(Error::shape("init_virtual", format!("pool samples {:?}", &shape[1..]), format!("{:?}", &pool.images.shape()[1..])));
            }
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let mut used = vec![false; pool.len()];
            let mut picks = Vec::with_capacity(labels.len());
            for &l in labels {
                let hit = order.iter().copied().find(|&i| !used[i] && pool.labels[i] == l);
                let pick = match hit {
                    Some(i) => i,
                    None => {
                        log::warn!("public pool has no unused sample of label {l}; using another label");
                        order
                            .iter()
                            .copied()
                            .find(|&i| !used[i])
                            .ok_or_else(|| Error::InvalidArgument("public pool smaller than the batch".into()))?
                    }
                };
                used[pick] = true;
                picks.push(pick);
            }
            Ok(pool.images.select_rows(&picks))
        }
    }
}

/// Learned label logits for the unknown-label mode, or `None`.
fn label_logits(cfg: &AttackConfig, batch: usize, classes: usize, seed: u64) -> Option<Tensor> {
    if cfg.labels_known {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * classes).map(|_| StandardNormal.sample(&mut rng)).collect();
    Some(Tensor::new(vec![batch, classes], data).expect("label logits"))
}

struct Stepper {
    kind: Optimizer,
    eta: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Stepper {
    fn new(kind: Optimizer, eta: f64, n: usize) -> Self {
        Stepper { kind, eta, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        match self.kind {
            Optimizer::Gd => x.iter_mut().zip(g).for_each(|(xi, gi)| *xi -= self.eta * gi),
            Optimizer::Adam { beta1, beta2 } => {
                self.t += 1;
                let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
                for i in 0..x.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    x[i] -= self.eta * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Runs `iterations` updates of `x` (rows with `mask` false held fixed)
/// against `target` at `model`; returns the loss before each update.
fn descend(
    model: &Model,
    x: &mut Tensor,
    labels: &[usize],
    logits: &mut Option<Tensor>,
    mask: &[bool],
    target: &FlatGradient,
    cfg: &AttackConfig,
    eta: f64,
    stage: &str,
) -> Result<Vec<f64>> {
    let fixed = label_tensor(labels);
    let mut xs = Stepper::new(cfg.optimizer, eta, x.len());
    let mut ls = Stepper::new(cfg.optimizer, eta, logits.as_ref().map_or(0, Tensor::len));
    let mut history = Vec::with_capacity(cfg.iterations);
    let row = x.row_len();
    for it in 0..cfg.iterations {
        let vl = match logits {
            Some(l) => VirtualLabels::Learned(l),
            None => VirtualLabels::Fixed(&fixed),
        };
        let eval = match match_loss_and_grads(model, x, vl, target, cfg.match_loss) {
            Err(Error::NonFinite(msg)) => {
                return Err(Error::NonFinite(format!("{stage} iteration {it}: {msg}; the learning rate {eta} is probably too high")))
            }
            other => other?,
        };
        history.push(eval.loss);
        let mut g = eval.input_grad;
        apply_row_mask(&mut g, mask);
        let before = x.clone();
        xs.step(x.data_mut(), g.data());
        if cfg.clamp_pixels {
            x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        // frozen rows are restored bit for bit
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                x.data_mut()[i * row..(i + 1) * row].copy_from_slice(before.row(i));
            }
        }
        if let (Some(l), Some(lg)) = (logits.as_mut(), eval.label_grad.as_ref()) {
            ls.step(l.data_mut(), lg.data());
        }
    }
    Ok(history)
}

fn argmax_labels(logits: &Option<Tensor>, known: &[usize]) -> Vec<usize> {
    match logits {
        None => known.to_vec(),
        Some(l) => (0..l.batch())
            .map(|i| l.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
            .collect(),
    }
}

fn sample_shape(model: &Model, batch: usize) -> Vec<usize> {
    let [c, h, w] = model.spec.input_shape;
    vec![batch, c, h, w]
}

/// Step I: recovers D_r by matching `g_post` at θu.
pub fn reconstruct_remaining(pair: &CapturedPair, cfg: &AttackConfig, labels_r: &[usize]) -> Result<AttackState> {
    cfg.validate()?;
    if labels_r.is_empty() {
        return Err(Error::InvalidArgument("Step I needs |D_r| >= 1".into()));
    }
    let shape = sample_shape(&pair.theta_u, labels_r.len());
    let init = if cfg.init == InitKind::CplTile { InitKind::CplTile } else { InitKind::UniformNoise };
    let n_r = init_virtual(&shape, labels_r, init, None, derive_seed(cfg.seed, "attack/init_r"))?;
    reconstruct_remaining_from(pair, cfg, n_r, labels_r)
}

/// Step I from a given starting batch.
pub fn reconstruct_remaining_from(pair: &CapturedPair, cfg: &AttackConfig, mut n_r: Tensor, labels_r: &[usize]) -> Result<AttackState> {
    cfg.validate()?;
    let shape = sample_shape(&pair.theta_u, labels_r.len());
    if n_r.shape() != shape.as_slice() {
        return Err(Error::shape("reconstruct_remaining", format!("{shape:?}"), format!("{:?}", n_r.shape())));
    }
    let classes = pair.theta_u.num_classes();
    let mut logits = label_logits(cfg, labels_r.len(), classes, derive_seed(cfg.seed, "attack/labels_r"));
    let mask = vec![true; labels_r.len()];
    let loss = descend(&pair.theta_u, &mut n_r, labels_r, &mut logits, &mask, &pair.g_post, cfg, cfg.eta_r, "step I")?;
    let labels_r = argmax_labels(&logits, labels_r);
    let empty = Tensor::new(vec![0, shape[1], shape[2], shape[3]], Vec::new())?;
    Ok(AttackState { n_r, labels_r, n_f: empty, labels_f: Vec::new(), loss_step1: loss, loss_step2: Vec::new() })
}

/// Step II: recovers D_f by matching `g_pre` at θ* over `Concat(N_f, N_r)`,
/// updating only the N_f rows unless `freeze_part` is off.
pub fn reconstruct_forgotten(
    pair: &CapturedPair,
    cfg: &AttackConfig,
    state: AttackState,
    labels_f: &[usize],
    public_pool: Option<&LabeledDataset>,
) -> Result<AttackState> {
    cfg.validate()?;
    let shape = sample_shape(&pair.theta_star, labels_f.len());
    let n_f = init_virtual(&shape, labels_f, cfg.init, public_pool, derive_seed(cfg.seed, "attack/init_f"))?;
    reconstruct_forgotten_from(pair, cfg, state, n_f, labels_f)
}

/// Step II from a given starting N_f.
pub fn reconstruct_forgotten_from(
    pair: &CapturedPair,
    cfg: &AttackConfig,
    mut state: AttackState,
    n_f: Tensor,
    labels_f: &[usize],
) -> Result<AttackState> {
    cfg.validate()?;
    let (nf, nr) = (labels_f.len(), state.labels_r.len());
    let shape = sample_shape(&pair.theta_star, nf);
    if n_f.shape() != shape.as_slice() {
        return Err(Error::shape("reconstruct_forgotten", format!("{shape:?}"), format!("{:?}", n_f.shape())));
    }
    let mut x = Tensor::concat_rows(&[&n_f, &state.n_r])?;
    let labels: Vec<usize> = labels_f.iter().chain(&state.labels_r).copied().collect();
    let mask: Vec<bool> = (0..nf + nr).map(|i| i < nf || !cfg.freeze_part).collect();
    let classes = pair.theta_star.num_classes();
    let mut logits = label_logits(cfg, nf + nr, classes, derive_seed(cfg.seed, "attack/labels_f"));
    let loss = descend(&pair.theta_star, &mut x, &labels, &mut logits, &mask, &pair.g_pre, cfg, cfg.eta_f, "step II")?;
    let labels = argmax_labels(&logits, &labels);
    state.n_f = x.rows(0, nf);
    state.labels_f = labels[..nf].to_vec();
    if !cfg.freeze_part {
        state.n_r = x.rows(nf, nf + nr);
        state.labels_r = labels[nf..].to_vec();
    }
    state.loss_step2 = loss;
    Ok(state)
}

/// One scored image; `set` is `remaining`, `forgotten` or `full`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub index: usize,
    pub set: String,
    pub score: ImageScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub mode: AttackMode,
    pub state: AttackState,
    /// Present only when ground truth was supplied.
    pub scores: Vec<ScoredImage>,
    pub iterations: usize,
    pub wall_seconds: f64,
}

/// Mean of each metric over one set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

impl AttackResult {
    pub fn summary(&self, set: &str) -> Option<SetSummary> {
        let rows: Vec<&ImageScore> = self.scores.iter().filter(|s| s.set == set).map(|s| &s.score).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(SetSummary {
            mse: rows.iter().map(|s| s.mse).sum::<f64>() / n,
            psnr: rows.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|s| s.ssim).sum::<f64>() / n,
            count: rows.len(),
        })
    }

    /// The set this mode is judged on: `full` for the baseline, `forgotten` otherwise.
    pub fn target_set(&self) -> &'static str {
        if self.mode == AttackMode::DlgBaseline {
            "full"
        } else {
            "forgotten"
        }
    }
}

/// Aligned per-image scores of `recon` against `truth` within label groups.
pub fn score_set(recon: &Tensor, recon_labels: &[usize], truth: &LabeledDataset, set: &str) -> Result<Vec<ScoredImage>> {
    let perm = metrics::align_batches(recon, &truth.images, recon_labels, &truth.labels)?;
    (0..truth.len())
        .map(|j| {
            let score = metrics::score(&metrics::image(recon, perm[j]), &metrics::image(&truth.images, j))?;
            Ok(ScoredImage { index: j, set: set.to_string(), score })
        })
        .collect()
}

/// Algorithm end to end for `cfg.mode`, scored against the scenario's
/// ground truth when `score` is set.
pub fn run_attack(
    pair: &CapturedPair,
    cfg: &AttackConfig,
    scenario: &UnlearnScenario,
    public_pool: Option<&LabeledDataset>,
    score: bool,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let (dr, df) = (scenario.remaining_set()?, scenario.forgotten_set()?);
    let state = match cfg.mode {
        AttackMode::DlgBaseline => {
            let d = &scenario.full_set;
            let shape = sample_shape(&pair.theta_star, d.len());
            let init = if cfg.init == InitKind::PublicPrior { InitKind::UniformNoise } else { cfg.init };
            let mut x = init_virtual(&shape, &d.labels, init, None, derive_seed(cfg.seed, "attack/init_full"))?;
            let mut logits = label_logits(cfg, d.len(), pair.theta_star.num_classes(), derive_seed(cfg.seed, "attack/labels_full"));
            let mask = vec![true; d.len()];
            let loss = descend(&pair.theta_star, &mut x, &d.labels, &mut logits, &mask, &pair.g_pre, cfg, cfg.eta_f, "baseline")?;
            let empty = Tensor::new(vec![0, shape[1], shape[2], shape[3]], Vec::new())?;
            AttackState {
                n_r: empty,
                labels_r: Vec::new(),
                n_f: x,
                labels_f: argmax_labels(&logits, &d.labels),
                loss_step1: Vec::new(),
                loss_step2: loss,
            }
        }
        AttackMode::Dragd | AttackMode::Dragdp => {
            let state = reconstruct_remaining(pair, cfg, &dr.labels)?;
            reconstruct_forgotten(pair, cfg, state, &df.labels, public_pool)?
        }
    };
    let mut scores = Vec::new();
    if score {
        if cfg.mode == AttackMode::DlgBaseline {
            scores = score_set(&state.n_f, &state.labels_f, &scenario.full_set, "full")?;
        } else {
            scores = score_set(&state.n_r, &state.labels_r, &dr, "remaining")?;
            scores.extend(score_set(&state.n_f, &state.labels_f, &df, "forgotten")?);
        }
    }
    Ok(AttackResult {
        mode: cfg.mode,
        state,
        scores,
        iterations: cfg.iterations,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// `iter,loss_step1,loss_step2`; a stage that did not run leaves its column empty.
pub fn loss_csv(state: &AttackState) -> String {
    let mut out = String::from("iter,loss_step1,loss_step2\n");
    let n = state.loss_step1.len().max(state.loss_step2.len());
    let cell = |v: Option<&f64>| v.map_or(String::new(), |x| format_metric(*x));
    for i in 0..n {
        out.push_str(&format!("{i},{},{}\n", cell(state.loss_step1.get(i)), cell(state.loss_step2.get(i))));
    }
    out
}

/// `index,set,mse,psnr,ssim`.
pub fn metrics_csv(scores: &[ScoredImage]) -> String {
    let mut out = String::from("index,set,mse,psnr,ssim\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.index,
            s.set,
            format_metric(s.score.mse),
            format_metric(s.score.psnr),
            format_metric(s.score.ssim)
        ));
    }
    out
}

/// Writes grids, both CSVs and `manifest.json` for one attack into `dir`.
pub fn write_attack_artifacts(dir: &Path, result: &AttackResult, cfg: &AttackConfig, cols: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("loss.csv", loss_csv(&result.state))?;
    write("metrics.csv", metrics_csv(&result.scores))?;
    let ext = if result.state.n_f.shape()[1] == 1 { "pgm" } else { "ppm" };
    if result.state.n_r.batch() > 0 {
        write_image_grid(&result.state.n_r, dir.join(format!("recon_remaining.{ext}")), cols)?;
    }
    if result.state.n_f.batch() > 0 {
        let name = if result.mode == AttackMode::DlgBaseline { "recon_full" } else { "recon_forgotten" };
        write_image_grid(&result.state.n_f, dir.join(format!("{name}.{ext}")), cols)?;
    }
    let manifest = serde_json::json!({
        "mode": result.mode,
        "config": cfg,
        "iterations": result.iterations,
        "labels_r": result.state.labels_r,
        "labels_f": result.state.labels_f,
        "wall_seconds": result.wall_seconds,
    });
    write("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpl_tile_quadrants_match() {
        let t = init_virtual(&[2, 3, 8, 8], &[0, 1], InitKind::CplTile, None, 4).unwrap();
        for plane in 0..6 {
            let p = &t.data()[plane * 64..(plane + 1) * 64];
            for y in 0..4 {
                for x in 0..4 {
                    let v = p[y * 8 + x];
                    assert_eq!(v, p[y * 8 + x + 4]);
                    assert_eq!(v, p[(y + 4) * 8 + x]);
                    assert_eq!(v, p[(y + 4) * 8 + x + 4]);
                }
            }
        }
    }

    #[test]
    fn uniform_noise_mean() {
        let t = init_virtual(&[100, 1, 10, 10], &[0; 100], InitKind::UniformNoise, None, 9).unwrap();
        assert!((t.mean() - 0.5).abs() < 0.02);
    }

    #[test]
    fn public_prior_matches_labels_without_replacement() {
        let pool = LabeledDataset::new(
            "pool",
            Tensor::new(vec![4, 1, 1, 1], vec![0.0, 0.25, 0.5, 0.75]).unwrap(),
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        let t = init_virtual(&[2, 1, 1, 1], &[1, 1], InitKind::PublicPrior, Some(&pool), 0).unwrap();
        let mut got = t.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.25, 0.75]);
        assert!(init_virtual(&[1, 1, 1, 1], &[0], InitKind::PublicPrior, None, 0).is_err());
    }

    #[test]
    fn dragdp_requires_public_prior() {
        let mut c = AttackConfig::new(AttackMode::Dragdp, 1, 0.1, 0);
        assert!(c.validate().is_ok());
        c.init = InitKind::UniformNoise;
        assert!(c.validate().is_err());
        assert!(AttackConfig { iterations: 0, ..AttackConfig::new(AttackMode::Dragd, 1, 0.1, 0) }.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let st = AttackState {
            n_r: Tensor::zeros(&[0, 1, 1, 1]),
            labels_r: vec![],
            n_f: Tensor::zeros(&[0, 1, 1, 1]),
            labels_f: vec![],
            loss_step1: vec![1.0, 0.5],
            loss_step2: vec![2.0],
        };
        assert_eq!(loss_csv(&st), "iter,loss_step1,loss_step2\n0,1,2\n1,0.5,\n");
    }
}
