//! Config-driven end-to-end runs: train, unlearn, capture, attack, score.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.json            resolved config
//! <out>/pair/                  captured models, gradients and pair.json
//! <out>/<mode>/                loss.csv, metrics.csv, grids, manifest.json
//! <out>/summary.csv            method,set,mse,psnr,ssim (means of metrics.csv)
//! <out>/report.json            RunReport
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMode, InitKind, Optimizer};
use crate::dataio::{dirichlet_partition, DatasetSource, LabeledDataset};
use crate::error::{Error, Result};
use crate::fedsim::{self, FedConfig, PairManifest, UnlearnMode, UnlearnScenario};
use crate::gradients::MatchLoss;
use crate::metrics::{format_metric, parse_metric};
use crate::models::{build_model, Activation, Arch, ArchSpec};
use crate::seeds::derive_seed;

/// Attack variants a run can request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    DlgBaseline,
    Dragd,
    Dragdp,
    /// DRAGD with N_r updated during Step II.
    DragdUnfixed,
    /// DRAGD with N_f initialized from the tiled CPL pattern.
    DragdCpl,
}

impl RunMode {
    pub const ALL: [RunMode; 5] =
        [RunMode::DlgBaseline, RunMode::Dragd, RunMode::Dragdp, RunMode::DragdUnfixed, RunMode::DragdCpl];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::DlgBaseline => "dlg_baseline",
            RunMode::Dragd => "dragd",
            RunMode::Dragdp => "dragdp",
            RunMode::DragdUnfixed => "dragd_unfixed",
            RunMode::DragdCpl => "dragd_cpl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "dlg" && *m == RunMode::DlgBaseline))
            .ok_or_else(|| {
                let names: Vec<&str> = RunMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }

    /// Comma-separated list, e.g. `dlg_baseline,dragd`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let modes = s.split(',').filter(|p| !p.trim().is_empty()).map(RunMode::parse).collect::<Result<Vec<_>>>()?;
        if modes.is_empty() {
            return Err(Error::Config("empty mode list".into()));
        }
        Ok(modes)
    }

    /// Row label in the comparison table.
    pub fn label(self) -> &'static str {
        match self {
            RunMode::DlgBaseline => "DLG",
            RunMode::Dragd => "DRAGD",
            RunMode::Dragdp => "DRAGDP",
            RunMode::DragdUnfixed => "DRAGD (non-fixed Part)",
            RunMode::DragdCpl => "DRAGD (CPL init)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Used instead of `source` when one of its paths is missing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<DatasetSource>,
    /// The first `train` samples are the federated training pool.
    pub train: usize,
    /// The `public` samples after the pool form the attacker's disjoint prior pool.
    #[serde(default)]
    pub public: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "one")]
    pub width_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub dirichlet_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// |D|, drawn without replacement from the training pool.
    pub total: usize,
    /// |D_f|; the remaining `total - forget` samples are the Part set D_r.
    pub forget: usize,
    #[serde(default)]
    pub mode: UnlearnMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub iterations: usize,
    pub eta_r: f64,
    pub eta_f: f64,
    #[serde(default = "yes")]
    pub clamp_pixels: bool,
    #[serde(default = "yes")]
    pub labels_known: bool,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub match_loss: MatchLoss,
}

/// One experiment; see `presets/` for complete examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub fed: FedSection,
    pub scenario: ScenarioConfig,
    pub attack: AttackSection,
    pub modes: Vec<RunMode>,
    pub out_dir: String,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The source that will actually be read.
    pub fn resolved_source(&self) -> Result<&DatasetSource> {
        let missing: Vec<&str> =
            self.dataset.source.paths().into_iter().filter(|p| !Path::new(p).exists()).collect();
        if missing.is_empty() {
            return Ok(&self.dataset.source);
        }
        match &self.dataset.fallback {
            Some(fb) => {
                log::warn!("dataset path(s) {} missing; using fallback {:?}", missing.join(", "), fb);
                let still: Vec<&str> = fb.paths().into_iter().filter(|p| !Path::new(p).exists()).collect();
                if still.is_empty() {
                    Ok(fb)
                } else {
                    Err(Error::Config(format!("fallback dataset path(s) missing: {}", still.join(", "))))
                }
            }
            None => Err(Error::Config(format!("dataset path(s) missing: {}", missing.join(", ")))),
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if s.forget == 0 || s.forget >= s.total {
            return Err(Error::Config(format!("need 0 < |D_f| < |D| (got |D_f| = {}, |D| = {})", s.forget, s.total)));
        }
        if s.total > self.dataset.train {
            return Err(Error::Config(format!("|D| = {} exceeds the training pool of {}", s.total, self.dataset.train)));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no attack modes requested".into()));
        }
        if self.modes.contains(&RunMode::Dragdp) && self.dataset.public == 0 {
            return Err(Error::Config("dragdp needs a public pool (dataset.public > 0)".into()));
        }
        if !(self.fed.dirichlet_alpha > 0.0 && self.fed.dirichlet_alpha.is_finite()) {
            return Err(Error::Config(format!("dirichlet_alpha must be positive, got {}", self.fed.dirichlet_alpha)));
        }
        if !(self.model.width_scale > 0.0) {
            return Err(Error::Config("width_scale must be positive".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir is empty".into()));
        }
        self.fed_config().validate()?;
        for &m in &self.modes {
            self.attack_config(m).validate()?;
        }
        Ok(())
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            clients: f.clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            local_lr: f.local_lr,
            batch_size: f.batch_size,
            seed: derive_seed(self.seed, "fed"),
        }
    }

    /// Every mode shares one attack seed, so variants start from the same noise.
    pub fn attack_config(&self, mode: RunMode) -> AttackConfig {
        let a = &self.attack;
        let base = match mode {
            RunMode::DlgBaseline => AttackMode::DlgBaseline,
            RunMode::Dragdp => AttackMode::Dragdp,
            _ => AttackMode::Dragd,
        };
        let mut cfg = AttackConfig::new(base, a.iterations, a.eta_r, derive_seed(self.seed, "attack"));
        cfg.eta_f = a.eta_f;
        cfg.clamp_pixels = a.clamp_pixels;
        cfg.labels_known = a.labels_known;
        cfg.optimizer = a.optimizer;
        cfg.match_loss = a.match_loss;
        match mode {
            RunMode::DragdUnfixed => cfg.freeze_part = false,
            RunMode::DragdCpl => cfg.init = InitKind::CplTile,
            _ => {}
        }
        cfg
    }

    pub fn seeds_json(&self) -> serde_json::Value {
        serde_json::json!({
            "master": self.seed,
            "model": derive_seed(self.seed, "model"),
            "partition": derive_seed(self.seed, "partition"),
            "fed": derive_seed(self.seed, "fed"),
            "scenario": derive_seed(self.seed, "scenario"),
            "attack": derive_seed(self.seed, "attack"),
        })
    }
}

/// Everything loaded and checked before any file is written.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub pool: LabeledDataset,
    pub public: Option<LabeledDataset>,
    pub scenario: UnlearnScenario,
    pub spec: ArchSpec,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let data = config.resolved_source()?.load()?;
    let (train, public) = (config.dataset.train, config.dataset.public);
    if train + public > data.len() {
        return Err(Error::Config(format!(
            "train ({train}) + public ({public}) exceeds the {} available samples",
            data.len()
        )));
    }
    let pool = data.subset(&(0..train).collect::<Vec<_>>())?;
    let public = (public > 0).then(|| data.subset(&(train..train + public).collect::<Vec<_>>())).transpose()?;
    let picked = pick_indices(train, config.scenario.total, derive_seed(config.seed, "scenario"));
    let full = pool.subset(&picked)?;
    let keep = config.scenario.total - config.scenario.forget;
    let scenario = UnlearnScenario::new(full, (keep..config.scenario.total).collect(), Some(picked), config.scenario.mode)?;
    let mut spec = ArchSpec::new(config.model.arch, data.sample_shape(), data.num_classes);
    spec.width_scale = config.model.width_scale;
    spec.activation = config.model.activation;
    Ok(Prepared { config: config.clone(), pool, public, scenario, spec })
}

/// `k` distinct indices below `n`, in draw order.
fn pick_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, n, k).into_vec()
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub set: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: RunMode,
    pub sets: Vec<TableRow>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub pair: PairManifest,
    pub modes: Vec<ModeSummary>,
    pub table: Vec<TableRow>,
}

/// Trains, unlearns, captures, attacks and writes every artifact under `out_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let prep = prepare(config)?;
    run_prepared(&prep)
}

pub fn run_prepared(prep: &Prepared) -> Result<RunReport> {
    let cfg = &prep.config;
    let out = PathBuf::from(&cfg.out_dir);
    let model0 = build_model(&prep.spec, derive_seed(cfg.seed, "model"))?;
    let partition = dirichlet_partition(&prep.pool, cfg.fed.clients, cfg.fed.dirichlet_alpha, derive_seed(cfg.seed, "partition"))?;
    let fed = cfg.fed_config();
    log::info!("federated training: {} clients, {} rounds", fed.clients, fed.rounds);
    let theta_star = fedsim::train_federated(&model0, &prep.pool, &partition, &fed)?;
    let theta_u = fedsim::unlearn(&model0, &theta_star, &prep.scenario, &prep.pool, &partition, &fed)?;
    let pair = fedsim::capture_pair(&theta_star, &theta_u, &prep.scenario)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    pair.save(&out.join("pair"), &prep.scenario, cfg.seeds_json())?;

    let mut modes = Vec::new();
    for &mode in &cfg.modes {
        let acfg = cfg.attack_config(mode);
        log::info!("attack {}", mode.name());
        let result = attack::run_attack(&pair, &acfg, &prep.scenario, prep.public.as_ref(), true)?;
        let dir = out.join(mode.name());
        attack::write_attack_artifacts(&dir, &result, &acfg, 8)?;
        let wall = result.wall_seconds;
        modes.push(ModeSummary { mode, sets: summarize_mode_dir(&dir, mode)?, wall_seconds: wall });
    }
    let table = comparison_table(&modes);
    write_summary_csv(&out.join("summary.csv"), &table)?;
    let manifest_path = out.join("pair").join("pair.json");
    let pair_manifest: PairManifest = read_json(&manifest_path)?;
    let report = RunReport { config: cfg.clone(), pair: pair_manifest, modes, table };
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), offset: 0, reason: e.to_string() })
}

/// Per-set means recomputed from a mode's `metrics.csv`.
pub fn summarize_mode_dir(dir: &Path, mode: RunMode) -> Result<Vec<TableRow>> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut sets: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(Error::Format { path: path.clone(), offset: 0, reason: format!("line {}: expected 5 columns", n + 1) });
        }
        let vals = [parse_metric(cells[2])?, parse_metric(cells[3])?, parse_metric(cells[4])?];
        match sets.iter_mut().find(|(s, _)| s == cells[1]) {
            Some((_, rows)) => rows.push(vals),
            None => sets.push((cells[1].to_string(), vec![vals])),
        }
    }
    Ok(sets
        .into_iter()
        .map(|(set, rows)| {
            let n = rows.len() as f64;
            let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
            TableRow { method: mode.label().to_string(), set, mse: mean(0), psnr: mean(1), ssim: mean(2) }
        })
        .collect())
}

/// Rows in table order: DLG, Part, DRAGD, DRAGDP, then ablation variants.
/// Part is the Step-I result scored on D_r, taken from the first two-stage mode.
pub fn comparison_table(modes: &[ModeSummary]) -> Vec<TableRow> {
    let find = |m: RunMode, set: &str| {
        modes.iter().find(|s| s.mode == m).and_then(|s| s.sets.iter().find(|r| r.set == set)).cloned()
    };
    let mut rows = Vec::new();
    rows.extend(find(RunMode::DlgBaseline, "full"));
    let part = [RunMode::Dragd, RunMode::Dragdp, RunMode::DragdCpl, RunMode::DragdUnfixed]
        .into_iter()
        .find_map(|m| find(m, "remaining"));
    rows.extend(part.map(|r| TableRow { method: "Part".into(), ..r }));
    for m in [RunMode::Dragd, RunMode::Dragdp, RunMode::DragdUnfixed, RunMode::DragdCpl] {
        rows.extend(find(m, "forgotten"));
    }
    rows
}

pub fn write_summary_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    std::fs::write(path, summary_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn summary_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method,set,mse,psnr,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.set,
            format_metric(r.mse),
            format_metric(r.psnr),
            format_metric(r.ssim)
        ));
    }
    out
}

/// Rebuilds the comparison table from a finished run directory.
pub fn load_report_table(run_dir: &Path) -> Result<Vec<TableRow>> {
    let cfg_path = run_dir.join("config.json");
    let mut missing = Vec::new();
    if !cfg_path.is_file() {
        missing.push(cfg_path.display().to_string());
    }
    let config = if missing.is_empty() { Some(ExperimentConfig::load(&cfg_path)?) } else { None };
    let modes: Vec<RunMode> = match &config {
        Some(c) => c.modes.clone(),
        None => RunMode::ALL.iter().copied().filter(|m| run_dir.join(m.name()).is_dir()).collect(),
    };
    for m in &modes {
        let p = run_dir.join(m.name()).join("metrics.csv");
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} is not a complete run; missing: {}", run_dir.display(), missing.join(", "))));
    }
    let summaries = modes
        .iter()
        .map(|&m| Ok(ModeSummary { mode: m, sets: summarize_mode_dir(&run_dir.join(m.name()), m)?, wall_seconds: 0.0 }))
        .collect::<Result<Vec<_>>>()?;
    Ok(comparison_table(&summaries))
}

/// Fixed-width table with direction markers.
pub fn format_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let cells: Vec<[String; 3]> =
        rows.iter().map(|r| [format_metric(r.mse), format_metric(r.psnr), format_metric(r.ssim)]).collect();
    let cw = cells.iter().flatten().map(|c| c.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:<9}  {:>cw$}  {:>cw$}  {:>cw$}\n", "Method", "Set", "MSE ↓", "PSNR ↑", "SSIM ↑");
    for (r, c) in rows.iter().zip(&cells) {
        out.push_str(&format!("{:<width$}  {:<9}  {:>cw$}  {:>cw$}  {:>cw$}\n", r.method, r.set, c[0], c[1], c[2]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(out: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
              "dataset": {{"source": "synthetic_blobs", "count": 60, "classes": 2, "shape": [1, 6, 6], "seed": 3,
                           "train": 40, "public": 20}},
              "model": {{"arch": "mlp"}},
              "fed": {{"clients": 2, "rounds": 1, "local_epochs": 1, "local_lr": 0.1, "batch_size": 8, "dirichlet_alpha": 1.0}},
              "scenario": {{"total": 4, "forget": 2}},
              "attack": {{"iterations": 5, "eta_r": 0.05, "eta_f": 0.05}},
              "modes": ["dlg_baseline", "dragd", "dragdp"],
              "out_dir": "{out}",
              "seed": 1
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RunMode::ALL {
            assert_eq!(RunMode::parse(m.name()).unwrap(), m);
        }
        assert_eq!(RunMode::parse_list("dlg, DRAGDP").unwrap(), vec![RunMode::DlgBaseline, RunMode::Dragdp]);
        assert!(RunMode::parse("dragx").is_err());
    }

    #[test]
    fn validation_rejects_forget_not_below_total() {
        let mut c = tiny_config("x");
        c.scenario.forget = 4;
        assert!(c.validate().is_err());
        c.scenario.forget = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn table_order_and_part_row() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let report = run(&tiny_config(out.to_str().unwrap())).unwrap();
        let methods: Vec<&str> = report.table.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["DLG", "Part", "DRAGD", "DRAGDP"]);
        assert_eq!(report.table[1].set, "remaining");
        assert_eq!(load_report_table(&out).unwrap(), report.table);
    }
}
