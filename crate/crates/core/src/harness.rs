//! Orchestration of the three stages, artifact layout and reporting.
//!
//! Artifacts for one run live under `<out>/<variant>-<hash>/seed-<k>/`,
//! where `<hash>` is [`ExperimentConfig::hash_hex`]:
//!
//! * `stage1.ckpt`, `stage1_metrics.csv` (stage 1)
//! * `distill.dataset`, `student.ckpt` (stage 2; message variants only)
//! * `eval.csv` (evaluation)
//! * `manifest.json` (hash, digests, distillation errors)
//!
//! Every CSV starts with a `# config_hash=<hash>` line and checkpoints store
//! the hash, so artifacts from a different configuration are refused.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stage};
use crate::distill::{generate_dataset, train_student, DecentralizedExecutor, DistillDataset};
use crate::error::{Error, Result};
use crate::eval::{compute_prr, evaluate, EvalResult};
use crate::learner::{metrics_csv, train_stage1, train_stage1_ac, Stage1Model, Stage1Output};
use crate::rollout::centralized;
use crate::{Checkpoint, ParamStore, Rng, Variant};

pub const EVAL_HEADER: &str = "variant,seed,stage,eval_win_rate,eval_return,prr";

/// Paths of one (config, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        RunPaths { dir: variant_dir(cfg).join(format!("seed-{seed}")) }
    }
    pub fn stage1_ckpt(&self) -> PathBuf {
        self.dir.join("stage1.ckpt")
    }
    pub fn stage1_metrics(&self) -> PathBuf {
        self.dir.join("stage1_metrics.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("distill.dataset")
    }
    pub fn student_ckpt(&self) -> PathBuf {
        self.dir.join("student.ckpt")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
}

pub fn variant_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(format!("{}-{}", cfg.variant, cfg.hash_hex()))
}

/// Per-run bookkeeping written next to the artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_init_heldout_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_heldout_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_steps: Option<usize>,
}

impl Manifest {
    fn load_or_new(paths: &RunPaths, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let p = paths.manifest();
        if p.exists() {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            if m.config_hash != cfg.hash_hex() {
                return Err(Error::HashMismatch { expected: cfg.hash_hex(), found: m.config_hash });
            }
            Ok(m)
        } else {
            Ok(Manifest { config_hash: cfg.hash_hex(), variant: cfg.variant.to_string(), seed, ..Manifest::default() })
        }
    }

    fn save(&self, paths: &RunPaths) -> Result<()> {
        std::fs::write(paths.manifest(), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn hash_line(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={}\n", cfg.hash_hex())
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<RunPaths> {
    let paths = RunPaths::new(cfg, seed);
    std::fs::create_dir_all(&paths.dir)?;
    let cfg_path = variant_dir(cfg).join("config.json");
    let text = cfg.to_json() + "\n";
    if std::fs::read_to_string(&cfg_path).ok().as_deref() != Some(text.as_str()) {
        std::fs::write(cfg_path, text)?;
    }
    Ok(paths)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite(path))
    }
}

fn load_checkpoint(path: PathBuf, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&require(path)?)?;
    match ck.config_hash() {
        Some(h) if h == cfg.config_hash() => Ok(ck),
        found => Err(Error::HashMismatch {
            expected: cfg.hash_hex(),
            found: found.map(|h| format!("{h:016x}")).unwrap_or_else(|| "none".into()),
        }),
    }
}

fn stage1_model(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<(Stage1Model, ParamStore)> {
    let spec = cfg.env.spec()?;
    let (model, _) = Stage1Model::layout(cfg.variant, &spec, &cfg.nets);
    let params: ParamStore = ck.to_store("");
    model.check_store(&params)?;
    Ok((model, params))
}

/// Stage 1: trains and writes `stage1.ckpt` and `stage1_metrics.csv`.
pub fn train1(cfg: &ExperimentConfig, seed: u64) -> Result<Stage1Output> {
    cfg.validate()?;
    let paths = prepare(cfg, seed)?;
    info!("train1 {} seed {seed} -> {}", cfg.variant, paths.dir.display());
    let out = if cfg.variant.is_actor_critic() {
        train_stage1_ac(cfg.variant, &cfg.env, &cfg.nets, &cfg.learner, seed)?
    } else {
        train_stage1(cfg.variant, &cfg.env, &cfg.nets, &cfg.learner, seed)?
    };
    let mut ck = Checkpoint::from_store(&out.params);
    ck.set_config_hash(cfg.config_hash());
    ck.save(&paths.stage1_ckpt())?;
    std::fs::write(paths.stage1_metrics(), hash_line(cfg) + &metrics_csv(&out.metrics))?;
    let m = Manifest::load_or_new(&paths, cfg, seed)?;
    m.save(&paths)?;
    Ok(out)
}

/// Stage 2: teacher dataset then student fit. Variants without a message
/// module have nothing to distill and only record that in the manifest.
pub fn distill(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let paths = prepare(cfg, seed)?;
    let ck = load_checkpoint(paths.stage1_ckpt(), cfg)?;
    let (model, params) = stage1_model(cfg, &ck)?;
    let mut manifest = Manifest::load_or_new(&paths, cfg, seed)?;
    if model.message.prefix().is_none() {
        info!("distill {} seed {seed}: no message module, nothing to distill", cfg.variant);
        manifest.save(&paths)?;
        return Ok(manifest);
    }
    let root = Rng::new(seed);
    let mut env = cfg.env.build()?;
    let ds = generate_dataset(&model, &params, env.as_mut(), cfg.distill.episodes, cfg.config_hash(), &mut root.split(10))?;
    let digest = ds.save(&paths.dataset())?;
    manifest.dataset_sha256 = Some(digest.clone());
    manifest.dataset_samples = Some(ds.samples.len());
    manifest.save(&paths)?;

    let ds = DistillDataset::load(&paths.dataset(), Some(&digest))?;
    let fit = train_student(&ds, cfg.nets.student_hidden, &cfg.distill, root.split(11).seed())?;
    let mut sck = Checkpoint::from_store(&fit.params);
    sck.set_config_hash(cfg.config_hash());
    sck.save(&paths.student_ckpt())?;
    manifest.student_init_heldout_mse = Some(fit.init_heldout_mse);
    manifest.student_heldout_mse = Some(fit.heldout_mse);
    manifest.student_steps = Some(fit.steps_run);
    manifest.save(&paths)?;
    Ok(manifest)
}

/// Centralized and decentralized results of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub centralized: EvalResult,
    pub decentralized: EvalResult,
    pub prr: Option<f64>,
}

/// Evaluation: the stage-1 policy with global information, then the
/// local-only executor, on the same sequence of initial states.
pub fn eval(cfg: &ExperimentConfig, seed: u64) -> Result<EvalSummary> {
    cfg.validate()?;
    let paths = prepare(cfg, seed)?;
    let ck = load_checkpoint(paths.stage1_ckpt(), cfg)?;
    let (model, params) = stage1_model(cfg, &ck)?;
    let student = match model.message.prefix() {
        None => None,
        Some(_) => {
            let manifest = Manifest::load_or_new(&paths, cfg, seed)?;
            if let Some(d) = &manifest.dataset_sha256 {
                // The dataset must still be the one the student was fitted to.
                DistillDataset::load(&require(paths.dataset())?, Some(d))?;
            }
            Some(load_checkpoint(paths.student_ckpt(), cfg)?.to_store::<f64>("student."))
        }
    };
    let mut env = cfg.env.build()?;
    let eval_rng = Rng::new(seed).split(20);
    let centralized_r = {
        let mut ctl = centralized(&model, &params, cfg.eval.sample_message);
        evaluate(env.as_mut(), ctl.as_mut(), cfg.eval.episodes, &mut eval_rng.clone())?
    };
    let exec = DecentralizedExecutor::new(model, &params, student.as_ref())?;
    let decentralized_r = evaluate(env.as_mut(), &mut exec.controller(), cfg.eval.episodes, &mut eval_rng.clone())?;
    let prr = compute_prr(decentralized_r.win_rate, centralized_r.win_rate);
    let fmt_prr = prr.map(|p| p.to_string()).unwrap_or_else(|| "NA".into());
    let mut csv = hash_line(cfg) + EVAL_HEADER + "\n";
    for (stage, r) in [("centralized", &centralized_r), ("decentralized", &decentralized_r)] {
        let _ = writeln!(csv, "{},{seed},{stage},{},{},{fmt_prr}", cfg.variant, r.win_rate, r.mean_return);
    }
    std::fs::write(paths.eval_csv(), csv)?;
    info!("eval {} seed {seed}: centralized {} decentralized {} prr {fmt_prr}", cfg.variant, centralized_r.win_rate, decentralized_r.win_rate);
    Ok(EvalSummary { centralized: centralized_r, decentralized: decentralized_r, prr })
}

/// Runs one stage for one seed.
pub fn run(cfg: &ExperimentConfig, stage: Stage, seed: u64) -> Result<()> {
    match stage {
        Stage::Train1 => train1(cfg, seed).map(|_| ()),
        Stage::Train2 => distill(cfg, seed).map(|_| ()),
        Stage::Eval => eval(cfg, seed).map(|_| ()),
    }
}

// ---- reporting ------------------------------------------------------------

/// One evaluated (variant, seed) pair read back from `eval.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub variant: Variant,
    pub seed: u64,
    pub centralized: f64,
    pub decentralized: f64,
    pub prr: Option<f64>,
}

/// Mean and population standard deviation; `std` is `None` for fewer than
/// two values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Option<Spread> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt());
        Some(Spread { mean, std, n: xs.len() })
    }

    fn cells(s: Option<Spread>) -> (String, String) {
        match s {
            None => ("NA".into(), "NA".into()),
            Some(s) => (format!("{:.4}", s.mean), s.std.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())),
        }
    }

    fn text(s: Option<Spread>) -> String {
        match s {
            None => "n/a".into(),
            Some(Spread { mean, std: Some(sd), .. }) => format!("{mean:.3} ± {sd:.3}"),
            Some(Spread { mean, std: None, .. }) => format!("{mean:.3}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub centralized: Spread,
    pub decentralized: Spread,
    pub prr: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

pub const REPORT_HEADER: &str =
    "variant,seeds,centralized_mean,centralized_std,decentralized_mean,decentralized_std,prr_mean,prr_std";

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let (cm, cs) = Spread::cells(Some(r.centralized));
            let (dm, ds) = Spread::cells(Some(r.decentralized));
            let (pm, ps) = Spread::cells(r.prr);
            let _ = writeln!(s, "{},{},{cm},{cs},{dm},{ds},{pm},{ps}", r.variant, seeds.join(" "));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let head = ["variant", "seeds", "centralized win", "decentralized win", "PRR"];
        let mut rows: Vec<[String; 5]> = vec![head.map(String::from)];
        for r in &self.rows {
            rows.push([
                r.variant.to_string(),
                r.seeds.len().to_string(),
                Spread::text(Some(r.centralized)),
                Spread::text(Some(r.decentralized)),
                match r.prr {
                    Some(p) => match p.std {
                        Some(sd) => format!("{:.1}% ± {:.1}", 100.0 * p.mean, 100.0 * sd),
                        None => format!("{:.1}%", 100.0 * p.mean),
                    },
                    None => "N/A".into(),
                },
            ]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn find_eval_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_eval_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "eval.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn parse_eval_csv(path: &Path) -> Result<SeedResult> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| Error::Report(format!("{}: {m}", path.display()));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(EVAL_HEADER) {
        return Err(bad("unexpected header"));
    }
    let mut res: Option<SeedResult> = None;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("malformed row"));
        }
        let variant: Variant = f[0].parse().map_err(|_| bad("unknown variant"))?;
        let seed: u64 = f[1].parse().map_err(|_| bad("bad seed"))?;
        let win: f64 = f[3].parse().map_err(|_| bad("bad win rate"))?;
        let prr = if f[5] == "NA" { None } else { Some(f[5].parse().map_err(|_| bad("bad prr"))?) };
        let r = res.get_or_insert(SeedResult { variant, seed, centralized: f64::NAN, decentralized: f64::NAN, prr });
        match f[2] {
            "centralized" => r.centralized = win,
            "decentralized" => r.decentralized = win,
            _ => return Err(bad("unknown stage")),
        }
    }
    match res {
        Some(r) if r.centralized.is_finite() && r.decentralized.is_finite() => Ok(r),
        _ => Err(bad("incomplete results")),
    }
}

/// Aggregates seed results per variant (mean and population std).
pub fn summarize(results: &[SeedResult]) -> Vec<ReportRow> {
    let mut by: BTreeMap<Variant, Vec<&SeedResult>> = BTreeMap::new();
    for r in results {
        by.entry(r.variant).or_default().push(r);
    }
    by.into_iter()
        .map(|(variant, mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let c: Vec<f64> = rs.iter().map(|r| r.centralized).collect();
            let d: Vec<f64> = rs.iter().map(|r| r.decentralized).collect();
            let p: Vec<f64> = rs.iter().filter_map(|r| r.prr).collect();
            ReportRow {
                variant,
                seeds: rs.iter().map(|r| r.seed).collect(),
                centralized: Spread::of(&c).expect("non-empty"),
                decentralized: Spread::of(&d).expect("non-empty"),
                prr: Spread::of(&p),
            }
        })
        .collect()
}

/// Reads every `eval.csv` below `dirs` and builds the results table.
/// Seeds listed in a run's `config.json` but lacking results produce
/// warnings; finding no results at all is an error.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let mut files = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Error::Report(format!("{} is not a directory", d.display())));
        }
        find_eval_files(d, &mut files)?;
    }
    if files.is_empty() {
        let expected: Vec<String> =
            dirs.iter().map(|d| format!("{}/<variant>-<hash>/seed-<k>/eval.csv", d.display())).collect();
        return Err(Error::Report(format!("no evaluation results found; expected {}", expected.join(", "))));
    }
    let mut results = Vec::new();
    let mut warnings = Vec::new();
    let mut seen: BTreeSet<PathBuf> = BTreeSet::new();
    for f in &files {
        results.push(parse_eval_csv(f)?);
        if let Some(vdir) = f.parent().and_then(Path::parent) {
            seen.insert(vdir.to_path_buf());
        }
    }
    for vdir in seen {
        let Ok(cfg) = ExperimentConfig::load(&vdir.join("config.json")) else { continue };
        for s in &cfg.seeds {
            if !vdir.join(format!("seed-{s}")).join("eval.csv").exists() {
                warnings.push(format!("{}: seed {s} has no eval.csv", vdir.display()));
            }
        }
    }
    let rows = summarize(&results);
    for r in &rows {
        if r.seeds.len() < 2 {
            warnings.push(format!("{}: only {} seed(s); std not reported", r.variant, r.seeds.len()));
        }
    }
    warnings.iter().for_each(|w| warn!("{w}"));
    Ok(Report { rows, warnings })
}

/// Writes `report.csv` and `report.txt` into `out`.
pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("report.txt"), report.to_text())?;
    Ok(())
}
