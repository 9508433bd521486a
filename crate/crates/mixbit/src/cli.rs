//! Command-line orchestration of the search -> retrain -> deploy pipeline,
//! plus report emission (history/plan/distribution files) and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bindec;
use crate::costmodel::{self, format_mflops};
use crate::dataio::{self, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::network::{build_arch, retrain, MixedPrecNet, NetMode, RetrainConfig};
use crate::rng::Rng;
use crate::search::{
    sample_random_plan, select_plan, BitwidthSet, GumbelConfig, HistoryRow, NetworkPlan,
    SearchMode, SearchRunConfig,
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        n_per_class: usize,
        #[serde(default = "default_hw")]
        hw: usize,
    },
    Cifar10 {
        dir: String,
        #[serde(default)]
        normalize: bool,
        #[serde(default)]
        subset: Option<usize>,
    },
}

fn default_hw() -> usize {
    16
}

/// Run configuration. Unknown keys are rejected outright; a silently
/// misspelled hyperparameter is worse than a hard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub arch: String,
    #[serde(default = "default_bits")]
    pub bits: Vec<u32>,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub flops_target_mflops: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_retrain_epochs")]
    pub retrain_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_weights")]
    pub lr_weights: f64,
    #[serde(default = "default_lr_strengths")]
    pub lr_strengths: f64,
    #[serde(default = "default_lr_retrain")]
    pub lr_retrain: f64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_bits() -> Vec<u32> {
    vec![1, 2, 3, 4, 5]
}
fn default_mode() -> String {
    "det".to_string()
}
fn default_lambda() -> f64 {
    0.06
}
fn default_epochs() -> usize {
    40
}
fn default_retrain_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    64
}
fn default_lr_weights() -> f64 {
    0.01
}
fn default_lr_strengths() -> f64 {
    0.02
}
fn default_lr_retrain() -> f64 {
    0.04
}
fn default_tau_start() -> f64 {
    1.0
}
fn default_tau_end() -> f64 {
    0.4
}
fn default_out_dir() -> String {
    "out".to_string()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok((cfg, fnv1a64(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".to_string()));
        }
        if self.flops_target_mflops <= 0.0 {
            return Err(Error::Config("flops_target_mflops must be > 0".to_string()));
        }
        if self.mode != "det" && self.mode != "sto" {
            return Err(Error::Config(format!("mode must be det or sto, got {}", self.mode)));
        }
        BitwidthSet::new(self.bits.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if let DatasetSpec::Cifar10 { dir, .. } = &self.dataset {
            let d = Path::new(dir);
            for f in [
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
                "test_batch.bin",
            ] {
                if !d.join(f).exists() {
                    return Err(Error::Config(format!("missing dataset file {}", d.join(f).display())));
                }
            }
        }
        Ok(())
    }

    pub fn bitwidth_set(&self) -> BitwidthSet {
        BitwidthSet::new(self.bits.clone()).expect("validated")
    }

    pub fn search_mode(&self) -> SearchMode {
        if self.mode == "sto" {
            SearchMode::Stochastic
        } else {
            SearchMode::Deterministic
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, n_per_class, hw } => {
                dataio::gen_synthetic(*num_classes, *n_per_class, *hw, self.seed)
            }
            DatasetSpec::Cifar10 { dir, normalize, subset } => {
                dataio::load_cifar10(Path::new(dir), *normalize, *subset, self.seed)
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, .. } => *num_classes,
            DatasetSpec::Cifar10 { .. } => 10,
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanDoc {
    pub bits: Vec<u32>,
    pub layers: Vec<PlanRow>,
    #[serde(default)]
    pub strengths: Vec<StrengthPair>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: usize,
    pub b_w: u32,
    pub b_x: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrengthPair {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

impl PlanDoc {
    pub fn from_plan(plan: &NetworkPlan, bits: &BitwidthSet, strengths: &[(Vec<f64>, Vec<f64>)]) -> Self {
        Self {
            bits: bits.bits().to_vec(),
            layers: plan
                .pairs()
                .iter()
                .enumerate()
                .map(|(i, &(b_w, b_x))| PlanRow { layer: i, b_w, b_x })
                .collect(),
            strengths: strengths
                .iter()
                .map(|(r, s)| StrengthPair { r: r.clone(), s: s.clone() })
                .collect(),
        }
    }

    pub fn plan(&self) -> NetworkPlan {
        NetworkPlan::new(self.layers.iter().map(|row| (row.b_w, row.b_x)).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("plan serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read plan {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Writes history.csv, plan.json, and distribution.csv into `out_dir`.
pub fn emit_report(
    history: &[HistoryRow],
    plan: &NetworkPlan,
    bits: &BitwidthSet,
    strengths: &[(Vec<f64>, Vec<f64>)],
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("epoch,train_loss,valid_loss,valid_acc,expected_mflops,tau\n");
    for row in history {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{},{:.4}\n",
            row.epoch,
            row.train_loss,
            row.valid_loss,
            row.valid_acc,
            format_mflops(row.expected_mflops),
            row.tau
        ));
    }
    std::fs::write(out_dir.join("history.csv"), csv)?;

    PlanDoc::from_plan(plan, bits, strengths).write(&out_dir.join("plan.json"))?;

    let mut dist = String::from("layer,b_w,b_x\n");
    for (i, &(b_w, b_x)) in plan.pairs().iter().enumerate() {
        dist.push_str(&format!("{i},{b_w},{b_x}\n"));
    }
    std::fs::write(out_dir.join("distribution.csv"), dist)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    bits: Vec<u32>,
}

fn write_manifest(out_dir: &Path, command: &str, seed: u64, config_hash: u64, bits: &[u32]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: format!("{config_hash:016x}"),
        bits: bits.to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn write_predictions(path: &Path, indices: &[usize], labels: &[usize], preds: &[usize]) -> Result<()> {
    let mut csv = String::from("index,label,predicted\n");
    for ((i, l), p) in indices.iter().zip(labels).zip(preds) {
        csv.push_str(&format!("{i},{l},{p}\n"));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// argument parsing
// ---------------------------------------------------------------------------

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(Error::Config(format!("unexpected argument '{arg}'")));
            };
            if !allowed.contains(&name) {
                return Err(Error::Config(format!("unknown flag --{name}")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?;
            values.insert(name.to_string(), value.clone());
            i += 2;
        }
        Ok(Self { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("flag --{name}: cannot parse '{v}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

const USAGE: &str = "usage: mixbit <search|select|retrain|eval|export-bd|infer-bd|flops|random-plan|bench|gradcheck> [flags]";

pub fn dispatch(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        return Err(Error::Config(USAGE.to_string()));
    };
    let rest = &args[1..];
    match command.as_str() {
        "search" => cmd_search(rest),
        "select" => cmd_select(rest),
        "retrain" => cmd_retrain(rest),
        "eval" => cmd_eval(rest),
        "export-bd" => cmd_export_bd(rest),
        "infer-bd" => cmd_infer_bd(rest),
        "flops" => cmd_flops(rest),
        "random-plan" => cmd_random_plan(rest),
        "bench" => cmd_bench(rest),
        "gradcheck" => cmd_gradcheck(rest),
        other => Err(Error::Config(format!("unknown subcommand '{other}'\n{USAGE}"))),
    }
}

fn out_dir_of(flags: &Flags, cfg: &RunConfig) -> PathBuf {
    PathBuf::from(flags.get("out").unwrap_or(&cfg.out_dir))
}

fn eval_split_of(ds: &Dataset) -> &'static str {
    if ds.has_split("test") {
        "test"
    } else {
        "valid"
    }
}

fn cmd_search(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "out", "init"])?;
    let (cfg, hash) = RunConfig::load(Path::new(flags.require("config")?))?;
    let out = out_dir_of(&flags, &cfg);
    write_manifest(&out, "search", cfg.seed, hash, &cfg.bits)?;

    let dataset = cfg.build_dataset()?;
    let mut net = match flags.get("init") {
        Some(stem) => MixedPrecNet::load_checkpoint(Path::new(stem))?,
        None => build_arch(&cfg.arch, cfg.num_classes(), cfg.bitwidth_set(), cfg.seed)?,
    };
    net.mode = match cfg.search_mode() {
        SearchMode::Deterministic => NetMode::SearchDet,
        SearchMode::Stochastic => NetMode::SearchSto,
    };

    let run_cfg = SearchRunConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_weights: cfg.lr_weights,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_strengths: cfg.lr_strengths,
        lambda: cfg.lambda,
        flops_target_mflops: cfg.flops_target_mflops,
        mode: cfg.search_mode(),
        gumbel: GumbelConfig {
            tau_start: cfg.tau_start,
            tau_end: cfg.tau_end,
            rng_seed: cfg.seed,
        },
        seed: cfg.seed,
    };
    let outcome = crate::search::run_search(&mut net, &dataset, &run_cfg)?;

    emit_report(
        &outcome.history,
        &outcome.plan,
        net.bits(),
        &outcome.best_strengths,
        &out,
    )?;
    let strengths_doc = PlanDoc::from_plan(&outcome.plan, net.bits(), &outcome.best_strengths);
    strengths_doc.write(&out.join("strengths.json"))?;
    net.set_strengths(&outcome.best_strengths)?;
    net.save_checkpoint(&out.join("search_model"))?;

    let costs = net.layer_costs();
    let plan_mflops = costmodel::to_mflops(costmodel::network_flops(&outcome.plan, &costs)?);
    println!(
        "search done: best epoch {} (valid acc {:.4}), plan {:?}, {} MFLOPs (target {})",
        outcome.best_epoch,
        outcome.best_valid_acc,
        outcome.plan.pairs(),
        format_mflops(plan_mflops),
        format_mflops(cfg.flops_target_mflops),
    );
    Ok(())
}

fn cmd_select(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["from", "out"])?;
    let from = PathBuf::from(flags.require("from")?);
    let out = PathBuf::from(flags.get("out").unwrap_or(flags.require("from")?));
    let doc = PlanDoc::read(&from.join("strengths.json"))?;
    let bits = BitwidthSet::new(doc.bits.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let strengths: Vec<(Vec<f64>, Vec<f64>)> = doc
        .strengths
        .iter()
        .map(|p| (p.r.clone(), p.s.clone()))
        .collect();
    let plan = select_plan(&strengths, &bits);
    std::fs::create_dir_all(&out)?;
    PlanDoc::from_plan(&plan, &bits, &strengths).write(&out.join("plan.json"))?;
    let mut dist = String::from("layer,b_w,b_x\n");
    for (i, &(b_w, b_x)) in plan.pairs().iter().enumerate() {
        dist.push_str(&format!("{i},{b_w},{b_x}\n"));
    }
    std::fs::write(out.join("distribution.csv"), dist)?;
    println!("selected plan {:?}", plan.pairs());
    Ok(())
}

fn cmd_retrain(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "plan", "out", "init", "no-augment"])?;
    let (cfg, hash) = RunConfig::load(Path::new(flags.require("config")?))?;
    let out = out_dir_of(&flags, &cfg);
    write_manifest(&out, "retrain", cfg.seed, hash, &cfg.bits)?;

    let plan = PlanDoc::read(Path::new(flags.require("plan")?))?.plan();
    let dataset = cfg.build_dataset()?;
    let mut net = match flags.get("init") {
        Some(stem) => MixedPrecNet::load_checkpoint(Path::new(stem))?,
        None => build_arch(&cfg.arch, cfg.num_classes(), cfg.bitwidth_set(), cfg.seed)?,
    };
    let rcfg = RetrainConfig {
        epochs: cfg.retrain_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr_retrain,
        momentum: 0.9,
        weight_decay_high: 5e-4,
        weight_decay_low: 1e-4,
        augment: flags.get("no-augment").is_none(),
        seed: cfg.seed,
    };
    let metrics = retrain(&mut net, &dataset, &plan, &rcfg)?;
    net.save_checkpoint(&out.join("model"))?;
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?;
    std::fs::write(out.join("metrics.json"), json)?;
    println!(
        "retrain done: train acc {:.4}, {} acc {:.4}",
        metrics.train_acc, metrics.eval_split, metrics.eval_acc
    );
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "model", "out"])?;
    let (cfg, _) = RunConfig::load(Path::new(flags.require("config")?))?;
    let out = out_dir_of(&flags, &cfg);
    std::fs::create_dir_all(&out)?;
    let dataset = cfg.build_dataset()?;
    let mut net = MixedPrecNet::load_checkpoint(Path::new(flags.require("model")?))?;
    let split = eval_split_of(&dataset);
    let indices = dataset.split(split)?.to_vec();
    let mut preds = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let batch = dataset.gather(chunk)?;
        preds.extend(net.predict(&batch.images)?);
        labels.extend(batch.labels);
    }
    write_predictions(&out.join("predictions.csv"), &indices, &labels, &preds)?;
    let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64
        / preds.len().max(1) as f64;
    println!("eval: {split} accuracy {acc:.4} over {} samples", preds.len());
    Ok(())
}

fn cmd_export_bd(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["model", "out"])?;
    let net = MixedPrecNet::load_checkpoint(Path::new(flags.require("model")?))?;
    let model = bindec::export_bd_model(&net)?;
    let out = PathBuf::from(flags.require("out")?);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    bindec::save_bd_model(&model, &out)?;
    let plane_bytes: usize = model.layers.iter().map(|l| l.plane_bytes()).sum();
    println!(
        "exported {} BD layers, {} plane bytes -> {}",
        model.layers.len(),
        plane_bytes,
        out.display()
    );
    Ok(())
}

fn cmd_infer_bd(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "model", "bd", "out"])?;
    let (cfg, _) = RunConfig::load(Path::new(flags.require("config")?))?;
    let out = out_dir_of(&flags, &cfg);
    std::fs::create_dir_all(&out)?;
    let dataset = cfg.build_dataset()?;
    let mut net = MixedPrecNet::load_checkpoint(Path::new(flags.require("model")?))?;
    let bd = bindec::load_bd_model(Path::new(flags.require("bd")?))?;
    let split = eval_split_of(&dataset);
    let indices = dataset.split(split)?.to_vec();
    let mut preds = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let batch = dataset.gather(chunk)?;
        let logits = bindec::bd_infer(&mut net, &bd, &batch.images)?;
        preds.extend(crate::network::argmax_rows(&logits));
        labels.extend(batch.labels);
    }
    write_predictions(&out.join("predictions_bd.csv"), &indices, &labels, &preds)?;
    let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64
        / preds.len().max(1) as f64;
    println!("infer-bd: {split} accuracy {acc:.4} over {} samples", preds.len());
    Ok(())
}

fn parse_plan_spec(spec: &str, quantized_layers: usize) -> Result<NetworkPlan> {
    if let Some(bits) = spec.strip_prefix("uniform:") {
        let b: u32 = bits
            .parse()
            .map_err(|_| Error::Config(format!("bad uniform plan '{spec}'")))?;
        return Ok(NetworkPlan::uniform(b, quantized_layers));
    }
    if spec == "fp32" {
        return Ok(NetworkPlan::uniform(NetworkPlan::BYPASS_BITS, quantized_layers));
    }
    Ok(PlanDoc::read(Path::new(spec))?.plan())
}

fn cmd_flops(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["arch", "plan", "classes", "out"])?;
    let arch = flags.require("arch")?;
    let classes: usize = flags.parse_num("classes", 10)?;
    let net = build_arch(arch, classes, BitwidthSet::default(), 0)?;
    let costs = net.layer_costs();
    let plan = parse_plan_spec(flags.require("plan")?, net.quantized_layer_count())?;
    let total = costmodel::network_flops(&plan, &costs)?;
    println!("{arch} plan {:?}: {} MFLOPs", plan.pairs(), format_mflops(costmodel::to_mflops(total)));

    if let Some(out) = flags.get("out") {
        let out = PathBuf::from(out);
        std::fs::create_dir_all(&out)?;
        let mut csv = String::from("layer,quantized,macs,mflops\n");
        let mut qidx = 0usize;
        for (i, c) in costs.iter().enumerate() {
            let f = if c.quantized {
                let (bw, bx) = plan.pair(qidx);
                qidx += 1;
                if bw >= NetworkPlan::BYPASS_BITS || bx >= NetworkPlan::BYPASS_BITS {
                    c.macs
                } else {
                    costmodel::flop_pair(c.macs, true, bw as f64, bx as f64)
                }
            } else {
                c.macs
            };
            csv.push_str(&format!(
                "{i},{},{},{}\n",
                c.quantized,
                c.macs,
                format_mflops(costmodel::to_mflops(f))
            ));
        }
        csv.push_str(&format!(
            "total,,,{}\n",
            format_mflops(costmodel::to_mflops(total))
        ));
        std::fs::write(out.join("cost.csv"), csv)?;
    }
    Ok(())
}

fn cmd_random_plan(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["config", "lo", "hi", "seed", "out"])?;
    let (cfg, hash) = RunConfig::load(Path::new(flags.require("config")?))?;
    let lo: f64 = flags
        .require("lo")?
        .parse()
        .map_err(|_| Error::Config("bad --lo".to_string()))?;
    let hi: f64 = flags
        .require("hi")?
        .parse()
        .map_err(|_| Error::Config("bad --hi".to_string()))?;
    let seed: u64 = flags.parse_num("seed", cfg.seed)?;
    let out = out_dir_of(&flags, &cfg);
    write_manifest(&out, "random-plan", seed, hash, &cfg.bits)?;

    let net = build_arch(&cfg.arch, cfg.num_classes(), cfg.bitwidth_set(), cfg.seed)?;
    let costs = net.layer_costs();
    let mut rng = Rng::new(seed);
    let plan = sample_random_plan(&costs, net.bits(), (lo * 1e6, hi * 1e6), &mut rng)?;
    PlanDoc::from_plan(&plan, net.bits(), &[]).write(&out.join("plan.json"))?;
    let mflops = costmodel::to_mflops(costmodel::network_flops(&plan, &costs)?);
    println!("random plan {:?}: {} MFLOPs", plan.pairs(), format_mflops(mflops));
    Ok(())
}

fn cmd_bench(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["m", "k", "ci", "co", "kernel", "hw", "stride", "pad", "reps"])?;
    let m: u32 = flags.parse_num("m", 1)?;
    let k: u32 = flags.parse_num("k", 1)?;
    let ci: usize = flags.parse_num("ci", 64)?;
    let co: usize = flags.parse_num("co", 64)?;
    let kernel: usize = flags.parse_num("kernel", 3)?;
    let hw: usize = flags.parse_num("hw", 56)?;
    let stride: usize = flags.parse_num("stride", 1)?;
    let pad: usize = flags.parse_num("pad", 1)?;
    let reps: usize = flags.parse_num("reps", 30)?;
    let r = bindec::bench_kernel(ci, co, kernel, hw, hw, stride, pad, m, k, reps)?;
    println!(
        "W{m}-A{k} {ci}->{co} {kernel}x{kernel} @{hw}x{hw}: {:.0} ns/call, {} AND word-ops, {} shift-adds",
        r.ns_per_call, r.and_word_ops, r.shift_adds
    );
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["coords", "seed"])?;
    let coords: usize = flags.parse_num("coords", 25)?;
    let seed: u64 = flags.parse_num("seed", 0)?;
    let det = gradcheck::check_search_gradients(gradcheck::CheckMode::Deterministic, coords, seed)?;
    println!(
        "deterministic: max rel err r {:.3e} ({} coords), s {:.3e} ({}), alpha {:.3e} ({})",
        det.max_err_r, det.coords_r, det.max_err_s, det.coords_s, det.max_err_alpha, det.coords_alpha
    );
    let sto =
        gradcheck::check_search_gradients(gradcheck::CheckMode::FrozenStochastic, coords, seed + 1)?;
    println!(
        "frozen stochastic: max rel err r {:.3e} ({} coords), s {:.3e} ({}), alpha {:.3e} ({})",
        sto.max_err_r, sto.coords_r, sto.max_err_s, sto.coords_s, sto.max_err_alpha, sto.coords_alpha
    );
    let w_err = gradcheck::check_meta_weight_gradient(seed + 2)?;
    println!("meta weight: max rel err {w_err:.3e}");
    let worst = det.worst().max(sto.worst()).max(w_err);
    if worst > 1e-4 {
        return Err(Error::Numeric(format!("gradient check failed: max rel err {worst:.3e}")));
    }
    println!("gradcheck passed (worst {worst:.3e} <= 1e-4)");
    Ok(())
}
