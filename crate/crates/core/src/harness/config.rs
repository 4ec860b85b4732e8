//! Experiment configuration: a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key may appear at most
//! once; unknown keys are rejected with their line number so typos do not
//! silently fall back to defaults. Lists are comma-separated.
//!
//! ```text
//! task = appendix_c
//! depth = 4
//! seeds = 0, 1, 2, 3, 4
//! gamma = 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{file_error, GrodError, Result};
use crate::postprocess::ScorerKind;
use crate::synthdata::{APPENDIX_C_TEST_PER_COMPONENT, APPENDIX_C_TRAIN_PER_COMPONENT};
use crate::transformer::{Budget, ModelShape};

use super::train::{OptimizerKind, Selection, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Two-class 2-D Gaussian mixture through the full transformer.
    AppendixC,
    /// Cross-entropy-only training over a range of depths.
    CapacitySweep,
    /// Externally supplied features; only the classifier head is trained.
    Ingest,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "appendix_c" => Ok(Task::AppendixC),
            "capacity_sweep" => Ok(Task::CapacitySweep),
            "ingest" => Ok(Task::Ingest),
            other => Err(format!("unknown task '{other}' (appendix_c, capacity_sweep, ingest)")),
        }
    }
}

/// Sizes of the synthetic feature set written by `gen-data` for ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Minimum distance between cluster centres (unit-variance clusters).
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub d_hat0: usize,
    pub tau: usize,
    pub depth: usize,
    pub budget: Budget,
    /// Depths visited by the capacity sweep.
    pub depths: Vec<usize>,
}

impl ModelSettings {
    pub fn shape(&self, depth: usize, classes: usize) -> ModelShape {
        ModelShape { d_hat0: self.d_hat0, tau: self.tau, depth, budget: self.budget, outputs: classes + 1 }
    }
}

/// Optional cross-entropy stage run before the main (GROD) stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    /// 0 disables the stage.
    pub epochs: usize,
    pub lr: f64,
}

/// File locations as written in the config; relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSettings {
    pub train_file: Option<String>,
    pub test_file: Option<String>,
    pub ood_files: Vec<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub train_per_component: usize,
    pub test_per_component: usize,
    pub gen: GenSettings,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub train: TrainSettings,
    pub scorer: ScorerKind,
    pub paths: PathSettings,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::AppendixC,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            train_per_component: APPENDIX_C_TRAIN_PER_COMPONENT,
            test_per_component: APPENDIX_C_TEST_PER_COMPONENT,
            gen: GenSettings { classes: 4, dim: 64, train_per_class: 500, test_per_class: 250, separation: 6.0 },
            model: ModelSettings {
                d_hat0: 2,
                tau: 1,
                depth: 2,
                budget: Budget { d_hat: 2, heads: 2, m_h: 1, m_v: 1, r: 4 },
                depths: vec![1, 2, 3, 4, 5, 6, 8, 10, 12, 16],
            },
            pretrain: PretrainSettings { epochs: 0, lr: 1e-2 },
            train: TrainSettings::default(),
            scorer: ScorerKind::Msp,
            paths: PathSettings::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> GrodError {
    GrodError::Config { line, msg: msg.into() }
}

/// Raw entries keyed by name, remembering the line each came from.
struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("expected key = value, found '{content}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(config_err(line, "empty key"));
            }
            if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
                return Err(config_err(line, format!("duplicate key '{k}' (first set on line {first})")));
            }
        }
        Ok(Entries(map))
    }

    fn take<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some((line, v)) = self.0.remove(key) {
            *slot = v.parse().map_err(|e| config_err(line, format!("{key}: {e}")))?;
        }
        Ok(())
    }

    fn take_opt<V: FromStr>(&mut self, key: &str, slot: &mut Option<V>) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some((line, v)) = self.0.remove(key) {
            *slot = match v.as_str() {
                "" | "auto" | "none" => None,
                s => Some(s.parse().map_err(|e| config_err(line, format!("{key}: {e}")))?),
            };
        }
        Ok(())
    }

    fn take_list<V: FromStr>(&mut self, key: &str, slot: &mut Vec<V>) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some((line, v)) = self.0.remove(key) {
            *slot = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| config_err(line, format!("{key}: '{s}': {e}"))))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((k, (line, _))) => Err(config_err(line, format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

/// Wraps `FromStr` impls whose error type is not `Display` friendly.
struct Parsed<V>(V);

impl FromStr for Parsed<OptimizerKind> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adamw" => Ok(Parsed(OptimizerKind::Adamw)),
            "sgd" => Ok(Parsed(OptimizerKind::Sgd)),
            other => Err(format!("unknown optimizer '{other}' (adamw, sgd)")),
        }
    }
}

impl FromStr for Parsed<Selection> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val_auroc" => Ok(Parsed(Selection::ValAuroc)),
            "val_acc" => Ok(Parsed(Selection::ValAcc)),
            "last" => Ok(Parsed(Selection::Last)),
            other => Err(format!("unknown selection '{other}' (val_auroc, val_acc, last)")),
        }
    }
}

impl FromStr for Parsed<ScorerKind> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.parse().map(Parsed).map_err(|e: GrodError| e.to_string())
    }
}

fn take_wrapped<V>(e: &mut Entries, key: &str, slot: &mut V) -> Result<()>
where
    Parsed<V>: FromStr,
    <Parsed<V> as FromStr>::Err: Display,
{
    let mut tmp: Option<Parsed<V>> = None;
    e.take_opt(key, &mut tmp)?;
    if let Some(Parsed(v)) = tmp {
        *slot = v;
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse config text; relative paths will resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let mut c = ExperimentConfig { base_dir: base_dir.to_path_buf(), ..Default::default() };
        e.take("task", &mut c.task)?;
        e.take("seed", &mut c.seed)?;
        e.take_list("seeds", &mut c.seeds)?;
        e.take("train_per_component", &mut c.train_per_component)?;
        e.take("test_per_component", &mut c.test_per_component)?;

        let g = &mut c.gen;
        e.take("gen_classes", &mut g.classes)?;
        e.take("gen_dim", &mut g.dim)?;
        e.take("gen_train_per_class", &mut g.train_per_class)?;
        e.take("gen_test_per_class", &mut g.test_per_class)?;
        e.take("gen_separation", &mut g.separation)?;

        let m = &mut c.model;
        e.take("d_hat0", &mut m.d_hat0)?;
        e.take("tau", &mut m.tau)?;
        e.take("depth", &mut m.depth)?;
        e.take("d_hat", &mut m.budget.d_hat)?;
        e.take("heads", &mut m.budget.heads)?;
        e.take("m_h", &mut m.budget.m_h)?;
        e.take("m_v", &mut m.budget.m_v)?;
        e.take("r", &mut m.budget.r)?;
        e.take_list("depths", &mut m.depths)?;

        e.take("pretrain_epochs", &mut c.pretrain.epochs)?;
        e.take("pretrain_lr", &mut c.pretrain.lr)?;

        let t = &mut c.train;
        e.take("epochs", &mut t.epochs)?;
        e.take("batch_size", &mut t.batch_size)?;
        e.take("lr", &mut t.lr)?;
        e.take("weight_decay", &mut t.weight_decay)?;
        take_wrapped(&mut e, "optimizer", &mut t.optimizer)?;
        e.take("use_grod", &mut t.use_grod)?;
        e.take("head_only", &mut t.head_only)?;
        e.take("val_fraction", &mut t.val_fraction)?;
        take_wrapped(&mut e, "selection", &mut t.selection)?;

        let gr = &mut t.grod;
        e.take("a", &mut gr.a)?;
        e.take("gamma", &mut gr.gamma)?;
        e.take("gamma_opt", &mut gr.gamma_opt)?;
        e.take_opt("num", &mut gr.num)?;
        e.take("warmup_batches", &mut gr.warmup_batches)?;
        e.take("lambda", &mut gr.lambda_filter)?;
        e.take("lambda_adapt", &mut gr.lambda_adapt)?;
        e.take("eps", &mut gr.eps)?;
        e.take("eps0", &mut gr.eps0)?;
        e.take_opt("pca_axes", &mut gr.pca_axes)?;
        e.take_opt("lda_axes", &mut gr.lda_axes)?;

        take_wrapped(&mut e, "scorer", &mut c.scorer)?;

        let p = &mut c.paths;
        e.take_opt("train_file", &mut p.train_file)?;
        e.take_opt("test_file", &mut p.test_file)?;
        e.take_list("ood_files", &mut p.ood_files)?;
        e.take_opt("checkpoint", &mut p.checkpoint)?;
        e.finish()?;

        // ingestion trains the head over fixed features
        if c.task == Task::Ingest {
            c.train.head_only = true;
        }
        // line 0: the settings are individually valid but not together
        c.validate().map_err(|err| match err {
            GrodError::InvalidArgument(msg) => config_err(0, msg),
            other => other,
        })?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(file_error(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.budget.validate()?;
        let bad = |m: &str| Err(GrodError::InvalidArgument(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.pretrain.epochs > 0 && !(self.pretrain.lr > 0.0) {
            return bad("pretrain_lr must be > 0");
        }
        match self.task {
            Task::AppendixC | Task::CapacitySweep => {
                if self.model.d_hat0 * self.model.tau != 2 {
                    return bad("the 2-D mixture needs d_hat0 · tau = 2");
                }
                if self.train_per_component < 2 || self.test_per_component < 1 {
                    return bad("train_per_component must be ≥ 2 and test_per_component ≥ 1");
                }
                if self.task == Task::CapacitySweep && self.model.depths.is_empty() {
                    return bad("depths must not be empty");
                }
            }
            Task::Ingest => {
                let g = &self.gen;
                if g.classes < 2 || g.dim < 2 || g.classes + 1 > 2 * g.dim {
                    return bad("gen_classes must be ≥ 2 and gen_classes + 1 ≤ 2 · gen_dim");
                }
                if g.train_per_class < 2 || g.test_per_class < 1 || !(g.separation >= 0.0) {
                    return bad("gen sizes must be positive and gen_separation ≥ 0");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every setting except the seed,
    /// so runs of one experiment at different seeds share a hash.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(&ExperimentConfig { seed: 0, ..self.clone() })
            .expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    /// `configured` resolved against the config directory, or `out/default`.
    pub fn resolve(&self, configured: Option<&str>, out: &Path, default: &str) -> PathBuf {
        match configured {
            Some(p) if Path::new(p).is_absolute() => PathBuf::from(p),
            Some(p) => self.base_dir.join(p),
            None => out.join(default),
        }
    }

    /// OOD evaluation files with their report names (file stems).
    pub fn ood_paths(&self, out: &Path) -> Vec<(String, PathBuf)> {
        if self.paths.ood_files.is_empty() {
            return vec![("ood".into(), out.join("ood.csv"))];
        }
        self.paths
            .ood_files
            .iter()
            .map(|f| {
                let path = self.resolve(Some(f), out, "");
                let name = path.file_stem().map_or_else(|| f.clone(), |s| s.to_string_lossy().into_owned());
                (name, path)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("").unwrap();
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.grod.a, 0.1);

        let c = parse(
            "# comment\ntask = capacity_sweep\n\ndepths = 1, 2,4\nseeds=3,4 # trailing\nnum = 16\n\
             pca_axes = auto\nselection = last\noptimizer = sgd\nscorer = vim\nlambda = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.task, Task::CapacitySweep);
        assert_eq!(c.model.depths, vec![1, 2, 4]);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.train.grod.num, Some(16));
        assert_eq!(c.train.grod.pca_axes, None);
        assert_eq!(c.train.selection, Selection::Last);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.scorer, ScorerKind::Vim);
        assert_eq!(c.train.grod.lambda_filter, 0.2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("epochs = 3\nepochs = 4\n", 2),
            ("lr = 0.1\nbogus = 1\n", 2),
            ("\n\nbatch_size = many\n", 3),
            ("no equals sign\n", 1),
            ("scorer = odin\n", 1),
            ("seeds = 1, x\n", 1),
        ];
        for (text, line) in cases {
            let err = parse(text).unwrap_err();
            assert_eq!(err.line(), Some(line), "{text:?}: {err}");
            assert_eq!(err.exit_code(), 4);
        }
        assert!(matches!(parse("task = ingest\nbatch_size = 1\n"), Err(GrodError::Config { line: 0, .. })));
        assert!(parse("epochs = 0\n").is_err());
        assert!(parse("d_hat0 = 3\n").is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = parse("seed = 1\n").unwrap();
        let b = parse("seed = 2\n").unwrap();
        let c = parse("gamma = 0.2\n").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let c = parse("train_file = data/t.csv\nood_files = a.csv, /abs/b.csv\n").unwrap();
        let out = Path::new("/out");
        assert_eq!(c.resolve(c.paths.train_file.as_deref(), out, "train.csv"), Path::new("/cfg/data/t.csv"));
        assert_eq!(c.resolve(None, out, "test.csv"), Path::new("/out/test.csv"));
        let ood = c.ood_paths(out);
        assert_eq!(ood[0], ("a".to_string(), PathBuf::from("/cfg/a.csv")));
        assert_eq!(ood[1], ("b".to_string(), PathBuf::from("/abs/b.csv")));
    }

    #[test]
    fn ingest_forces_head_only() {
        let c = parse("task = ingest\n").unwrap();
        assert!(c.train.head_only);
    }
}
