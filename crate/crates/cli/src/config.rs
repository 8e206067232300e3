//! Run configuration: a flat `key = value` file with `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use jr2net::training::TrainConfig;
use jr2net::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    /// Set when the file names a seed; the command line may still override it.
    pub seed: Option<u64>,
}

const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "patch_size",
    "patches_per_image",
    "transmittance",
    "learning_rate",
    "lambda_ae",
    "noise_snr_db",
    "seed",
    "validate_every",
    "checkpoint_every",
    "dataset_dir",
    "output_dir",
    "checkpoint_dir",
    "bands",
    "features",
    "stages",
    "hidden_layers",
    "width",
    "prior_width",
    "admmnet",
    "mu_init",
    "rho_init",
];

/// Splits the text into key/value pairs; syntax problems go to `errors`.
fn entries(text: &str, errors: &mut Vec<String>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected 'key = value'", n + 1));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            errors.push(format!("line {}: unknown key '{k}'", n + 1));
        } else if out.insert(k.to_string(), v.to_string()).is_some() {
            errors.push(format!("line {}: duplicate key '{k}'", n + 1));
        }
    }
    out
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
    errors: &'a mut Vec<String>,
}

impl Reader<'_> {
    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let raw = self.map.get(key)?;
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{key}: cannot parse '{raw}'"));
                None
            }
        }
    }

    fn set<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) {
        if let Some(v) = self.get(key) {
            *slot = v;
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let map = entries(text, &mut errors);
        let mut r = Reader { map: &map, errors: &mut errors };
        let mut train = TrainConfig::desk();
        let bands = r.get("bands").unwrap_or(8);
        let mut model = ModelConfig::desk(bands);
        r.set("epochs", &mut train.epochs);
        r.set("batch_size", &mut train.batch_size);
        r.set("patch_size", &mut train.patch_size);
        r.set("patches_per_image", &mut train.patches_per_image);
        r.set("transmittance", &mut train.transmittance);
        r.set("learning_rate", &mut train.learning_rate);
        r.set("lambda_ae", &mut train.lambda_ae);
        r.set("validate_every", &mut train.validate_every);
        r.set("checkpoint_every", &mut train.checkpoint_every);
        train.noise_snr_db = r.get("noise_snr_db");
        let seed = r.get("seed");
        r.set("features", &mut model.features);
        r.set("stages", &mut model.stages);
        r.set("hidden_layers", &mut model.hidden_layers);
        r.set("width", &mut model.width);
        r.set("prior_width", &mut model.prior_width);
        r.set("admmnet", &mut model.admmnet);
        r.set("mu_init", &mut model.mu_init);
        r.set("rho_init", &mut model.rho_init);
        let dataset_dir = map.get("dataset_dir").map(PathBuf::from).unwrap_or_default();
        let output_dir = map.get("output_dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("run"));
        let checkpoint_dir = map.get("checkpoint_dir").map(PathBuf::from);
        if !map.contains_key("features") && model.admmnet {
            model.features = model.bands;
        }
        let cfg = RunConfig { train, model, dataset_dir, output_dir, checkpoint_dir, seed };
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
        Self::parse(&text)
    }

    /// Every constraint violated by the current values.
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.train.violations();
        if let Err(e) = self.model.validate() {
            out.push(e.to_string());
        }
        if self.dataset_dir.as_os_str().is_empty() {
            out.push("dataset_dir is required".into());
        }
        out
    }
}
