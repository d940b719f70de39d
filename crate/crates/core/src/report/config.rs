use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::Grouping;
use crate::discriminability::{DEFAULT_ALPHA, DEFAULT_BINS, DEFAULT_TOP_N};
use crate::error::{Error, Result};
use crate::parallel::{available_workers, effective_workers};

/// Settings shared by every command. Built from defaults, then an optional
/// config file, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Defaults to the model's own target layer.
    pub target_layer: Option<String>,
    pub bins: usize,
    pub alpha: f64,
    pub top_n: usize,
    /// Images listed per unit in `top_examples.json`.
    pub top_examples: usize,
    pub output: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub grouping: Grouping,
    pub images_per_brand: usize,
    pub image_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            manifest: None,
            annotations: None,
            target_layer: None,
            bins: DEFAULT_BINS,
            alpha: DEFAULT_ALPHA,
            top_n: DEFAULT_TOP_N,
            top_examples: 5,
            output: PathBuf::from("out"),
            seed: 0,
            workers: available_workers(),
            grouping: Grouping::GroundTruth,
            images_per_brand: 300,
            image_size: 64,
        }
    }
}

/// Keys accepted in config files.
pub const CONFIG_KEYS: [&str; 14] = [
    "model",
    "manifest",
    "annotations",
    "target_layer",
    "bins",
    "alpha",
    "top_n",
    "top_examples",
    "output",
    "seed",
    "workers",
    "grouping",
    "images_per_brand",
    "image_size",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "model" => self.model = Some(value.into()),
            "manifest" => self.manifest = Some(value.into()),
            "annotations" => self.annotations = Some(value.into()),
            "target_layer" => self.target_layer = Some(value.into()),
            "bins" => self.bins = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "top_n" => self.top_n = parse(&key, value)?,
            "top_examples" => self.top_examples = parse(&key, value)?,
            "output" => self.output = value.into(),
            "seed" => self.seed = parse(&key, value)?,
            "workers" => self.workers = parse(&key, value)?,
            "grouping" => self.grouping = value.parse()?,
            "images_per_brand" => self.images_per_brand = parse(&key, value)?,
            "image_size" => self.image_size = parse(&key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` pair of a config file.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        for (k, v) in read_config_file(path)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Checks numeric ranges. Paths are checked when a command needs them.
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be at least 2, got {}", self.bins)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.top_n < 1 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if self.workers < 1 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Worker count after the environment cap.
    pub fn worker_count(&self) -> usize {
        effective_workers(self.workers)
    }

    pub fn model_path(&self) -> Result<&Path> {
        existing("model", self.model.as_deref())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        existing("manifest", self.manifest.as_deref())
    }

    pub fn annotations_path(&self) -> Result<Option<&Path>> {
        match &self.annotations {
            Some(p) => existing("annotations", Some(p)).map(Some),
            None => Ok(None),
        }
    }
}

fn existing<'a>(what: &str, path: Option<&'a Path>) -> Result<&'a Path> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} path given")))?;
    if !path.exists() {
        return Err(Error::Config(format!("{what} file `{}` does not exist", path.display())));
    }
    Ok(path)
}

/// Reads a flat TOML table, or plain `key = value` lines when the file is not
/// valid TOML. Blank lines, `#`/`;` comments and `[section]` lines are skipped.
pub fn read_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(table) = text.parse::<toml::Table>() {
        return table
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    toml::Value::String(s) => s,
                    toml::Value::Integer(i) => i.to_string(),
                    toml::Value::Float(f) => f.to_string(),
                    toml::Value::Boolean(b) => b.to_string(),
                    other => {
                        return Err(Error::Config(format!(
                            "{}: `{k}` must be a scalar, found {}",
                            path.display(),
                            other.type_str()
                        )))
                    }
                };
                Ok((k, v))
            })
            .collect();
    }
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_plain_files_agree() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.conf");
        fs::write(&a, "model = \"m.ebn\"\nbins = 16\nalpha = 0.001\n").unwrap();
        fs::write(&b, "# settings\n[run]\nmodel = m.ebn\nbins=16\nalpha = 0.001\n").unwrap();
        let mut ca = RunConfig::default();
        ca.apply_file(&a).unwrap();
        let mut cb = RunConfig::default();
        cb.apply_file(&b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.bins, 16);
        assert_eq!(ca.model, Some(PathBuf::from("m.ebn")));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("bins", "many"), Err(Error::Config(_))));
        assert!(matches!(c.set("colour", "red"), Err(Error::Config(_))));
        c.set("top-n", "0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.bins = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_paths_are_reported() {
        let mut c = RunConfig::default();
        assert!(c.model_path().is_err());
        c.model = Some("/nonexistent/model.ebn".into());
        let err = c.model_path().unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }
}
