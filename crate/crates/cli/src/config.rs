use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use riskflow::ensemble::{LazyEnsemble, PathEnsemble, PathSource};
use riskflow::market::{model_from_json, MarketModel};
use riskflow::make_time_grid;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::CommonArgs;

pub const BUILD_ID: &str = concat!("riskflow-", env!("CARGO_PKG_VERSION"));

/// Ensembles up to this many stored doubles are kept in memory.
const MATERIALIZE_LIMIT: usize = 40_000_000;

/// Parsed config file plus the directory relative paths resolve against.
pub struct Config {
    pub value: Value,
    pub dir: PathBuf,
    pub header: Vec<(String, String)>,
}

impl Config {
    pub fn load(command: &str, path: Option<&Path>) -> Result<Self> {
        let (value, dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                let v: Value =
                    serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", p.display()))?;
                if !v.is_object() {
                    bail!(riskflow::Error::InvalidArgument("config must be a JSON object".into()));
                }
                (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Value::Object(Default::default()), PathBuf::from(".")),
        };
        let header = vec![("build".to_string(), BUILD_ID.to_string()), ("command".to_string(), command.to_string())];
        Ok(Self { value, dir, header })
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    /// Reads `key`, falling back to `default`; the effective value goes to the header.
    pub fn get<T: DeserializeOwned + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        let v = match self.value.get(key) {
            None | Some(Value::Null) => default,
            Some(x) => serde_json::from_value(x.clone())
                .map_err(|e| riskflow::Error::InvalidArgument(format!("config field '{key}': {e}")))?,
        };
        self.note(key, v.to_string());
        Ok(v)
    }

    pub fn opt<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.value.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(x) => Ok(Some(
                serde_json::from_value(x.clone())
                    .map_err(|e| riskflow::Error::InvalidArgument(format!("config field '{key}': {e}")))?,
            )),
        }
    }

    pub fn block(&mut self, key: &str) -> Result<Value> {
        match self.value.get(key) {
            Some(v) if v.is_object() => {
                let v = v.clone();
                self.note(key, serde_json::to_string(&v)?);
                Ok(v)
            }
            _ => bail!(riskflow::Error::InvalidArgument(format!("config needs an object '{key}'"))),
        }
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

/// Model, grid and path sample shared by the stochastic commands.
pub struct Simulation {
    pub model: Arc<dyn MarketModel>,
    pub source: Box<dyn PathSource + Send + Sync>,
    pub x0: f64,
    pub seed: u64,
}

impl Simulation {
    pub fn from_config(cfg: &mut Config, args: &CommonArgs) -> Result<Self> {
        let model_json = cfg.block("model")?;
        let model = model_from_json(&model_json)?;
        let seed = match args.seed.or(cfg.opt::<u64>("seed")?) {
            Some(s) => s,
            None => bail!(riskflow::Error::InvalidArgument("a seed is required (--seed or config 'seed')".into())),
        };
        cfg.note("seed", seed);
        let n_paths = match args.paths {
            Some(n) => n,
            None => cfg.opt("n_paths")?.unwrap_or(100_000),
        };
        let n_steps = match args.steps {
            Some(n) => n,
            None => cfg.opt("n_steps")?.unwrap_or(252),
        };
        cfg.note("n_paths", n_paths);
        cfg.note("n_steps", n_steps);
        let horizon: f64 = cfg.get("horizon", 1.0)?;
        let x0: f64 = cfg.get("x0", 1.0)?;
        if n_paths == 0 {
            bail!(riskflow::Error::InvalidArgument("n_paths must be positive".into()));
        }
        let grid = make_time_grid(horizon, n_steps)?;
        let lazy = LazyEnsemble::new(model.clone(), grid, n_paths, seed);
        let width = model.n_assets() + model.n_drivers() * 2 + model.n_aux();
        let source: Box<dyn PathSource + Send + Sync> = if n_paths * (n_steps + 1) * width <= MATERIALIZE_LIMIT {
            Box::new(PathEnsemble::from(&lazy))
        } else {
            Box::new(lazy)
        };
        Ok(Self { model, source, x0, seed })
    }
}
