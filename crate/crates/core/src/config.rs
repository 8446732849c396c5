//! Plain-text `key = value` configuration, shared by the config file and the
//! checkpoint header.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "lr",
    "wd",
    "epochs",
    "batch",
    "seed",
    "threshold",
    "eta_min",
    "augment",
    "fov_loss",
    "precision",
    "input_size",
    "patch",
    "window",
    "C",
    "swin_depths",
    "swin_heads",
    "mlp_ratio",
    "rel_pos_bias",
    "stem_channels",
    "res_channels",
    "res_depths",
    "gnconv_order",
    "gnconv_kernel",
    "reduce_passes",
    "head_channels",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse4(key: &str, v: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four comma-separated integers, got {v:?}")))
}

fn join4(a: &[usize; 4]) -> String {
    a.map(|x| x.to_string()).join(",")
}

/// Splits `key = value` lines, dropping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    /// Applies `pairs` over the defaults. Every unknown key is reported at once.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Config> {
        let unknown: Vec<String> = pairs
            .iter()
            .map(|(k, _)| k.as_ref())
            .filter(|k| !KEYS.contains(k))
            .map(str::to_string)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        let mut c = Config::default();
        let (m, t) = (&mut c.model, &mut c.train);
        for (k, v) in pairs {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "lr" => t.lr = parse(k, v)?,
                "wd" => t.weight_decay = parse(k, v)?,
                "epochs" => t.epochs = parse(k, v)?,
                "batch" => t.batch_size = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "threshold" => t.threshold = parse(k, v)?,
                "eta_min" => t.eta_min = parse(k, v)?,
                "augment" => t.augment = parse_bool(k, v)?,
                "fov_loss" => t.fov_loss = parse_bool(k, v)?,
                "precision" => {
                    c.precision = match v {
                        "f32" | "32" => Precision::F32,
                        "f64" | "64" => Precision::F64,
                        _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                    }
                }
                "input_size" => m.input_size = parse(k, v)?,
                "patch" => m.swin.patch_size = parse(k, v)?,
                "window" => m.swin.window = parse(k, v)?,
                "C" => m.swin.embed_dim = parse(k, v)?,
                "swin_depths" => m.swin.depths = parse4(k, v)?,
                "swin_heads" => m.swin.heads = parse4(k, v)?,
                "mlp_ratio" => m.swin.mlp_ratio = parse(k, v)?,
                "rel_pos_bias" => m.swin.rel_pos_bias = parse_bool(k, v)?,
                "stem_channels" => m.res.stem_channels = parse(k, v)?,
                "res_channels" => m.res.stage_channels = parse4(k, v)?,
                "res_depths" => m.res.depths = parse4(k, v)?,
                "gnconv_order" => m.gnconv_order = parse(k, v)?,
                "gnconv_kernel" => m.gnconv_kernel = parse(k, v)?,
                "reduce_passes" => m.reduce_passes = parse(k, v)?,
                "head_channels" => m.head_channels = parse(k, v)?,
                _ => unreachable!("filtered above"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn parse_str(text: &str) -> Result<Config> {
        Config::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::parse_str(&text)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (m, t) = (&self.model, &self.train);
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let prec = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let values = [
            s(t.lr),
            s(t.weight_decay),
            s(t.epochs),
            s(t.batch_size),
            s(t.seed),
            s(t.threshold),
            s(t.eta_min),
            s(t.augment),
            s(t.fov_loss),
            s(prec),
            s(m.input_size),
            s(m.swin.patch_size),
            s(m.swin.window),
            s(m.swin.embed_dim),
            join4(&m.swin.depths),
            join4(&m.swin.heads),
            s(m.swin.mlp_ratio),
            s(m.swin.rel_pos_bias),
            s(m.res.stem_channels),
            join4(&m.res.stage_channels),
            join4(&m.res.depths),
            s(m.gnconv_order),
            s(m.gnconv_kernel),
            s(m.reduce_passes),
            s(m.head_channels),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse_str("").unwrap();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-5);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.train.threshold, 0.5);
        assert_eq!(c.model.swin.patch_size, 4);
        assert_eq!(c.model.swin.window, 4);
        assert_eq!(c.model.swin.embed_dim, 24);
        assert_eq!(c.model.res.depths, [4, 6, 9, 2]);
        assert_eq!(c.model.gnconv_order, 3);
        assert_eq!(c.model.reduce_passes, 2);
    }

    #[test]
    fn values_comments_and_unknown_keys() {
        let c = Config::parse_str("# schedule\nepochs = 40\nlr=3e-4 # faster\n").unwrap();
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.train.lr, 3e-4);
        match Config::parse_str("windw = 4\nfoo = 1\n") {
            Err(Error::UnknownConfigKeys(k)) => assert_eq!(k, vec!["windw", "foo"]),
            other => panic!("{other:?}"),
        }
        assert!(Config::parse_str("epochs = forty").is_err());
        assert!(Config::parse_str("C = 25").is_err());
        assert!(Config::parse_str("just text").is_err());
    }

    #[test]
    fn text_round_trip_is_field_exact() {
        let mut c = Config::default();
        c.train.lr = 0.1 + 0.2;
        c.model.swin.mlp_ratio = 2.5;
        c.precision = Precision::F64;
        assert_eq!(Config::parse_str(&c.to_text()).unwrap(), c);
    }
}
