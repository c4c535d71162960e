//! Run configuration: one JSON file, every field addressable by key,
//! unknown keys rejected, dotted-path flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::metrics::MetricsConfig;
use crate::probe::ProbeConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    On,
    Off,
}

impl Conditioning {
    pub fn enabled(&self) -> bool {
        matches!(self, Conditioning::On)
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Conditioning::On => "ec-ijepa",
            Conditioning::Off => "ijepa",
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Conditioning::On),
            "off" => Ok(Conditioning::Off),
            other => Err(Error::Config(format!("conditioning must be on|off, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Dir,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Dataset root for `kind = dir`.
    pub path: Option<PathBuf>,
    /// Synthetic generator settings.
    pub n: usize,
    pub corr: f64,
    pub seed: u64,
    pub grid_objects: usize,
    /// Square image side; must be divisible by the model patch size.
    pub image_size: usize,
    /// Images held out (from the end of the dataset) for metric logging and
    /// probe evaluation.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            n: 2000,
            corr: 0.8,
            seed: 7,
            grid_objects: 3,
            image_size: 32,
            eval_count: 256,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corr) {
            return Err(Error::Config(format!("data.corr must be in [0,1], got {}", self.corr)));
        }
        if self.kind == DataKind::Dir && self.path.is_none() {
            return Err(Error::Config("data.kind = dir requires data.path".into()));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<crate::data::LabeledImage>> {
        self.validate()?;
        match self.kind {
            DataKind::Synthetic => Ok(crate::data::gen_synthetic(
                self.seed,
                self.n,
                self.grid_objects,
                self.corr,
                self.image_size,
            )),
            DataKind::Dir => {
                crate::data::load_dataset(self.path.as_ref().expect("validated"), self.image_size)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Model preset name (vit-t/4, vit-l/16, vit-h/14).
    pub model: String,
    pub conditioning: Conditioning,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub metrics: MetricsConfig,
    pub probe: ProbeConfig,
    /// Inference-time 2D pooling (the ablation axis).
    pub inference_pool_kernel: usize,
    pub inference_pool_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/out"),
            seeds: vec![1],
            model: "vit-t/4".into(),
            conditioning: Conditioning::On,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            mask: MaskConfig::default(),
            metrics: MetricsConfig::default(),
            probe: ProbeConfig::default(),
            inference_pool_kernel: 4,
            inference_pool_stride: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        crate::model::preset(&self.model)?;
        self.data.validate()?;
        self.train.validate()?;
        self.mask.validate()?;
        if self.inference_pool_kernel == 0 || self.inference_pool_stride == 0 {
            return Err(Error::Config("inference pooling kernel/stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Read a config file into a raw JSON value (overrides apply on top).
pub fn load_value(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parse a raw override value: JSON literal if it parses, else a comma list
/// of numbers/strings, else a bare string.
fn parse_override_value(raw: &str) -> serde_json::Value {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        let parts: Vec<serde_json::Value> = raw
            .split(',')
            .map(|p| {
                serde_json::from_str::<serde_json::Value>(p.trim())
                    .unwrap_or_else(|_| serde_json::Value::String(p.trim().to_string()))
            })
            .collect();
        return serde_json::Value::Array(parts);
    }
    serde_json::Value::String(raw.to_string())
}

/// Apply one `a.b.c = raw` override to a JSON tree, creating objects along
/// the path.
pub fn apply_override(root: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Config("empty override path".into()));
    }
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override {path}: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parse_override_value(raw));
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop returns on last segment")
}

/// `%.6g`-style fixed-precision number formatting for CSV output: six
/// significant digits, dot decimal separator, exponent form outside
/// [1e-4, 1e6).
pub fn fmt_g(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        let s = format!("{v:.5e}");
        // trim trailing zeros in the mantissa: 1.230000e5 -> 1.23e5
        if let Some(epos) = s.find('e') {
            let (mant, expn) = s.split_at(epos);
            let mant = mant.trim_end_matches('0').trim_end_matches('.');
            return format!("{mant}{expn}");
        }
        s
    } else {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let v = cfg.to_value();
        let back = RunConfig::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut v = RunConfig::default().to_value();
        v.as_object_mut()
            .unwrap()
            .insert("learning_rat".into(), serde_json::json!(0.1));
        let err = RunConfig::from_value(v).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        let mut v = RunConfig::default().to_value();
        apply_override(&mut v, "mask.contxt_scale", "0.4,0.6").unwrap();
        let err = RunConfig::from_value(v).unwrap_err();
        assert!(err.to_string().contains("contxt_scale"), "{err}");
    }

    #[test]
    fn dotted_override_sets_tuple() {
        let mut v = RunConfig::default().to_value();
        apply_override(&mut v, "mask.context_scale", "0.4,0.6").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.mask.context_scale, (0.4, 0.6));
    }

    #[test]
    fn override_scalar_and_string() {
        let mut v = RunConfig::default().to_value();
        apply_override(&mut v, "train.epochs", "3").unwrap();
        apply_override(&mut v, "train.warmup_epochs", "1").unwrap();
        apply_override(&mut v, "conditioning", "off").unwrap();
        apply_override(&mut v, "seeds", "4,5").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.conditioning, Conditioning::Off);
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn fmt_g_cases() {
        assert_eq!(fmt_g(0.0), "0");
        assert_eq!(fmt_g(1.0), "1");
        assert_eq!(fmt_g(0.25), "0.25");
        assert_eq!(fmt_g(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_g(123456.0), "123456");
        assert_eq!(fmt_g(1234560.0), "1.23456e6");
        assert_eq!(fmt_g(-0.000012345), "-1.2345e-5");
        assert_eq!(fmt_g(0.996), "0.996");
    }
}
