//! Flat `key = value` configuration files. Keys mirror the field names of
//! [`NetworkSpec`] and [`TrainConfig`]; `preset` names a starting network that
//! later keys override. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::{PoolingVariant, SchemeNorm, Share};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::network::{preset, Family, NetworkSpec, StemKind};
use crate::scheme::SchemeForm;
use crate::train::TrainConfig;

const SPEC_KEYS: [&str; 13] = [
    "preset", "family", "nu", "channels", "share_a", "share_b", "pooling", "a_form", "b_form", "stem", "num_classes",
    "bn", "scheme_norm",
];
const TRAIN_KEYS: [&str; 14] = [
    "lr0", "momentum", "weight_decay", "batch_size", "lr_step", "lr_factor", "total_epochs", "seed", "augment",
    "normalize", "prefetch", "train_subset", "test_subset", "dataset",
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
            let k = k.trim().to_string();
            if !SPEC_KEYS.contains(&k.as_str()) && !TRAIN_KEYS.contains(&k.as_str()) {
                return Err(Error::config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn num<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::config(format!("{key} = {v:?} is not a valid number"))))
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::config(format!("{key} = {v:?} is not a boolean"))),
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|p| p.trim().parse().map_err(|_| Error::config(format!("{key}: {p:?} is not a count"))))
                    .collect()
            })
            .transpose()
    }

    /// The network described by this file. Without `preset`, `family`, `nu`
    /// and `channels` are required.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut spec = match self.get("preset") {
            Some(p) => preset(p)?,
            None => {
                let need = |k: &str| Error::config(format!("{k} is required when no preset is given"));
                let nu = self.list("nu")?.ok_or_else(|| need("nu"))?;
                let ch = self.list("channels")?.ok_or_else(|| need("channels"))?;
                let family = self.get("family").ok_or_else(|| need("family"))?;
                let sharing = crate::blocks::SharingPolicy::new(
                    self.get("share_a").map(parse_share).transpose()?.unwrap_or(Share::PerLayer),
                    self.get("share_b").map(parse_share).transpose()?.unwrap_or(Share::PerLayer),
                );
                match parse_family(family)? {
                    Family::PreAct => NetworkSpec::preact(&nu, &ch, sharing, 10),
                    Family::Classic => NetworkSpec::classic(&nu, &ch, sharing, 10),
                    Family::FeatureBased => {
                        NetworkSpec::feature_based(&nu, &ch, SchemeForm::ConvOnly, SchemeForm::Sandwich, 10)
                    }
                }
            }
        };
        if self.get("preset").is_some() {
            if let Some(f) = self.get("family") {
                spec.family = parse_family(f)?;
            }
            if let Some(v) = self.list("nu")? {
                spec.nu = v;
            }
            if let Some(v) = self.list("channels")? {
                spec.channels = v;
            }
            if let Some(s) = self.get("share_a") {
                spec.sharing.a = parse_share(s)?;
            }
            if let Some(s) = self.get("share_b") {
                spec.sharing.b = parse_share(s)?;
            }
        }
        if let Some(p) = self.get("pooling") {
            spec.pooling = parse_pooling(p)?;
        }
        if let Some(f) = self.get("a_form") {
            spec.a_form = SchemeForm::from_label(f)?;
        }
        if let Some(f) = self.get("b_form") {
            spec.b_form = SchemeForm::from_label(f)?;
        }
        if let Some(s) = self.get("stem") {
            spec.stem = parse_stem(s)?;
        }
        if let Some(n) = self.num("num_classes")? {
            spec.num_classes = n;
        }
        if let Some(b) = self.flag("bn")? {
            spec.bn = b;
        }
        if let Some(n) = self.get("scheme_norm") {
            spec.scheme_norm = match n {
                "before_act" => SchemeNorm::BeforeActivation,
                "after_conv" => SchemeNorm::AfterConv,
                _ => return Err(Error::config(format!("unknown scheme_norm {n:?} (before_act, after_conv)"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Training settings: defaults for `spec`, then any keys present here.
    pub fn train_config(&self, spec: &NetworkSpec) -> Result<TrainConfig> {
        let mut c = TrainConfig::for_spec(spec);
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.num(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        set!(lr0);
        set!(momentum);
        set!(weight_decay);
        set!(batch_size);
        set!(lr_step);
        set!(lr_factor);
        set!(total_epochs);
        set!(seed);
        set!(prefetch);
        if let Some(b) = self.flag("augment")? {
            c.augment = b;
        }
        if let Some(b) = self.flag("normalize")? {
            c.normalize = b;
        }
        c.train_subset = self.num("train_subset")?.or(c.train_subset);
        c.test_subset = self.num("test_subset")?.or(c.test_subset);
        c.validate()?;
        Ok(c)
    }

    pub fn dataset(&self) -> Result<Option<DatasetKind>> {
        self.get("dataset").map(DatasetKind::parse).transpose()
    }
}

fn parse_family(s: &str) -> Result<Family> {
    match s {
        "preact" => Ok(Family::PreAct),
        "classic" => Ok(Family::Classic),
        "feature" | "fb" => Ok(Family::FeatureBased),
        _ => Err(Error::config(format!("unknown family {s:?} (preact, classic, feature)"))),
    }
}

fn parse_share(s: &str) -> Result<Share> {
    match s {
        "layer" => Ok(Share::PerLayer),
        "level" => Ok(Share::PerLevel),
        _ => Err(Error::config(format!("unknown sharing {s:?} (layer, level)"))),
    }
}

fn parse_pooling(s: &str) -> Result<PoolingVariant> {
    match s {
        "preact" => Ok(PoolingVariant::PreActPool),
        "classic" => Ok(PoolingVariant::ClassicPool),
        "fb" => Ok(PoolingVariant::FBPool),
        "appendix" => Ok(PoolingVariant::AppendixPool),
        _ => Err(Error::config(format!("unknown pooling {s:?} (preact, classic, fb, appendix)"))),
    }
}

fn parse_stem(s: &str) -> Result<StemKind> {
    match s {
        "cifar" => Ok(StemKind::Cifar),
        "small" | "mnist" => Ok(StemKind::SmallImage),
        "large" | "imagenet" => Ok(StemKind::LargeImage),
        _ => Err(Error::config(format!("unknown stem {s:?} (cifar, small, large)"))),
    }
}

/// A network from a preset name, a JSON spec file, or a key-value file.
pub fn resolve_spec(arg: &str) -> Result<NetworkSpec> {
    let path = Path::new(arg);
    if !path.is_file() {
        return preset(arg);
    }
    let text = std::fs::read_to_string(path)?;
    let spec = if text.trim_start().starts_with('{') {
        serde_json::from_str::<NetworkSpec>(&text).map_err(|e| Error::format(format!("{arg}: {e}")))?
    } else {
        ConfigFile::parse(&text)?.network_spec()?
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let f = ConfigFile::parse("# desk run\npreset = resnet18-Al-Bli-cifar10\nchannels = 8,8,8,8\nlr0 = 0.05\nseed=3\n")
            .unwrap();
        let spec = f.network_spec().unwrap();
        assert_eq!(spec.channels, vec![8; 4]);
        assert_eq!(spec.sharing.a, Share::PerLevel);
        let c = f.train_config(&spec).unwrap();
        assert_eq!(c.lr0, 0.05);
        assert_eq!(c.seed, 3);
        assert_eq!(c.weight_decay, 1e-4);
    }

    #[test]
    fn explicit_feature_network() {
        let f = ConfigFile::parse("family = feature\nnu = 1,1\nchannels = 4,8\na_form = Ks\nb_form = sK\n").unwrap();
        let s = f.network_spec().unwrap();
        assert_eq!((s.a_form, s.b_form), (SchemeForm::ConvAfterAct, SchemeForm::ActAfterConv));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConfigFile::parse("lr0 0.1").is_err());
        assert!(ConfigFile::parse("learning_rate = 0.1").is_err());
        assert!(ConfigFile::parse("seed = 1\nseed = 2").is_err());
        let f = ConfigFile::parse("preset = resnet18-Ali-Bli-cifar10\nlr0 = -1").unwrap();
        assert!(f.train_config(&f.network_spec().unwrap()).is_err());
        assert!(ConfigFile::parse("nu = 2,2").unwrap().network_spec().is_err());
    }
}
