use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentationPlan;
use crate::backend::BackendConfig;
use crate::metrics::EmptyClass;

/// Run configuration file. Every field is optional; command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AugmentationPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_level: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore_label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_class: Option<EmptyClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<PathBuf>,
}

/// Replace `${NAME}` with the value of environment variable `NAME`.
/// `$$` yields a literal `$`. Unset variables are an error.
pub fn interpolate(s: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 1..];
        if let Some(t) = tail.strip_prefix('$') {
            out.push('$');
            rest = t;
        } else if let Some(t) = tail.strip_prefix('{') {
            let end = t
                .find('}')
                .ok_or_else(|| format!("unterminated '${{' in \"{s}\""))?;
            let name = &t[..end];
            if name.is_empty() {
                return Err(format!("empty variable name in \"{s}\""));
            }
            let v =
                lookup(name).ok_or_else(|| format!("environment variable {name} is not set"))?;
            out.push_str(&v);
            rest = &t[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<(), String> {
    match v {
        Value::String(s) => *s = interpolate(s, lookup)?,
        Value::Array(a) => {
            for x in a {
                interpolate_value(x, lookup)?;
            }
        }
        Value::Object(o) => {
            for x in o.values_mut() {
                interpolate_value(x, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    /// Parse config text; string values are interpolated before typing.
    pub fn parse(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
        interpolate_value(&mut v, lookup)?;
        serde_json::from_value(v).map_err(|e| format!("config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text =
            fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        let mut c = Self::parse(&text, &|k| std::env::var(k).ok())?;
        c.resolve_relative(path.parent().unwrap_or(Path::new("")));
        c.check_paths()?;
        Ok(c)
    }

    /// Make relative paths relative to the config file's directory.
    fn resolve_relative(&mut self, base: &Path) {
        if base.as_os_str().is_empty() {
            return;
        }
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.taxonomy);
        fix(&mut self.palette);
        fix(&mut self.bank);
        fix(&mut self.store);
        fix(&mut self.out_dir);
        if let Some(m) = &mut self.metrics {
            fix(&mut m.penalties);
        }
    }

    /// Input paths named in the config must exist.
    pub fn check_paths(&self) -> Result<(), String> {
        let inputs = [
            ("manifest", &self.manifest),
            ("taxonomy", &self.taxonomy),
            ("palette", &self.palette),
            ("bank", &self.bank),
            ("store", &self.store),
        ];
        let penalties = self.metrics.as_ref().and_then(|m| m.penalties.as_ref());
        for (name, p) in inputs
            .iter()
            .map(|(n, p)| (*n, p.as_ref()))
            .chain([("penalties", penalties)])
        {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(format!(
                        "config: {name} path {} does not exist",
                        p.display()
                    ));
                }
            }
        }
        if let Some(b) = &self.backend {
            b.validate().map_err(|e| format!("config: backend: {e}"))?;
        }
        Ok(())
    }
}
