use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Run record written next to a command's primary output as
/// `<out>.manifest.json`.
pub struct Manifest {
    command: &'static str,
    params: Map<String, Value>,
    seed: u64,
    started: Instant,
}

impl Manifest {
    pub fn new(command: &'static str, params: &impl Serialize, seed: u64, format: Option<String>) -> Result<Self> {
        let mut flat = Map::new();
        flatten("", serde_json::to_value(params)?, &mut flat);
        if let Some(f) = format {
            flat.insert("format".into(), Value::String(f));
        }
        Ok(Self {
            command,
            params: flat,
            seed,
            started: Instant::now(),
        })
    }

    /// Writes the manifest for `primary` and the digests of `outputs`.
    pub fn write(&self, primary: &Path, outputs: &[PathBuf], partial: bool) -> Result<PathBuf> {
        let mut m = Map::new();
        m.insert("command".into(), self.command.into());
        m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        m.insert("seed".into(), self.seed.into());
        m.insert("duration_secs".into(), self.started.elapsed().as_secs_f64().into());
        m.insert("partial".into(), partial.into());
        for (k, v) in &self.params {
            m.insert(format!("param.{k}"), v.clone());
        }
        for path in outputs {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
            m.insert(format!("sha256.{name}"), hex(&Sha256::digest(&bytes)).into());
        }
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(&mut f, &Value::Object(m))?;
        writeln!(f)?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten(prefix: &str, v: Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(obj) => {
            for (k, v) in obj {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Null => {}
        v => {
            out.insert(prefix.to_string(), v);
        }
    }
}

/// Serializes a list as one comma-separated string so manifests stay flat.
pub fn joined<T: Display, S: serde::Serializer>(items: &[T], s: S) -> std::result::Result<S::Ok, S::Error> {
    let text: Vec<String> = items.iter().map(ToString::to_string).collect();
    s.serialize_str(&text.join(","))
}

pub fn displayed<T: Display, S: serde::Serializer>(item: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&item.to_string())
}
