//! Run-configuration files: versioned header, global keys, one section
//! per pipeline command. Parsing is strict — any unknown section or key
//! is a hard error naming it, so experiment configs cannot silently
//! carry typos.
//!
//! ```text
//! HISTOPIPE-CONFIG v1
//! seed: 5
//! threads: 1
//! out: runs/demo
//!
//! [extract]
//! slide: fixtures/slide_a.png
//! patch_um: 32
//! patch_px: 16
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CONFIG_HEADER: &str = "HISTOPIPE-CONFIG v1";

pub const SECTIONS: &[&str] = &[
    "extract",
    "split",
    "stats",
    "train",
    "evaluate",
    "crossval",
    "segment",
    "postprocess",
    "report",
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default)]
pub struct RawBlock {
    entries: Vec<(String, String, usize)>,
}

/// One section's keys with consumption tracking: whatever a command does
/// not take is an unknown key.
pub struct KeyedBlock<'a> {
    section: &'a str,
    file: &'a Path,
    remaining: BTreeMap<String, (String, usize)>,
}

impl<'a> KeyedBlock<'a> {
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.remaining.remove(key).map(|(v, _)| v)
    }

    pub fn take_required(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| {
            ConfigError(format!(
                "{}: section [{}] is missing required key `{key}`",
                self.file.display(),
                self.section
            ))
        })
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.remaining.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                ConfigError(format!(
                    "{} line {line}: bad value `{v}` for `{key}`",
                    self.file.display()
                ))
            }),
        }
    }

    pub fn take_parsed_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    pub fn take_bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.remaining.remove(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "on" | "yes" => Ok(true),
                "false" | "off" | "no" => Ok(false),
                other => Err(ConfigError(format!(
                    "{} line {line}: `{key}` must be true/false, got `{other}`",
                    self.file.display()
                ))),
            },
        }
    }

    /// Errors on any key the command did not consume, naming it.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.remaining.into_iter().next() {
            return Err(ConfigError(format!(
                "{} line {line}: unknown key `{key}` in section [{}]",
                self.file.display(),
                self.section
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub path: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// Raw file bytes; hashed into the reproducibility record.
    pub raw_text: String,
    sections: BTreeMap<String, RawBlock>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw_text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(path, raw_text)
    }

    pub fn parse(path: &Path, raw_text: String) -> Result<RunConfig> {
        let mut lines = raw_text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        if header != CONFIG_HEADER {
            return Err(ConfigError(format!(
                "{}: expected header `{CONFIG_HEADER}`, found `{header}`",
                path.display()
            )));
        }
        let mut config = RunConfig {
            path: path.to_path_buf(),
            seed: None,
            threads: None,
            out: None,
            raw_text: raw_text.clone(),
            sections: BTreeMap::new(),
        };
        let mut current: Option<String> = None;
        for (i, raw) in lines {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError(format!(
                        "{} line {lineno}: unknown section [{name}]",
                        path.display()
                    )));
                }
                if config.sections.contains_key(name) {
                    return Err(ConfigError(format!(
                        "{} line {lineno}: duplicate section [{name}]",
                        path.display()
                    )));
                }
                config.sections.insert(name.to_string(), RawBlock::default());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                ConfigError(format!(
                    "{} line {lineno}: expected `key: value`",
                    path.display()
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            match &current {
                None => match key.as_str() {
                    "seed" => {
                        config.seed = Some(value.parse().map_err(|_| {
                            ConfigError(format!(
                                "{} line {lineno}: bad seed `{value}`",
                                path.display()
                            ))
                        })?)
                    }
                    "threads" => {
                        config.threads = Some(value.parse().map_err(|_| {
                            ConfigError(format!(
                                "{} line {lineno}: bad threads `{value}`",
                                path.display()
                            ))
                        })?)
                    }
                    "out" => config.out = Some(PathBuf::from(value)),
                    other => {
                        return Err(ConfigError(format!(
                            "{} line {lineno}: unknown global key `{other}`",
                            path.display()
                        )))
                    }
                },
                Some(section) => {
                    let block = config.sections.get_mut(section).expect("section exists");
                    if block.entries.iter().any(|(k, _, _)| k == &key) {
                        return Err(ConfigError(format!(
                            "{} line {lineno}: duplicate key `{key}` in [{section}]",
                            path.display()
                        )));
                    }
                    block.entries.push((key, value, lineno));
                }
            }
        }
        Ok(config)
    }

    /// The named section as a strict keyed block.
    pub fn section<'a>(&'a self, name: &'a str) -> Result<KeyedBlock<'a>> {
        let block = self.sections.get(name).ok_or_else(|| {
            ConfigError(format!(
                "{}: config has no [{name}] section",
                self.path.display()
            ))
        })?;
        Ok(KeyedBlock {
            section: name,
            file: &self.path,
            remaining: block
                .entries
                .iter()
                .map(|(k, v, l)| (k.clone(), (v.clone(), *l)))
                .collect(),
        })
    }

}
