//! Flat `key = value` files with `[section]` headers.
//!
//! Every key mirrors a command-line flag (`h-exp` ↔ `h_exp`); flags win over the file.

use std::collections::BTreeMap;
use std::path::Path;

use ualangevin::Error;

/// Keys accepted in each section.
pub const SECTIONS: &[(&str, &[&str])] = &[
    (
        "experiment",
        &[
            "preset", "m", "h", "h_exp", "h_ref", "h_ref_exp", "eps", "t_final", "traj", "sigma", "scheme", "test_fn",
            "noise", "tol", "max_iter", "x0",
        ],
    ),
    ("sweep", &["eps_list", "eps_exp_max", "h_exps", "schemes", "m_list"]),
    ("run", &["seed", "threads", "output"]),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut values = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .find(|(s, _)| *s == name)
                        .map(|(s, _)| *s)
                        .ok_or_else(|| Error::config(name, format!("unknown section on line {}", no + 1)))?,
                );
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", no + 1)))?;
            let key = key.trim().replace('-', "_");
            let sec = section.ok_or_else(|| Error::config(&key, "key appears before any [section]"))?;
            let allowed = SECTIONS.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key.as_str()) {
                return Err(Error::config(&key, format!("not a valid key in [{sec}]")));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `key` when present; the error names the key.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))))
            .transpose()
    }
}
