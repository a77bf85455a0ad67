//! Ensemble directories: a comma-separated manifest plus one FLG1 file per field.
//!
//! Each non-comment manifest line is
//! `n_params,p…,n_steps,n_flows,grid_path…,flow_path…` with paths relative to
//! the manifest directory. `n_flows` is 0 or `n_steps`.

use std::fs;
use std::path::Path;

use super::raw::{read_raw, write_raw, RawField};
use super::{EnsembleSet, Member};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

const HEADER: &str = "# n_params,params...,n_steps,n_flows,grid paths...,flow paths...";

/// Writes `set` under `dir` (created if missing) and returns the manifest path.
pub fn write_ensemble(set: &EnsembleSet, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    set.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut text = String::from(HEADER);
    text.push('\n');
    for (m, member) in set.members.iter().enumerate() {
        let sub = format!("member_{m}");
        fs::create_dir_all(dir.join(&sub))?;
        let mut fields: Vec<String> = vec![member.sim_params.len().to_string()];
        fields.extend(member.sim_params.iter().map(|p| format!("{p}")));
        fields.push(member.timesteps.len().to_string());
        let flows = member.flows.as_deref().unwrap_or(&[]);
        fields.push(flows.len().to_string());
        for (k, g) in member.timesteps.iter().enumerate() {
            let rel = format!("{sub}/grid_{k:04}.flg");
            write_raw(&RawField::Grid(g.clone()), dir.join(&rel))?;
            fields.push(rel);
        }
        for (k, f) in flows.iter().enumerate() {
            let rel = format!("{sub}/flow_{k:04}.flg");
            write_raw(&RawField::Flow(f.clone()), dir.join(&rel))?;
            fields.push(rel);
        }
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text)?;
    Ok(path)
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("manifest line {line}: {msg}"))
}

fn count(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    tok.ok_or_else(|| bad(line, format!("missing {what}")))?
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("{what} is not a count")))
}

/// Reads an ensemble from a manifest path or the directory containing it.
pub fn read_ensemble(path: impl AsRef<Path>) -> Result<EnsembleSet> {
    let path = path.as_ref();
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest)?;
    let mut members = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ln = i + 1;
        let mut toks = line.split(',');
        let np = count(toks.next(), ln, "n_params")?;
        let sim_params = (0..np)
            .map(|_| {
                toks.next()
                    .ok_or_else(|| bad(ln, "missing parameter"))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(ln, "parameter is not a number"))
            })
            .collect::<Result<Vec<_>>>()?;
        let ns = count(toks.next(), ln, "n_steps")?;
        let nf = count(toks.next(), ln, "n_flows")?;
        if nf != 0 && nf != ns {
            return Err(bad(ln, format!("{nf} flows for {ns} steps")));
        }
        let paths: Vec<&str> = toks.map(str::trim).collect();
        if paths.len() != ns + nf {
            return Err(bad(ln, format!("expected {} paths, found {}", ns + nf, paths.len())));
        }
        let mut timesteps = Vec::with_capacity(ns);
        for p in &paths[..ns] {
            match read_raw(dir.join(p))? {
                RawField::Grid(g) => timesteps.push(g),
                RawField::Flow(_) => return Err(bad(ln, format!("{p} holds a flow, expected a grid"))),
            }
        }
        let flows = if nf == 0 {
            None
        } else {
            let mut v = Vec::with_capacity(nf);
            for p in &paths[ns..] {
                match read_raw(dir.join(p))? {
                    RawField::Flow(f) => v.push(f),
                    RawField::Grid(_) => return Err(bad(ln, format!("{p} holds a grid, expected a flow"))),
                }
            }
            Some(v)
        };
        members.push(Member { sim_params, timesteps, flows });
    }
    let set = EnsembleSet { members };
    set.validate()?;
    Ok(set)
}
