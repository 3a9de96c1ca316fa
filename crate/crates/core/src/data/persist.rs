//! Dataset directories: one CSV per episode plus `manifest.toml`.
//!
//! Episode files have the header `step,s0..,a0..,r,done`. Row `t` holds the
//! state before step `t`; a final row with empty action, reward and done
//! fields holds the last successor state. Floats use the shortest
//! round-trip representation, so a read-back buffer is bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ReplayBuffer, Transition};
use crate::envs::{constants, Env};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub env: String,
    pub seed: u64,
    pub samples: usize,
    pub episode_len: usize,
    pub episodes: usize,
    pub constants_version: u32,
}

impl Manifest {
    fn render(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }
}

type Step = (Vec<f64>, f64, bool);

fn episode_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("episode_{i:04}.csv"))
}

fn header(state_dim: usize, action_dim: usize) -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend((0..state_dim).map(|i| format!("s{i}")));
    cols.extend((0..action_dim).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.push("done".into());
    cols.join(",")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `buffer` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, env: &Env, buffer: &ReplayBuffer, seed: u64, episode_len: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (sd, ad) = (env.state_dim(), env.action_dim());
    for (i, ep) in buffer.episodes().enumerate() {
        let mut out = header(sd, ad);
        out.push('\n');
        for (t, tr) in ep.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in tr.state.iter().chain(&tr.action) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", tr.reward, u8::from(tr.done));
        }
        if let Some(last) = ep.last() {
            let _ = write!(out, "{}", ep.len());
            for v in &last.next_state {
                let _ = write!(out, ",{v}");
            }
            out.push_str(&",".repeat(ad + 2));
            out.push('\n');
        }
        write_file(&episode_path(dir, i), &out)?;
    }
    let manifest = Manifest {
        env: env.name().to_string(),
        seed,
        samples: buffer.len(),
        episode_len,
        episodes: buffer.episode_count(),
        constants_version: constants::VERSION,
    };
    write_file(&dir.join("manifest.toml"), &manifest.render())?;
    Ok(manifest)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Env, ReplayBuffer)> {
    let mpath = dir.join("manifest.toml");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let env = Env::from_name(&manifest.env).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.constants_version != constants::VERSION {
        return Err(Error::format(
            &mpath,
            format!("dataset uses constants version {}, this build has {}", manifest.constants_version, constants::VERSION),
        ));
    }
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let mut buffer = ReplayBuffer::new(manifest.samples.max(1));
    for i in 0..manifest.episodes {
        let path = episode_path(dir, i);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        read_episode(&text, &path, sd, ad, &mut buffer)?;
    }
    if buffer.len() != manifest.samples {
        return Err(Error::format(&mpath, format!("manifest lists {} samples, files hold {}", manifest.samples, buffer.len())));
    }
    Ok((manifest, env, buffer))
}

fn read_episode(text: &str, path: &Path, sd: usize, ad: usize, buffer: &mut ReplayBuffer) -> Result<()> {
    let mut lines = text.lines();
    if lines.next() != Some(header(sd, ad).as_str()) {
        return Err(Error::format(path, "unexpected header"));
    }
    let width = 1 + sd + ad + 2;
    let parse = |s: &str, line: usize| -> Result<f64> { s.parse().map_err(|_| Error::format(path, format!("line {line}: `{s}` is not a number"))) };
    // State, then action, reward and done for every row but the last.
    let mut rows: Vec<(Vec<f64>, Option<Step>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::format(path, format!("line {lineno}: expected {width} fields, found {}", cells.len())));
        }
        let state = cells[1..1 + sd].iter().map(|c| parse(c, lineno)).collect::<Result<Vec<_>>>()?;
        let rest = &cells[1 + sd..];
        let step = if rest.iter().all(|c| c.is_empty()) {
            None
        } else {
            let action = rest[..ad].iter().map(|c| parse(c, lineno)).collect::<Result<Vec<_>>>()?;
            let reward = parse(rest[ad], lineno)?;
            let done = match rest[ad + 1] {
                "0" => false,
                "1" => true,
                other => return Err(Error::format(path, format!("line {lineno}: bad done flag `{other}`"))),
            };
            Some((action, reward, done))
        };
        rows.push((state, step));
    }
    if rows.len() < 2 || rows.last().is_some_and(|r| r.1.is_some()) || rows[..rows.len() - 1].iter().any(|r| r.1.is_none()) {
        return Err(Error::format(path, "episode must end with exactly one terminal-state row"));
    }
    for pair in rows.windows(2) {
        let (state, step) = &pair[0];
        let (action, reward, done) = step.clone().expect("checked above");
        buffer.push(Transition { state: state.clone(), action, reward, next_state: pair[1].0.clone(), done });
    }
    buffer.end_episode();
    Ok(())
}
