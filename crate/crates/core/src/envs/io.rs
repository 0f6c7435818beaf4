use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{monte_carlo_returns, Dataset, Trajectory, Transition};
use super::env::EnvSpec;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    env: String,
    state_dim: usize,
    action_dim: usize,
    gamma: f64,
    count: usize,
}

#[derive(Deserialize)]
struct Record {
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s2: Vec<f64>,
    done: bool,
    traj: u64,
    t: usize,
    #[serde(default)]
    mc: Option<f64>,
}

const MC_TOLERANCE: f64 = 1e-9;

fn push_float(out: &mut String, v: f64) {
    // 17 significant digits round-trips every f64
    write!(out, "{v:.16e}").expect("write to String");
}

fn push_vec(out: &mut String, key: &str, values: &[f64]) {
    write!(out, "\"{key}\":[").expect("write to String");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_float(out, *v);
    }
    out.push(']');
}

/// Writes the newline-delimited JSON dataset format.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        env: dataset.env.name.clone(),
        state_dim: dataset.env.state_dim,
        action_dim: dataset.env.action_dim,
        gamma: dataset.env.gamma,
        count: dataset.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for traj in &dataset.trajectories {
        for (tr, mc) in traj.transitions.iter().zip(&traj.mc_returns) {
            out.push('{');
            push_vec(&mut out, "s", &tr.s);
            out.push_str(",\"r\":");
            push_float(&mut out, tr.r);
            out.push(',');
            push_vec(&mut out, "a", &tr.a);
            out.push(',');
            push_vec(&mut out, "s2", &tr.s2);
            write!(out, ",\"done\":{},\"traj\":{},\"t\":{},\"mc\":", tr.done, tr.traj_id, tr.t)
                .expect("write to String");
            push_float(&mut out, *mc);
            out.push_str("}\n");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_error(line: usize, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads a dataset written by [`save_dataset`] or produced externally.
/// Missing `mc` fields are recomputed from rewards; present ones are checked.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = Vec::new();
    let mut offset = 0usize;
    for raw in text.split_inclusive('\n') {
        lines.push((offset, raw));
        offset += raw.len();
    }
    let total_bytes = offset;
    let (_, header_raw) = lines
        .first()
        .copied()
        .ok_or_else(|| parse_error(1, 0, "empty file, expected a header line"))?;
    let header: Header = serde_json::from_str(header_raw.trim_end())
        .map_err(|e| parse_error(1, e.column().saturating_sub(1), format!("bad header: {e}")))?;
    let mut env = EnvSpec::builtin(&header.env)?;
    if header.state_dim != env.state_dim || header.action_dim != env.action_dim {
        return Err(Error::Format {
            path: path.into(),
            message: format!(
                "header dims {}/{} do not match environment {} ({}/{})",
                header.state_dim, header.action_dim, env.name, env.state_dim, env.action_dim
            ),
        });
    }
    env.gamma = header.gamma;
    env.validate()?;

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut current: Vec<(Transition, Option<f64>)> = Vec::new();
    let mut seen = 0usize;
    let finish = |group: Vec<(Transition, Option<f64>)>,
                      line: usize,
                      offset: usize,
                      out: &mut Vec<Trajectory>|
     -> Result<()> {
        if group.is_empty() {
            return Ok(());
        }
        let rewards: Vec<f64> = group.iter().map(|(t, _)| t.r).collect();
        let recomputed = monte_carlo_returns(&rewards, env.gamma);
        for ((tr, stored), mc) in group.iter().zip(&recomputed) {
            if let Some(v) = stored {
                if (v - mc).abs() > MC_TOLERANCE * mc.abs().max(1.0) {
                    return Err(parse_error(
                        line,
                        offset,
                        format!(
                            "mc {v} for traj {} t {} disagrees with rewards ({mc})",
                            tr.traj_id, tr.t
                        ),
                    ));
                }
            }
        }
        out.push(Trajectory::new(&env, group.into_iter().map(|(t, _)| t).collect())?);
        Ok(())
    };

    for (idx, (line_offset, raw)) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        let body = raw.trim_end();
        if body.is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => {
                let at = line_offset + e.column().saturating_sub(1);
                let message = if !raw.ends_with('\n') && e.is_eof() {
                    format!("truncated record at end of file (byte offset {at})")
                } else {
                    e.to_string()
                };
                return Err(parse_error(line_no, at, message));
            }
        };
        if rec.s.len() != env.state_dim || rec.s2.len() != env.state_dim || rec.a.len() != env.action_dim
        {
            return Err(parse_error(
                line_no,
                *line_offset,
                format!(
                    "record dims s {} a {} s2 {} do not match header {}/{}",
                    rec.s.len(),
                    rec.a.len(),
                    rec.s2.len(),
                    env.state_dim,
                    env.action_dim
                ),
            ));
        }
        let finite = rec.s.iter().chain(&rec.a).chain(&rec.s2).all(|v| v.is_finite())
            && rec.r.is_finite();
        if !finite {
            return Err(parse_error(line_no, *line_offset, "non-finite value in record"));
        }
        let new_traj = current.first().is_some_and(|(t, _)| t.traj_id != rec.traj);
        if new_traj {
            finish(std::mem::take(&mut current), line_no, *line_offset, &mut trajectories)?;
        }
        let expected_t = current.len();
        if rec.t != expected_t {
            return Err(parse_error(
                line_no,
                *line_offset,
                format!("traj {} step {} out of order (expected {expected_t})", rec.traj, rec.t),
            ));
        }
        current.push((
            Transition {
                s: rec.s,
                a: rec.a,
                r: rec.r,
                s2: rec.s2,
                done: rec.done,
                traj_id: rec.traj,
                t: rec.t,
            },
            rec.mc,
        ));
        seen += 1;
    }
    finish(current, lines.len(), total_bytes, &mut trajectories)?;
    if seen != header.count {
        return Err(Error::Format {
            path: path.into(),
            message: format!(
                "header declares {} records but the file ends at byte offset {total_bytes} after {seen}",
                header.count
            ),
        });
    }
    Dataset::new(env, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, ScriptedBehavior};

    fn sample(name: &str) -> Dataset {
        let spec = EnvSpec::builtin(name).unwrap();
        let beh = ScriptedBehavior { env: spec.clone(), noise_std: 0.6 };
        generate_dataset(&spec, &beh, 12, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for name in EnvSpec::BUILTIN {
            let ds = sample(name);
            let path = dir.path().join(format!("{name}.jsonl"));
            save_dataset(&ds, &path).unwrap();
            assert_eq!(load_dataset(&path).unwrap(), ds);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = sample("reach2d");
        save_dataset(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("byte offset"), "{err}");
        assert!(err.contains("truncated"), "{err}");

        // cut at a line boundary: every record parses but the count is short
        let text = String::from_utf8(bytes).unwrap();
        let cut = text[..text.len() - 1].rfind('\n').unwrap() + 1;
        fs::write(&path, &text[..cut]).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(&format!("byte offset {cut}")), "{err}");
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = sample("gate1d");
        save_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replace("\"r\":", "\"r\":x");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = sample("reach2d");
        save_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let bad_header = text.replacen("\"state_dim\":2", "\"state_dim\":3", 1);
        fs::write(&path, bad_header).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen("\"s\":[", "\"s\":[0.0,", 1);
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_mc_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = sample("reach2d");
        save_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let stripped: String = text
            .lines()
            .map(|l| match l.find(",\"mc\":") {
                Some(i) => format!("{}}}\n", &l[..i]),
                None => format!("{l}\n"),
            })
            .collect();
        assert!(!stripped[stripped.find('\n').unwrap()..].contains("\"mc\""));
        fs::write(&path, stripped).unwrap();
        let loaded = load_dataset(&path).unwrap();
        // independent oracle: forward sum of discounted rewards
        for traj in &loaded.trajectories {
            for t in 0..traj.len() {
                let expect: f64 = traj.transitions[t..]
                    .iter()
                    .enumerate()
                    .map(|(k, tr)| loaded.env.gamma.powi(k as i32) * tr.r)
                    .sum();
                assert!((traj.mc_returns[t] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn inconsistent_mc_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = sample("reach2d");
        save_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let i = lines[1].find(",\"mc\":").unwrap();
        lines[1] = format!("{},\"mc\":123.0}}", &lines[1][..i]);
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
