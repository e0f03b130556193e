use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use super::common::write_json;
use super::{Ablation, GlobalArgs};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{RunDir, RunManifest};

/// Environment variable naming the executable used for child runs; the
/// current executable is used when it is unset.
pub const SWEEP_EXE_ENV: &str = "SUBINPAINT_EXE";

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Dotted config key to vary, e.g. `schedule.lambda`.
    #[arg(long)]
    pub key: String,
    /// Comma-separated values for the key.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Keep every child's seeds equal to the parent's instead of offsetting
    /// them by the child index.
    #[arg(long)]
    pub same_seed: bool,
    /// The command to run for each value, after `--`.
    #[arg(last = true, required = true)]
    pub command: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ChildRun {
    value: String,
    run_dir: PathBuf,
    exit_code: i32,
}

fn child_name(index: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:02}-{clean}")
}

fn seed_overrides(cfg: &RunConfig, index: usize) -> Vec<String> {
    let s = cfg.seeds.offset(index as u64);
    vec![
        format!("seeds.compose={}", s.compose),
        format!("seeds.regularization={}", s.regularization),
        format!("seeds.train={}", s.train),
        format!("seeds.inpaint={}", s.inpaint),
        format!("seeds.bench={}", s.bench),
    ]
}

/// Spawns one child process per value, each with its own run directory
/// inside the sweep's directory, and returns the sweep directory.
pub fn cmd_sweep(cfg: &RunConfig, global: &GlobalArgs, args: &SweepArgs, run_dir: Option<&Path>) -> Result<PathBuf> {
    if args.command.first().is_some_and(|c| c == "sweep") {
        return Err(Error::Config("sweeps cannot be nested".into()));
    }
    let mut children = Vec::with_capacity(args.values.len());
    for (i, v) in args.values.iter().enumerate() {
        let mut sets = vec![format!("{}={}", args.key, v)];
        if !args.same_seed {
            sets.extend(seed_overrides(cfg, i));
        }
        cfg.with_overrides(&sets)?.validate()?;
        children.push((v.clone(), sets));
    }
    let exe = match std::env::var_os(SWEEP_EXE_ENV) {
        Some(p) => PathBuf::from(p),
        None => std::env::current_exe().map_err(|e| Error::Config(format!("cannot locate executable: {e}")))?,
    };
    let manifest = RunManifest::new(
        "sweep",
        json!({ "key": args.key, "values": args.values, "same_seed": args.same_seed, "command": args.command }),
        cfg,
    )?;
    let run = RunDir::create(&manifest, run_dir)?;
    let mut results = Vec::new();
    for (i, (value, sets)) in children.into_iter().enumerate() {
        let dir = run.join(child_name(i, &value));
        let mut cmd = Command::new(&exe);
        if let Some(c) = &global.config {
            cmd.arg("--config").arg(c);
        }
        for o in global.overrides.iter().chain(&sets) {
            cmd.arg("--set").arg(o);
        }
        let flags = [
            (global.no_dif || global.ablate.contains(&Ablation::NoDif), "--no-dif"),
            (global.no_tas || global.ablate.contains(&Ablation::NoTas), "--no-tas"),
            (global.no_adm || global.ablate.contains(&Ablation::NoAdm), "--no-adm"),
        ];
        for (on, flag) in flags {
            if on {
                cmd.arg(flag);
            }
        }
        cmd.arg("--run-dir").arg(&dir).args(&args.command);
        let status = cmd.status().map_err(|e| Error::io(&exe, e))?;
        let code = status.code().unwrap_or(-1);
        run.log(format!("{}={value}: exit {code}", args.key))?;
        results.push(ChildRun {
            run_dir: PathBuf::from(child_name(i, &value)),
            value,
            exit_code: code,
        });
    }
    write_json(&run.join("sweep.json"), &results)?;
    if let Some(failed) = results.iter().find(|r| r.exit_code != 0) {
        return Err(Error::ChildRun {
            name: failed.run_dir.display().to_string(),
            code: failed.exit_code,
        });
    }
    Ok(run.path().to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_names_are_filesystem_safe() {
        assert_eq!(child_name(3, "0.7"), "03-0.7");
        assert_eq!(child_name(0, "a b/c"), "00-a_b_c");
    }

    #[test]
    fn seeds_offset_by_index() {
        let cfg = RunConfig::default();
        let o = seed_overrides(&cfg, 2);
        assert!(o.contains(&format!("seeds.train={}", cfg.seeds.train + 2)));
        assert_eq!(cfg.with_overrides(&o).unwrap().seeds, cfg.seeds.offset(2));
    }
}
