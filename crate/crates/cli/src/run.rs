// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dcea_core::adversary::{run_scenario, Deployment, ScenarioId, ScenarioSpec};
use dcea_core::evidence::{self, from_json};
use dcea_core::verifier::Verdict;

use crate::error::{read, write, CliError};
use crate::verify::PolicyFile;
use crate::{EXIT_MISMATCH, EXIT_OK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: ScenarioId,
    pub deployment: Deployment,
    pub variant: String,
    pub seed: u64,
    pub bundle_path: PathBuf,
    pub policy_path: PathBuf,
    pub verdict: Verdict,
    pub expectation_met: bool,
    pub elapsed_virtual_ms: u64,
}

impl RunReport {
    pub fn exit_code(&self) -> u8 {
        if self.expectation_met {
            EXIT_OK
        } else {
            EXIT_MISMATCH
        }
    }
}

/// Accepts either a path to a scenario file or a short id of the form
/// `<scenario>[-s1|-s2][:<variant>]`, e.g. `a2-frankenstein`, `a5-s1:clone_ak`.
/// Short ids default to S2.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioSpec, CliError> {
    let path = Path::new(arg);
    if path.exists() || arg.ends_with(".json") {
        let bytes = read(path)?;
        let spec: ScenarioSpec = from_json(&bytes).map_err(|e| CliError::parse(path, e))?;
        spec.resolved_variant()?;
        return Ok(spec);
    }
    let (name, variant) = match arg.split_once(':') {
        Some((n, v)) => (n, Some(v)),
        None => (arg, None),
    };
    let (name, deployment) = if let Some(n) = name.strip_suffix("-s1") {
        (n, Deployment::S1)
    } else if let Some(n) = name.strip_suffix("-s2") {
        (n, Deployment::S2)
    } else {
        (name, Deployment::S2)
    };
    let id = ScenarioId::parse(name).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut spec = ScenarioSpec::new(id, deployment);
    if let Some(v) = variant {
        spec = spec.with_variant(v);
    }
    spec.resolved_variant()?;
    Ok(spec)
}

fn file_stem(spec: &ScenarioSpec, variant: &str) -> String {
    let dep = match spec.deployment {
        Deployment::S1 => "s1",
        Deployment::S2 => "s2",
    };
    let mut stem = format!("{}-{dep}", spec.scenario);
    if variant != spec.scenario.default_variant() {
        stem.push('-');
        stem.push_str(variant);
    }
    stem
}

/// Runs one scenario and writes `<stem>.dcea.json`, `<stem>.policy.json`
/// and `<stem>.verdict.json` into `out_dir`.
pub fn cmd_run(scenario: &str, seed: u64, out_dir: &Path) -> Result<RunReport, CliError> {
    let spec = resolve_scenario(scenario)?;
    let run = run_scenario(&spec, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let stem = file_stem(&spec, &run.variant);
    let bundle_path = out_dir.join(format!("{stem}.dcea.json"));
    let policy_path = out_dir.join(format!("{stem}.policy.json"));
    let verdict_path = out_dir.join(format!("{stem}.verdict.json"));
    write(&bundle_path, &evidence::serialize(&run.bundle))?;
    let policy = PolicyFile {
        policy: run.policy.clone(),
        challenge: Some(run.challenge),
        registry: run.registry.clone(),
    };
    write(&policy_path, &policy.to_json())?;
    write(&verdict_path, &run.verdict.to_json())?;
    Ok(RunReport {
        scenario_id: spec.scenario,
        deployment: spec.deployment,
        expectation_met: run.expectation_met(),
        variant: run.variant,
        seed,
        bundle_path,
        policy_path,
        verdict: run.verdict,
        elapsed_virtual_ms: run.elapsed_virtual_ms,
    })
}

/// One line per runnable (scenario, deployment, variant).
pub fn list_scenarios() -> Vec<String> {
    let mut out = Vec::new();
    for id in ScenarioId::ALL {
        for dep in Deployment::ALL {
            for v in id.variants(dep) {
                let checks: Vec<String> = id
                    .targeted_checks(v)
                    .iter()
                    .map(|c| c.to_string())
                    .collect();
                out.push(format!(
                    "{id}-{}:{v}\ttargets [{}]",
                    format!("{dep:?}").to_lowercase(),
                    checks.join(",")
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_ids() {
        let s = resolve_scenario("a5-s1:clone_ak").unwrap();
        assert_eq!(s.scenario, ScenarioId::A5);
        assert_eq!(s.deployment, Deployment::S1);
        assert_eq!(s.variant.as_deref(), Some("clone_ak"));
        assert_eq!(resolve_scenario("honest").unwrap().deployment, Deployment::S2);
        assert!(resolve_scenario("a5-s2:clone_ak").is_err());
        assert!(matches!(resolve_scenario("a9"), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_config_file_is_io_error() {
        assert!(matches!(
            resolve_scenario("/nonexistent/scenario.json"),
            Err(CliError::Io { .. })
        ));
    }

    #[test]
    fn stems() {
        let s = ScenarioSpec::new(ScenarioId::A1, Deployment::S2);
        assert_eq!(file_stem(&s, "forge_quote"), "a1-s2");
        assert_eq!(file_stem(&s, "forge_report"), "a1-s2-forge_report");
    }
}
