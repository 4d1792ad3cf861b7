// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dcea_core::adversary::{relevant, run_scenario, Deployment, ScenarioId, ScenarioSpec};
use dcea_core::verifier::{AttackId, CheckId, Goal};

/// Matrix rows, in print order.
pub const MATRIX_ROWS: [ScenarioId; 8] = ScenarioId::ALL;

/// Verifier-side one-way delay is drawn from this range per run.
const NETWORK_DELAY_MS: std::ops::RangeInclusive<u64> = 5..=80;
/// Attacker relay one-way delay range.
const RELAY_DELAY_MS: std::ops::RangeInclusive<u64> = 25..=80;
/// Failure diagnostics kept per cell.
const MAX_FAILURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixOptions {
    pub seeds_per_cell: usize,
    pub base_seed: u64,
    pub parallel: bool,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self {
            seeds_per_cell: 50,
            base_seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    NotApplicable,
    /// Honest cell: every run accepted.
    Accepted,
    /// Honest cell with at least one rejection.
    FalseReject,
    /// Attack cell: every run rejected with the attack's flag.
    Detected,
    Undetected,
    /// Some run could not be simulated.
    Error,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::NotApplicable => "not-applicable",
            CellStatus::Accepted => "accepted",
            CellStatus::FalseReject => "false-reject",
            CellStatus::Detected => "detected",
            CellStatus::Undetected => "undetected",
            CellStatus::Error => "error",
        }
    }

    /// Whether the cell agrees with its expectation.
    pub fn as_expected(self) -> bool {
        matches!(
            self,
            CellStatus::NotApplicable | CellStatus::Accepted | CellStatus::Detected
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: ScenarioId,
    pub deployment: Deployment,
    pub status: CellStatus,
    pub runs: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub errors: usize,
    pub variants: BTreeSet<String>,
    /// Union of failed checks over all runs.
    pub mechanisms: BTreeSet<CheckId>,
    pub attack_flags: BTreeSet<AttackId>,
    pub failed_goals: BTreeSet<Goal>,
    pub failures: Vec<String>,
}

impl Cell {
    fn empty(scenario: ScenarioId, deployment: Deployment, status: CellStatus) -> Self {
        Self {
            scenario,
            deployment,
            status,
            runs: 0,
            false_positives: 0,
            false_negatives: 0,
            errors: 0,
            variants: BTreeSet::new(),
            mechanisms: BTreeSet::new(),
            attack_flags: BTreeSet::new(),
            failed_goals: BTreeSet::new(),
            failures: Vec::new(),
        }
    }

    fn note_failure(&mut self, msg: String) {
        if self.failures.len() < MAX_FAILURES {
            self.failures.push(msg);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matrix {
    pub seeds_per_cell: usize,
    pub base_seed: u64,
    pub cells: Vec<Cell>,
}

fn applicable(id: ScenarioId, dep: Deployment) -> bool {
    id.attack().is_none_or(|a| relevant(a, dep))
}

/// One randomized run of a cell: a rotating variant, random link delays
/// and a fresh world seed, all drawn from a per-run stream.
fn run_spec(id: ScenarioId, dep: Deployment, base_seed: u64, row: usize, i: usize) -> (ScenarioSpec, u64) {
    let stream = base_seed
        .wrapping_mul(0x100_0000_01b3)
        .wrapping_add(((row as u64) << 40) | ((dep as u64) << 32) | i as u64);
    let mut rng = ChaCha20Rng::seed_from_u64(stream);
    let variants = id.variants(dep);
    let mut spec = ScenarioSpec::new(id, dep).with_variant(variants[i % variants.len()]);
    spec.network_delay_ms = rng.gen_range(NETWORK_DELAY_MS);
    spec.relay_delay_ms = rng.gen_range(RELAY_DELAY_MS);
    (spec, rng.gen())
}

enum RunOutcome {
    Done {
        variant: String,
        expected: bool,
        failed: BTreeSet<CheckId>,
        flags: BTreeSet<AttackId>,
        goals: BTreeSet<Goal>,
        accepted: bool,
    },
    Failed(String),
}

fn one_run(spec: &ScenarioSpec, seed: u64) -> RunOutcome {
    match run_scenario(spec, seed) {
        Ok(run) => RunOutcome::Done {
            expected: run.expectation_met(),
            failed: run.verdict.failed_checks(),
            flags: run.verdict.attack_flags.clone(),
            goals: run
                .verdict
                .goals
                .iter()
                .filter(|(_, s)| **s == dcea_core::verifier::GoalStatus::Fail)
                .map(|(g, _)| *g)
                .collect(),
            accepted: run.verdict.accepted,
            variant: run.variant,
        },
        Err(e) => RunOutcome::Failed(e.to_string()),
    }
}

/// Runs every applicable (scenario, deployment) cell `seeds_per_cell`
/// times. Attacks irrelevant to a deployment are reported as
/// not applicable without being run.
pub fn cmd_matrix(opts: &MatrixOptions) -> Matrix {
    let mut jobs = Vec::new();
    for (row, id) in MATRIX_ROWS.into_iter().enumerate() {
        for dep in Deployment::ALL {
            if applicable(id, dep) {
                for i in 0..opts.seeds_per_cell {
                    jobs.push((row, dep, i));
                }
            }
        }
    }
    let exec = |&(row, dep, i): &(usize, Deployment, usize)| {
        let (spec, seed) = run_spec(MATRIX_ROWS[row], dep, opts.base_seed, row, i);
        (row, dep, seed, one_run(&spec, seed))
    };
    let results: Vec<_> = if opts.parallel {
        jobs.par_iter().map(exec).collect()
    } else {
        jobs.iter().map(exec).collect()
    };

    let mut cells: Vec<Cell> = Vec::new();
    for id in MATRIX_ROWS {
        for dep in Deployment::ALL {
            let status = if applicable(id, dep) {
                if id.attack().is_none() {
                    CellStatus::Accepted
                } else {
                    CellStatus::Detected
                }
            } else {
                CellStatus::NotApplicable
            };
            cells.push(Cell::empty(id, dep, status));
        }
    }
    for (row, dep, seed, outcome) in results {
        let cell = &mut cells[row * Deployment::ALL.len() + dep as usize];
        cell.runs += 1;
        let honest = cell.scenario.attack().is_none();
        match outcome {
            RunOutcome::Failed(msg) => {
                cell.errors += 1;
                cell.status = CellStatus::Error;
                cell.note_failure(format!("seed {seed}: {msg}"));
            }
            RunOutcome::Done {
                variant,
                expected,
                failed,
                flags,
                goals,
                accepted,
            } => {
                if !expected {
                    if honest || accepted {
                        if honest {
                            cell.false_positives += 1;
                        } else {
                            cell.false_negatives += 1;
                        }
                    } else {
                        // Rejected, but without the scenario's own flag.
                        cell.false_negatives += 1;
                    }
                    cell.note_failure(format!("seed {seed} {variant}: failed {failed:?} flags {flags:?}"));
                    if cell.status != CellStatus::Error {
                        cell.status = if honest {
                            CellStatus::FalseReject
                        } else {
                            CellStatus::Undetected
                        };
                    }
                }
                cell.variants.insert(variant);
                cell.mechanisms.extend(failed);
                cell.attack_flags.extend(flags);
                cell.failed_goals.extend(goals);
            }
        }
    }
    Matrix {
        seeds_per_cell: opts.seeds_per_cell,
        base_seed: opts.base_seed,
        cells,
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items
        .into_iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

impl Matrix {
    pub fn cell(&self, id: ScenarioId, dep: Deployment) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.scenario == id && c.deployment == dep)
    }

    /// Every cell matches its expectation.
    pub fn all_as_expected(&self) -> bool {
        self.cells.iter().all(|c| c.status.as_expected())
    }

    pub fn false_positives(&self) -> usize {
        self.cells.iter().map(|c| c.false_positives).sum()
    }

    pub fn false_negatives(&self) -> usize {
        self.cells.iter().map(|c| c.false_negatives).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,deployment,status,runs,false_positives,false_negatives,errors,variants,mechanisms,attack_flags,failed_goals\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{},{},{},{},{},{}",
                c.scenario,
                c.deployment,
                c.status.as_str(),
                c.runs,
                c.false_positives,
                c.false_negatives,
                c.errors,
                join(&c.variants, ";"),
                join(&c.mechanisms, ";"),
                join(&c.attack_flags, ";"),
                join(c.failed_goals.iter().map(|g| format!("{g:?}")), ";"),
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# Detection matrix\n\n{} randomized runs per applicable cell, base seed {}.\n\n",
            self.seeds_per_cell, self.base_seed
        );
        out.push_str("| Scenario | S1 | S2 |\n|---|---|---|\n");
        for id in MATRIX_ROWS {
            let show = |dep| {
                let c = self.cell(id, dep).expect("every row has both columns");
                match c.status {
                    CellStatus::NotApplicable => "n/a".to_owned(),
                    s => format!("{} ({}/{})", s.as_str(), c.runs - c.false_positives - c.false_negatives - c.errors, c.runs),
                }
            };
            let _ = writeln!(out, "| {id} | {} | {} |", show(Deployment::S1), show(Deployment::S2));
        }
        out.push_str("\n## Mechanisms\n\n| Scenario | Deployment | Failed checks | Attack flags | Goals violated |\n|---|---|---|---|---|\n");
        for c in self.cells.iter().filter(|c| c.status != CellStatus::NotApplicable) {
            let _ = writeln!(
                out,
                "| {} | {:?} | {} | {} | {} |",
                c.scenario,
                c.deployment,
                join(&c.mechanisms, ", "),
                join(&c.attack_flags, ", "),
                join(c.failed_goals.iter().map(|g| format!("{g:?}")), ", "),
            );
        }
        let failures: Vec<&Cell> = self.cells.iter().filter(|c| !c.failures.is_empty()).collect();
        if !failures.is_empty() {
            out.push_str("\n## Failures\n\n");
            for c in failures {
                for f in &c.failures {
                    let _ = writeln!(out, "- {} {:?}: {f}", c.scenario, c.deployment);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("matrix serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_specs_are_deterministic_and_in_range() {
        for i in 0..20 {
            let (a, sa) = run_spec(ScenarioId::A1, Deployment::S2, 9, 1, i);
            let (b, sb) = run_spec(ScenarioId::A1, Deployment::S2, 9, 1, i);
            assert_eq!((a.clone(), sa), (b, sb));
            assert!(NETWORK_DELAY_MS.contains(&a.network_delay_ms));
            assert!(RELAY_DELAY_MS.contains(&a.relay_delay_ms));
        }
        let (a, _) = run_spec(ScenarioId::A1, Deployment::S2, 9, 1, 0);
        let (b, _) = run_spec(ScenarioId::A1, Deployment::S2, 9, 1, 1);
        assert_ne!(a.variant, b.variant);
    }

    #[test]
    fn irrelevant_cells_are_not_run() {
        let m = cmd_matrix(&MatrixOptions {
            seeds_per_cell: 1,
            ..MatrixOptions::default()
        });
        let c = m.cell(ScenarioId::A2MixMatch, Deployment::S1).unwrap();
        assert_eq!((c.status, c.runs), (CellStatus::NotApplicable, 0));
        assert!(m.to_csv().lines().count() == 1 + MATRIX_ROWS.len() * 2);
    }
}
