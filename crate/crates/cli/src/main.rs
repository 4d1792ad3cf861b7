// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcea_cli::{
    cmd_matrix, cmd_run, cmd_verify, list_scenarios, CliError, Format, MatrixOptions, RunReport,
    EXIT_MISMATCH, EXIT_OK, EXIT_USAGE,
};
use dcea_core::verifier::Verdict;

#[derive(Parser)]
#[command(name = "dcea", version, about = "Composite TD + TPM attestation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its bundle, policy and verdict files.
    Run {
        /// Scenario file, or an id such as `honest-s2` or `a5-s1:clone_ak`.
        #[arg(long)]
        scenario: String,
        #[arg(long, env = "DCEA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Appraise a bundle file offline against a policy file.
    Verify {
        bundle: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Regenerate the detection matrix from randomized runs.
    Matrix {
        /// Directory receiving matrix.csv and matrix.md.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "DCEA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        seeds_per_cell: usize,
        #[arg(long)]
        parallel: bool,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
    /// List runnable scenarios and the checks each targets.
    List,
}

fn verdict_md(v: &Verdict) -> String {
    let mut s = format!(
        "**{}**\n\n| Check | Name | Result | Flags | Detail |\n|---|---|---|---|---|\n",
        if v.accepted { "ACCEPTED" } else { "REJECTED" }
    );
    for c in &v.checks {
        let flags: Vec<String> = c.flags.iter().map(|f| f.to_string()).collect();
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.check_id,
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            flags.join(", "),
            c.detail.replace('|', "\\|")
        ));
    }
    s
}

fn verdict_csv(v: &Verdict) -> String {
    let mut s = String::from("check,name,passed,flags,detail\n");
    for c in &v.checks {
        let flags: Vec<String> = c.flags.iter().map(|f| f.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},\"{}\"\n",
            c.check_id,
            c.name,
            c.passed,
            flags.join(";"),
            c.detail.replace('"', "\"\"")
        ));
    }
    s
}

fn print_run(r: &RunReport, format: Format) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(r).expect("report serializes")),
        Format::Md => {
            println!(
                "{} {:?} `{}` seed {}: expectation {}\n",
                r.scenario_id,
                r.deployment,
                r.variant,
                r.seed,
                if r.expectation_met { "met" } else { "NOT met" }
            );
            print!("{}", verdict_md(&r.verdict));
        }
        Format::Csv => print!("{}", verdict_csv(&r.verdict)),
    }
}

fn print_verdict(v: &Verdict, format: Format) {
    match format {
        Format::Json => print!("{}", String::from_utf8_lossy(&v.to_json())),
        Format::Md => print!("{}", verdict_md(v)),
        Format::Csv => print!("{}", verdict_csv(v)),
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => {
            let report = cmd_run(&scenario, seed, &out)?;
            print_run(&report, format);
            Ok(report.exit_code())
        }
        Command::Verify {
            bundle,
            policy,
            format,
        } => {
            let v = cmd_verify(&bundle, &policy)?;
            print_verdict(&v, format);
            Ok(if v.accepted { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::Matrix {
            out,
            seed,
            seeds_per_cell,
            parallel,
            format,
        } => {
            let m = cmd_matrix(&MatrixOptions {
                seeds_per_cell,
                base_seed: seed,
                parallel,
            });
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
                    path: dir.clone(),
                    source,
                })?;
                write_file(&dir.join("matrix.csv"), &m.to_csv())?;
                write_file(&dir.join("matrix.md"), &m.to_markdown())?;
            }
            match format {
                Format::Json => print!("{}", m.to_json()),
                Format::Md => print!("{}", m.to_markdown()),
                Format::Csv => print!("{}", m.to_csv()),
            }
            Ok(if m.all_as_expected() { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::List => {
            for line in list_scenarios() {
                println!("{line}");
            }
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("dcea: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
