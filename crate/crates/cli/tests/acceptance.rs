// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use dcea_cli::{cmd_matrix, cmd_run, CellStatus, MatrixOptions};
use dcea_core::adversary::{
    relevant, run_honest, run_scenario, Deployment, Mirror, ScenarioId, ScenarioSpec, World,
    WorldConfig, TARGET_PLATFORM, TENANT_TD,
};
use dcea_core::crypto::{claims, digest, keygen, KeyKind, Nonce};
use dcea_core::evidence::{
    check_rtmr_pcr_consistency, combined_event_log, deserialize, replay_event_log, serialize,
    LogFilter,
};
use dcea_core::platform::{measured_launch, HostStack};
use dcea_core::tpm::{default_policy_pcrs, default_quote_selection, TpmError, TpmKind, TpmState};
use dcea_core::verifier::{
    appraise, default_rtt_threshold, AkRegistry, AttackId, ChallengeStatus, CheckId,
    Registration, RegistryEntry, Verifier,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seeds(n: usize, stream: u64) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(stream);
    (0..n).map(|_| rng.gen()).collect()
}

fn detection_matrix() -> Outcome {
    let started = Instant::now();
    let m = cmd_matrix(&MatrixOptions {
        seeds_per_cell: 50,
        base_seed: 2024,
        parallel: true,
    });
    let elapsed = started.elapsed();
    for c in &m.cells {
        let want = match c.scenario.attack() {
            None => CellStatus::Accepted,
            Some(a) if relevant(a, c.deployment) => CellStatus::Detected,
            Some(_) => CellStatus::NotApplicable,
        };
        ensure(c.status == want, || {
            format!("cell ({}, {:?}) is {:?}, want {want:?}: {:?}", c.scenario, c.deployment, c.status, c.failures)
        })?;
        if want != CellStatus::NotApplicable {
            ensure(c.runs >= 50, || format!("cell ({}, {:?}) ran {} times", c.scenario, c.deployment, c.runs))?;
        }
        if let (Some(a), CellStatus::Detected) = (c.scenario.attack(), c.status) {
            ensure(c.attack_flags.contains(&a), || format!("{} never flagged {a}", c.scenario))?;
            let goals: BTreeSet<_> = a.goals().iter().copied().collect();
            ensure(goals.is_subset(&c.failed_goals), || {
                format!("{} misses goals {:?}", c.scenario, goals.difference(&c.failed_goals).collect::<Vec<_>>())
            })?;
        }
    }
    ensure(m.cell(ScenarioId::A6, Deployment::S2).map(|c| c.status) == Some(CellStatus::Detected), || "(A6, S2) not detected".into())?;
    ensure(m.cell(ScenarioId::A2MixMatch, Deployment::S1).map(|c| c.status) == Some(CellStatus::NotApplicable), || "(A2, S1) not n/a".into())?;
    ensure(m.false_positives() == 0 && m.false_negatives() == 0, || {
        format!("{} false positives, {} false negatives", m.false_positives(), m.false_negatives())
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("matrix took {elapsed:?}"))?;
    let runs: usize = m.cells.iter().map(|c| c.runs).sum();
    Ok(format!("{runs} runs, 0 FP / 0 FN, {:.1} s", elapsed.as_secs_f64()))
}

fn seal_policy() -> Outcome {
    let ca = keygen(b"acceptance-provider-ca", KeyKind::Ca).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut violations = 0;
    for i in 0..1000u32 {
        let stack = HostStack::random(&mut rng);
        let kind = if i % 2 == 0 { TpmKind::Discrete } else { TpmKind::Virtual };
        let mut tpm = TpmState::init(&i.to_be_bytes(), &ca, claims([("ppid", "p")]), kind)
            .map_err(|e| e.to_string())?;
        measured_launch(&stack, &mut tpm).map_err(|e| e.to_string())?;
        let h = tpm
            .create_sealed_ak(b"ak", &default_policy_pcrs(), Some(&ca))
            .map_err(|e| e.to_string())?;
        let mut mutated = stack.clone();
        let img = match rng.gen_range(0..3) {
            0 => &mut mutated.vtpm_binary,
            1 => &mut mutated.kernel_image,
            _ => &mut mutated.hypervisor_image,
        };
        let at = rng.gen_range(0..img.len());
        img[at] ^= rng.gen_range(1..=255u8);
        let mut rebooted = tpm.reboot();
        measured_launch(&mutated, &mut rebooted).map_err(|e| e.to_string())?;
        match rebooted.tpm_quote(h, &default_quote_selection(), &Nonce([7; 32])) {
            Err(TpmError::PolicyViolation { .. }) => violations += 1,
            other => return Err(format!("stack {i}: quote returned {other:?}")),
        }
    }
    Ok(format!("{violations}/1000 mutated stacks refused with PolicyViolation"))
}

fn replay_oracle() -> Outcome {
    let mut deletions = 0usize;
    for (i, seed) in seeds(1000, 3).into_iter().enumerate() {
        let dep = Deployment::ALL[i % 2];
        let mut w = World::new(WorldConfig::new(dep), seed).map_err(|e| e.to_string())?;
        w.launch_all().map_err(|e| e.to_string())?;
        let key = w.provision_quoting(TARGET_PLATFORM).map_err(|e| e.to_string())?;
        w.launch_td(TENANT_TD, TARGET_PLATFORM, &key.public).map_err(|e| e.to_string())?;
        let target = key.tpm.clone();
        w.run_workload(TENANT_TD, |_, _| Mirror::To(target.clone())).map_err(|e| e.to_string())?;
        let tpm = w.tpm(&key.tpm).map_err(|e| e.to_string())?;
        let td = w.td(TENANT_TD).map_err(|e| e.to_string())?;
        let log = combined_event_log(tpm.log(), td.guest_log());
        let r = replay_event_log(&log, LogFilter::Both).map_err(|e| e.to_string())?;
        ensure(&r.pcrs == tpm.pcrs().registers(), || format!("seed {seed}: PCR replay differs"))?;
        ensure(&r.rtmrs == td.rtmrs() && r.mrtd.as_ref() == Some(td.mrtd()), || {
            format!("seed {seed}: TD register replay differs")
        })?;

        let b = run_honest(dep, seed).map_err(|e| e.to_string())?.bundle;
        for k in 0..b.event_log.len() {
            let mut cut = b.event_log.clone();
            cut.remove(k);
            ensure(!check_rtmr_pcr_consistency(&b.td_report, &b.tpm_quote, &cut).all_matched(), || {
                format!("seed {seed}: deleting entry {k} went unnoticed")
            })?;
            deletions += 1;
        }
    }
    Ok(format!("1000 worlds replay exactly; {deletions} single deletions all detected"))
}

fn binding() -> Outcome {
    for seed in seeds(500, 4) {
        for dep in Deployment::ALL {
            let run = run_honest(dep, seed).map_err(|e| e.to_string())?;
            let b = &run.bundle;
            ensure(digest(&b.tpm_quote.ak_public.0) == b.td_report.body.mrconfigid, || {
                format!("honest {dep:?} seed {seed}: MRCONFIGID differs from digest(AK)")
            })?;
        }
        let spec = ScenarioSpec::new(ScenarioId::A5, Deployment::S2).with_variant("replace_ak");
        let run = run_scenario(&spec, seed).map_err(|e| e.to_string())?;
        let b = &run.bundle;
        ensure(digest(&b.tpm_quote.ak_public.0) != b.td_report.body.mrconfigid, || {
            format!("A5 seed {seed}: substituted AK still bound")
        })?;
        ensure(run.verdict.failed_checks().contains(&CheckId::C3), || format!("A5 seed {seed}: C3 passed"))?;
    }
    Ok("500 seeds: honest bound, every A5 substitution unbound and rejected by C3".into())
}

fn relay_timing() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst_margin = u64::MAX;
    for _ in 0..500 {
        let seed: u64 = rng.gen();
        let d = rng.gen_range(5..=80);
        let r = rng.gen_range(25..=120);
        let mut relay = ScenarioSpec::new(ScenarioId::A2Frankenstein, Deployment::S2);
        relay.network_delay_ms = d;
        relay.relay_delay_ms = r;
        let run = run_scenario(&relay, seed).map_err(|e| e.to_string())?;
        let threshold = default_rtt_threshold(550, d);
        ensure(run.policy.rtt_threshold_ms == threshold, || "threshold is not L + 2d".into())?;
        let rtt = run.bundle.timing.rtt();
        ensure(rtt > threshold && run.verdict.failed_checks().contains(&CheckId::C7), || {
            format!("relay seed {seed} d={d} r={r}: rtt {rtt} vs {threshold}")
        })?;
        ensure(run_scenario(&relay, seed).map_err(|e| e.to_string())?.bundle.timing == run.bundle.timing, || {
            "relay timing not deterministic".into()
        })?;
        worst_margin = worst_margin.min(rtt - threshold);
        for dep in Deployment::ALL {
            let mut honest = ScenarioSpec::new(ScenarioId::Honest, dep);
            honest.network_delay_ms = d;
            let h = run_scenario(&honest, seed).map_err(|e| e.to_string())?;
            let limit = default_rtt_threshold(dep.quote_latency_ms(), d);
            ensure(h.bundle.timing.rtt() <= limit && h.verdict.accepted, || {
                format!("honest {dep:?} seed {seed}: rtt {} > {limit}", h.bundle.timing.rtt())
            })?;
        }
    }
    Ok(format!("500/500 relays over threshold (min margin {worst_margin} ms); honest never over"))
}

fn freshness() -> Outcome {
    for (i, seed) in seeds(500, 6).into_iter().enumerate() {
        let dep = Deployment::ALL[i % 2];
        let run = run_honest(dep, seed).map_err(|e| e.to_string())?;
        ensure(run.verdict.accepted, || format!("seed {seed}: honest rejected"))?;
        let v = Verifier::new(run.policy.clone(), seed ^ 1).map_err(|e| e.to_string())?;
        let fresh = v.challenge();
        let verdict = v.verify_bundle(&run.bundle, &fresh);
        ensure(!verdict.accepted && verdict.failed_checks() == [CheckId::C4].into(), || {
            format!("seed {seed}: replay gave {:?}", verdict.failed_checks())
        })?;
    }
    Ok("500/500 replays rejected by C4 alone".into())
}

fn registry_uniqueness() -> Outcome {
    let run = run_honest(Deployment::S2, 11).map_err(|e| e.to_string())?;
    let ak = run.bundle.tpm_quote.ak_public;
    let mut reg = AkRegistry::new();
    let entry = |p: &str| RegistryEntry {
        issuer: "ek".into(),
        timestamp: 1,
        platform_id: p.into(),
    };
    ensure(reg.register(ak, entry("elsewhere")) == Registration::Registered, || "first registration refused".into())?;
    ensure(matches!(reg.register(ak, entry("other")), Registration::Duplicate(_)), || "second platform not Duplicate".into())?;

    let v = appraise(&run.bundle, &run.policy, &run.challenge, ChallengeStatus::Outstanding, &mut reg.clone());
    ensure(v.failed_checks() == [CheckId::C8].into() && v.attack_flags.contains(&AttackId::A5), || {
        format!("C8 not sole rejection: {:?}", v.failed_checks())
    })?;
    let mut lax = run.policy.clone();
    lax.require_ak_registry_uniqueness = false;
    ensure(appraise(&run.bundle, &lax, &run.challenge, ChallengeStatus::Outstanding, &mut reg).accepted, || {
        "rejected without the uniqueness requirement".into()
    })?;
    let clone = run_scenario(
        &ScenarioSpec::new(ScenarioId::A5, Deployment::S1).with_variant("clone_ak"),
        11,
    )
    .map_err(|e| e.to_string())?;
    ensure(clone.verdict.failed_checks() == [CheckId::C8].into(), || "cloned vTPM AK not caught by C8".into())?;
    Ok("Duplicate on second platform; C8 rejects; cloned vTPM AK rejected".into())
}

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn serialization() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    for i in 0..1000 {
        let id = ScenarioId::ALL[rng.gen_range(0..ScenarioId::ALL.len())];
        let dep = Deployment::ALL[rng.gen_range(0..2)];
        let variants = id.variants(dep);
        let spec = ScenarioSpec::new(id, dep).with_variant(variants[rng.gen_range(0..variants.len())]);
        let mut b = run_scenario(&spec, rng.gen()).map_err(|e| e.to_string())?.bundle;
        b.scenario_meta.insert(format!("k{i}"), format!("\u{e9}\"\\ {}", rng.gen::<u32>()));
        let bytes = serialize(&b);
        let back = deserialize(&bytes).map_err(|e| e.to_string())?;
        ensure(back == b && serialize(&back) == bytes, || format!("bundle {i} ({id} {dep:?}) changed in roundtrip"))?;
    }
    for stem in ["honest-s2", "a5-s2"] {
        let golden = fixtures_dir();
        for _ in 0..2 {
            let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
            cmd_run(stem, 7, tmp.path()).map_err(|e| e.to_string())?;
            for ext in ["dcea.json", "policy.json", "verdict.json"] {
                let name = format!("{stem}.{ext}");
                let fresh = std::fs::read(tmp.path().join(&name)).map_err(|e| e.to_string())?;
                let want = std::fs::read(golden.join(&name)).map_err(|e| format!("{name}: {e}"))?;
                ensure(fresh == want, || format!("{name} differs from the golden fixture"))?;
            }
        }
    }
    Ok("1000 roundtrips identical; golden fixtures byte-stable".into())
}

fn check_independence() -> Outcome {
    let mut load_bearing = BTreeSet::new();
    let mut cases = 0;
    for dep in Deployment::ALL {
        for id in ScenarioId::ALL.into_iter().filter(|id| id.attack().is_some()) {
            for v in id.variants(dep) {
                let targeted = id.targeted_checks(v);
                for seed in seeds(10, 9) {
                    let run = run_scenario(&ScenarioSpec::new(id, dep).with_variant(v), seed)
                        .map_err(|e| e.to_string())?;
                    ensure(run.verdict.failed_checks() == targeted, || {
                        format!("{id} {dep:?} {v}: failed {:?}, targeted {targeted:?}", run.verdict.failed_checks())
                    })?;
                    ensure(run.reappraise(&targeted).accepted, || format!("{id} {dep:?} {v}: still rejected"))?;
                    cases += 1;
                }
                if targeted.len() == 1 {
                    load_bearing.extend(targeted);
                }
            }
        }
    }
    ensure(load_bearing.len() == CheckId::ALL.len(), || {
        format!("checks never solely targeted: {:?}", CheckId::ALL.iter().filter(|c| !load_bearing.contains(c)).collect::<Vec<_>>())
    })?;
    Ok(format!("{cases} runs flip to accept; each of C1-C8 solely load-bearing somewhere"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("detection matrix", detection_matrix),
        ("seal-policy enforcement", seal_policy),
        ("event-log replay oracle", replay_oracle),
        ("AK binding", binding),
        ("relay timing", relay_timing),
        ("freshness", freshness),
        ("registry uniqueness", registry_uniqueness),
        ("serialization", serialization),
        ("check independence", check_independence),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        match f() {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg} [{:.1} s]", n + 1, t.elapsed().as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg}", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
