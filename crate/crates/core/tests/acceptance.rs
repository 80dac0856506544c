use std::collections::BTreeMap;
use std::process::ExitCode;

use motif::pipeline::PipelineConfig;
use motif::repro::run_repro;

fn main() -> ExitCode {
    let seed = std::env::var("MOTIF_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let report = match run_repro(&cfg) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL acceptance run aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut by_criterion: BTreeMap<u8, Vec<_>> = BTreeMap::new();
    for c in &report.checks {
        by_criterion.entry(c.criterion).or_default().push(c);
    }
    let mut all = true;
    for criterion in 1..=10u8 {
        let checks = by_criterion
            .get(&criterion)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
        all &= passed;
        let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
        let details: Vec<&str> = checks.iter().map(|c| c.detail.as_str()).collect();
        println!(
            "{} criterion {criterion:>2} {}: {}",
            if passed { "PASS" } else { "FAIL" },
            if names.is_empty() {
                "missing".to_string()
            } else {
                names.join(" / ")
            },
            details.join("; ")
        );
    }
    println!(
        "seed {seed}: {}",
        if all {
            "all criteria pass"
        } else {
            "some criteria fail"
        }
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
