//! Report files: per-epoch CSV, JSON summary, attack CSV/JSON, burn-in
//! trace. Columns are documented in docs/metrics.md.

use std::path::Path;

use crate::attack;
use crate::burnin;
use crate::error::Result;
use crate::harness::experiment::ExperimentOutcome;

pub fn epoch_csv(outcome: &ExperimentOutcome) -> String {
    let mut header = String::from("epoch,train_loss");
    for (name, _) in outcome
        .rows
        .first()
        .map(|r| r.head_accuracy.as_slice())
        .unwrap_or(&[])
    {
        header.push_str(&format!(",acc_{}", name));
    }
    header.push_str(",dcor_xz,dcor_yz\n");
    let mut out = header;
    for r in &outcome.rows {
        out.push_str(&format!("{},{}", r.epoch, r.train_loss));
        for (_, acc) in &r.head_accuracy {
            out.push_str(&format!(",{}", acc));
        }
        out.push_str(&format!(",{},{}\n", r.dcor_xz, r.dcor_yz));
    }
    out
}

pub fn summary_json(outcome: &ExperimentOutcome) -> serde_json::Value {
    serde_json::json!({
        "seed": outcome.seed,
        "config": outcome.config_echo,
        "val_accuracy": outcome
            .val_accuracy
            .iter()
            .map(|(n, a)| serde_json::json!({"head": n, "accuracy": a}))
            .collect::<Vec<_>>(),
        "final_dcor_xz": outcome.final_dcor_xz(),
        "attack": outcome.attack.as_ref().map(|a| serde_json::json!({
            "mean_l2": a.mean_l2,
            "median_l2": a.median_l2,
            "q1_l2": a.q1_l2,
            "q3_l2": a.q3_l2,
            "mse": a.mse,
        })),
    })
}

/// Write report.csv, report.json, and when available attack.csv,
/// attack.json, and burnin.csv into `dir`.
pub fn write_experiment(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), epoch_csv(outcome))?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&summary_json(outcome)).unwrap() + "\n",
    )?;
    if let Some(a) = &outcome.attack {
        attack::write_report_csv(a, &dir.join("attack.csv"))?;
        attack::write_report_json(a, &dir.join("attack.json"))?;
    }
    if let Some(trace) = &outcome.burnin_trace {
        burnin::write_trace_csv(&dir.join("burnin.csv"), trace)?;
    }
    Ok(())
}

/// Human summary of a written report directory.
pub fn describe_report_dir(dir: &Path) -> Result<String> {
    let summary_path = dir.join("report.json");
    let text = std::fs::read_to_string(&summary_path)
        .map_err(|e| crate::error::Error::Config(format!("cannot read {:?}: {}", summary_path, e)))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| crate::error::Error::Format(format!("bad report.json: {}", e)))?;
    let mut out = String::new();
    out.push_str(&format!("seed: {}\n", v["seed"]));
    out.push_str(&format!("final dcor(X,Z): {}\n", v["final_dcor_xz"]));
    if let Some(accs) = v["val_accuracy"].as_array() {
        for a in accs {
            out.push_str(&format!(
                "accuracy[{}]: {}\n",
                a["head"].as_str().unwrap_or("?"),
                a["accuracy"]
            ));
        }
    }
    if !v["attack"].is_null() {
        out.push_str(&format!(
            "attacker test mse: {}  mean l2: {}\n",
            v["attack"]["mse"], v["attack"]["mean_l2"]
        ));
    }
    Ok(out)
}
