//! CSV and JSON output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::transcription::OcpSolution;

/// One row per node: `t, x_i.., u_i.., lambda_i.., mu_i..`.
pub fn solution_csv(sol: &OcpSolution) -> String {
    let tr = &sol.primal;
    let (nx, nu) = (tr.states[0].len(), tr.inputs[0].len());
    let nm = sol.dual.multipliers.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..nx).map(|i| format!("x_{i}")));
    header.extend((0..nu).map(|i| format!("u_{i}")));
    header.extend((0..nx).map(|i| format!("lambda_{i}")));
    header.extend((0..nm).map(|i| format!("mu_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..tr.len() {
        let row = std::iter::once(tr.grid[k])
            .chain(tr.states[k].iter().copied())
            .chain(tr.inputs[k].iter().copied())
            .chain(sol.dual.adjoints[k].iter().copied())
            .chain(sol.dual.multipliers[k].iter().copied());
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `<stem>.csv` and the `<stem>.json` sidecar into `dir`.
pub fn write_solution(dir: &Path, stem: &str, sol: &OcpSolution) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), solution_csv(sol))?;
    write_json(&dir.join(format!("{stem}.json")), &sol.summary())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_halkin;
    use crate::transcription::{solve_ocp, TranscriptionConfig};

    #[test]
    fn csv_layout() {
        // [TRIVIAL] header plus one row per node, fixed-width scientific floats
        let h = make_halkin();
        let sol = solve_ocp(&h.problem, &[0.5], &TranscriptionConfig::new(21, 2.0)).unwrap();
        let csv = solution_csv(&sol);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x_0,u_0,lambda_0,mu_0,mu_1");
        assert_eq!(lines.len(), 22);
        assert!(lines[1].starts_with("0.0000000000000000e0,5.0000000000000000e-1,"));
        assert_eq!(lines[5].split(',').count(), 6);
    }

    #[test]
    fn sidecar_keys() {
        // [TRIVIAL]
        let h = make_halkin();
        let sol = solve_ocp(&h.problem, &[0.5], &TranscriptionConfig::new(21, 2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_solution(dir.path(), "run", &sol).unwrap();
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
        for key in ["value", "kkt_residual", "hamiltonian_mean", "hamiltonian_std", "T", "N"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["N"], 20);
    }
}
