//! Plain-text numeric exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::plant::Trajectory;
use crate::spatial::StateProfile;

/// Shortest-round-trip style of C's `%.17g`: 17 significant digits,
/// trailing zeros dropped, exponent form below `1e-4` or from `1e17`.
pub fn format_g17(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Comma-separated table with a header row.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|&v| format_g17(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    fs::write(path, csv_table(header, rows))?;
    Ok(())
}

/// Two columns `z x(z)`.
pub fn profile_text(x: &StateProfile) -> String {
    let mut out = String::new();
    for (z, v) in x.grid().nodes().iter().zip(x.values()) {
        let _ = writeln!(out, "{} {}", format_g17(*z), format_g17(*v));
    }
    out
}

/// Space-separated surface data: first row `nan t_0 … t_K`, then one row
/// `z_j x(z_j, t_0) …` per node.
pub fn trajectory_matrix(traj: &Trajectory) -> String {
    let mut out = String::from("nan");
    for t in &traj.times {
        out.push(' ');
        out.push_str(&format_g17(*t));
    }
    out.push('\n');
    for (j, z) in traj.grid().nodes().iter().enumerate() {
        out.push_str(&format_g17(*z));
        for x in &traj.profiles {
            out.push(' ');
            out.push_str(&format_g17(x.values()[j]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_matches_printf() {
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1e-5, "1.0000000000000001e-05"),
            (123456.0, "123456"),
            (1e17, "1e+17"),
            (0.51769, "0.51768999999999998"),
            (1.0 / 3.0, "0.33333333333333331"),
            (2e-4, "0.00020000000000000001"),
            (0.0, "0"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g17(v), s, "{v}");
        }
    }

    #[test]
    fn g17_round_trips() {
        for v in [std::f64::consts::PI, -9.1727, 3.7412e-14, 6.02e23, f64::MIN_POSITIVE] {
            assert_eq!(format_g17(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_layout() {
        let s = csv_table(&["t", "x"], &[vec![0.0, 1.5], vec![0.5, -2.0]]);
        assert_eq!(s, "t,x\n0,1.5\n0.5,-2\n");
    }

    #[test]
    fn surface_rows_are_nodes() {
        let grid = crate::spatial::Grid::uniform(11).unwrap();
        let x0 = StateProfile::from_fn(&grid, |z| z);
        let x1 = StateProfile::from_fn(&grid, |z| 2.0 * z);
        let tr = Trajectory {
            times: vec![0.0, 0.5],
            profiles: vec![x0, x1],
            inputs: vec![0.0, 0.0],
            blowup: None,
        };
        let text = trajectory_matrix(&tr);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "nan 0 0.5");
        assert_eq!(lines[11], "1 1 2");
    }
}
