//! CSV and JSON-lines writers for tables and trajectories.
//!
//! Numbers are written in scientific notation with 9 significant digits.

use std::io::{self, Write};

use crate::bath::RateTable;
use crate::nmqj::JumpEvent;
use crate::scenarios::{ScanRow, Trajectory};

/// `x` with 9 significant digits, e.g. `1.23456789e-3`.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.8e}")
}

fn fmt_freq(x: f64) -> String {
    // 6 significant digits without an exponent for ordinary magnitudes
    if x == 0.0 {
        return "0".into();
    }
    let digits = 6 - 1 - x.abs().log10().floor() as i32;
    let s = format!("{:.*}", digits.max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `t_ps,gamma_dephasing,gamma_<ω>,...` with one row per grid time.
pub fn write_rates_csv<W: Write>(table: &RateTable<f64>, mut w: W) -> io::Result<()> {
    let mut header = vec!["t_ps".to_string()];
    for f in &table.frequencies {
        header.push(if *f == 0.0 { "gamma_dephasing".into() } else { format!("gamma_{}", fmt_freq(*f)) });
    }
    writeln!(w, "{}", header.join(","))?;
    for (t, row) in table.times.iter().zip(&table.gamma) {
        let mut line = fmt_num(*t);
        for g in row {
            line.push(',');
            line.push_str(&fmt_num(*g));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// `t_ps,rho_re_mn...,rho_im_mn...,min_eig` over the upper triangle
/// (one-based indices), plus `n_groups,jumps_pos,jumps_neg` for ensembles.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> io::Result<()> {
    let n = traj.site.first().map_or(0, |r| r.nrows());
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let mut header = vec!["t_ps".to_string()];
    header.extend(pairs.iter().map(|(i, j)| format!("rho_re_{}{}", i + 1, j + 1)));
    header.extend(pairs.iter().map(|(i, j)| format!("rho_im_{}{}", i + 1, j + 1)));
    header.push("min_eig".into());
    if traj.ensemble.is_some() {
        header.extend(["n_groups", "jumps_pos", "jumps_neg"].map(String::from));
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, (t, rho)) in traj.times.iter().zip(&traj.site).enumerate() {
        let mut line = fmt_num(*t);
        for &(i, j) in &pairs {
            line.push(',');
            line.push_str(&fmt_num(rho[(i, j)].re));
        }
        for &(i, j) in &pairs {
            line.push(',');
            line.push_str(&fmt_num(rho[(i, j)].im));
        }
        line.push(',');
        line.push_str(&fmt_num(traj.min_eigs[k]));
        if let Some(e) = &traj.ensemble {
            line.push_str(&format!(",{},{},{}", e.n_groups[k], e.jumps_pos[k], e.jumps_neg[k]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// `value,pbar_markov,pbar_nm,violation_flag`; runs that produced no number
/// are written as `nan`.
pub fn write_scan_csv<W: Write>(rows: &[ScanRow], mut w: W) -> io::Result<()> {
    writeln!(w, "value,pbar_markov,pbar_nm,violation_flag")?;
    let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), fmt_num);
    for r in rows {
        writeln!(w, "{},{},{},{}", fmt_num(r.value), opt(r.pbar_markov), opt(r.pbar_nm), u8::from(r.violation))?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_jump_log<W: Write>(events: &[JumpEvent], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.001234567891), "1.23456789e-3");
        assert_eq!(fmt_num(-2.0), "-2.00000000e0");
        assert_eq!(fmt_freq(141.4213562373095), "141.421");
        assert_eq!(fmt_freq(-200.0), "-200");
        assert_eq!(fmt_freq(0.5), "0.5");
    }

    #[test]
    fn scan_rows() {
        let rows = vec![ScanRow { value: 30.0, pbar_markov: Some(0.27), pbar_nm: None, violation: true, diagnostic: None }];
        let mut out = Vec::new();
        write_scan_csv(&rows, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "value,pbar_markov,pbar_nm,violation_flag\n3.00000000e1,2.70000000e-1,nan,1\n");
    }
}
