use crate::error::CliResult;

/// Fixed-width scientific formatting so repeated runs give identical bytes.
pub fn num(v: f64) -> String {
    format!("{v:.9e}")
}

/// RFC-4180 table: CRLF records, fields quoted only when needed.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| crate::error::CliError::Io(e.to_string()))
}

/// Least-squares slope of ln y against ln x; None without two usable points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// gnuplot commands plotting `columns` (1-based, with labels) of a CSV
/// against column `x` on log-log axes. Footer rows are skipped by `every`.
pub fn gnuplot_script(csv_name: &str, rows: usize, x: usize, xlabel: &str, columns: &[(usize, &str)]) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str("set logscale xy\n");
    s.push_str(&format!("set xlabel '{xlabel}'\nset ylabel 'normalized MSE'\n"));
    let plots: Vec<String> = columns
        .iter()
        .map(|(c, label)| format!("'{csv_name}' every ::1::{rows} using {x}:{c} with linespoints title '{label}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 1.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
        assert!(loglog_slope(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }

    #[test]
    fn quoting_follows_rfc4180() {
        let bytes = csv_bytes(&["a", "b,c"], &[vec!["1".into(), "say \"hi\"".into()]]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,\"b,c\"\r\n1,\"say \"\"hi\"\"\"\r\n");
    }

    #[test]
    fn monotone_check() {
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(strictly_decreasing(&[1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0]));
    }
}
