use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Paired t-test result; `p` is two-tailed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test on per-image scores: t = mean(d) / (sd(d) / √n) with
/// d = a − b and the n − 1 standard deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    // relative to the scale of the differences, so a constant shift stays zero
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (1e-12 * scale).powi(2) {
        return Err(Error::invalid("differences have zero variance"));
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, df: n - 1, p })
}

/// The conventional p < 0.05 threshold.
pub fn significant(p: f64) -> bool {
    p < 0.05
}

/// Reads (image, score) pairs from a report CSV: the `J` column if the
/// header has one, otherwise the only column. Summary rows whose first
/// field starts with `mean` are skipped; images default to row numbers.
pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::format("empty scores file"))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = match header.iter().position(|&h| h == "J") {
        Some(c) => c,
        None if header.len() == 1 => 0,
        None => return Err(Error::format(format!("no `J` column in header {header:?}"))),
    };
    let name_col = header.iter().position(|&h| h == "image");
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f[0].starts_with("mean") {
            continue;
        }
        let raw = f
            .get(col)
            .ok_or_else(|| Error::format(format!("row {}: missing column {col}", i + 2)))?;
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::format(format!("row {}: `{raw}` is not a number", i + 2)))?;
        let name = name_col
            .and_then(|c| f.get(c))
            .map(|s| s.to_string())
            .unwrap_or_else(|| i.to_string());
        out.push((name, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-tailed p by Simpson integration of the t density from 0 to |t|.
    fn p_by_integration(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let dens = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = dens(0.0) + dens(t.abs());
        for i in 1..n {
            s += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * s * h / 3.0
    }

    /// Lanczos approximation, independent of the library under test.
    fn ln_gamma(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn fixture() {
        let r = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 3.4641).abs() < 1e-4);
        assert_eq!(r.df, 2);
        assert!((r.p - 0.0742).abs() < 1e-3, "{}", r.p);
        assert!((r.p - p_by_integration(r.t, 2.0)).abs() < 1e-9);
        assert!(!significant(r.p));
    }

    #[test]
    fn matches_integration_oracle() {
        for (t, df) in [(0.3, 1.0), (1.7, 4.0), (2.5, 9.0), (4.0, 30.0)] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            assert!(
                (2.0 * dist.cdf(-t) - p_by_integration(t, df)).abs() < 1e-9,
                "t={t} df={df}"
            );
        }
    }

    #[test]
    fn straddling_the_threshold() {
        // d = [1, 2, 3] scaled about its mean: spread 1 gives p ≈ 0.074,
        // spread 0.5 gives p ≈ 0.02
        let base = [1.0, 1.0, 1.0];
        let wide = paired_t_test(&[2.0, 3.0, 4.0], &base).unwrap();
        let narrow = paired_t_test(&[2.5, 3.0, 3.5], &base).unwrap();
        assert!(
            !significant(wide.p) && significant(narrow.p),
            "{} {}",
            wide.p,
            narrow.p
        );
        assert!((narrow.p - p_by_integration(narrow.t, 2.0)).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, f64::NAN], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn score_files() {
        let r = parse_scores("image,J,D\na,80.5,89\nb,70,82\nmean±std,75±5,\n").unwrap();
        assert_eq!(r, vec![("a".to_string(), 80.5), ("b".to_string(), 70.0)]);
        assert_eq!(
            parse_scores("J\n1\n2\n").unwrap(),
            vec![("0".to_string(), 1.0), ("1".to_string(), 2.0)]
        );
        assert!(parse_scores("x,y\n1,2\n").is_err());
        assert!(parse_scores("J\nabc\n").is_err());
        assert!(parse_scores("").is_err());
    }

    proptest! {
        #[test]
        fn swapping_negates_t(a in proptest::collection::vec(0.0f64..100.0, 3..20), seed in proptest::collection::vec(-5.0f64..5.0, 20)) {
            let b: Vec<f64> = a.iter().zip(&seed).map(|(x, s)| x + s).collect();
            let (ab, ba) = (paired_t_test(&a, &b), paired_t_test(&b, &a));
            prop_assume!(ab.is_ok());
            let (ab, ba) = (ab.unwrap(), ba.unwrap());
            prop_assert!((ab.t + ba.t).abs() <= 1e-9 * ab.t.abs().max(1.0));
            prop_assert!((ab.p - ba.p).abs() <= 1e-12);
        }

        #[test]
        fn shift_invariant(a in proptest::collection::vec(0.0f64..100.0, 3..20), seed in proptest::collection::vec(-5.0f64..5.0, 20), c in -50.0f64..50.0) {
            let b: Vec<f64> = a.iter().zip(&seed).map(|(x, s)| x + s).collect();
            let r = paired_t_test(&a, &b);
            prop_assume!(r.is_ok());
            let r = r.unwrap();
            let shifted = paired_t_test(&a.iter().map(|x| x + c).collect::<Vec<_>>(), &b.iter().map(|x| x + c).collect::<Vec<_>>()).unwrap();
            prop_assert!((r.t - shifted.t).abs() <= 1e-6 * r.t.abs().max(1.0));
            prop_assert!((r.p - shifted.p).abs() <= 1e-6);
        }
    }
}
