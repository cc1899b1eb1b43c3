use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sample t-test without assuming equal variances. Identical constant
/// samples give `p = 1`; distinct constant samples give `p = 0`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchTest {
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        let same = ma == mb;
        return WelchTest {
            mean_a: ma,
            mean_b: mb,
            t: if same { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            df: f64::INFINITY,
            p_value: if same { 1.0 } else { 0.0 },
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let mut denom = 0.0;
    if a.len() > 1 {
        denom += va * va / (a.len() - 1) as f64;
    }
    if b.len() > 1 {
        denom += vb * vb / (b.len() - 1) as f64;
    }
    let df = se2 * se2 / denom;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    WelchTest {
        mean_a: ma,
        mean_b: mb,
        t,
        df,
        p_value: (2.0 * dist.cdf(-t.abs())).min(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_values() {
        // Reference: scipy.stats.ttest_ind(a, b, equal_var=False).
        let a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4];
        let b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4];
        let w = welch_t_test(&a, &b);
        assert!((w.t - -2.455356398286006).abs() < 1e-9, "{w:?}");
        assert!((w.df - 24.988529290231416).abs() < 1e-9, "{w:?}");
        assert!((w.p_value - 0.021378001462866985).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn degenerate_samples() {
        assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).p_value, 0.0);
        let w = welch_t_test(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
        assert_eq!(w.t, 0.0);
        assert!((w.p_value - 1.0).abs() < 1e-12);
    }
}
