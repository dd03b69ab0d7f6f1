use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Right-continuous survival step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvival {
    /// Jump times, strictly increasing.
    pub times: Vec<f64>,
    /// Survival just after each jump time.
    pub values: Vec<f64>,
}

impl StepSurvival {
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Sorts `(time, event)` pairs and groups them by distinct time:
/// returns `(time, events, at_risk)` per distinct time.
fn tabulate(times: &[f64], events: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut k = 0;
    while k < idx.len() {
        let t = times[idx[k]];
        let mut d = 0;
        let mut m = 0;
        while k < idx.len() && times[idx[k]] == t {
            if events[idx[k]] {
                d += 1;
            }
            m += 1;
            k += 1;
        }
        out.push((t, d, at_risk));
        at_risk -= m;
    }
    out
}

/// Kaplan–Meier product-limit estimator.
pub fn km_curve(times: &[f64], events: &[bool]) -> Result<StepSurvival> {
    if times.is_empty() || times.len() != events.len() {
        return Err(Error::Contract("km_curve needs matching, nonempty times and events".into()));
    }
    let mut s = 1.0;
    let mut curve = StepSurvival { times: Vec::new(), values: Vec::new() };
    for (t, d, n) in tabulate(times, events) {
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            curve.times.push(t);
            curve.values.push(s);
        }
    }
    Ok(curve)
}

/// Two-sample log-rank test; returns the 1-df chi-square statistic and its p-value.
pub fn logrank_test(group_a: (&[f64], &[bool]), group_b: (&[f64], &[bool])) -> Result<(f64, f64)> {
    let (ta, ea) = group_a;
    let (tb, eb) = group_b;
    if ta.len() != ea.len() || tb.len() != eb.len() {
        return Err(Error::Contract("times and events must have equal length".into()));
    }
    let times: Vec<f64> = ta.iter().chain(tb).copied().collect();
    let events: Vec<bool> = ea.iter().chain(eb).copied().collect();
    if !events.iter().any(|&e| e) {
        return Err(Error::Contract("log-rank test needs at least one event".into()));
    }
    let in_a: Vec<bool> = (0..times.len()).map(|i| i < ta.len()).collect();

    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut n = times.len() as f64;
    let mut n_a = ta.len() as f64;
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    let mut k = 0;
    while k < idx.len() {
        let t = times[idx[k]];
        let (mut d, mut d_a, mut m, mut m_a) = (0.0, 0.0, 0.0, 0.0);
        while k < idx.len() && times[idx[k]] == t {
            let i = idx[k];
            m += 1.0;
            if in_a[i] {
                m_a += 1.0;
            }
            if events[i] {
                d += 1.0;
                if in_a[i] {
                    d_a += 1.0;
                }
            }
            k += 1;
        }
        if d > 0.0 {
            o_minus_e += d_a - d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= m;
        n_a -= m_a;
    }
    if var <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let stat = o_minus_e * o_minus_e / var;
    let p = 1.0 - ChiSquared::new(1.0).expect("valid dof").cdf(stat);
    Ok((stat, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncensored_is_empirical() {
        let c = km_curve(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(c.times, vec![1.0, 2.0, 3.0]);
        let want = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (v, w) in c.values.iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn all_censored_is_flat() {
        let c = km_curve(&[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(c.at(5.0), 1.0);
    }

    #[test]
    fn six_subject_hand_example() {
        // times 1,2+,3,3,4+,5: S(1)=5/6, S(3)=5/6*(1-2/4)=5/12, S(5)=0.
        let t = [3.0, 1.0, 2.0, 5.0, 3.0, 4.0];
        let e = [true, true, false, true, true, false];
        let c = km_curve(&t, &e).unwrap();
        assert_eq!(c.times, vec![1.0, 3.0, 5.0]);
        assert!((c.at(1.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!((c.at(2.5) - 5.0 / 6.0).abs() < 1e-15);
        assert!((c.at(3.0) - 5.0 / 12.0).abs() < 1e-15);
        assert!((c.at(4.5) - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(c.at(5.0), 0.0);
    }

    #[test]
    fn identical_groups_give_zero() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true, false, true, true];
        let (stat, p) = logrank_test((&t, &e), (&t, &e)).unwrap();
        assert!(stat.abs() < 1e-15);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eight_subject_tabulation() {
        // A: 1, 3, 5+, 6   B: 2, 4, 4, 7+
        let ta = [1.0, 3.0, 5.0, 6.0];
        let ea = [true, true, false, true];
        let tb = [2.0, 4.0, 4.0, 7.0];
        let eb = [true, true, true, false];
        // Hand tabulation of (d, d_A, n, n_A) at event times:
        let rows = [(1.0, 1.0, 8.0, 4.0), (1.0, 0.0, 7.0, 3.0), (1.0, 1.0, 6.0, 3.0), (2.0, 0.0, 5.0, 2.0), (1.0, 1.0, 2.0, 1.0)];
        let (mut oe, mut v) = (0.0, 0.0);
        for (d, da, n, na) in rows {
            oe += da - d * na / n;
            v += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
        let (stat, _) = logrank_test((&ta, &ea), (&tb, &eb)).unwrap();
        assert!((stat - oe * oe / v).abs() < 1e-12);
    }
}
