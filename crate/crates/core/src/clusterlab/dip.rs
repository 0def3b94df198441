//! Hartigan's dip statistic via the greatest convex minorant / least
//! concave majorant iteration.
//!
//! Internally distances are kept in units of `1/n` of the empirical CDF and
//! the result is halved and divided by `n` once at the end. Arrays are
//! 1-based (slot 0 unused) so index arithmetic matches the algorithm's
//! textbook form.

use super::ClusterError;

/// Dip of `samples` (any order). Lies in `[1/(2n), 1/4]`.
pub fn dip_statistic(samples: &[f64]) -> Result<f64, ClusterError> {
    let n = samples.len();
    if n < 2 {
        return Err(ClusterError::TooFewSamples { need: 2, got: n });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    let mut x = Vec::with_capacity(n + 1);
    x.push(f64::NAN);
    x.extend_from_slice(samples);
    x[1..].sort_by(f64::total_cmp);
    Ok(dip_sorted(&x, n) / (2 * n) as f64)
}

/// `2n · dip` for sorted `x[1..=n]`.
fn dip_sorted(x: &[f64], n: usize) -> f64 {
    let mut dip = 1.0;
    if x[n] == x[1] {
        return dip;
    }

    // mn[j]: predecessor of j on the convex minorant of x[1..=j]
    let mut mn = vec![0usize; n + 1];
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let a = mn[j];
            let b = mn[a];
            if a == 1 || (x[j] - x[a]) * ((a - b) as f64) < (x[a] - x[b]) * ((j - a) as f64) {
                break;
            }
            mn[j] = b;
        }
    }

    // mj[k]: successor of k on the concave majorant of x[k..=n]
    let mut mj = vec![0usize; n + 1];
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let a = mj[k];
            let b = mj[a];
            if a == n || (x[k] - x[a]) * (a as f64 - b as f64) < (x[a] - x[b]) * (k as f64 - a as f64) {
                break;
            }
            mj[k] = b;
        }
    }

    let (mut low, mut high) = (1usize, n);
    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];
    loop {
        // change points of the minorant from high down to low
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;

        // change points of the majorant from low up to high
        lcm[1] = low;
        let mut i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2;

        // largest vertical gap between the two hulls on [low, high]
        let mut d = 0.0;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let (gx, lv) = (gcm[ix], lcm[iv]);
                if gx > lv {
                    let g1 = gcm[ix + 1];
                    let dx = (lv as f64 - g1 as f64 + 1.0) - (x[lv] - x[g1]) * (gx - g1) as f64 / (x[gx] - x[g1]);
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let l1 = lcm[iv - 1];
                    let dx = (x[gx] - x[l1]) * (lv - l1) as f64 / (x[lv] - x[l1]) - (gx as f64 - l1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                ix = ix.max(1);
                iv = iv.min(l_lcm);
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        } else {
            d = 1.0;
        }
        if d < dip {
            break;
        }

        // dip of the minorant and majorant outside the modal interval
        let mut dip_l: f64 = 0.0;
        for j in ig..l_gcm {
            let (jb, je) = (gcm[j + 1], gcm[j]);
            let mut max_t: f64 = 1.0;
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    max_t = max_t.max((jj - jb + 1) as f64 - (x[jj] - x[jb]) * c);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u: f64 = 0.0;
        for j in ih..l_lcm {
            let (jb, je) = (lcm[j], lcm[j + 1]);
            let mut max_t: f64 = 1.0;
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    max_t = max_t.max((x[jj] - x[jb]) * c - (jj as f64 - jb as f64 - 1.0));
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = dip.max(dip_l.max(dip_u));

        // without this guard the iteration can cycle forever
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(dip_statistic(&[0.0, 1.0]).unwrap(), 0.25);
        assert_eq!(dip_statistic(&[3.0, 3.0, 3.0]).unwrap(), 1.0 / 6.0);
        let uniform: Vec<f64> = (0..10).map(f64::from).collect();
        assert!((dip_statistic(&uniform).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(dip_statistic(&[1.0]), Err(ClusterError::TooFewSamples { .. })));
    }

    #[test]
    fn separated_clusters_approach_the_upper_bound() {
        let mut prev = 0.0;
        for gap in [1.0, 10.0, 1e3, 1e6] {
            let mut s: Vec<f64> = (0..20).map(|i| f64::from(i) * 0.01).collect();
            s.extend((0..20).map(|i| gap + f64::from(i) * 0.01));
            let d = dip_statistic(&s).unwrap();
            assert!(d >= prev && d <= 0.25);
            prev = d;
        }
        assert!(prev > 0.24);
    }

    #[test]
    fn order_does_not_matter() {
        let a = [0.3, 2.0, -1.0, 0.7, 5.0, 0.1];
        let mut b = a;
        b.reverse();
        assert_eq!(dip_statistic(&a).unwrap(), dip_statistic(&b).unwrap());
    }
}
