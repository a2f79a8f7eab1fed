//! Closed-form costs for full, balanced configurations and the cluster-size
//! optimizer for the hybrid scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keytree::exact_log;
use crate::schemes::Scheme;

/// Predicted cost of one rekey event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub unicast: u64,
    pub multicast: u64,
    pub payload_keys: u64,
}

impl EventPrediction {
    fn new(unicast: u64, multicast: u64, payload_keys: u64) -> Self {
        EventPrediction { unicast, multicast, payload_keys }
    }

    /// One key per message.
    fn single(unicast: u64, multicast: u64) -> Self {
        Self::new(unicast, multicast, unicast + multicast)
    }

    pub fn messages(&self) -> u64 {
        self.unicast + self.multicast
    }
}

/// Costs for a full group of `n` members.
///
/// `leave` is the cost when one member leaves that group; `join` is the cost
/// of the join that brings the group up to `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub n: u64,
    pub leave: EventPrediction,
    pub join: EventPrediction,
    pub controller_storage: u64,
    pub member_storage: u64,
}

fn tree_height(n: u64, k: usize) -> Result<u64> {
    match exact_log(n, k) {
        Some(h) if h >= 1 => Ok(u64::from(h)),
        _ => Err(Error::NotPredictable),
    }
}

/// Nodes in a full tree of height `h`: `sum a^i, i = 0..=h`.
pub fn full_tree_nodes(a: u64, h: u64) -> u64 {
    (0..=h).map(|i| a.pow(i as u32)).sum()
}

/// Hybrid controller storage as the node sum plus one seed per cluster.
pub fn hybrid_storage_sum(n: u64, a: u64, m: u64) -> Result<u64> {
    if m == 0 || !n.is_multiple_of(m) {
        return Err(Error::NotPredictable);
    }
    let clusters = n / m;
    let h = exact_log(clusters, a as usize).ok_or(Error::NotPredictable)?;
    Ok(full_tree_nodes(a, u64::from(h)) + clusters)
}

/// Hybrid controller storage as `(1 + a/(a-1)) N/M - 1/(a-1)`.
pub fn hybrid_storage_closed(n: f64, a: f64, m: f64) -> f64 {
    (1.0 + a / (a - 1.0)) * n / m - 1.0 / (a - 1.0)
}

pub fn predict_costs(scheme: Scheme, n: u64) -> Result<Prediction> {
    scheme.validate()?;
    if n == 0 {
        return Err(Error::NotPredictable);
    }
    let p = match scheme {
        Scheme::Simple => Prediction {
            n,
            leave: EventPrediction::single(n - 1, 0),
            join: EventPrediction::single(n, 0),
            controller_storage: n + 1,
            member_storage: 2,
        },
        Scheme::Gkmp => {
            // the packet carries the group key and the key-encrypting key
            let join = if n > 1 { EventPrediction::new(1, 1, 4) } else { EventPrediction::new(1, 0, 2) };
            Prediction {
                n,
                leave: EventPrediction::new(0, 1, 2),
                join,
                controller_storage: n + 2,
                member_storage: 3,
            }
        }
        Scheme::Lkh { .. } | Scheme::Ihc { .. } | Scheme::SdLkh { .. } | Scheme::Ofc => {
            let k = scheme.degree().unwrap_or(2) as u64;
            let h = tree_height(n, k as usize)?;
            let (leave, join) = match scheme {
                Scheme::Lkh { .. } => (EventPrediction::single(k - 1, k * (h - 1)), EventPrediction::single(h, h)),
                Scheme::SdLkh { .. } => {
                    (EventPrediction::single(k - 1, (k - 1) * (h - 1)), EventPrediction::single(h, 1))
                }
                _ => (EventPrediction::single(k - 1, (k - 1) * (h - 1)), EventPrediction::single(1, h)),
            };
            Prediction {
                n,
                leave,
                join,
                controller_storage: full_tree_nodes(k, h),
                member_storage: h + 1,
            }
        }
        Scheme::Hybrid { arity, cluster_size } => {
            let (a, m) = (arity as u64, cluster_size as u64);
            if !n.is_multiple_of(m) {
                return Err(Error::NotPredictable);
            }
            let h = tree_height(n / m, arity)?;
            let shared = u64::from(m > 1);
            Prediction {
                n,
                leave: EventPrediction::single(m - 1, (a - 1) * h),
                join: EventPrediction::single(1, h + shared),
                controller_storage: hybrid_storage_sum(n, a, m)?,
                member_storage: h + 2,
            }
        }
    };
    Ok(p)
}

/// Outcome of [`optimize_cluster_size`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClusterChoice {
    Optimal { m: u64, clusters: u64, storage: f64 },
    Infeasible,
}

const EPS: f64 = 1e-9;

/// Leave cost of the hybrid scheme as a real function of the cluster size.
pub fn hybrid_leave_cost(n: f64, a: f64, m: f64) -> f64 {
    (m - 1.0) + (a - 1.0) * (n / m).ln() / a.ln()
}

/// Smallest storage cluster size whose leave cost stays within
/// `beta * log_a N`. Clusters are counted as `ceil(N/M)`; ties go to the
/// smaller `M`.
pub fn optimize_cluster_size(n: u64, a: u64, beta: f64) -> Result<ClusterChoice> {
    if n == 0 || a < 2 || beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidParams(format!("need N >= 1, a >= 2, beta > 0 (got {n}, {a}, {beta})")));
    }
    let (nf, af) = (n as f64, a as f64);
    let bound = beta * nf.ln() / af.ln();
    let g = |m: u64| hybrid_leave_cost(nf, af, m as f64);
    let ok = |m: u64| g(m) <= bound + EPS;

    // g is convex in M with its real minimum at (a-1)/ln a
    let centre = ((af - 1.0) / af.ln()).floor().max(1.0) as u64;
    let best = [centre, centre + 1].into_iter().filter(|m| *m <= n).min_by(|x, y| g(*x).total_cmp(&g(*y))).unwrap_or(1);
    if !ok(best) {
        return Ok(ClusterChoice::Infeasible);
    }
    // largest feasible M: g increases on [best, n]
    let (mut lo, mut hi) = (best, n);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let m_hi = lo;
    // smallest feasible M: g decreases on [1, best]
    let (mut lo, mut hi) = (1, best);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let m_lo = lo;
    // storage only depends on the cluster count, which falls as M grows
    let clusters = n.div_ceil(m_hi);
    let m = m_lo.max(n.div_ceil(clusters));
    Ok(ClusterChoice::Optimal { m, clusters, storage: cluster_storage(clusters as f64, af) })
}

/// Storage for `clusters` clusters: `(1 + a/(a-1)) c - 1/(a-1)`.
pub fn cluster_storage(clusters: f64, a: f64) -> f64 {
    hybrid_storage_closed(clusters, a, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_24_storage_both_forms() {
        assert_eq!(hybrid_storage_sum(24, 2, 3).unwrap(), 1 + 2 + 4 + 8 + 8);
        assert_eq!(hybrid_storage_closed(24.0, 2.0, 3.0), 23.0);
        let p = predict_costs(Scheme::Hybrid { arity: 2, cluster_size: 3 }, 24).unwrap();
        assert_eq!(p.controller_storage, 23);
        assert_eq!(p.leave.payload_keys, 5);
        assert_eq!(p.member_storage, 5);
    }

    #[test]
    fn closed_form_matches_sum_when_clusters_are_a_power() {
        for a in 2..=4u64 {
            for h in 0..=5u32 {
                for m in 1..=4u64 {
                    let n = a.pow(h) * m;
                    let sum = hybrid_storage_sum(n, a, m).unwrap() as f64;
                    assert!((sum - hybrid_storage_closed(n as f64, a as f64, m as f64)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn tree_scheme_values() {
        let lkh = predict_costs(Scheme::Lkh { degree: 2 }, 8).unwrap();
        assert_eq!((lkh.leave.messages(), lkh.join.messages(), lkh.member_storage), (5, 6, 4));
        assert_eq!(lkh.controller_storage, 15);
        assert_eq!(predict_costs(Scheme::Ofc, 8).unwrap().leave.payload_keys, 3);
        let ihc = predict_costs(Scheme::Ihc { degree: 3 }, 27).unwrap();
        assert_eq!((ihc.leave.messages(), ihc.join.messages()), (6, 4));
        let sd = predict_costs(Scheme::SdLkh { degree: 3 }, 27).unwrap();
        assert_eq!((sd.join.unicast, sd.join.multicast), (3, 1));
        assert_eq!(predict_costs(Scheme::Lkh { degree: 3 }, 27).unwrap().leave.messages(), 8);
    }

    #[test]
    fn not_predictable() {
        assert_eq!(predict_costs(Scheme::Lkh { degree: 2 }, 6), Err(Error::NotPredictable));
        assert_eq!(predict_costs(Scheme::Lkh { degree: 2 }, 1), Err(Error::NotPredictable));
        assert_eq!(predict_costs(Scheme::Hybrid { arity: 2, cluster_size: 3 }, 25), Err(Error::NotPredictable));
        assert_eq!(predict_costs(Scheme::Hybrid { arity: 2, cluster_size: 3 }, 18), Err(Error::NotPredictable));
        assert!(predict_costs(Scheme::Simple, 7).is_ok());
    }

    #[test]
    fn optimizer_edges() {
        match optimize_cluster_size(24, 2, 1e6).unwrap() {
            ClusterChoice::Optimal { m, clusters, .. } => assert_eq!((m, clusters), (24, 1)),
            other => panic!("{other:?}"),
        }
        assert_eq!(optimize_cluster_size(8, 2, 1e-6).unwrap(), ClusterChoice::Infeasible);
        assert!(optimize_cluster_size(8, 1, 1.0).is_err());
        assert!(optimize_cluster_size(0, 2, 1.0).is_err());
        assert!(optimize_cluster_size(8, 2, 0.0).is_err());
        match optimize_cluster_size(1, 2, 1.0).unwrap() {
            ClusterChoice::Optimal { m, .. } => assert_eq!(m, 1),
            other => panic!("{other:?}"),
        }
    }
}
