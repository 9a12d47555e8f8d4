//! Cross-entropy, z-loss and the task-aware auxiliary loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Matrix, NodeId};

/// Which activation shares the concentration term pulls towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTarget {
    /// The layer's EMA activation rates.
    #[default]
    Historical,
    /// Activation counts of the current batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub z_coef: f64,
    pub aux_target: AuxTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.01,
            lambda2: 1e-4,
            z_coef: 1e-3,
            aux_target: AuxTarget::Historical,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("z_coef", self.z_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("losses.{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean token cross-entropy over several logit blocks that share one
/// denominator (e.g. one block per decoding head). `None` targets are masked.
pub fn cross_entropy_multi(g: &mut Graph, parts: &[(NodeId, Vec<Option<usize>>)]) -> Result<NodeId> {
    let count: usize = parts.iter().map(|(_, t)| t.iter().flatten().count()).sum();
    let mut total: Option<NodeId> = None;
    for (logits, targets) in parts {
        let s = g.cross_entropy_sum(*logits, targets.clone())?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(match total {
        Some(t) if count > 0 => g.scale(t, 1.0 / count as f64),
        _ => g.constant(Matrix::scalar(0.0)),
    })
}

pub fn cross_entropy(g: &mut Graph, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
    cross_entropy_multi(g, &[(logits, targets.to_vec())])
}

/// Mean over rows of `logsumexp(row)²`, rows pooled across blocks.
pub fn z_loss_multi(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let count: usize = parts.iter().map(|&p| g.shape(p).0).sum();
    let mut total: Option<NodeId> = None;
    for &logits in parts {
        let s = g.lse_sq_sum(logits);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(match total {
        Some(t) if count > 0 => g.scale(t, 1.0 / count as f64),
        _ => g.constant(Matrix::scalar(0.0)),
    })
}

pub fn z_loss(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    z_loss_multi(g, &[logits])
}

/// Plain-value cross-entropy, for evaluation.
pub fn cross_entropy_value(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::contract(format!(
            "cross_entropy: {} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= logits.cols() {
                return Err(Error::contract(format!(
                    "cross_entropy: target {t} outside vocabulary of {}",
                    logits.cols()
                )));
            }
            total += log_sum_exp(logits.row(r)) - logits.get(r, t);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Concentration plus activation-regularisation term for one layer.
///
/// `a_e` is a constant target share; `n_soft` (1×K) carries gradient to the
/// gate; `w_g` is the d×K expert representation matrix. The concentration
/// term is zero when either share vector is all zeros.
pub fn aux_loss(g: &mut Graph, a_e: &[f64], n_soft: Option<NodeId>, w_g: NodeId, weights: &LossWeights) -> Result<NodeId> {
    let k = g.shape(w_g).1;
    if a_e.len() != k {
        return Err(Error::contract(format!("aux_loss: {} activation rates for {k} experts", a_e.len())));
    }
    let reg = g.sum_squares(w_g);
    let reg = g.scale(reg, weights.lambda2);
    let a_total: f64 = a_e.iter().sum();
    let n_soft = match n_soft {
        Some(n) if a_total > 0.0 && weights.lambda1 > 0.0 => n,
        _ => return Ok(reg),
    };
    if g.shape(n_soft) != (1, k) {
        return Err(Error::Dimension {
            op: "aux_loss",
            lhs: g.shape(n_soft),
            rhs: (1, k),
        });
    }
    if g.value(n_soft).sum() <= 0.0 {
        return Ok(reg);
    }
    let share = g.constant(Matrix::row_vector(&a_e.iter().map(|a| a / a_total).collect::<Vec<_>>()));
    let n_share = g.normalize_row_sum(n_soft);
    let diff = g.sub(share, n_share)?;
    let conc = g.sum_squares(diff);
    let conc = g.scale(conc, weights.lambda1);
    g.add(conc, reg)
}

/// Per-step loss components, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: NodeId,
    pub z: NodeId,
    pub aux: NodeId,
}

/// Composes the objective of a training stage: stage 1 uses cross-entropy
/// alone, stages 2 and 3 add the weighted z-loss and the auxiliary loss.
pub fn stage_loss(g: &mut Graph, stage: u8, parts: LossParts, weights: &LossWeights) -> Result<NodeId> {
    match stage {
        1 => Ok(parts.ce),
        2 | 3 => {
            let z = g.scale(parts.z, weights.z_coef);
            let l = g.add(parts.ce, z)?;
            g.add(l, parts.aux)
        }
        s => Err(Error::contract(format!("unknown training stage {s}"))),
    }
}

/// Scalar version of [`stage_loss`].
pub fn stage_loss_value(stage: u8, ce: f64, z: f64, aux: f64, weights: &LossWeights) -> Result<f64> {
    match stage {
        1 => Ok(ce),
        2 | 3 => Ok(ce + weights.z_coef * z + aux),
        s => Err(Error::contract(format!("unknown training stage {s}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &Graph, n: NodeId) -> f64 {
        g.value(n).get(0, 0)
    }

    // log-softmax via explicit max shift and compensated sums
    fn oracle_log_softmax(row: &[f64], t: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0f64;
        let mut c = 0.0f64;
        for v in row {
            let y = (v - m).exp() - c;
            let t2 = s + y;
            c = (t2 - s) - y;
            s = t2;
        }
        row[t] - m - s.ln()
    }

    #[test]
    fn uniform_two_way_is_ln2() {
        let mut g = Graph::new();
        let l = g.param(Matrix::row_vector(&[0.0, 0.0]));
        let ce = cross_entropy(&mut g, l, &[Some(0)]).unwrap();
        assert!((scalar(&g, ce) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let v = cross_entropy_value(&Matrix::row_vector(&[margin, 0.0, 0.0]), &[Some(0)]).unwrap();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::uniform(5, 7, -3.0, 3.0, &mut rng);
        let targets: Vec<Option<usize>> = (0..5).map(|i| if i == 2 { None } else { Some(rng.gen_range(0..7)) }).collect();
        let expect = -targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| oracle_log_softmax(logits.row(r), t)))
            .sum::<f64>()
            / 4.0;
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let ce = cross_entropy(&mut g, l, &targets).unwrap();
        assert!((scalar(&g, ce) - expect).abs() < 1e-10);
        assert!((cross_entropy_value(&logits, &targets).unwrap() - expect).abs() < 1e-10);
        let grads = g.backward(ce).unwrap();
        let fd = finite_diff(|m| cross_entropy_value(m, &targets).unwrap(), &logits, 1e-5);
        let an = grads.get(l).unwrap();
        assert!(an.max_abs_diff(&fd) / fd.frobenius_norm() < 1e-4);
    }

    #[test]
    fn target_out_of_vocabulary() {
        let mut g = Graph::new();
        let l = g.param(Matrix::zeros(1, 3));
        assert!(matches!(cross_entropy(&mut g, l, &[Some(3)]), Err(Error::Contract(_))));
        assert!(cross_entropy_value(&Matrix::zeros(1, 3), &[Some(9)]).is_err());
    }

    #[test]
    fn multi_block_shares_denominator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Matrix::uniform(2, 3, -1.0, 1.0, &mut rng);
        let b = Matrix::uniform(3, 5, -1.0, 1.0, &mut rng);
        let ta = vec![Some(0), Some(2)];
        let tb = vec![Some(4), None, Some(1)];
        let mut g = Graph::new();
        let (na, nb) = (g.param(a.clone()), g.param(b.clone()));
        let ce = cross_entropy_multi(&mut g, &[(na, ta.clone()), (nb, tb.clone())]).unwrap();
        let expect = (cross_entropy_value(&a, &ta).unwrap() * 2.0 + cross_entropy_value(&b, &tb).unwrap() * 2.0) / 4.0;
        assert!((scalar(&g, ce) - expect).abs() < 1e-12);
    }

    #[test]
    fn z_loss_examples() {
        let mut g = Graph::new();
        let one = g.param(Matrix::scalar(0.0));
        let z = z_loss(&mut g, one).unwrap();
        assert_eq!(scalar(&g, z), 0.0);
        let a = -std::f64::consts::LN_2;
        let two = g.param(Matrix::row_vector(&[a, a]));
        let z = z_loss(&mut g, two).unwrap();
        assert!(scalar(&g, z).abs() < 1e-30);
    }

    #[test]
    fn z_loss_matches_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Matrix::uniform(4, 6, -2.0, 2.0, &mut rng);
        let direct = |m: &Matrix| {
            (0..m.rows())
                .map(|r| m.row(r).iter().map(|v| v.exp()).sum::<f64>().ln().powi(2))
                .sum::<f64>()
                / m.rows() as f64
        };
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let z = z_loss(&mut g, l).unwrap();
        assert!((scalar(&g, z) - direct(&logits)).abs() < 1e-10);
        let grads = g.backward(z).unwrap();
        let fd = finite_diff(direct, &logits, 1e-5);
        assert!(grads.get(l).unwrap().max_abs_diff(&fd) / fd.frobenius_norm() < 1e-4);
    }

    fn aux_value(a: &[f64], n: &[f64], w: &Matrix, wts: &LossWeights) -> f64 {
        let sa: f64 = a.iter().sum();
        let sn: f64 = n.iter().sum();
        let mut t1 = 0.0;
        if sa > 0.0 && sn > 0.0 {
            for e in 0..a.len() {
                t1 += (a[e] / sa - n[e] / sn).powi(2);
            }
        }
        wts.lambda1 * t1 + wts.lambda2 * w.sum_squares()
    }

    #[test]
    fn aux_proportional_shares_cancel() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let wts = LossWeights::default();
        let mut g = Graph::new();
        let wn = g.param(w.clone());
        let n = g.param(Matrix::row_vector(&[6.0, 2.0]));
        let l = aux_loss(&mut g, &[3.0, 1.0], Some(n), wn, &wts).unwrap();
        assert!((scalar(&g, l) - wts.lambda2 * w.sum_squares()).abs() < 1e-15);
    }

    #[test]
    fn aux_maximal_mismatch() {
        let wts = LossWeights { lambda2: 0.0, ..LossWeights::default() };
        let mut g = Graph::new();
        let wn = g.param(Matrix::identity(2));
        let n = g.param(Matrix::row_vector(&[0.0, 1.0]));
        let l = aux_loss(&mut g, &[1.0, 0.0], Some(n), wn, &wts).unwrap();
        assert!((scalar(&g, l) - wts.lambda1 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn aux_zero_shares_leave_regulariser() {
        let wts = LossWeights::default();
        let w = Matrix::filled(2, 3, 0.5);
        let mut g = Graph::new();
        let wn = g.param(w.clone());
        let n = g.param(Matrix::zeros(1, 3));
        let l = aux_loss(&mut g, &[0.0; 3], Some(n), wn, &wts).unwrap();
        assert!((scalar(&g, l) - wts.lambda2 * w.sum_squares()).abs() < 1e-15);
        let l = aux_loss(&mut g, &[1.0, 0.0, 0.0], None, wn, &wts).unwrap();
        assert!((scalar(&g, l) - wts.lambda2 * w.sum_squares()).abs() < 1e-15);
    }

    #[test]
    fn aux_random_instance_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wts = LossWeights { lambda1: 0.7, lambda2: 0.3, ..LossWeights::default() };
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = Matrix::uniform(1, 4, 0.1, 3.0, &mut rng);
        let w = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let wn = g.param(w.clone());
        let nn = g.param(n.clone());
        let l = aux_loss(&mut g, &a, Some(nn), wn, &wts).unwrap();
        assert!((scalar(&g, l) - aux_value(&a, n.data(), &w, &wts)).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let fd_w = finite_diff(|m| aux_value(&a, n.data(), m, &wts), &w, 1e-5);
        assert!(grads.get(wn).unwrap().max_abs_diff(&fd_w) / fd_w.frobenius_norm() < 1e-4);
        let fd_n = finite_diff(|m| aux_value(&a, m.data(), &w, &wts), &n, 1e-5);
        assert!(grads.get(nn).unwrap().max_abs_diff(&fd_n) / fd_n.frobenius_norm() < 1e-4);
    }

    #[test]
    fn stage_composition() {
        let wts = LossWeights::default();
        let mut g = Graph::new();
        let ce = g.constant(Matrix::scalar(1.25));
        let z = g.constant(Matrix::scalar(7.0));
        let aux = g.constant(Matrix::scalar(0.3));
        let parts = LossParts { ce, z, aux };
        let s1 = stage_loss(&mut g, 1, parts, &wts).unwrap();
        assert_eq!(scalar(&g, s1), 1.25);
        let zero = g.constant(Matrix::scalar(0.0));
        let s2 = stage_loss(&mut g, 2, LossParts { ce, z: zero, aux: zero }, &wts).unwrap();
        assert_eq!(scalar(&g, s2), 1.25);
        let s3 = stage_loss(&mut g, 3, parts, &wts).unwrap();
        assert!((scalar(&g, s3) - (1.25 + 1e-3 * 7.0 + 0.3)).abs() < 1e-12);
        assert!((stage_loss_value(3, 1.25, 7.0, 0.3, &wts).unwrap() - scalar(&g, s3)).abs() < 1e-15);
        assert!(stage_loss(&mut g, 4, parts, &wts).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn aux_is_scale_invariant_and_nonnegative(
                a in proptest::collection::vec(0.01f64..5.0, 3),
                n in proptest::collection::vec(0.01f64..5.0, 3),
                ca in 0.1f64..10.0,
                cn in 0.1f64..10.0,
            ) {
                let wts = LossWeights::default();
                let w = Matrix::identity(3);
                let base = aux_value(&a, &n, &w, &wts);
                let sa: Vec<f64> = a.iter().map(|v| v * ca).collect();
                let sn: Vec<f64> = n.iter().map(|v| v * cn).collect();
                let mut g = Graph::new();
                let wn = g.param(w.clone());
                let nn = g.param(Matrix::row_vector(&sn));
                let l = aux_loss(&mut g, &sa, Some(nn), wn, &wts).unwrap();
                prop_assert!(g.value(l).get(0, 0) >= 0.0);
                prop_assert!((g.value(l).get(0, 0) - base).abs() < 1e-12);
            }

            #[test]
            fn ce_and_z_are_nonnegative(vals in proptest::collection::vec(-30.0f64..30.0, 6), t in 0usize..3) {
                let m = Matrix::from_vec(2, 3, vals).unwrap();
                prop_assert!(cross_entropy_value(&m, &[Some(t), None]).unwrap() >= 0.0);
                let mut g = Graph::new();
                let l = g.param(m);
                let z = z_loss(&mut g, l).unwrap();
                prop_assert!(g.value(z).get(0, 0) >= 0.0);
            }
        }
    }
}
