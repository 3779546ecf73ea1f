//! The loss stack: per-branch supervised L1 terms, the physics
//! reconstruction penalty, the student/teacher consistency terms, the
//! Gaussian consistency ramp-up, and an itemized serializable breakdown.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::DidNetOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss mixing weights. `alpha1..3` weigh the supervised transmission,
/// atmosphere and reconstruction terms; `alpha4..6` are their consistency
/// counterparts and default to the same values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub alpha6: f64,
    pub mu_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        WeightPreset::Prose.weights()
    }
}

impl LossWeights {
    /// Tied weights: the consistency side mirrors the supervised side.
    pub fn tied(alpha1: f64, alpha2: f64, alpha3: f64) -> LossWeights {
        LossWeights {
            alpha1,
            alpha2,
            alpha3,
            alpha4: alpha1,
            alpha5: alpha2,
            alpha6: alpha3,
            mu_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5, self.alpha6,
            self.mu_max,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Published weight settings. `Prose` is the default; `M1`–`M4` are the
/// sensitivity-study rows (`M4` doubles as the study's "ours" row, which
/// disagrees with the prose — both ship, neither is silently preferred).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPreset {
    #[default]
    Prose,
    M1,
    M2,
    M3,
    M4,
}

impl WeightPreset {
    pub fn weights(self) -> LossWeights {
        match self {
            WeightPreset::Prose => LossWeights::tied(0.3, 0.1, 0.1),
            WeightPreset::M1 => LossWeights::tied(0.3, 0.7, 0.1),
            WeightPreset::M2 => LossWeights::tied(0.3, 0.7, 0.7),
            WeightPreset::M3 => LossWeights::tied(0.7, 0.7, 0.1),
            WeightPreset::M4 => LossWeights::tied(0.7, 0.1, 0.7),
        }
    }
}

/// Mean absolute difference as a graph node; shapes must agree.
pub fn l1<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1", &a.shape(), &b.shape()));
    }
    Ok(a.l1_distance(b))
}

/// Ground truth for the labeled half of a batch, as graph constants.
pub struct SupervisedTargets<F: Scalar> {
    /// NCHW hazy input (the reconstruction target).
    pub hazy: Tensor<F>,
    /// NCHW clean image G_J.
    pub clean: Tensor<F>,
    /// N1HW transmission G_T.
    pub transmission: Tensor<F>,
    /// NCHW atmospheric light G_A.
    pub atmosphere: Tensor<F>,
}

/// Supervised terms; tensors are graph nodes so the caller can keep
/// differentiating, and optional terms follow the ablation mode.
pub struct SupervisedTerms<F: Scalar> {
    pub l_j: Tensor<F>,
    pub l_t: Option<Tensor<F>>,
    pub l_a: Option<Tensor<F>>,
    pub l_rec: Option<Tensor<F>>,
    pub dst: Tensor<F>,
    pub total: Tensor<F>,
}

/// Coarse-plus-refined L1 against one ground truth: |G-P|_1 + |G-P_hat|_1.
/// Branches without a refined stage contribute the coarse term alone.
pub fn branch_l1<F: Scalar>(
    gt: &Tensor<F>,
    coarse: &Tensor<F>,
    refined: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let c = l1(gt, coarse)?;
    match refined {
        Some(r) => Ok(c.add(&l1(gt, r)?)),
        None => Ok(c),
    }
}

/// |I-P_I|_1 + |I-P_hat_I|_1 — how well the predicted triples re-compose
/// the hazy input.
pub fn reconstruction_loss<F: Scalar>(
    hazy: &Tensor<F>,
    recon_coarse: &Tensor<F>,
    recon_refined: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    branch_l1(hazy, recon_coarse, recon_refined)
}

/// The supervised loss for one labeled batch:
/// dst = l_j + a1*l_t + a2*l_a, total = dst + a3*rec. Terms whose branches
/// the mode does not produce are simply absent.
pub fn supervised_loss<F: Scalar>(
    out: &DidNetOutput<F>,
    gt: &SupervisedTargets<F>,
    w: &LossWeights,
) -> Result<SupervisedTerms<F>> {
    let refined = out.refined.as_ref();
    let l_j = branch_l1(&gt.clean, &out.coarse.j, refined.map(|r| &r.j))?;
    let l_t = out
        .coarse
        .t
        .as_ref()
        .map(|t| branch_l1(&gt.transmission, t, refined.map(|r| &r.t)))
        .transpose()?;
    let l_a = out
        .coarse
        .a
        .as_ref()
        .map(|a| branch_l1(&gt.atmosphere, a, refined.map(|r| &r.a)))
        .transpose()?;
    let l_rec = out
        .recon_coarse
        .as_ref()
        .map(|rc| reconstruction_loss(&gt.hazy, rc, out.recon_refined.as_ref()))
        .transpose()?;
    let mut dst = l_j.clone();
    if let Some(t) = &l_t {
        dst = dst.add(&t.scale(F::from_f64(w.alpha1)));
    }
    if let Some(a) = &l_a {
        dst = dst.add(&a.scale(F::from_f64(w.alpha2)));
    }
    let total = match &l_rec {
        Some(r) => dst.add(&r.scale(F::from_f64(w.alpha3))),
        None => dst.clone(),
    };
    Ok(SupervisedTerms {
        l_j,
        l_t,
        l_a,
        l_rec,
        dst,
        total,
    })
}

/// Consistency terms between a student and a teacher forward pass.
pub struct ConsistencyTerms<F: Scalar> {
    pub c_j: Tensor<F>,
    pub c_t: Tensor<F>,
    pub c_a: Tensor<F>,
    pub c_rec: Tensor<F>,
    pub total: Tensor<F>,
}

/// Student/teacher disagreement on each factor and on the reconstructions:
/// c_X = |S_X - T_X|_1 + |S_X_hat - T_X_hat|_1, combined as
/// c_j + a4*c_t + a5*c_a + a6*c_rec. Teacher outputs are detached, so the
/// gradient reaches the student alone. Requires the full (refined) outputs
/// on both sides.
pub fn consistency_loss<F: Scalar>(
    student: &DidNetOutput<F>,
    teacher: &DidNetOutput<F>,
    w: &LossWeights,
) -> Result<ConsistencyTerms<F>> {
    let missing = |what: &str| {
        Error::invalid(
            "consistency",
            format!("{what} missing; consistency needs full-mode outputs"),
        )
    };
    let s_ref = student.refined.as_ref().ok_or_else(|| missing("student refined"))?;
    let t_ref = teacher.refined.as_ref().ok_or_else(|| missing("teacher refined"))?;
    let s_t = student.coarse.t.as_ref().ok_or_else(|| missing("student T"))?;
    let s_a = student.coarse.a.as_ref().ok_or_else(|| missing("student A"))?;
    let t_t = teacher.coarse.t.as_ref().ok_or_else(|| missing("teacher T"))?;
    let t_a = teacher.coarse.a.as_ref().ok_or_else(|| missing("teacher A"))?;
    let s_rc = student.recon_coarse.as_ref().ok_or_else(|| missing("student recon"))?;
    let s_rr = student.recon_refined.as_ref().ok_or_else(|| missing("student recon"))?;
    let t_rc = teacher.recon_coarse.as_ref().ok_or_else(|| missing("teacher recon"))?;
    let t_rr = teacher.recon_refined.as_ref().ok_or_else(|| missing("teacher recon"))?;

    let pair = |s_c: &Tensor<F>, s_r: &Tensor<F>, tc: &Tensor<F>, tr: &Tensor<F>| -> Result<Tensor<F>> {
        Ok(l1(s_c, &tc.detach())?.add(&l1(s_r, &tr.detach())?))
    };
    let c_j = pair(&student.coarse.j, &s_ref.j, &teacher.coarse.j, &t_ref.j)?;
    let c_t = pair(s_t, &s_ref.t, t_t, &t_ref.t)?;
    let c_a = pair(s_a, &s_ref.a, t_a, &t_ref.a)?;
    let c_rec = pair(s_rc, s_rr, t_rc, t_rr)?;
    let total = c_j
        .add(&c_t.scale(F::from_f64(w.alpha4)))
        .add(&c_a.scale(F::from_f64(w.alpha5)))
        .add(&c_rec.scale(F::from_f64(w.alpha6)));
    Ok(ConsistencyTerms {
        c_j,
        c_t,
        c_a,
        c_rec,
        total,
    })
}

/// Gaussian warm-up for the consistency weight:
/// mu(t) = mu_max * exp(-5 * (1 - t/t_max)^2), rising from mu_max*e^-5 at
/// t = 0 to mu_max at t = t_max.
pub fn rampup_weight(t: usize, t_max: usize, mu_max: f64) -> f64 {
    assert!(t_max > 0, "rampup_weight needs t_max > 0");
    let ratio = (t as f64 / t_max as f64).min(1.0);
    let d = 1.0 - ratio;
    mu_max * (-5.0 * d * d).exp()
}

/// Grand total: supervised + mu * consistency.
pub fn total_loss<F: Scalar>(
    supervised: &Tensor<F>,
    consistency: Option<&Tensor<F>>,
    mu: f64,
) -> Tensor<F> {
    match consistency {
        Some(c) => supervised.add(&c.scale(F::from_f64(mu))),
        None => supervised.clone(),
    }
}

/// Snapshot of every term of one training step, for logs and diagnostics.
/// Absent terms (ablations, labeled-only batches) are recorded as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_j: f64,
    pub l_t: f64,
    pub l_a: f64,
    pub l_rec: f64,
    pub c_j: f64,
    pub c_t: f64,
    pub c_a: f64,
    pub c_rec: f64,
    pub dst: f64,
    pub supervised_total: f64,
    pub consistency_total: f64,
    pub mu: f64,
    pub grand_total: f64,
}

impl LossBreakdown {
    pub fn new<F: Scalar>(
        sup: &SupervisedTerms<F>,
        cons: Option<&ConsistencyTerms<F>>,
        mu: f64,
        grand_total: f64,
    ) -> LossBreakdown {
        let v = |t: &Tensor<F>| Scalar::to_f64(t.item());
        let opt = |t: &Option<Tensor<F>>| t.as_ref().map(&v).unwrap_or(0.0);
        LossBreakdown {
            l_j: v(&sup.l_j),
            l_t: opt(&sup.l_t),
            l_a: opt(&sup.l_a),
            l_rec: opt(&sup.l_rec),
            c_j: cons.map(|c| v(&c.c_j)).unwrap_or(0.0),
            c_t: cons.map(|c| v(&c.c_t)).unwrap_or(0.0),
            c_a: cons.map(|c| v(&c.c_a)).unwrap_or(0.0),
            c_rec: cons.map(|c| v(&c.c_rec)).unwrap_or(0.0),
            dst: v(&sup.dst),
            supervised_total: v(&sup.total),
            consistency_total: cons.map(|c| v(&c.total)).unwrap_or(0.0),
            mu,
            grand_total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_j,
            self.l_t,
            self.l_a,
            self.l_rec,
            self.c_j,
            self.c_t,
            self.c_a,
            self.c_rec,
            self.dst,
            self.supervised_total,
            self.consistency_total,
            self.mu,
            self.grand_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
