use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Relation detection inside the relation-aware term.
    pub prd: f64,
    /// Replaced-token detection inside the sensitivity-aware term.
    pub rtd: f64,
    /// Contrastive term inside the total.
    pub cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prd: 0.5,
            rtd: 0.5,
            cl: 0.5,
        }
    }
}

/// Scalar values of the individual objectives. Disabled objectives are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub itc: f64,
    pub imc: f64,
    pub p_itm: f64,
    pub prd: f64,
    pub mlm: f64,
    pub m_rtd: f64,
}

/// Per-step loss values with their grouped sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub itc: f64,
    pub imc: f64,
    pub cl: f64,
    pub p_itm: f64,
    pub prd: f64,
    pub ra: f64,
    pub mlm: f64,
    pub m_rtd: f64,
    pub sa: f64,
    pub total: f64,
}

/// Combines component values: `cl = (itc + imc) / 2`, `ra = p_itm + w.prd * prd`,
/// `sa = mlm + w.rtd * m_rtd`, `total = ra + sa + w.cl * cl`.
pub fn joint_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("itc", c.itc),
        ("imc", c.imc),
        ("p_itm", c.p_itm),
        ("prd", c.prd),
        ("mlm", c.mlm),
        ("m_rtd", c.m_rtd),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("loss is {v}")));
        }
    }
    let cl = (c.itc + c.imc) / 2.0;
    let ra = c.p_itm + w.prd * c.prd;
    let sa = c.mlm + w.rtd * c.m_rtd;
    let total = ra + sa + w.cl * cl;
    if !total.is_finite() {
        return Err(Error::numeric("total", format!("loss is {total}")));
    }
    Ok(LossReport {
        itc: c.itc,
        imc: c.imc,
        cl,
        p_itm: c.p_itm,
        prd: c.prd,
        ra,
        mlm: c.mlm,
        m_rtd: c.m_rtd,
        sa,
        total,
    })
}

/// Differentiable loss terms of one step; `None` marks a disabled objective.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub itc: Option<Tensor>,
    pub imc: Option<Tensor>,
    pub p_itm: Option<Tensor>,
    pub prd: Option<Tensor>,
    pub mlm: Option<Tensor>,
    pub m_rtd: Option<Tensor>,
}

fn value(t: &Option<Tensor>) -> Result<f64> {
    match t {
        Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
        None => Ok(0.0),
    }
}

impl LossTerms {
    pub fn components(&self) -> Result<LossComponents> {
        Ok(LossComponents {
            itc: value(&self.itc)?,
            imc: value(&self.imc)?,
            p_itm: value(&self.p_itm)?,
            prd: value(&self.prd)?,
            mlm: value(&self.mlm)?,
            m_rtd: value(&self.m_rtd)?,
        })
    }

    /// Weighted total as a graph node, mirroring [`joint_loss`].
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let weighted = [
            (&self.itc, w.cl / 2.0),
            (&self.imc, w.cl / 2.0),
            (&self.p_itm, 1.0),
            (&self.prd, w.prd),
            (&self.mlm, 1.0),
            (&self.m_rtd, w.rtd),
        ];
        let mut acc: Option<Tensor> = None;
        for (term, k) in weighted {
            if let Some(t) = term {
                let t = if k == 1.0 { t.clone() } else { (t * k)? };
                acc = Some(match acc {
                    Some(a) => (a + t)?,
                    None => t,
                });
            }
        }
        acc.ok_or_else(|| Error::Config("every objective is disabled".into()))
    }

    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        joint_loss(&self.components()?, w)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn zeros_give_zero() {
        let r = joint_loss(&LossComponents::default(), &LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn unit_components_with_half_weights() {
        let c = LossComponents {
            itc: 1.0,
            imc: 1.0,
            p_itm: 1.0,
            prd: 1.0,
            mlm: 1.0,
            m_rtd: 1.0,
        };
        let r = joint_loss(&c, &LossWeights::default()).unwrap();
        assert_eq!((r.ra, r.sa, r.cl, r.total), (1.5, 1.5, 1.0, 3.5));
    }

    #[test]
    fn nan_names_the_component() {
        let c = LossComponents {
            mlm: f64::NAN,
            ..Default::default()
        };
        match joint_loss(&c, &LossWeights::default()) {
            Err(Error::Numeric { component, .. }) => assert_eq!(component, "mlm"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tensor_total_agrees_with_report() {
        let s = |v: f64| Some(Tensor::new(v, &Device::Cpu).unwrap());
        let terms = LossTerms {
            itc: s(0.7),
            imc: s(1.3),
            p_itm: s(0.4),
            prd: s(0.2),
            mlm: s(2.5),
            m_rtd: None,
        };
        let w = LossWeights::default();
        let total = terms.total(&w).unwrap().to_scalar::<f64>().unwrap();
        assert!((total - terms.report(&w).unwrap().total).abs() < 1e-12);
        assert_eq!(terms.report(&w).unwrap().m_rtd, 0.0);
        assert!(LossTerms::default().total(&w).is_err());
    }

    proptest! {
        #[test]
        fn composition_identities_hold(
            v in proptest::collection::vec(0.0f64..20.0, 6),
            w in proptest::collection::vec(0.0f64..2.0, 3),
        ) {
            let c = LossComponents { itc: v[0], imc: v[1], p_itm: v[2], prd: v[3], mlm: v[4], m_rtd: v[5] };
            let w = LossWeights { prd: w[0], rtd: w[1], cl: w[2] };
            let r = joint_loss(&c, &w).unwrap();
            prop_assert!((r.cl - (r.itc + r.imc) / 2.0).abs() <= 1e-12);
            prop_assert!((r.ra - (r.p_itm + w.prd * r.prd)).abs() <= 1e-12);
            prop_assert!((r.sa - (r.mlm + w.rtd * r.m_rtd)).abs() <= 1e-12);
            prop_assert!((r.total - (r.ra + r.sa + w.cl * r.cl)).abs() <= 1e-12);
            prop_assert!(r.total >= 0.0);
        }
    }
}
