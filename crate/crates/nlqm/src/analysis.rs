//! Cross-prescription diagnostics: operational signaling, the weak-coupling
//! limit, and frame dependence of the predicted statistics.
//!
//! Each study sweeps full distribution evaluations and condenses them into a
//! small serializable report; threshold verdicts for machine consumption are
//! expressed as [`CheckRow`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::Serialize;

use crate::hilbert::Basis;
use crate::prescriptions::{
    distribution, distribution_with_order, sqm_distribution, Prescription, ProcessingOrder,
    Scenario,
};
use crate::spacetime::{classify, CausalRelation};
use crate::{Error, Result};

/// Total variation distance `½·Σ|p − q|` between maps over outcome tuples;
/// missing keys count as zero.
pub fn total_variation(
    p: &BTreeMap<Vec<usize>, f64>,
    q: &BTreeMap<Vec<usize>, f64>,
) -> f64 {
    let mut keys: BTreeSet<&Vec<usize>> = p.keys().collect();
    keys.extend(q.keys());
    keys.into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
        / 2.0
}

/// `n` measurement angles `k·π/n`, `k = 0..n`.
pub fn angle_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * PI / n as f64).collect()
}

/// How strongly a remote setting choice steers local statistics.
#[derive(Debug, Clone, Serialize)]
pub struct SignalingReport {
    pub prescription: String,
    pub sender: String,
    pub receiver: String,
    pub angles: Vec<f64>,
    /// Worst-case total variation between the receiver's marginals under two
    /// sender settings, maximized over the receiver's own setting too.
    pub max_tv: f64,
    pub worst_receiver_angle: f64,
    pub worst_sender_angles: (f64, f64),
}

/// Sweeps the bases of two spacelike-separated single-factor measurements
/// over `angles` and reports the largest shift a sender setting induces in
/// the receiver's marginal distribution.
pub fn signaling_metric(
    scenario: &Scenario,
    prescription: Prescription,
    sender: usize,
    receiver: usize,
    angles: &[f64],
) -> Result<SignalingReport> {
    scenario.validate()?;
    let n = scenario.measurements.len();
    for idx in [sender, receiver] {
        if idx >= n {
            return Err(Error::IndexOutOfRange(format!(
                "measurement {idx} out of range for {n} measurements"
            )));
        }
    }
    if sender == receiver {
        return Err(Error::Config(
            "signaling needs two distinct measurements".into(),
        ));
    }
    let sub = |idx: usize| -> Result<usize> {
        scenario.measurements[idx].subsystem().ok_or_else(|| {
            Error::Config(format!(
                "signaling sweeps act on single-factor measurements, but '{}' measures the \
                 whole system",
                scenario.measurements[idx].label
            ))
        })
    };
    let (fs, fr) = (sub(sender)?, sub(receiver)?);
    if fs == fr {
        return Err(Error::Config(
            "sender and receiver must sit on different factors".into(),
        ));
    }
    for f in [fs, fr] {
        if scenario.model.dims()[f] != 2 {
            return Err(Error::Config(format!(
                "angle sweeps are defined for two-level factors; factor {f} has dimension {}",
                scenario.model.dims()[f]
            )));
        }
    }
    let (ev_s, ev_r) = (
        scenario.measurements[sender].event,
        scenario.measurements[receiver].event,
    );
    if classify(&ev_s, &ev_r) != CausalRelation::Spacelike {
        return Err(Error::Config(format!(
            "'{}' and '{}' are causally connected; a marginal shift between them is not a \
             signaling violation",
            scenario.measurements[sender].label, scenario.measurements[receiver].label
        )));
    }
    if angles.len() < 2 {
        return Err(Error::Config("the sweep needs at least two angles".into()));
    }

    let mut max_tv = 0.0;
    let mut worst_receiver_angle = angles[0];
    let mut worst_sender_angles = (angles[0], angles[0]);
    for &theta_r in angles {
        let mut marginals: Vec<BTreeMap<Vec<usize>, f64>> = Vec::with_capacity(angles.len());
        for &theta_s in angles {
            let mut swept = scenario.clone();
            swept.measurements[sender].basis = Basis::rotation(Some(fs), theta_s);
            swept.measurements[receiver].basis = Basis::rotation(Some(fr), theta_r);
            let d = distribution(&swept, prescription)?;
            marginals.push(d.marginal(&[receiver])?);
        }
        for i in 0..marginals.len() {
            for j in (i + 1)..marginals.len() {
                let tv = total_variation(&marginals[i], &marginals[j]);
                if tv > max_tv {
                    max_tv = tv;
                    worst_receiver_angle = theta_r;
                    worst_sender_angles = (angles[i], angles[j]);
                }
            }
        }
    }
    Ok(SignalingReport {
        prescription: prescription.to_string(),
        sender: scenario.measurements[sender].label.clone(),
        receiver: scenario.measurements[receiver].label.clone(),
        angles: angles.to_vec(),
        max_tv,
        worst_receiver_angle,
        worst_sender_angles,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BornLimitRow {
    /// Multiplier applied to every non-linear coupling.
    pub scale: f64,
    /// Total variation against the linear theory at that scale.
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BornLimitReport {
    pub prescription: String,
    pub rows: Vec<BornLimitRow>,
}

impl BornLimitReport {
    /// Deviation ratios between consecutive rows: `deviation[i+1] /
    /// deviation[i]`. First-order behaviour shows up as ratios near the
    /// corresponding scale ratios.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| {
                if w[0].deviation == 0.0 {
                    f64::NAN
                } else {
                    w[1].deviation / w[0].deviation
                }
            })
            .collect()
    }
}

/// How fast a prescription's statistics converge to the linear theory as
/// the couplings are scaled down.
pub fn born_limit_study(
    scenario: &Scenario,
    prescription: Prescription,
    scales: &[f64],
) -> Result<BornLimitReport> {
    scenario.validate()?;
    if scales.is_empty() {
        return Err(Error::Config("the study needs at least one scale".into()));
    }
    let base = sqm_distribution(scenario)?;
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut scaled = scenario.clone();
        scaled.model = scenario.model.with_lambda_scale(scale);
        let d = distribution(&scaled, prescription)?;
        rows.push(BornLimitRow {
            scale,
            deviation: base.total_variation(&d)?,
        });
    }
    Ok(BornLimitReport {
        prescription: prescription.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameReport {
    pub prescription: String,
    pub rapidity: f64,
    /// Measurement indices in lab processing order.
    pub order_lab: Vec<usize>,
    /// Measurement indices in boosted processing order.
    pub order_boosted: Vec<usize>,
    /// Total variation between the two processing orders' distributions.
    pub tv: f64,
}

/// Evaluates the same scenario with measurements processed in lab order and
/// in the time order of a boosted frame, and reports the distance between
/// the two distributions. Requires a spacelike measurement pair — timelike
/// chains order identically in every frame and the comparison is vacuous.
pub fn frame_compare(
    scenario: &Scenario,
    prescription: Prescription,
    rapidity: f64,
) -> Result<FrameReport> {
    scenario.validate()?;
    let ms = &scenario.measurements;
    let spacelike = (0..ms.len()).any(|i| {
        ((i + 1)..ms.len()).any(|j| classify(&ms[i].event, &ms[j].event) == CausalRelation::Spacelike)
    });
    if !spacelike {
        return Err(Error::Config(
            "frame comparison needs at least one spacelike measurement pair; a timelike \
             chain has the same order in every frame"
                .into(),
        ));
    }
    let lab = distribution(scenario, prescription)?;
    let boosted = distribution_with_order(scenario, prescription, ProcessingOrder::Boosted(rapidity))?;
    Ok(FrameReport {
        prescription: prescription.to_string(),
        rapidity,
        order_lab: scenario.processing_order(ProcessingOrder::Lab),
        order_boosted: scenario.processing_order(ProcessingOrder::Boosted(rapidity)),
        tv: lab.total_variation(&boosted)?,
    })
}

/// One threshold verdict, shaped for CSV/JSON reports.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub prescription: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    pub verdict: String,
}

impl CheckRow {
    /// Passes when `value < threshold`.
    pub fn below(prescription: &str, metric: &str, value: f64, threshold: f64) -> Self {
        Self::verdict(prescription, metric, value, threshold, value < threshold)
    }

    /// Passes when `value > threshold`.
    pub fn above(prescription: &str, metric: &str, value: f64, threshold: f64) -> Self {
        Self::verdict(prescription, metric, value, threshold, value > threshold)
    }

    /// Informational row for prescriptions that are expected to cross the
    /// threshold: `expected-violation` when they do, `info` when they do
    /// not. Neither outcome is a failure.
    pub fn expected_violation(
        prescription: &str,
        metric: &str,
        value: f64,
        threshold: f64,
    ) -> Self {
        Self {
            prescription: prescription.into(),
            metric: metric.into(),
            value,
            threshold,
            verdict: if value > threshold {
                "expected-violation"
            } else {
                "info"
            }
            .into(),
        }
    }

    fn verdict(prescription: &str, metric: &str, value: f64, threshold: f64, pass: bool) -> Self {
        Self {
            prescription: prescription.into(),
            metric: metric.into(),
            value,
            threshold,
            verdict: if pass { "pass" } else { "fail" }.into(),
        }
    }

    /// Everything except an explicit `fail` counts as passing.
    pub fn passed(&self) -> bool {
        self.verdict != "fail"
    }
}

/// Renders check rows as CSV with a header line.
pub fn checks_to_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("prescription,metric,value,threshold,verdict\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{}\n",
            r.prescription, r.metric, r.value, r.threshold, r.verdict
        ));
    }
    out
}
