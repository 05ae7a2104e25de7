//! Training losses and their derivatives with respect to the raw head
//! outputs: multi-horizon pinball, median MSE, median sign hinge, and the
//! discrete-time survival likelihood of the return-to-baseline hazard.

use serde::{Deserialize, Serialize};

use super::network::OutputLayout;

/// `max(q * e, (q - 1) * e)` with `e = y - y_hat`.
pub fn pinball_loss(y: f64, y_hat: f64, q: f64) -> f64 {
    let e = y - y_hat;
    (q * e).max((q - 1.0) * e)
}

fn pinball_grad(y: f64, y_hat: f64, q: f64) -> f64 {
    if y - y_hat > 0.0 {
        -q
    } else {
        1.0 - q
    }
}

/// `max(0, eps - s * median) / eps`.
pub fn sign_hinge(median: f64, sign: i8, epsilon: f64) -> f64 {
    (epsilon - sign as f64 * median).max(0.0) / epsilon
}

/// Mean sign hinge over minutes with a non-neutral actual sign; `None`
/// when no minute is eligible.
pub fn sign_loss(medians: &[f64], signs: &[i8], epsilon: f64) -> Option<f64> {
    let terms: Vec<f64> = medians
        .iter()
        .zip(signs)
        .filter(|(_, s)| **s != 0)
        .map(|(m, s)| sign_hinge(*m, *s, epsilon))
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HazardEvent {
    /// First return to the neutrality band at this offset.
    Event(usize),
    /// No return observed; censored at this offset.
    Censored(usize),
}

/// The first offset `k` where `|delta| <= eps` holds on `run` consecutive
/// valid minutes; otherwise censoring at the last valid minute.
pub fn return_event(delta: &[f64], valid: &[bool], epsilon: f64, run: usize) -> Option<HazardEvent> {
    let n = delta.len();
    let inside = |k: usize| valid[k] && delta[k].abs() <= epsilon;
    for k in 0..n.saturating_sub(run.max(1) - 1) {
        if (k..k + run.max(1)).all(inside) {
            return Some(HazardEvent::Event(k));
        }
    }
    valid.iter().rposition(|v| *v).map(HazardEvent::Censored)
}

/// `-sum_{k<e} log(1 - h_k) - [event] log(h_e)`.
pub fn hazard_loss(hazard: &[f64], event: HazardEvent) -> f64 {
    let (e, observed) = match event {
        HazardEvent::Event(k) => (k, true),
        HazardEvent::Censored(k) => (k, false),
    };
    let mut loss: f64 = -hazard[..e].iter().map(|h| (1.0 - h).ln()).sum::<f64>();
    if observed {
        loss -= hazard[e].ln();
    }
    // An exactly certain return contributes -0.0; report it as 0.
    loss + 0.0
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pinball: f64,
    pub median_mse: f64,
    pub sign: f64,
    pub hazard: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pinball: 1.0,
            median_mse: 0.5,
            sign: 0.5,
            hazard: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pinball: f64,
    pub median_mse: f64,
    pub sign: f64,
    pub hazard: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            pinball: w.pinball * self.pinball,
            median_mse: w.median_mse * self.median_mse,
            sign: w.sign * self.sign,
            hazard: w.hazard * self.hazard,
        }
    }

    pub fn total(&self) -> f64 {
        self.pinball + self.median_mse + self.sign + self.hazard
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.pinball += s * other.pinball;
        self.median_mse += s * other.median_mse;
        self.sign += s * other.sign;
        self.hazard += s * other.hazard;
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// One model head's supervision for one example.
#[derive(Debug, Clone, Copy)]
pub struct TargetView<'a> {
    /// Head index in the output layout.
    pub head: usize,
    pub delta: &'a [f64],
    pub valid: &'a [bool],
    pub sign: &'a [i8],
    pub epsilon: f64,
}

/// Per-example loss terms (unweighted) and, when `grad` is given, the
/// gradient of the weighted total with respect to the raw outputs.
///
/// Each term is averaged over the heads that have supervision for it.
pub fn example_loss(
    outputs: &[f64],
    layout: &OutputLayout,
    quantiles: &[f64],
    median_index: usize,
    targets: &[TargetView<'_>],
    weights: &LossWeights,
    hazard_run: usize,
    mut grad: Option<&mut [f64]>,
) -> LossBreakdown {
    let q_count = quantiles.len();
    let mut parts = LossBreakdown::default();
    let mut counts = [0usize; 4];
    // Per-head raw contributions, rescaled once the head counts are known.
    struct HeadGrad {
        idx: usize,
        term: usize,
        g: f64,
    }
    let mut pending: Vec<HeadGrad> = Vec::new();
    let want_grad = grad.is_some();

    for t in targets {
        let horizon = layout.horizon;
        let valid: Vec<usize> = (0..horizon).filter(|&k| t.valid[k]).collect();
        if !valid.is_empty() {
            let n = valid.len() as f64;
            let denom = n * q_count as f64;
            let mut pin = 0.0;
            let mut mse = 0.0;
            for &k in &valid {
                let y = t.delta[k];
                for (qi, &q) in quantiles.iter().enumerate() {
                    let idx = layout.quantile(t.head, k, qi);
                    pin += pinball_loss(y, outputs[idx], q);
                    if want_grad {
                        pending.push(HeadGrad {
                            idx,
                            term: 0,
                            g: pinball_grad(y, outputs[idx], q) / denom,
                        });
                    }
                }
                let idx = layout.quantile(t.head, k, median_index);
                let e = outputs[idx] - y;
                mse += e * e;
                if want_grad {
                    pending.push(HeadGrad {
                        idx,
                        term: 1,
                        g: 2.0 * e / n,
                    });
                }
            }
            parts.pinball += pin / denom;
            parts.median_mse += mse / n;
            counts[0] += 1;
            counts[1] += 1;
        }

        let eligible: Vec<usize> = (0..horizon).filter(|&k| t.valid[k] && t.sign[k] != 0).collect();
        if !eligible.is_empty() {
            let n = eligible.len() as f64;
            let mut s = 0.0;
            for &k in &eligible {
                let idx = layout.quantile(t.head, k, median_index);
                let sgn = t.sign[k] as f64;
                let margin = t.epsilon - sgn * outputs[idx];
                if margin > 0.0 {
                    s += margin / t.epsilon;
                    if want_grad {
                        pending.push(HeadGrad {
                            idx,
                            term: 2,
                            g: -sgn / t.epsilon / n,
                        });
                    }
                }
            }
            parts.sign += s / n;
            counts[2] += 1;
        }

        if let Some(event) = return_event(t.delta, t.valid, t.epsilon, hazard_run) {
            let (e, observed) = match event {
                HazardEvent::Event(k) => (k, true),
                HazardEvent::Censored(k) => (k, false),
            };
            let mut h = 0.0;
            for k in 0..e {
                let idx = layout.hazard(t.head, k);
                let z = outputs[idx];
                // -log(1 - sigmoid(z)) = softplus(z)
                h += softplus(z);
                if want_grad {
                    pending.push(HeadGrad {
                        idx,
                        term: 3,
                        g: sigmoid(z),
                    });
                }
            }
            if observed {
                let idx = layout.hazard(t.head, e);
                let z = outputs[idx];
                // -log(sigmoid(z)) = softplus(-z)
                h += softplus(-z);
                if want_grad {
                    pending.push(HeadGrad {
                        idx,
                        term: 3,
                        g: sigmoid(z) - 1.0,
                    });
                }
            }
            parts.hazard += h;
            counts[3] += 1;
        }
    }

    let inv = counts.map(|c| if c > 0 { 1.0 / c as f64 } else { 0.0 });
    parts.pinball *= inv[0];
    parts.median_mse *= inv[1];
    parts.sign *= inv[2];
    parts.hazard *= inv[3];

    if let Some(g) = grad.as_deref_mut() {
        let w = [weights.pinball, weights.median_mse, weights.sign, weights.hazard];
        for p in pending {
            if w[p.term] != 0.0 {
                g[p.idx] += w[p.term] * inv[p.term] * p.g;
            }
        }
    }
    parts
}
