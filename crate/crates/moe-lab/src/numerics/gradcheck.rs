//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker works against any `ParamStore` plus a loss closure that
//! rebuilds the forward graph, runs backward, and leaves gradients in the
//! parameters. Run it in f64; f32 has too little headroom for the 1e-4
//! central step.

use super::scalar::Scalar;
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max relative error allowed per parameter.
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub rel_floor: f64,
    /// Check at most this many entries per parameter, evenly strided.
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            rel_floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamGradReport> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn(model, want_grad)` must be deterministic: same parameters, same
/// loss. When `want_grad` is true it must leave gradients in the parameters;
/// when false it may skip the backward pass.
pub fn grad_check<F, M, L>(model: &mut M, mut loss_fn: L, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Scalar,
    M: ParamStore<F>,
    L: FnMut(&mut M, bool) -> Result<F>,
{
    model.zero_grads();
    let base_loss = loss_fn(model, true)?.as_f64();
    if !base_loss.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check base loss".into(),
        });
    }

    // Snapshot names and analytic grads of the trainable parameters.
    let mut names = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.for_each_param(&mut |p| {
        if !p.trainable {
            return;
        }
        names.push(p.name.clone());
        let g = match &p.tensor.grad {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.tensor.numel()],
        };
        grads.push(g);
    });

    for (name, g) in names.iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::GradCheck {
                name: name.clone(),
                detail: "non-finite analytic gradient".into(),
            });
        }
    }

    let h = cfg.step;
    let mut per_param = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let numel = grads[pi].len();
        let stride = match cfg.max_entries_per_param {
            Some(cap) if cap < numel => numel.div_ceil(cap),
            _ => 1,
        };
        let mut max_rel = 0.0f64;
        let mut checked = 0;
        let mut idx = 0;
        while idx < numel {
            let original = read_entry(model, pi, idx);
            write_entry(model, pi, idx, original + h);
            let plus = loss_fn(model, false)?.as_f64();
            write_entry(model, pi, idx, original - h);
            let minus = loss_fn(model, false)?.as_f64();
            write_entry(model, pi, idx, original);

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck {
                    name: name.clone(),
                    detail: format!("non-finite perturbed loss at entry {idx}"),
                });
            }
            let fd = (plus - minus) / (2.0 * h);
            let ad = grads[pi][idx];
            let denom = fd.abs().max(ad.abs()).max(cfg.rel_floor);
            let rel = (fd - ad).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
            idx += stride;
        }
        per_param.push(ParamGradReport {
            name: name.clone(),
            max_rel_err: max_rel,
            entries_checked: checked,
        });
    }

    let max_rel_err = per_param
        .iter()
        .map(|p| p.max_rel_err)
        .fold(0.0f64, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}

/// Entry access by (trainable-parameter ordinal, flat index). Linear walk;
/// fine at the model sizes gradient checks run on.
fn read_entry<F: Scalar, M: ParamStore<F>>(model: &M, param_ordinal: usize, idx: usize) -> f64 {
    let mut i = 0;
    let mut out = None;
    model.for_each_param(&mut |p| {
        if !p.trainable {
            return;
        }
        if i == param_ordinal {
            out = Some(p.tensor.values[idx].as_f64());
        }
        i += 1;
    });
    out.expect("parameter ordinal out of range")
}

fn write_entry<F: Scalar, M: ParamStore<F>>(model: &mut M, param_ordinal: usize, idx: usize, v: f64) {
    let mut i = 0;
    model.for_each_param_mut(&mut |p| {
        if !p.trainable {
            return;
        }
        if i == param_ordinal {
            p.tensor.values[idx] = F::from_f64(v);
        }
        i += 1;
    });
}
