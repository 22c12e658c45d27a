//! Surrogate losses over clean and corrupted logits: adversarial
//! cross-entropy, the TRADES KL surrogate and the JSD consistency loss.
//!
//! Every loss is built on the tape so the trainer can differentiate it; the
//! value-level functions evaluate the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    At,
    Trades,
    Jsd,
}

impl LossKind {
    /// Corrupted views per sample.
    pub fn views(self) -> usize {
        match self {
            LossKind::Jsd => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// TRADES weight, `1/λ`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the JSD term next to the clean cross-entropy.
    #[serde(default = "default_jsd_weight")]
    pub jsd_weight: f64,
}

fn default_beta() -> f64 {
    6.0
}

fn default_jsd_weight() -> f64 {
    12.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::At,
            beta: default_beta(),
            jsd_weight: default_jsd_weight(),
        }
    }
}

impl LossConfig {
    pub fn at() -> Self {
        Self::default()
    }

    pub fn trades(beta: f64) -> Self {
        Self {
            kind: LossKind::Trades,
            beta,
            ..Self::default()
        }
    }

    pub fn jsd(weight: f64) -> Self {
        Self {
            kind: LossKind::Jsd,
            jsd_weight: weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Trades && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Argument(format!("TRADES beta must be > 0, got {}", self.beta)));
        }
        if self.kind == LossKind::Jsd && !(self.jsd_weight >= 0.0 && self.jsd_weight.is_finite()) {
            return Err(Error::Argument(format!(
                "JSD weight must be >= 0, got {}",
                self.jsd_weight
            )));
        }
        Ok(())
    }
}

fn check_labels<T: Real>(logits: Var<'_, T>, labels: &[usize]) -> Result<()> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy on the tape.
pub fn cross_entropy_var<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    check_labels(logits, labels)?;
    Ok(logits.log_softmax().pick(labels)?.mean().scale(-T::one()))
}

/// Per-row `KL(softmax(p) ‖ softmax(q))` as a length-`m` vector.
fn kl_rows<'t, T: Real>(p_logits: Var<'t, T>, q_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let log_p = p_logits.log_softmax();
    let log_q = q_logits.log_softmax();
    Ok(p_logits.softmax().mul(log_p.sub(log_q)?)?.row_sum())
}

pub fn trades_var<'t, T: Real>(
    clean: Var<'t, T>,
    corrupted: Var<'t, T>,
    labels: &[usize],
    beta: f64,
) -> Result<Var<'t, T>> {
    if clean.shape() != corrupted.shape() {
        return Err(Error::Shape("clean and corrupted logits differ in shape".into()));
    }
    let ce = cross_entropy_var(clean, labels)?;
    let kl = kl_rows(clean, corrupted)?.mean();
    ce.add(kl.scale(T::from_f64_lossy(beta)))
}

/// Mean Jensen-Shannon divergence of three logit batches, on probabilities.
pub fn jsd_var<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::Shape("JSD inputs differ in shape".into()));
    }
    let third = T::one() / T::from_f64_lossy(3.0);
    let (pa, pb, pc) = (a.softmax(), b.softmax(), c.softmax());
    let log_m = pa.add(pb)?.add(pc)?.scale(third).log_floor(T::from_f64_lossy(PROB_FLOOR));
    let kl = |p: Var<'t, T>, logits: Var<'t, T>| -> Result<Var<'t, T>> {
        Ok(p.mul(logits.log_softmax().sub(log_m)?)?.row_sum())
    };
    let total = kl(pa, a)?.add(kl(pb, b)?)?.add(kl(pc, c)?)?;
    Ok(total.mean().scale(third))
}

/// The configured surrogate over aligned clean and corrupted views.
pub fn loss_var<'t, T: Real>(
    clean: Var<'t, T>,
    views: &[Var<'t, T>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    if views.len() != cfg.kind.views() {
        return Err(Error::Usage(format!(
            "{:?} loss needs {} corrupted views, got {}",
            cfg.kind,
            cfg.kind.views(),
            views.len()
        )));
    }
    match cfg.kind {
        LossKind::At => cross_entropy_var(views[0], labels),
        LossKind::Trades => trades_var(clean, views[0], labels, cfg.beta),
        LossKind::Jsd => {
            let ce = cross_entropy_var(clean, labels)?;
            let jsd = jsd_var(clean, views[0], views[1])?;
            ce.add(jsd.scale(T::from_f64_lossy(cfg.jsd_weight)))
        }
    }
}

fn scalar_of<T: Real>(v: Var<'_, T>) -> f64 {
    v.with_value(|t| t.data()[0].as_f64())
}

pub fn at_loss<T: Real>(corrupted_logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(scalar_of(cross_entropy_var(tape.constant(corrupted_logits.clone()), labels)?))
}

pub fn trades_loss<T: Real>(
    clean_logits: &Tensor<T>,
    corrupted_logits: &Tensor<T>,
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let v = trades_var(
        tape.constant(clean_logits.clone()),
        tape.constant(corrupted_logits.clone()),
        labels,
        beta,
    )?;
    Ok(scalar_of(v))
}

/// Mean JSD in `[0, ln 3]`.
pub fn jsd_loss<T: Real>(clean: &Tensor<T>, aug1: &Tensor<T>, aug2: &Tensor<T>) -> Result<f64> {
    let tape = Tape::new();
    let v = jsd_var(
        tape.constant(clean.clone()),
        tape.constant(aug1.clone()),
        tape.constant(aug2.clone()),
    )?;
    Ok(scalar_of(v).clamp(0.0, 3f64.ln()))
}

/// Where a group of rows takes its corrupted logits from.
#[derive(Debug, Clone)]
pub enum Source<V> {
    /// One logit block per corrupted view, rows aligned with `rows`.
    Computed(Vec<V>),
    /// `x′ == x` for these rows, so the clean logits stand in.
    ReuseClean,
}

/// Corrupted logits for a subset of the batch, by original row index.
#[derive(Debug, Clone)]
pub struct Segment<V> {
    pub rows: Vec<usize>,
    pub source: Source<V>,
}

/// Reassembles per-segment corrupted logits into batch order, one `m`-row
/// matrix per view. Rows missing or assigned twice are an internal error.
pub fn assemble_views<'t, T: Real>(
    tape: &'t Tape<T>,
    clean: Var<'t, T>,
    segments: &[Segment<Var<'t, T>>],
    views: usize,
) -> Result<Vec<Var<'t, T>>> {
    let m = clean.shape()[0];
    let mut out = Vec::with_capacity(views);
    for view in 0..views {
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.rows.is_empty() {
                continue;
            }
            let block = match &seg.source {
                Source::Computed(blocks) => *blocks.get(view).ok_or_else(|| {
                    Error::Internal(format!("segment has {} views, need {views}", blocks.len()))
                })?,
                Source::ReuseClean => clean.gather_rows(&seg.rows).map_err(|e| Error::Internal(e.to_string()))?,
            };
            parts.push((block, seg.rows.clone()));
        }
        out.push(tape.assemble_rows(&parts, m)?);
    }
    Ok(out)
}

/// The configured surrogate with corrupted logits supplied per class segment.
pub fn combined_loss_var<'t, T: Real>(
    tape: &'t Tape<T>,
    clean: Var<'t, T>,
    segments: &[Segment<Var<'t, T>>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    let views = assemble_views(tape, clean, segments, cfg.kind.views())?;
    loss_var(clean, &views, labels, cfg)
}

/// Value-level form of [`combined_loss_var`].
pub fn combined_bullettrain_loss<T: Real>(
    clean_logits: &Tensor<T>,
    segments: &[Segment<Tensor<T>>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let clean = tape.constant(clean_logits.clone());
    let segs: Vec<Segment<Var<'_, T>>> = segments
        .iter()
        .map(|s| Segment {
            rows: s.rows.clone(),
            source: match &s.source {
                Source::Computed(blocks) => {
                    Source::Computed(blocks.iter().map(|b| tape.constant(b.clone())).collect())
                }
                Source::ReuseClean => Source::ReuseClean,
            },
        })
        .collect();
    Ok(scalar_of(combined_loss_var(&tape, clean, &segs, labels, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cross_entropy, kl_divergence, softmax};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn at_uniform_is_ln_k() {
        let logits: Tensor = Tensor::zeros(&[3, 10]);
        assert!((at_loss(&logits, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn at_is_mean_of_per_sample() {
        let logits = t(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let expected = (cross_entropy(logits.row(0), 2).unwrap() + cross_entropy(logits.row(1), 0).unwrap()) / 2.0;
        assert!((at_loss(&logits, &[2, 0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn trades_fixture() {
        let v = trades_loss(&t(&[&[2.0, 0.0]]), &t(&[&[0.0, 2.0]]), &[0], 6.0).unwrap();
        let p = softmax(&[2.0, 0.0]).unwrap();
        let q = softmax(&[0.0, 2.0]).unwrap();
        let oracle = cross_entropy(&[2.0, 0.0], 0).unwrap() + 6.0 * kl_divergence(&p, &q).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 9.2666).abs() < 1e-3);
    }

    #[test]
    fn trades_reduces_to_ce() {
        let clean = t(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let ce = at_loss(&clean, &[1, 2]).unwrap();
        assert!((trades_loss(&clean, &clean, &[1, 2], 6.0).unwrap() - ce).abs() < 1e-15);
        let other = t(&[&[3.0, 0.0, 0.0], &[0.0, 0.0, 3.0]]);
        assert!((trades_loss(&clean, &other, &[1, 2], 1e-12).unwrap() - ce).abs() < 1e-9);
    }

    #[test]
    fn jsd_bounds_and_symmetry() {
        let a = t(&[&[0.5, 1.0, -1.0]]);
        assert!(jsd_loss(&a, &a, &a).unwrap().abs() < 1e-15);
        let x = t(&[&[1000.0, 0.0, 0.0]]);
        let y = t(&[&[0.0, 1000.0, 0.0]]);
        let z = t(&[&[0.0, 0.0, 1000.0]]);
        assert!((jsd_loss(&x, &y, &z).unwrap() - 3f64.ln()).abs() < 1e-9);
        let b = t(&[&[0.0, 2.0, 0.1]]);
        let c = t(&[&[-1.0, 0.0, 3.0]]);
        let base = jsd_loss(&a, &b, &c).unwrap();
        for (p, q, r) in [(&b, &a, &c), (&c, &b, &a), (&a, &c, &b)] {
            assert!((jsd_loss(p, q, r).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_reassemble_in_order() {
        let clean = t(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]);
        let corr = t(&[&[0.0, 3.0], &[5.0, 0.0], &[1.0, 0.0]]);
        let segs = vec![
            Segment { rows: vec![2, 0], source: Source::Computed(vec![corr.select_rows(&[2, 0])]) },
            Segment { rows: vec![1], source: Source::Computed(vec![corr.select_rows(&[1])]) },
        ];
        let v = combined_bullettrain_loss(&clean, &segs, &[0, 1, 1], &LossConfig::at()).unwrap();
        assert!((v - at_loss(&corr, &[0, 1, 1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bad_reassembly_is_internal_error() {
        let clean = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let dup = vec![
            Segment { rows: vec![0], source: Source::<Tensor>::ReuseClean },
            Segment { rows: vec![0], source: Source::ReuseClean },
        ];
        let err = combined_bullettrain_loss(&clean, &dup, &[0, 1], &LossConfig::at()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)), "{err}");
        let missing = vec![Segment { rows: vec![1], source: Source::<Tensor>::ReuseClean }];
        let err = combined_bullettrain_loss(&clean, &missing, &[0, 1], &LossConfig::at()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)), "{err}");
    }

    #[test]
    fn outliers_with_zero_steps_reduce_trades_to_ce() {
        let clean = t(&[&[0.2, 1.0], &[-0.3, 0.4]]);
        let segs = vec![Segment { rows: vec![0, 1], source: Source::<Tensor>::ReuseClean }];
        let v = combined_bullettrain_loss(&clean, &segs, &[1, 0], &LossConfig::trades(6.0)).unwrap();
        assert_eq!(v, at_loss(&clean, &[1, 0]).unwrap());
    }

    /// Central differences of the value-level loss against tape gradients.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let clean = t(&[&[0.2, -0.4, 1.0], &[0.5, 0.1, -0.3]]);
        let v1 = t(&[&[0.0, 0.3, 0.2], &[1.5, -1.0, 0.0]]);
        let v2 = t(&[&[-0.2, 0.9, 0.1], &[0.4, 0.4, 0.4]]);
        let labels = [2, 0];
        for cfg in [LossConfig::at(), LossConfig::trades(6.0), LossConfig::jsd(12.0)] {
            let eval = |c: &Tensor, a: &Tensor, b: &Tensor| -> f64 {
                let tape = Tape::new();
                let views: Vec<_> = [a, b][..cfg.kind.views()].iter().map(|x| tape.constant((*x).clone())).collect();
                scalar_of(loss_var(tape.constant(c.clone()), &views, &labels, &cfg).unwrap())
            };
            let tape = Tape::new();
            let cv = tape.leaf(clean.clone());
            let views: Vec<_> = [&v1, &v2][..cfg.kind.views()].iter().map(|x| tape.leaf((*x).clone())).collect();
            let loss = loss_var(cv, &views, &labels, &cfg).unwrap();
            let grads = tape.backward(loss).unwrap();
            let h = 1e-6;
            let mut inputs = vec![clean.clone(), v1.clone(), v2.clone()];
            let vars: Vec<_> = std::iter::once(cv).chain(views.iter().copied()).collect();
            for (which, var) in vars.iter().enumerate() {
                let g = grads.wrt(*var).unwrap();
                for j in 0..inputs[which].numel() {
                    let orig = inputs[which].data()[j];
                    inputs[which].data_mut()[j] = orig + h;
                    let up = eval(&inputs[0], &inputs[1], &inputs[2]);
                    inputs[which].data_mut()[j] = orig - h;
                    let down = eval(&inputs[0], &inputs[1], &inputs[2]);
                    inputs[which].data_mut()[j] = orig;
                    let fd = (up - down) / (2.0 * h);
                    assert!((fd - g.data()[j]).abs() < 1e-6, "{:?} input {which}[{j}]: {fd} vs {}", cfg.kind, g.data()[j]);
                }
            }
        }
    }
}
