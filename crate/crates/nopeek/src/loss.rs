//! Combined training objective: a distance-correlation leakage penalty on
//! the protected activations plus categorical cross-entropy on the task,
//! alpha1 * DCOR + alpha2 * CCE, and the attribute-privacy variant that
//! decorrelates against one protected attribute instead of the raw input.

use crate::depmeasure;
use crate::error::{Error, Result};
use crate::model;
use crate::numcore::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoPeekWeights {
    /// Distance-correlation weight; zero reproduces baseline training.
    pub alpha1: f64,
    /// Cross-entropy weight.
    pub alpha2: f64,
}

impl NoPeekWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let w = NoPeekWeights { alpha1, alpha2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha1.is_finite() || self.alpha1 < 0.0 {
            return Err(Error::Config(format!("alpha1 must be finite and >= 0, got {}", self.alpha1)));
        }
        if !self.alpha2.is_finite() || self.alpha2 <= 0.0 {
            return Err(Error::Config(format!("alpha2 must be finite and > 0, got {}", self.alpha2)));
        }
        Ok(())
    }
}

impl Default for NoPeekWeights {
    fn default() -> Self {
        NoPeekWeights { alpha1: 0.5, alpha2: 1.0 }
    }
}

/// alpha1 * dcor(X, Z) + alpha2 * cce(y, logits) on the tape. A zero weight
/// skips its term entirely, so alpha1 = 0 is exactly baseline training.
pub fn nopeek_loss(
    tape: &mut Tape,
    x: Var,
    z: Var,
    logits: Var,
    y_true: &Matrix,
    w: NoPeekWeights,
) -> Result<Var> {
    w.validate()?;
    if tape.value(x).rows() != tape.value(z).rows()
        || tape.value(z).rows() != y_true.rows()
    {
        return Err(Error::Dim(format!(
            "batch dims disagree: x {}, z {}, y {}",
            tape.value(x).rows(),
            tape.value(z).rows(),
            y_true.rows()
        )));
    }
    let task = model::cce(tape, logits, y_true)?;
    let task = tape.scale(task, w.alpha2);
    if w.alpha1 == 0.0 {
        return Ok(task);
    }
    let leak = depmeasure::dcor_node(tape, x, z)?;
    let leak = tape.scale(leak, w.alpha1);
    tape.add(leak, task)
}

/// Attribute-privacy objective: decorrelate Z from the one-hot protected
/// attribute S while training the remaining heads,
/// alpha1 * dcor(S, Z) + alpha2 * sum of per-head cce. The protected
/// attribute must not appear among the trained heads.
pub fn attribute_loss(
    tape: &mut Tape,
    s: Var,
    z: Var,
    head_names: &[String],
    logits: &[Var],
    y_true: &[Matrix],
    protected: &str,
    w: NoPeekWeights,
) -> Result<Var> {
    w.validate()?;
    if head_names.iter().any(|n| n == protected) {
        return Err(Error::Config(format!(
            "protected attribute {:?} is also a trained head",
            protected
        )));
    }
    if logits.len() != y_true.len() || logits.len() != head_names.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "heads/logits/targets disagree: {} names, {} logits, {} targets",
            head_names.len(),
            logits.len(),
            y_true.len()
        )));
    }
    let mut task: Option<Var> = None;
    for (l, y) in logits.iter().zip(y_true.iter()) {
        let c = model::cce(tape, *l, y)?;
        task = Some(match task {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    let task = tape.scale(task.unwrap(), w.alpha2);
    if w.alpha1 == 0.0 {
        return Ok(task);
    }
    let leak = depmeasure::dcor_node(tape, s, z)?;
    let leak = tape.scale(leak, w.alpha1);
    tape.add(leak, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, SplitModel};
    use crate::numcore::Rng;

    fn setup() -> (SplitModel, Matrix, Matrix) {
        let model = SplitModel::build(
            vec![
                LayerKind::Dense { input: 5, output: 8 },
                LayerKind::Relu { dim: 8 },
                LayerKind::Dense { input: 8, output: 6 },
                LayerKind::Relu { dim: 6 },
            ],
            2,
            &[("label".to_string(), 3)],
            77,
        )
        .unwrap();
        let mut rng = Rng::new(78);
        let x = rng.normal_matrix(8, 5, 0.0, 1.0);
        let mut y = Matrix::zeros(8, 3);
        for i in 0..8 {
            y.set(i, i % 3, 1.0);
        }
        (model, x, y)
    }

    #[test]
    fn alpha1_zero_is_exactly_weighted_cce() {
        let (model, x, y) = setup();
        let w = NoPeekWeights { alpha1: 0.0, alpha2: 1.7 };

        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let loss = nopeek_loss(&mut tape, xl, z, logits[0], &y, w).unwrap();

        let mut tape2 = Tape::new();
        let xl2 = tape2.leaf(x.clone());
        let (_, logits2, _, _) = model.forward_full(&mut tape2, xl2).unwrap();
        let c = model::cce(&mut tape2, logits2[0], &y).unwrap();
        let want = tape2.value(c).scalar_value() * 1.7;
        assert_eq!(tape.value(loss).scalar_value(), want);
    }

    #[test]
    fn alpha2_zero_rejected_but_z_equals_x_gives_alpha1() {
        // alpha2 must be positive per the weight contract, so drive the
        // dcor-only value through tiny alpha2 and a zero cce.
        let (_, x, _) = setup();
        let w = NoPeekWeights { alpha1: 0.9, alpha2: 1e-300 };
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let zl = tape.leaf(x.clone());
        // perfectly confident logits give cce 0
        let mut logits = Matrix::zeros(8, 3);
        let mut y = Matrix::zeros(8, 3);
        for i in 0..8 {
            logits.set(i, i % 3, 60.0);
            y.set(i, i % 3, 1.0);
        }
        let ll = tape.leaf(logits);
        let loss = nopeek_loss(&mut tape, xl, zl, ll, &y, w).unwrap();
        assert!((tape.value(loss).scalar_value() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_independent_composition() {
        let (model, x, y) = setup();
        let w = NoPeekWeights { alpha1: 0.4, alpha2: 1.3 };

        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let loss = nopeek_loss(&mut tape, xl, z, logits[0], &y, w).unwrap();

        let z_plain = model.forward_client_plain(&x).unwrap();
        let logits_plain = model.forward_full_plain(&x).unwrap().remove(0);
        let d = crate::depmeasure::dcor(&x, &z_plain).unwrap();
        let c = crate::numcore::kernels::softmax_cce(&logits_plain, &y).0;
        let want = 0.4 * d + 1.3 * c;
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_for_nonnegative_weights() {
        let (model, x, y) = setup();
        for a1 in [0.0, 0.3, 2.0] {
            let mut tape = Tape::new();
            let xl = tape.leaf(x.clone());
            let (z, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
            let loss =
                nopeek_loss(&mut tape, xl, z, logits[0], &y, NoPeekWeights { alpha1: a1, alpha2: 1.0 })
                    .unwrap();
            assert!(tape.value(loss).scalar_value() >= 0.0);
        }
    }

    #[test]
    fn degenerate_activations_propagate_variance_error() {
        let (_, x, y) = setup();
        let w = NoPeekWeights { alpha1: 0.5, alpha2: 1.0 };
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let zl = tape.leaf(Matrix::filled(8, 4, 1.0));
        let ll = tape.leaf(Matrix::zeros(8, 3));
        assert!(matches!(
            nopeek_loss(&mut tape, xl, zl, ll, &y, w),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn server_gradients_do_not_depend_on_alpha1() {
        let (model, x, y) = setup();
        let run = |alpha1: f64| {
            let mut tape = Tape::new();
            let xl = tape.leaf(x.clone());
            let (z, logits, _, server_vars) = model.forward_full(&mut tape, xl).unwrap();
            let loss = nopeek_loss(
                &mut tape,
                xl,
                z,
                logits[0],
                &y,
                NoPeekWeights { alpha1, alpha2: 1.0 },
            )
            .unwrap();
            let grads = tape.backward(loss).unwrap();
            server_vars
                .iter()
                .map(|v| grads.wrt(*v, tape.value(*v).shape()))
                .collect::<Vec<_>>()
        };
        let a = run(0.0);
        let b = run(0.7);
        let c = run(2.5);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn attribute_loss_alpha1_zero_is_head_sum() {
        let (model, x, _) = setup();
        let mut rng = Rng::new(80);
        let s = rng.normal_matrix(8, 2, 0.0, 1.0);
        let mut ya = Matrix::zeros(8, 3);
        let mut yb = Matrix::zeros(8, 2);
        for i in 0..8 {
            ya.set(i, i % 3, 1.0);
            yb.set(i, i % 2, 1.0);
        }
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, _, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let sl = tape.leaf(s);
        let la = tape.leaf(rng.normal_matrix(8, 3, 0.0, 1.0));
        let lb = tape.leaf(rng.normal_matrix(8, 2, 0.0, 1.0));
        let loss = attribute_loss(
            &mut tape,
            sl,
            z,
            &["a".to_string(), "b".to_string()],
            &[la, lb],
            &[ya.clone(), yb.clone()],
            "quadrant",
            NoPeekWeights { alpha1: 0.0, alpha2: 1.0 },
        )
        .unwrap();
        let ca = crate::numcore::kernels::softmax_cce(tape.value(la), &ya).0;
        let cb = crate::numcore::kernels::softmax_cce(tape.value(lb), &yb).0;
        assert!((tape.value(loss).scalar_value() - (ca + cb)).abs() < 1e-12);
    }

    #[test]
    fn attribute_loss_constant_attribute_is_degenerate() {
        let (model, x, _) = setup();
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let sl = tape.leaf(Matrix::filled(8, 1, 1.0));
        let mut y = Matrix::zeros(8, 3);
        for i in 0..8 {
            y.set(i, i % 3, 1.0);
        }
        assert!(matches!(
            attribute_loss(
                &mut tape,
                sl,
                z,
                &["label".to_string()],
                &[logits[0]],
                &[y],
                "quadrant",
                NoPeekWeights::default(),
            ),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn attribute_loss_rejects_protected_head() {
        let (model, x, y) = setup();
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, logits, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let sl = tape.leaf(x.clone());
        assert!(matches!(
            attribute_loss(
                &mut tape,
                sl,
                z,
                &["race".to_string()],
                &[logits[0]],
                &[y],
                "race",
                NoPeekWeights::default(),
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attribute_loss_matches_manual_composition() {
        let (model, x, _) = setup();
        let mut rng = Rng::new(81);
        // three attributes, protect the second
        let mut s = Matrix::zeros(8, 4);
        for i in 0..8 {
            s.set(i, i % 4, 1.0);
        }
        let mut ya = Matrix::zeros(8, 3);
        let mut yb = Matrix::zeros(8, 2);
        for i in 0..8 {
            ya.set(i, i % 3, 1.0);
            yb.set(i, (i / 2) % 2, 1.0);
        }
        let la_v = rng.normal_matrix(8, 3, 0.0, 1.0);
        let lb_v = rng.normal_matrix(8, 2, 0.0, 1.0);
        let w = NoPeekWeights { alpha1: 0.6, alpha2: 1.1 };

        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, _, _, _) = model.forward_full(&mut tape, xl).unwrap();
        let sl = tape.leaf(s.clone());
        let la = tape.leaf(la_v.clone());
        let lb = tape.leaf(lb_v.clone());
        let loss = attribute_loss(
            &mut tape,
            sl,
            z,
            &["age".to_string(), "gender".to_string()],
            &[la, lb],
            &[ya.clone(), yb.clone()],
            "race",
            w,
        )
        .unwrap();

        let z_plain = model.forward_client_plain(&x).unwrap();
        let d = crate::depmeasure::dcor(&s, &z_plain).unwrap();
        let ca = crate::numcore::kernels::softmax_cce(&la_v, &ya).0;
        let cb = crate::numcore::kernels::softmax_cce(&lb_v, &yb).0;
        let want = 0.6 * d + 1.1 * (ca + cb);
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }
}
