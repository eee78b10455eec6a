//! Dual-teacher exponential moving averages of the student parameters.
//!
//! Both teachers follow `theta' <- alpha * theta' + (1 - alpha) * theta`
//! once per optimizer step, after the student update. With identical decay
//! rates the two teachers stay bit-identical; the per-teacher `alpha` fields
//! exist so divergent schedules can be configured.

use crate::error::Result;
use crate::params::ParamSet;

/// The EMA recurrence itself: `alpha * teacher + (1 - alpha) * student`.
/// Shared by the f32 parameter path and by f64 closed-form probes.
pub fn ema_value<F: num_traits::Float>(teacher: F, student: F, alpha: F) -> F {
    alpha * teacher + (F::one() - alpha) * student
}

#[derive(Debug, Clone)]
pub struct EmaState {
    pub teacher_semantic: ParamSet,
    pub teacher_structural: ParamSet,
    pub alpha_semantic: f32,
    pub alpha_structural: f32,
    pub step: u64,
}

/// Both teachers start as exact copies of the student.
pub fn ema_init(student: &ParamSet, alpha: f32) -> EmaState {
    EmaState {
        teacher_semantic: student.clone(),
        teacher_structural: student.clone(),
        alpha_semantic: alpha,
        alpha_structural: alpha,
        step: 0,
    }
}

/// One EMA update of both teachers toward the current student.
pub fn ema_update(state: &mut EmaState, student: &ParamSet) -> Result<()> {
    ema_blend(&mut state.teacher_semantic, student, state.alpha_semantic)?;
    ema_blend(&mut state.teacher_structural, student, state.alpha_structural)?;
    state.step += 1;
    Ok(())
}

fn ema_blend(teacher: &mut ParamSet, student: &ParamSet, alpha: f32) -> Result<()> {
    teacher.check_same_layout(student, "ema update")?;
    for (t, s) in teacher
        .iter_mut()
        .map(|(_, a)| a)
        .zip(student.iter().map(|(_, a)| a))
    {
        t.zip_mut_with(s, |t, s| *t = ema_value(*t, *s, alpha));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn scalar_set(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[1]), v)).unwrap();
        p
    }

    #[test]
    fn init_copies_student_exactly() {
        let student = scalar_set(0.25);
        let state = ema_init(&student, 0.999);
        assert!(state.teacher_semantic.bit_eq(&student));
        assert!(state.teacher_structural.bit_eq(&student));
        assert!(state.teacher_semantic.bit_eq(&state.teacher_structural));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn degenerate_alphas() {
        let student = scalar_set(1.0);
        // alpha = 1: teachers frozen.
        let mut state = ema_init(&scalar_set(0.0), 1.0);
        ema_update(&mut state, &student).unwrap();
        assert_eq!(state.teacher_semantic.get("w").unwrap()[0], 0.0);
        // alpha = 0: teachers jump to the student.
        let mut state = ema_init(&scalar_set(0.0), 0.0);
        ema_update(&mut state, &student).unwrap();
        assert_eq!(state.teacher_semantic.get("w").unwrap()[0], 1.0);
    }

    #[test]
    fn geometric_series_closed_form() {
        // Teacher at 0, student held at 1: after k steps teacher = 1 - alpha^k.
        let student = scalar_set(1.0);
        let mut state = ema_init(&scalar_set(0.0), 0.999);
        let mut checked = 0;
        for k in 1..=1000u32 {
            ema_update(&mut state, &student).unwrap();
            if k == 1 || k == 10 || k == 1000 {
                let expect = 1.0 - 0.999f64.powi(k as i32);
                let got = state.teacher_semantic.get("w").unwrap()[0] as f64;
                // f32 storage rounds every step; ~1e-5 is the attainable bound here.
                assert!(
                    (got - expect).abs() < 1e-5,
                    "k={k}: got {got}, expect {expect}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 3);
        assert_eq!(state.step, 1000);
    }

    #[test]
    fn teachers_stay_identical_and_student_untouched() {
        let mut student = scalar_set(0.5);
        let mut state = ema_init(&student, 0.9);
        for i in 0..50 {
            student.get_mut("w").unwrap().fill(i as f32 * 0.01);
            let before = student.clone();
            ema_update(&mut state, &student).unwrap();
            assert!(student.bit_eq(&before));
            assert!(state.teacher_semantic.bit_eq(&state.teacher_structural));
        }
    }

    #[test]
    fn convexity_keeps_teachers_in_range() {
        // Student bounded in [-1, 1] forever => teachers stay in [-1, 1].
        let mut state = ema_init(&scalar_set(-1.0), 0.99);
        for i in 0..200 {
            let v = ((i as f32) * 0.37).sin(); // within [-1, 1]
            ema_update(&mut state, &scalar_set(v)).unwrap();
            let t = state.teacher_semantic.get("w").unwrap()[0];
            assert!((-1.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let student = scalar_set(1.0);
        let mut other = ParamSet::new();
        other
            .insert("w", ArrayD::from_elem(IxDyn(&[2]), 0.0f32))
            .unwrap();
        let mut state = ema_init(&other, 0.999);
        assert!(ema_update(&mut state, &student).is_err());
    }
}
