use super::tensor::{ParamSet, Real};
use crate::error::{Error, Result};

/// `teacher <- m * teacher + (1 - m) * student`, per tensor.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay {m} outside [0, 1]"
        )));
    }
    teacher.ensure_compatible(student)?;
    let (a, b) = (T::of(m), T::of(1.0 - m));
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (x, y) in t.data.iter_mut().zip(&s.data) {
            *x = a * *x + b * *y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tensor::Tensor;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn direct_substitution() {
        let mut t = single(1.0);
        ema_update(&mut t, &single(0.0), 0.999).unwrap();
        assert!((t.data("w")[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_and_bad_inputs() {
        let mut t = single(0.25);
        ema_update(&mut t, &single(0.25), 0.9).unwrap();
        assert_eq!(t.data("w")[0], 0.25);
        assert!(ema_update(&mut t, &single(0.0), 1.5).is_err());
        let mut other = ParamSet::new();
        other.insert("v", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }
}
