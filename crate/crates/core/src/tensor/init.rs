use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`, for layers followed by a ReLU.
    FanScaledNormal,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, for plain linear layers.
    FanScaledUniform,
    /// Normal with a fixed std, e.g. small starts for box regressors.
    Normal(f64),
    Zeros,
}

/// Draws a tensor of `shape`. For rank-2 shapes `[fan_in, fan_out]`; a rank-1
/// shape is treated as `[1, n]`.
pub fn init_params<T: Scalar>(shape: &[usize], scheme: Init, rng: &mut Rng) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "init_params",
            format!("empty shape {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = match shape {
        [a] => (1, *a),
        [a, b] => (*a, *b),
        [a, rest @ ..] => (*a, rest.iter().product()),
        [] => unreachable!(),
    };
    let data = match scheme {
        Init::Zeros => vec![T::zero(); n],
        Init::FanScaledNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::c(std * rng.normal())).collect()
        }
        Init::Normal(std) => (0..n).map(|_| T::c(std * rng.normal())).collect(),
        Init::FanScaledUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::c(rng.uniform(-bound, bound))).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme() {
        let t: Tensor<f32> = init_params(&[3, 4], Init::Zeros, &mut Rng::new(1)).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fan_scaled_normal_std() {
        let t: Tensor<f64> =
            init_params(&[8, 1250], Init::FanScaledNormal, &mut Rng::new(5)).unwrap();
        assert_eq!(t.len(), 10_000);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let std =
            (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        assert!((std - 0.5).abs() < 0.1, "std {std}");
    }

    #[test]
    fn uniform_bound() {
        let t: Tensor<f64> =
            init_params(&[10, 14], Init::FanScaledUniform, &mut Rng::new(2)).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f32> =
            init_params(&[5, 5], Init::FanScaledNormal, &mut Rng::new(11)).unwrap();
        let b: Tensor<f32> =
            init_params(&[5, 5], Init::FanScaledNormal, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(init_params::<f32>(&[], Init::Zeros, &mut Rng::new(0)).is_err());
        assert!(init_params::<f32>(&[0, 3], Init::Zeros, &mut Rng::new(0)).is_err());
    }
}
