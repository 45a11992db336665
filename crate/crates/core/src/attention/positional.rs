use super::PeMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `PE[pos][2i] = sin(pos / 10000^(2i/D))`, `PE[pos][2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(
            "positional encoding",
            format!("sinusoidal mode needs an even width, got {dim}"),
        ));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, dim], data)
}

/// `x[pos] + PE[pos]` for `x` of shape `[L×D]` or `[G×L×D]`.
pub fn apply_positional_encoding(x: &Tensor, mode: PeMode) -> Result<Tensor> {
    match mode {
        PeMode::Disabled => Ok(x.clone()),
        PeMode::Sinusoidal => {
            if x.rank() < 2 {
                return Err(Error::invalid("positional encoding", "rank < 2"));
            }
            let (len, dim) = (x.shape()[x.rank() - 2], x.last_dim());
            let table = sinusoidal_table(len, dim)?;
            let data = x
                .data()
                .iter()
                .zip(table.data().iter().cycle())
                .map(|(a, b)| a + b)
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data, x.precision()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_is_identity() {
        let x = Tensor::from_fn(&[3, 5], |i| i as f64 * 0.1);
        assert_eq!(apply_positional_encoding(&x, PeMode::Disabled).unwrap(), x);
    }

    #[test]
    fn table_values() {
        let t = sinusoidal_table(3, 6).unwrap();
        for i in 0..3 {
            assert_eq!(t.at(&[0, 2 * i]), 0.0);
            assert_eq!(t.at(&[0, 2 * i + 1]), 1.0);
        }
        assert!((t.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(&[1, 0]) - 0.8415).abs() < 1e-4);
        // second pair uses 10000^(2/6)
        assert!((t.at(&[2, 3]) - (2.0 / 10000f64.powf(1.0 / 3.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_table(2, 3).is_err());
        assert!(apply_positional_encoding(&Tensor::ones(&[2, 3]), PeMode::Sinusoidal).is_err());
        assert!(apply_positional_encoding(&Tensor::ones(&[2, 3]), PeMode::Disabled).is_ok());
    }

    #[test]
    fn grouped_input_gets_the_same_table_per_group() {
        let x = Tensor::zeros(&[2, 3, 4]);
        let y = apply_positional_encoding(&x, PeMode::Sinusoidal).unwrap();
        assert_eq!(
            y.narrow(0, 0, 1).unwrap().data(),
            sinusoidal_table(3, 4).unwrap().data()
        );
        assert_eq!(
            y.narrow(0, 1, 1).unwrap().data(),
            sinusoidal_table(3, 4).unwrap().data()
        );
    }
}
