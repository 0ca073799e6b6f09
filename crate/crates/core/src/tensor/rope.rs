use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Channel pairing used by a rotary embedding.
///
/// `Interleaved` rotates channels `(2i, 2i+1)`; `HalfSplit` rotates
/// `(i, i + d/2)`. Everything inside the crate works in interleaved order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RopeConvention {
    #[default]
    Interleaved,
    HalfSplit,
}

impl RopeConvention {
    /// Source channel for each interleaved output channel.
    pub fn to_interleaved_permutation(self, head_dim: usize) -> Vec<usize> {
        match self {
            RopeConvention::Interleaved => (0..head_dim).collect(),
            RopeConvention::HalfSplit => {
                let half = head_dim / 2;
                (0..head_dim)
                    .map(|c| if c % 2 == 0 { c / 2 } else { half + c / 2 })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub theta_base: f64,
    pub head_dim: usize,
    /// Position of the current token; future slots are `offset + 1, offset + 2, …`.
    pub position_offset: i64,
}

impl RopeParams {
    pub fn new(theta_base: f64, head_dim: usize, position_offset: i64) -> Result<Self> {
        let p = Self {
            theta_base,
            head_dim,
            position_offset,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Dimension {
                op: "rope",
                left: vec![self.head_dim],
                right: vec![],
            });
        }
        if !(self.theta_base > 0.0) || !self.theta_base.is_finite() {
            return Err(Error::domain(format!(
                "rope theta_base must be positive, got {}",
                self.theta_base
            )));
        }
        Ok(())
    }

    /// `ω_i = θ^(-2i/d)` for each channel pair.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2)
            .map(|i| self.theta_base.powf(-2.0 * i as f64 / d))
            .collect()
    }
}

/// cos/sin tables for one absolute position.
pub fn cos_sin_at(params: &RopeParams, position: i64) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let pos = position as f64;
    let (cos, sin) = params
        .frequencies()
        .iter()
        .map(|w| {
            let a = w * pos;
            (a.cos() as f32, a.sin() as f32)
        })
        .unzip();
    Ok((Tensor::vector(cos), Tensor::vector(sin)))
}

/// Mean of the cos/sin tables over positions `offset+1 ..= offset+n_future`.
pub fn avg_future_cos_sin(params: &RopeParams, n_future: usize) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    if n_future == 0 {
        return Err(Error::domain("n_future must be at least 1"));
    }
    let freqs = params.frequencies();
    let mut cos = vec![0.0f64; freqs.len()];
    let mut sin = vec![0.0f64; freqs.len()];
    for j in 1..=n_future as i64 {
        let pos = (params.position_offset + j) as f64;
        for ((c, s), w) in cos.iter_mut().zip(sin.iter_mut()).zip(&freqs) {
            let a = w * pos;
            *c += a.cos();
            *s += a.sin();
        }
    }
    let n = n_future as f64;
    Ok((
        Tensor::vector(cos.iter().map(|c| (c / n) as f32).collect()),
        Tensor::vector(sin.iter().map(|s| (s / n) as f32).collect()),
    ))
}

/// Rotates each row's interleaved channel pairs by the given cos/sin table.
pub fn rope_apply(q: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let d = q.cols();
    if d % 2 != 0 || cos.len() != d / 2 || sin.len() != d / 2 {
        return Err(Error::Dimension {
            op: "rope_apply",
            left: q.shape().to_vec(),
            right: vec![cos.len(), sin.len()],
        });
    }
    let mut out = q.clone();
    for r in 0..q.rows() {
        let src = q.row(r);
        let dst = out.row_mut(r);
        for (i, (&c, &s)) in cos.data().iter().zip(sin.data()).enumerate() {
            let (x, y) = (f64::from(src[2 * i]), f64::from(src[2 * i + 1]));
            let (c, s) = (f64::from(c), f64::from(s));
            dst[2 * i] = (x * c - y * s) as f32;
            dst[2 * i + 1] = (x * s + y * c) as f32;
        }
    }
    Ok(out)
}
