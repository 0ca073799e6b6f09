use crate::error::{Error, Result};
use crate::selection::CandidateSet;

/// Ground-truth attention mass captured by `selected`.
pub fn attention_overlap(selected: &CandidateSet, gt_attn: &[f32]) -> Result<f64> {
    if selected.universe() != gt_attn.len() {
        return Err(Error::domain(format!(
            "overlap: set over {} positions, attention row has {}",
            selected.universe(),
            gt_attn.len()
        )));
    }
    let total: f64 = gt_attn.iter().map(|&x| f64::from(x)).sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::domain(format!("overlap: attention row sums to {total}")));
    }
    Ok(selected.indices().iter().map(|&i| f64::from(gt_attn[i])).sum())
}

/// Sample Pearson correlation, two-pass.
pub fn pearson<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "pearson: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations"));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x.into()).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x.into()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x.into() - ma, y.into() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// The pruned output had zero norm (or did not exist) and was scored 0.
    pub degenerate: bool,
}

/// Cosine similarity between the full and pruned attention outputs.
pub fn output_error(full_out: &[f32], pruned_out: Option<&[f32]>) -> Result<Cosine> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nf = norm(full_out);
    if nf == 0.0 {
        return Err(Error::domain("output cosine: full output has zero norm"));
    }
    let degenerate = Cosine {
        value: 0.0,
        degenerate: true,
    };
    let Some(pruned) = pruned_out else {
        return Ok(degenerate);
    };
    if pruned.len() != full_out.len() {
        return Err(Error::Dimension {
            op: "output_error",
            left: vec![full_out.len()],
            right: vec![pruned.len()],
        });
    }
    let np = norm(pruned);
    if np == 0.0 {
        return Ok(degenerate);
    }
    let dot: f64 = full_out
        .iter()
        .zip(pruned)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok(Cosine {
        value: (dot / (nf * np)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}
