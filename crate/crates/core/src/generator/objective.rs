use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GeneratorError, Result};
use crate::tensor::{KernelError, Tensor};

/// Which conditional GAN objective to evaluate.
///
/// - `naive`: `E[log D(M, I)] + E[log(1 - D(M, G(M)))]`
/// - `retrieval`: `E[log D(M̂, I_r)] + E[log D(M̂, I_q)] + E[log(1 - D(M̂, G(M̂)))]`
/// - `bach`: `E[log D(m̂, I_q)] + E[log(1 - D(m̂, G(m̂)))]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Retrieval,
    Bach,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Naive => "naive",
            Variant::Retrieval => "retrieval",
            Variant::Bach => "bach",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "naive" => Ok(Variant::Naive),
            "retrieval" => Ok(Variant::Retrieval),
            "bach" => Ok(Variant::Bach),
            _ => Err(format!("unknown variant {s:?} (naive, retrieval, bach)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: &'static str,
    /// Mean over scales of `per_scale`.
    pub value: f64,
    /// Pixel mean of the log term at each scale.
    pub per_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub variant: Variant,
    /// The value `D` maximizes: the sum of all terms.
    pub discriminator: f64,
    /// The value `G` minimizes: the fake term.
    pub generator: f64,
    pub terms: Vec<LossTerm>,
}

fn term(name: &'static str, maps: &[Tensor], fake: bool) -> Result<LossTerm> {
    let mut per_scale = Vec::with_capacity(maps.len());
    for (scale, m) in maps.iter().enumerate() {
        if m.is_empty() {
            return Err(KernelError::Shape {
                op: "gan_objective",
                expected: vec![1],
                actual: m.shape().to_vec(),
            }
            .into());
        }
        let mut acc = 0.0;
        for (index, &d) in m.data().iter().enumerate() {
            if !(d > 0.0 && d < 1.0) {
                return Err(GeneratorError::Domain {
                    term: name,
                    scale,
                    index,
                    value: d,
                });
            }
            acc += if fake { (-d).ln_1p() } else { d.ln() };
        }
        per_scale.push(acc / m.len() as f64);
    }
    let value = per_scale.iter().sum::<f64>() / per_scale.len() as f64;
    Ok(LossTerm { name, value, per_scale })
}

/// Evaluates `variant` over per-scale score maps. `retrieved` holds
/// `D(M̂, I_r)` and is required by, and only accepted for, `retrieval`.
pub fn gan_objective(variant: Variant, real: &[Tensor], retrieved: Option<&[Tensor]>, fake: &[Tensor]) -> Result<LossReport> {
    let bad = |detail: &str| GeneratorError::Variant {
        variant,
        detail: detail.to_string(),
    };
    match (variant, retrieved) {
        (Variant::Retrieval, None) => return Err(bad("needs scores for the retrieved image")),
        (Variant::Naive | Variant::Bach, Some(_)) => return Err(bad("takes no retrieved-image scores")),
        _ => {}
    }
    let scales = real.len();
    if scales == 0 || fake.len() != scales || retrieved.is_some_and(|r| r.len() != scales) {
        return Err(bad("every input needs the same non-zero number of scales"));
    }
    let mut terms = Vec::with_capacity(3);
    if let Some(r) = retrieved {
        terms.push(term("log D(cond, retrieved)", r, false)?);
    }
    terms.push(term("log D(cond, real)", real, false)?);
    let fake_term = term("log(1 - D(cond, fake))", fake, true)?;
    let generator = fake_term.value;
    terms.push(fake_term);
    Ok(LossReport {
        variant,
        discriminator: terms.iter().map(|t| t.value).sum(),
        generator,
        terms,
    })
}
