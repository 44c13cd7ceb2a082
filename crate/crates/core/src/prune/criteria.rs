use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerId, NetworkIR};

/// Filter importance criterion. Filters with the lowest score are removed first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Criterion {
    SmallestL2,
    SmallestL1,
    /// Uniform scores from a generator seeded with `seed` and the layer id.
    Random { seed: u64 },
    /// L1 norm of the filter times |gamma| of the following batch norm.
    #[serde(rename = "smallest_l1_bn")]
    SmallestL1TimesBnScale,
    /// |gamma| of the following batch norm.
    BnScale,
    LargestL2,
}

impl Criterion {
    pub const NAMES: [&'static str; 6] = [
        "smallest_l2",
        "smallest_l1",
        "random",
        "smallest_l1_bn",
        "bn_scale",
        "largest_l2",
    ];

    /// Parse a criterion name; `seed` is used by `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        Ok(match name {
            "smallest_l2" => Criterion::SmallestL2,
            "smallest_l1" => Criterion::SmallestL1,
            "random" => Criterion::Random { seed },
            "smallest_l1_bn" => Criterion::SmallestL1TimesBnScale,
            "bn_scale" => Criterion::BnScale,
            "largest_l2" => Criterion::LargestL2,
            other => return Err(Error::UnknownCriterion(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::SmallestL2 => "smallest_l2",
            Criterion::SmallestL1 => "smallest_l1",
            Criterion::Random { .. } => "random",
            Criterion::SmallestL1TimesBnScale => "smallest_l1_bn",
            Criterion::BnScale => "bn_scale",
            Criterion::LargestL2 => "largest_l2",
        }
    }

    pub fn needs_batch_norm(&self) -> bool {
        matches!(self, Criterion::SmallestL1TimesBnScale | Criterion::BnScale)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::parse(s, 0)
    }
}

/// Score each filter of `layer`; lower scores are pruned first.
pub fn score_filters(ir: &NetworkIR, layer: LayerId, criterion: Criterion) -> Result<Vec<(usize, f64)>> {
    score_filters_masked(ir, layer, criterion, &[])
}

/// Like [`score_filters`], ignoring the kernels at the given input channels.
pub(crate) fn score_filters_masked(
    ir: &NetworkIR,
    layer: LayerId,
    criterion: Criterion,
    masked_inputs: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let spec = ir.layer(layer).ok_or(Error::UnknownVertex(layer))?;
    let attrs = spec.conv_attrs().ok_or(Error::UnknownVertex(layer))?;
    let weight = spec.weight("weight")?;
    let area = attrs.kernel_area();
    let row = weight.row_len();
    let mut keep_col = vec![true; attrs.in_channels];
    for &c in masked_inputs {
        if let Some(k) = keep_col.get_mut(c) {
            *k = false;
        }
    }

    let norm = |f: usize, p: u8| -> f64 {
        let w = &weight.data()[f * row..(f + 1) * row];
        let mut acc = 0.0f64;
        for (c, kernel) in w.chunks(area).enumerate() {
            if !keep_col[c] {
                continue;
            }
            for &v in kernel {
                acc += match p {
                    1 => (v as f64).abs(),
                    _ => (v as f64) * (v as f64),
                };
            }
        }
        if p == 2 {
            acc.sqrt()
        } else {
            acc
        }
    };

    let gamma = || -> Result<Vec<f32>> {
        let bn = *ir
            .trailing_batch_norms(layer)
            .first()
            .ok_or(Error::MissingBatchNorm(layer))?;
        Ok(ir.layer(bn).expect("bn").weight("gamma")?.data().to_vec())
    };

    let n = attrs.out_channels;
    let scores: Vec<f64> = match criterion {
        Criterion::SmallestL2 => (0..n).map(|f| norm(f, 2)).collect(),
        Criterion::LargestL2 => (0..n).map(|f| -norm(f, 2)).collect(),
        Criterion::SmallestL1 => (0..n).map(|f| norm(f, 1)).collect(),
        Criterion::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(layer as u64);
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
        Criterion::BnScale => gamma()?.iter().map(|g| (*g as f64).abs()).collect(),
        Criterion::SmallestL1TimesBnScale => {
            let g = gamma()?;
            (0..n).map(|f| norm(f, 1) * (g[f] as f64).abs()).collect()
        }
    };
    Ok(scores.into_iter().enumerate().collect())
}

/// Filter indices ordered from first-to-prune to last. Ties go to the lower index.
pub fn rank(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}
