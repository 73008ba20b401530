//! Dynamic expert aggregation and the fixed-rule alternatives it is
//! compared against.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// How expert features are combined into one residual feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    /// Masked softmax over query/key similarities (the learned routing).
    Dea,
    /// Uniform weights `1/K`.
    AverageVoting,
    /// Unweighted sum of expert features.
    ExpertEnsembling,
    /// Each sample routed entirely to its highest-scoring expert.
    MaxSelection,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 4] = [
        AggregationStrategy::Dea,
        AggregationStrategy::AverageVoting,
        AggregationStrategy::ExpertEnsembling,
        AggregationStrategy::MaxSelection,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AggregationStrategy::Dea => "dea",
            AggregationStrategy::AverageVoting => "average_voting",
            AggregationStrategy::ExpertEnsembling => "expert_ensembling",
            AggregationStrategy::MaxSelection => "max_selection",
        }
    }
}

/// Mask of shape `[batch, experts * batch]` with `M(i, j) = 1` iff `j = k*B + i`.
pub fn expert_mask(batch: usize, experts: usize) -> Vec<bool> {
    let cols = experts * batch;
    (0..batch * cols).map(|idx| idx % cols % batch == idx / cols).collect()
}

/// Aggregated feature on the tape plus the per-sample expert weights.
#[derive(Debug, Clone)]
pub struct AggregationVars {
    pub features: Var,
    /// Full `[B, K'B]` weight matrix (masked entries zero).
    pub weight_matrix: Var,
    /// Per-sample weights `[B, K']`, `w[i, k] = weight_matrix[i, k*B + i]`.
    pub weights: Tensor,
}

fn check_features(tape: &Tape, common: Var, feats: &[Var]) -> Result<Vec<usize>> {
    if feats.is_empty() {
        return Err(shape_err("aggregate", "no expert features"));
    }
    let shape = tape.shape(common).to_vec();
    if shape.len() != 4 {
        return Err(shape_err("aggregate", format!("common feature shape {:?}", shape)));
    }
    for (k, &f) in feats.iter().enumerate() {
        if tape.shape(f) != shape.as_slice() {
            return Err(shape_err(
                "aggregate",
                format!(
                    "expert {} feature shape {:?} differs from common {:?}",
                    k,
                    tape.shape(f),
                    shape
                ),
            ));
        }
    }
    Ok(shape)
}

fn diagonal_weights(matrix: &Tensor, batch: usize, experts: usize) -> Tensor {
    let cols = experts * batch;
    let mut w = Tensor::zeros(&[batch, experts]);
    for i in 0..batch {
        for k in 0..experts {
            w.data_mut()[i * experts + k] = matrix.data()[i * cols + k * batch + i];
        }
    }
    w
}

/// Query/key similarity scores `[B, K'B]` and the stacked value matrix `[K'B, C*h*w]`.
fn scores_and_values(tape: &mut Tape, common: Var, feats: &[Var], shape: &[usize]) -> Result<(Var, Var)> {
    let (b, row) = (shape[0], shape[1] * shape[2] * shape[3]);
    let query = tape.global_avg_pool(common)?;
    let concat = tape.concat_batch(feats)?;
    let keys = tape.global_avg_pool(concat)?;
    let scores = tape.matmul_bt(query, keys)?;
    let values = tape.reshape(concat, &[feats.len() * b, row])?;
    Ok((scores, values))
}

/// Masked-softmax aggregation of `feats` queried by the pooled `common` feature.
pub fn dea(tape: &mut Tape, common: Var, feats: &[Var]) -> Result<AggregationVars> {
    let shape = check_features(tape, common, feats)?;
    let (b, k) = (shape[0], feats.len());
    let (scores, values) = scores_and_values(tape, common, feats, &shape)?;
    let weight_matrix = tape.masked_softmax(scores, &expert_mask(b, k))?;
    let flat = tape.matmul(weight_matrix, values)?;
    let features = tape.reshape(flat, &shape)?;
    let weights = diagonal_weights(tape.value(weight_matrix), b, k);
    Ok(AggregationVars {
        features,
        weight_matrix,
        weights,
    })
}

/// Aggregates with any strategy. The `Dea` arm is exactly [`dea`].
pub fn aggregate_with(
    tape: &mut Tape,
    strategy: AggregationStrategy,
    common: Var,
    feats: &[Var],
) -> Result<AggregationVars> {
    if strategy == AggregationStrategy::Dea {
        return dea(tape, common, feats);
    }
    let shape = check_features(tape, common, feats)?;
    let (b, k) = (shape[0], feats.len());
    let cols = k * b;
    let matrix = match strategy {
        AggregationStrategy::AverageVoting | AggregationStrategy::ExpertEnsembling => {
            let w = if strategy == AggregationStrategy::AverageVoting {
                1.0 / k as f64
            } else {
                1.0
            };
            let mut m = Tensor::zeros(&[b, cols]);
            for i in 0..b {
                for e in 0..k {
                    m.data_mut()[i * cols + e * b + i] = w;
                }
            }
            m
        }
        AggregationStrategy::MaxSelection => {
            let (scores, _) = scores_and_values(tape, common, feats, &shape)?;
            let s = tape.value(scores).clone();
            let mut m = Tensor::zeros(&[b, cols]);
            for i in 0..b {
                let best = (0..k)
                    .max_by(|&x, &y| {
                        let (sx, sy) = (s.data()[i * cols + x * b + i], s.data()[i * cols + y * b + i]);
                        // ties resolve to the lower expert index
                        sx.partial_cmp(&sy).unwrap().then(y.cmp(&x))
                    })
                    .unwrap();
                m.data_mut()[i * cols + best * b + i] = 1.0;
            }
            m
        }
        AggregationStrategy::Dea => unreachable!(),
    };
    let weight_matrix = tape.leaf(matrix, false);
    let concat = tape.concat_batch(feats)?;
    let values = tape.reshape(concat, &[cols, shape[1] * shape[2] * shape[3]])?;
    let flat = tape.matmul(weight_matrix, values)?;
    let features = tape.reshape(flat, &shape)?;
    let weights = diagonal_weights(tape.value(weight_matrix), b, k);
    Ok(AggregationVars {
        features,
        weight_matrix,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_marks_matching_sample_in_each_expert_block() {
        let m = expert_mask(2, 3);
        let ones: Vec<(usize, usize)> = (0..12).filter(|&i| m[i]).map(|i| (i / 6, i % 6)).collect();
        assert_eq!(ones, vec![(0, 0), (0, 2), (0, 4), (1, 1), (1, 3), (1, 5)]);
    }
}
