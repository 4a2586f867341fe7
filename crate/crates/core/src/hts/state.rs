use crate::numerics::{Real, Tensor};

/// Outcome of one sparsification stage.
#[derive(Clone, Debug)]
pub struct StageDecision<T> {
    /// Decision probabilities π `[B, n, 2]` over the tokens alive when the
    /// stage ran (all N in training, the survivors at inference).
    pub pi: Tensor<T>,
    /// Cumulative keep mask D̂ on the original token grid, `[B, N]`.
    pub mask: Tensor<T>,
}

/// Per-stage decision history for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct DecisionState<T> {
    pub stages: Vec<StageDecision<T>>,
}

impl<T: Real> DecisionState<T> {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Keep probabilities π_{·,1}, `[B, n]`.
    pub fn keep_probs(&self, stage: usize) -> Tensor<T> {
        let pi = &self.stages[stage].pi;
        let shape = pi.shape()[..pi.rank() - 1].to_vec();
        Tensor::new(shape, pi.rows().map(|r| r[1]).collect()).expect("shape")
    }

    /// Masks never revive a dropped token from one stage to the next.
    pub fn is_monotone(&self) -> bool {
        self.stages.windows(2).all(|w| {
            w[1].mask
                .data()
                .iter()
                .zip(w[0].mask.data())
                .all(|(&later, &earlier)| later <= earlier)
        })
    }

    /// Number of kept tokens per image after `stage`.
    pub fn kept_counts(&self, stage: usize) -> Vec<usize> {
        self.stages[stage]
            .mask
            .rows()
            .map(|r| r.iter().filter(|&&v| v > T::zero()).count())
            .collect()
    }
}
