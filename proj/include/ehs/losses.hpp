#pragma once

#include <vector>

#include "ehs/models.hpp"
#include "ehs/tensor.hpp"

namespace ehs {

struct LossConfig {
    double lambda = 0.5; // hybrid weight on the CTC term, in [0,1]
    // The blank symbol is always the last column of the CTC projection.
};

// Frames needed to align a label sequence: its length plus one blank for
// every immediately repeated symbol.
int ctc_min_frames(const std::vector<int>& labels);

// -log of the total probability over all monotonic alignments, computed by
// the log-space forward-backward recursion. log_probs is [T, A+1] and must
// be log-softmax normalized per row; blank is the last column. Instances
// with ctc_min_frames(labels) > T raise InfeasibleCtcError instead of
// returning an infinite loss.
TensorPtr ctc_loss(const TensorPtr& log_probs, const std::vector<int>& labels);

// Mean per-step cross-entropy of the teacher-forced attention logits [L, A].
TensorPtr attention_ce(const TensorPtr& att_logits, const std::vector<int>& labels);

// lambda*ctc + (1-lambda)*att; lambda outside [0,1] is a ConfigError.
TensorPtr hybrid_loss(const TensorPtr& ctc, const TensorPtr& att, double lambda);

// Logistic cross-entropy on the logit (classification, target in {0,1}) or
// squared error (regression, target in [0,24]).
TensorPtr downstream_loss(const TensorPtr& prediction, double target, TaskKind task);

} // namespace ehs
