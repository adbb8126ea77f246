#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "seqforge/tensor.h"

namespace seqforge {

  // Losses are accumulated in 64-bit and only the result is stored at Real
  // precision, so identical inputs give exactly zero.

  // Mean over non-pad rows of KL(softmax(teacher/tau) || softmax(student/tau))
  // times tau^2. Logits are [..., V]; targets has one id per row (empty = all
  // rows count). Gradients flow only to the student.
  Tensor logit_distill_loss(const Tensor& teacher_logits,
                            const Tensor& student_logits,
                            double tau,
                            std::span<const int32_t> targets = {},
                            int32_t pad_id = 0);

  // One teacher/student pair of [B, T, ...] tensors and the valid length of
  // every batch row along T.
  struct DistillPair {
    Tensor teacher;
    Tensor student;
    std::vector<int64_t> lengths;
  };

  // Mean squared difference over all pairs, valid positions and hidden units.
  Tensor hidden_mse_loss(const std::vector<DistillPair>& pairs);

  // Attention pairs are [B, heads, Tq, Tk]; lengths count valid query rows.
  // Mean of KL(teacher row || student row) over pairs, heads and valid rows.
  // Rows the teacher assigns no mass are skipped; student probabilities are
  // floored at 1e-12 inside the logarithm.
  Tensor attention_kl_loss(const std::vector<DistillPair>& pairs);

}  // namespace seqforge
