#pragma once

#include <cstdint>
#include <random>

#include "amalgam/tensor.hpp"

namespace amalgam {

enum class BridgeSide { teacher, student };

// Learnable 1x1 channel mixing, stored as [C_out, C_in].
struct FAWeights {
    Tensor weight;
    BridgeSide side = BridgeSide::student;
    std::size_t block_index = 0;

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }
};

enum class FAInit {
    unit_rows,  // random rows rescaled to unit L2 norm (the constraint holds at start)
    zeros,
};

FAWeights make_fa(BridgeSide side, std::size_t block_index, std::size_t in_channels, std::size_t out_channels,
                  FAInit init, std::mt19937_64& rng);

struct TransferBridge {
    FAWeights teacher_fa;
    FAWeights student_fa;
    std::size_t block_index = 0;
};

TransferBridge make_bridge(std::size_t block_index, std::size_t teacher_channels, std::size_t student_channels,
                           std::size_t aligned_channels, FAInit init, std::mt19937_64& rng);

// Aligned map: out[n, c, h, w] = sum_c' w[c, c'] * features[n, c', h, w].
Tensor fa_forward(const FAWeights& fa, const Tensor& features);

// Mean over the batch of ||student - teacher||^2 / (C*H*W).
Tensor transfer_loss(const Tensor& aligned_student, const Tensor& aligned_teacher);

// (1/C_out) * sum_j (sum_i w[j, i]^2 - 1)^2, i running over input channels.
Tensor weight_regularization(const FAWeights& fa);

struct BridgeLoss {
    Tensor l_a;
    Tensor l_reg;
};

// Regularization covers both the teacher-side and student-side FA weights.
BridgeLoss bridge_block_loss(const TransferBridge& bridge, const Tensor& student_feats, const Tensor& teacher_feats);

}  // namespace amalgam
