#include "amalgam/bridge.hpp"

#include <cmath>

namespace amalgam {

FAWeights make_fa(BridgeSide side, std::size_t block_index, std::size_t in_channels, std::size_t out_channels,
                  FAInit init, std::mt19937_64& rng) {
    if (in_channels == 0 || out_channels == 0) fail(ErrorKind::shape, "FA channel counts must be positive");
    FAWeights fa;
    fa.side = side;
    fa.block_index = block_index;
    if (init == FAInit::zeros) {
        fa.weight = Tensor::zeros({out_channels, in_channels}, true);
        return fa;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(out_channels * in_channels);
    for (std::size_t j = 0; j < out_channels; ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < in_channels; ++i) {
            // Bias towards the identity so matching channels start aligned.
            double v = 0.3 * normal(rng) / std::sqrt(static_cast<double>(in_channels));
            if (i == j % in_channels) v += 1.0;
            w[j * in_channels + i] = v;
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < in_channels; ++i) w[j * in_channels + i] /= norm;
    }
    fa.weight = Tensor({out_channels, in_channels}, std::move(w), true);
    return fa;
}

TransferBridge make_bridge(std::size_t block_index, std::size_t teacher_channels, std::size_t student_channels,
                           std::size_t aligned_channels, FAInit init, std::mt19937_64& rng) {
    TransferBridge bridge;
    bridge.block_index = block_index;
    bridge.teacher_fa = make_fa(BridgeSide::teacher, block_index, teacher_channels, aligned_channels, init, rng);
    bridge.student_fa = make_fa(BridgeSide::student, block_index, student_channels, aligned_channels, init, rng);
    return bridge;
}

Tensor fa_forward(const FAWeights& fa, const Tensor& features) {
    if (features.rank() != 4) fail(ErrorKind::shape, "FA expects [N,C,H,W] features, got " + shape_str(features.shape()));
    if (features.dim(1) != fa.in_channels()) {
        fail(ErrorKind::shape, "FA expects " + std::to_string(fa.in_channels()) + " input channels, got " +
                                   std::to_string(features.dim(1)));
    }
    Tensor kernel = reshape(fa.weight, {fa.out_channels(), fa.in_channels(), 1, 1});
    return conv2d(features, kernel, 1, 0);
}

Tensor transfer_loss(const Tensor& aligned_student, const Tensor& aligned_teacher) {
    if (aligned_student.shape() != aligned_teacher.shape()) {
        fail(ErrorKind::shape, "transfer loss needs equal shapes, got " + shape_str(aligned_student.shape()) + " vs " +
                                   shape_str(aligned_teacher.shape()));
    }
    // Averaging every element is the per-sample 1/(C*H*W) normalizer followed by a batch mean.
    Tensor diff = sub(aligned_student, aligned_teacher);
    return mean(mul(diff, diff));
}

Tensor weight_regularization(const FAWeights& fa) {
    Tensor row_norms = sum(mul(fa.weight, fa.weight), {1});
    Tensor excess = sub(row_norms, Tensor::ones(row_norms.shape()));
    return mean(mul(excess, excess));
}

BridgeLoss bridge_block_loss(const TransferBridge& bridge, const Tensor& student_feats, const Tensor& teacher_feats) {
    Tensor aligned_s = fa_forward(bridge.student_fa, student_feats);
    Tensor aligned_t = fa_forward(bridge.teacher_fa, teacher_feats);
    if (aligned_s.shape() != aligned_t.shape()) {
        fail(ErrorKind::geometry, "block " + std::to_string(bridge.block_index) + ": aligned maps differ, " +
                                      shape_str(aligned_s.shape()) + " vs " + shape_str(aligned_t.shape()));
    }
    return {transfer_loss(aligned_s, aligned_t),
            add(weight_regularization(bridge.teacher_fa), weight_regularization(bridge.student_fa))};
}

}  // namespace amalgam
