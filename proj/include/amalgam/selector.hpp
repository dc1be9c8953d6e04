#pragma once

#include <span>
#include <string>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

inline constexpr double kDefaultEntropyClamp = 1e-12;

// -sum p_i log(max(p_i, clamp)), in nats. Zero-probability classes contribute 0.
double entropy_impurity(std::span<const double> probs, double clamp = kDefaultEntropyClamp);

struct ImpurityScore {
    double raw_entropy = 0.0;
    double normalized = 0.0;  // raw / ln(num_classes)
    std::size_t teacher_index = 0;
    std::string task_id;
};

ImpurityScore score_impurity(std::size_t teacher_index, std::string task_id, std::span<const double> probs,
                             double clamp = kDefaultEntropyClamp);

// Argmin over normalized impurity; ties go to the lowest teacher_index.
std::size_t select_by_impurity(std::span<const ImpurityScore> scores);

struct TeacherPrediction {
    std::size_t teacher_index = 0;
    std::string task_id;
    std::span<const double> probs;
};

std::size_t select_teacher(std::span<const TeacherPrediction> predictions, double clamp = kDefaultEntropyClamp);

struct TeacherBatchPrediction {
    std::size_t teacher_index = 0;
    std::string task_id;
    Tensor probs;  // [N, C]
};

// One selected teacher_index per sample.
std::vector<std::size_t> select_batch(std::span<const TeacherBatchPrediction> predictions,
                                      double clamp = kDefaultEntropyClamp);

}  // namespace amalgam
