#include "amalgam/selector.hpp"

#include <algorithm>
#include <cmath>

namespace amalgam {

double entropy_impurity(std::span<const double> probs, double clamp) {
    if (probs.size() < 2) fail(ErrorKind::arity, "entropy needs at least 2 classes");
    double total = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) fail(ErrorKind::normalization, "probabilities must be finite and non-negative");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        fail(ErrorKind::normalization, "probabilities sum to " + std::to_string(total) + ", expected 1");
    }
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(std::max(p, clamp));
    }
    return h;
}

ImpurityScore score_impurity(std::size_t teacher_index, std::string task_id, std::span<const double> probs,
                             double clamp) {
    ImpurityScore s;
    s.raw_entropy = entropy_impurity(probs, clamp);
    s.normalized = s.raw_entropy / std::log(static_cast<double>(probs.size()));
    s.teacher_index = teacher_index;
    s.task_id = std::move(task_id);
    return s;
}

std::size_t select_by_impurity(std::span<const ImpurityScore> scores) {
    if (scores.empty()) fail(ErrorKind::selection, "cannot select from an empty teacher list");
    const ImpurityScore* best = &scores[0];
    for (const auto& s : scores.subspan(1)) {
        if (s.normalized < best->normalized ||
            (s.normalized == best->normalized && s.teacher_index < best->teacher_index)) {
            best = &s;
        }
    }
    return best->teacher_index;
}

std::size_t select_teacher(std::span<const TeacherPrediction> predictions, double clamp) {
    if (predictions.empty()) fail(ErrorKind::selection, "cannot select from an empty teacher list");
    std::vector<ImpurityScore> scores;
    scores.reserve(predictions.size());
    for (const auto& p : predictions) scores.push_back(score_impurity(p.teacher_index, p.task_id, p.probs, clamp));
    return select_by_impurity(scores);
}

std::vector<std::size_t> select_batch(std::span<const TeacherBatchPrediction> predictions, double clamp) {
    if (predictions.empty()) fail(ErrorKind::selection, "cannot select from an empty teacher list");
    const std::size_t n = predictions[0].probs.dim(0);
    for (const auto& p : predictions) {
        if (p.probs.rank() != 2) fail(ErrorKind::shape, "teacher probabilities must be [N,C]");
        if (p.probs.dim(0) != n) {
            fail(ErrorKind::alignment, "teachers were evaluated on batches of different sizes (" + std::to_string(n) +
                                           " vs " + std::to_string(p.probs.dim(0)) + ")");
        }
    }
    std::vector<std::size_t> selected(n);
    std::vector<ImpurityScore> scores(predictions.size());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t t = 0; t < predictions.size(); ++t) {
            const auto& p = predictions[t];
            const std::size_t c = p.probs.dim(1);
            scores[t] = score_impurity(p.teacher_index, p.task_id, p.probs.data().subspan(r * c, c), clamp);
        }
        selected[r] = select_by_impurity(scores);
    }
    return selected;
}

}  // namespace amalgam
