#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };

// Everything needed to redraw one image and recompute its labels.
struct Scene {
    ShapeKind shape = ShapeKind::circle;
    double radius = 4.0;
    double center_x = 8.0;
    double center_y = 8.0;
    std::array<double, 3> fill{1.0, 0.0, 0.0};  // RGB in [0,1]
    double background = 0.5;
    double noise = 0.0;
    std::uint64_t noise_seed = 0;
};

struct SceneDistribution {
    std::size_t image_size = 16;
    double min_radius = 2.5;
    double max_radius = 6.0;
    double large_threshold = 4.25;
    double jitter = 2.0;
    double noise = 0.15;
    double circle_prob = 0.5;  // the rest is split evenly between squares and triangles
    double max_off_channel = 0.6;
    double red_margin = 0.1;
};

// Task names produced by generate(), with their class counts.
const std::vector<std::string>& default_tasks();
std::size_t task_num_classes(const std::string& task);

std::map<std::string, int> labels_for(const Scene& scene, const SceneDistribution& dist);
// [3, size, size], values in [0,1].
std::vector<double> render(const Scene& scene, std::size_t image_size);

struct Dataset {
    std::vector<std::string> tasks;                 // empty for unlabeled data
    Tensor images;                                  // [N, 3, H, W]
    std::map<std::string, std::vector<int>> labels;  // task -> N labels
    std::vector<std::uint64_t> ids;
    std::vector<Scene> scenes;  // may be empty (e.g. data that was loaded without scene info)

    std::size_t size() const { return ids.size(); }
    Dataset subset(std::span<const std::size_t> rows) const;
    Dataset without_labels() const;
};

Dataset generate(const SceneDistribution& dist, std::size_t n, std::uint64_t seed);

struct DatasetSplit {
    std::vector<Dataset> teacher_train;
    Dataset unlabeled;
    Dataset test;
};

DatasetSplit split(const Dataset& data, std::size_t n_teachers, double unlabeled_fraction, double test_fraction,
                   std::uint64_t seed);

// Stable 64-bit mixing used for every derived seed in the project.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace amalgam
