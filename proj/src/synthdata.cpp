#include "amalgam/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace amalgam {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

const std::vector<std::string>& default_tasks() {
    static const std::vector<std::string> tasks{"is_circle", "is_red", "bright_background", "is_large", "shape"};
    return tasks;
}

std::size_t task_num_classes(const std::string& task) {
    if (task == "shape") return 3;
    const auto& all = default_tasks();
    if (std::find(all.begin(), all.end(), task) == all.end()) {
        fail(ErrorKind::coverage, "unknown synthetic task '" + task + "'");
    }
    return 2;
}

std::map<std::string, int> labels_for(const Scene& scene, const SceneDistribution& dist) {
    const auto& c = scene.fill;
    return {
        {"is_circle", scene.shape == ShapeKind::circle ? 1 : 0},
        {"is_red", c[0] > std::max(c[1], c[2]) + dist.red_margin ? 1 : 0},
        {"bright_background", scene.background > 0.5 ? 1 : 0},
        {"is_large", scene.radius > dist.large_threshold ? 1 : 0},
        {"shape", static_cast<int>(scene.shape)},
    };
}

namespace {

bool inside(const Scene& s, double x, double y) {
    const double dx = x - s.center_x, dy = y - s.center_y;
    switch (s.shape) {
        case ShapeKind::circle: return dx * dx + dy * dy <= s.radius * s.radius;
        case ShapeKind::square: {
            const double half = 0.886 * s.radius;  // same area as the circle
            return std::abs(dx) <= half && std::abs(dy) <= half;
        }
        case ShapeKind::triangle:
            return dy >= -s.radius && dy <= s.radius && std::abs(dx) <= 0.5 * (dy + s.radius) * 1.2;
    }
    return false;
}

}  // namespace

std::vector<double> render(const Scene& scene, std::size_t image_size) {
    const std::size_t plane = image_size * image_size;
    std::vector<double> img(3 * plane);
    std::mt19937_64 rng(scene.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    constexpr int kSub = 3;
    for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    hits += inside(scene, static_cast<double>(x) + (sx + 0.5) / kSub,
                                   static_cast<double>(y) + (sy + 0.5) / kSub);
                }
            const double cover = static_cast<double>(hits) / (kSub * kSub);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double v = scene.background * (1.0 - cover) + scene.fill[ch] * cover + scene.noise * noise(rng);
                img[ch * plane + y * image_size + x] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return img;
}

Dataset generate(const SceneDistribution& dist, std::size_t n, std::uint64_t seed) {
    if (n == 0) fail(ErrorKind::size, "generate needs n >= 1");
    if (dist.image_size < 4) fail(ErrorKind::config, "image_size must be at least 4");
    Dataset ds;
    ds.tasks = default_tasks();
    const std::size_t size = dist.image_size;
    std::vector<double> pixels;
    pixels.reserve(n * 3 * size * size);
    for (const auto& t : ds.tasks) ds.labels[t].reserve(n);

    const double centre = static_cast<double>(size) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix_seed(seed, i));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        Scene s;
        const double pick = u01(rng);
        s.shape = pick < dist.circle_prob ? ShapeKind::circle
                  : pick < dist.circle_prob + (1.0 - dist.circle_prob) / 2 ? ShapeKind::square
                                                                             : ShapeKind::triangle;
        s.radius = dist.min_radius + (dist.max_radius - dist.min_radius) * u01(rng);
        s.center_x = centre + dist.jitter * (2.0 * u01(rng) - 1.0);
        s.center_y = centre + dist.jitter * (2.0 * u01(rng) - 1.0);
        s.fill = {u01(rng), dist.max_off_channel * u01(rng), dist.max_off_channel * u01(rng)};
        s.background = u01(rng);
        s.noise = dist.noise;
        s.noise_seed = rng();

        const auto img = render(s, size);
        pixels.insert(pixels.end(), img.begin(), img.end());
        for (const auto& [task, label] : labels_for(s, dist)) ds.labels[task].push_back(label);
        ds.ids.push_back(i);
        ds.scenes.push_back(s);
    }
    ds.images = Tensor({n, 3, size, size}, std::move(pixels));
    return ds;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    if (rows.empty()) fail(ErrorKind::size, "subset needs at least one row");
    Dataset out;
    out.tasks = tasks;
    out.images = take_rows(images.detach(), rows);
    for (const auto& [task, labs] : labels) {
        auto& dst = out.labels[task];
        for (auto r : rows) dst.push_back(labs.at(r));
    }
    for (auto r : rows) {
        out.ids.push_back(ids.at(r));
        if (!scenes.empty()) out.scenes.push_back(scenes.at(r));
    }
    return out;
}

Dataset Dataset::without_labels() const {
    Dataset out = *this;
    out.tasks.clear();
    out.labels.clear();
    return out;
}

DatasetSplit split(const Dataset& data, std::size_t n_teachers, double unlabeled_fraction, double test_fraction,
                   std::uint64_t seed) {
    if (n_teachers == 0) fail(ErrorKind::config, "split needs at least one teacher partition");
    if (unlabeled_fraction < 0.0 || test_fraction < 0.0 || unlabeled_fraction + test_fraction >= 1.0) {
        fail(ErrorKind::config, "fractions must be non-negative and sum to less than 1");
    }
    const std::size_t n = data.size();
    const auto n_unlabeled = static_cast<std::size_t>(std::llround(unlabeled_fraction * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    if (n_unlabeled == 0 || n_test == 0 || n_unlabeled + n_test + n_teachers > n) {
        fail(ErrorKind::size, "dataset of " + std::to_string(n) + " samples is too small for this split");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x5917));
    std::shuffle(order.begin(), order.end(), rng);

    DatasetSplit out;
    std::size_t pos = 0;
    auto take = [&](std::size_t count) {
        std::vector<std::size_t> rows(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + count));
        pos += count;
        return data.subset(rows);
    };
    out.unlabeled = take(n_unlabeled).without_labels();
    out.test = take(n_test);
    const std::size_t rest = n - n_unlabeled - n_test;
    for (std::size_t t = 0; t < n_teachers; ++t) {
        out.teacher_train.push_back(take(rest / n_teachers + (t < rest % n_teachers ? 1 : 0)));
    }
    return out;
}

}  // namespace amalgam
