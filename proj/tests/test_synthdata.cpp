#include <doctest.h>

#include <algorithm>
#include <set>

#include "amalgam/synthdata.hpp"

using namespace amalgam;

TEST_CASE("generation is deterministic") {
    SceneDistribution dist;
    Dataset a = generate(dist, 50, 7), b = generate(dist, 50, 7), c = generate(dist, 50, 8);
    CHECK(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
    CHECK(a.labels == b.labels);
    CHECK_FALSE(std::equal(a.images.data().begin(), a.images.data().end(), c.images.data().begin()));
    CHECK(a.images.shape() == Shape{50, 3, 16, 16});
    for (double v : a.images.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(generate(dist, 0, 1), Error);
}

TEST_CASE("label rules") {
    SceneDistribution dist;
    Scene red;
    red.fill = {1.0, 0.0, 0.0};
    CHECK(labels_for(red, dist).at("is_red") == 1);
    Scene green = red;
    green.fill = {0.3, 0.5, 0.0};
    CHECK(labels_for(green, dist).at("is_red") == 0);
    Scene tri = red;
    tri.shape = ShapeKind::triangle;
    tri.radius = 5.0;
    tri.background = 0.8;
    const auto l = labels_for(tri, dist);
    CHECK(l.at("is_circle") == 0);
    CHECK(l.at("shape") == 2);
    CHECK(l.at("is_large") == 1);
    CHECK(l.at("bright_background") == 1);
}

TEST_CASE("labels regenerate from stored scenes") {
    SceneDistribution dist;
    Dataset d = generate(dist, 200, 3);
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (const auto& [task, label] : labels_for(d.scenes[i], dist)) CHECK(d.labels.at(task)[i] == label);
        const auto img = render(d.scenes[i], dist.image_size);
        CHECK(std::equal(img.begin(), img.end(), d.images.data().begin() + static_cast<long>(i * img.size())));
    }
}

TEST_CASE("binary tasks are roughly balanced") {
    Dataset d = generate(SceneDistribution{}, 10000, 11);
    for (const auto& task : default_tasks()) {
        if (task_num_classes(task) != 2) continue;
        const auto& labs = d.labels.at(task);
        const double rate = static_cast<double>(std::count(labs.begin(), labs.end(), 1)) / static_cast<double>(labs.size());
        INFO(task << " positive rate " << rate);
        CHECK(rate >= 0.4);
        CHECK(rate <= 0.6);
    }
}

TEST_CASE("split partitions are disjoint and cover the set") {
    Dataset d = generate(SceneDistribution{}, 103, 5);
    DatasetSplit s = split(d, 5, 0.2, 0.2, 9);
    std::set<std::uint64_t> seen;
    std::size_t total = 0;
    auto absorb = [&](const Dataset& part) {
        for (auto id : part.ids) CHECK(seen.insert(id).second);
        total += part.size();
    };
    absorb(s.unlabeled);
    absorb(s.test);
    CHECK(s.teacher_train.size() == 5);
    std::size_t lo = 1000, hi = 0;
    for (const auto& p : s.teacher_train) {
        absorb(p);
        lo = std::min(lo, p.size());
        hi = std::max(hi, p.size());
    }
    CHECK(hi - lo <= 1);
    CHECK(total == 103);
    CHECK(seen.size() == 103);
    CHECK(s.unlabeled.labels.empty());

    DatasetSplit other = split(d, 5, 0.2, 0.2, 10);
    CHECK(other.test.size() == s.test.size());
    CHECK(other.teacher_train[0].size() == s.teacher_train[0].size());
    CHECK(other.test.ids != s.test.ids);

    try {
        split(generate(SceneDistribution{}, 5, 1), 4, 0.2, 0.2, 0);
        FAIL("expected size error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::size);
    }
    CHECK_THROWS_AS(split(d, 2, 0.6, 0.5, 0), Error);
}
