#include <doctest.h>

#include <algorithm>
#include <random>

#include "amalgam/engine.hpp"

using namespace amalgam;

namespace {

BlockNetSpec tiny_spec(std::vector<HeadSpec> heads) {
    BlockNetSpec s;
    s.input_shape = {3, 8, 8};
    s.stem_channels = 4;
    s.block_channels = {4, 8};
    s.block_strides = {1, 2};
    s.heads = std::move(heads);
    return s;
}

Dataset tiny_data(std::size_t n, std::uint64_t seed) {
    SceneDistribution dist;
    dist.image_size = 8;
    dist.min_radius = 1.5;
    dist.max_radius = 3.5;
    dist.large_threshold = 2.5;
    dist.jitter = 1.0;
    return generate(dist, n, seed);
}

AmalgamConfig quick(std::size_t epochs) {
    AmalgamConfig c;
    c.epochs = epochs;
    c.batch_size = 16;
    c.seed = 5;
    return c;
}

std::vector<double> flat(const BlockNet& net) {
    std::vector<double> out;
    for (const auto& p : net.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

}  // namespace

TEST_CASE("soft target loss") {
    Tensor lambda = Tensor::scalar(1.0, true);
    Tensor t({1, 2}, {2.0, -2.0});
    CHECK(soft_target_loss(t, t, lambda).item() == 0.0);
    CHECK(soft_target_loss(Tensor::zeros({1, 2}), t, lambda).item() == 4.0);
    CHECK_THROWS_AS(soft_target_loss(Tensor::zeros({1, 3}), t, lambda), Error);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor s = Tensor::uniform({4, 3}, -2, 2, rng, true);
        Tensor teacher = Tensor::uniform({4, 3}, -2, 2, rng);
        Tensor lam = Tensor::scalar(0.5 + 0.2 * static_cast<double>(seed), true);
        auto r = check_gradients([&] { return soft_target_loss(s, teacher, lam); }, {s, lam});
        CHECK(r.max_relative_error < 1e-6);
    }
}

TEST_CASE("total loss sums every term") {
    std::vector<BlockTerms> terms{{Tensor::scalar(1.0), Tensor::scalar(2.0)}, {Tensor::scalar(3.0), Tensor::scalar(4.0)}};
    CHECK(total_loss(terms, Tensor::scalar(5.0), 3).item() == 15.0);
    std::vector<BlockTerms> zeros{{Tensor::scalar(0.0), Tensor::scalar(0.0)}};
    CHECK(total_loss(zeros, Tensor::scalar(0.0), 2).item() == 0.0);
    try {
        total_loss(terms, Tensor::scalar(5.0), 2);
        FAIL("expected arity error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::arity);
    }
}

TEST_CASE("cluster_sources follows the figure 1 example") {
    std::vector<SourceEntry> pool{{"s1", {"A", "B", "C"}}, {"s2", {"A"}}, {"s3", {"C", "D"}}, {"s4", {"B", "D"}}};
    auto groups = cluster_sources(pool, {"A", "D"});
    CHECK(groups.size() == 2);
    CHECK(groups.at("A") == std::vector<std::string>{"s1", "s2"});
    CHECK(groups.at("D") == std::vector<std::string>{"s3", "s4"});

    auto both = cluster_sources(pool, {"A", "B"});
    CHECK(std::count(both.at("A").begin(), both.at("A").end(), "s1") == 1);
    CHECK(std::count(both.at("B").begin(), both.at("B").end(), "s1") == 1);

    try {
        cluster_sources(pool, {"A", "E"});
        FAIL("expected coverage error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::coverage);
        CHECK(std::string(e.what()).find("E") != std::string::npos);
    }
}

TEST_CASE("evaluate on constructed predictors") {
    Dataset data = tiny_data(200, 1);
    BlockNetSpec spec = tiny_spec({{"is_circle", 2}});
    BlockNet base = BlockNet::build(spec, 0);

    std::vector<std::size_t> ones, balanced;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int l = data.labels.at("is_circle")[i];
        if (l == 1) ones.push_back(i);
        if ((l == 1 && pos < 50) || (l == 0 && neg < 50)) {
            balanced.push_back(i);
            (l == 1 ? pos : neg)++;
        }
    }
    auto with_head = [&](std::vector<double> bias) {
        std::vector<NamedTensor> params;
        for (const auto& p : base.parameters()) {
            if (p.name == "head.is_circle.weight") {
                params.push_back({p.name, Tensor::zeros(p.tensor.shape())});
            } else if (p.name == "head.is_circle.bias") {
                params.push_back({p.name, Tensor({2}, bias)});
            } else {
                params.push_back({p.name, p.tensor.clone()});
            }
        }
        return BlockNet(spec, params);
    };
    CHECK(evaluate(with_head({0.0, 1.0}), data.subset(ones)).at("is_circle") == 1.0);
    CHECK(evaluate(with_head({0.0, 0.0}), data.subset(balanced)).at("is_circle") == 0.5);

    Dataset big = tiny_data(2000, 2);
    const double acc = evaluate(BlockNet::build(spec, 77), big).at("is_circle");
    CHECK(acc >= 0.45);
    CHECK(acc <= 0.55);

    BlockNet other = BlockNet::build(tiny_spec({{"is_red", 2}}), 0);
    CHECK_THROWS_AS(evaluate(other, data, {"is_circle"}), Error);
}

TEST_CASE("train_amalgamate basics") {
    Dataset data = tiny_data(96, 3);
    BlockNet t1 = BlockNet::build(tiny_spec({{"is_red", 2}}), 1);
    BlockNet t2 = BlockNet::build(tiny_spec({{"is_red", 2}, {"is_large", 2}}), 2);
    train_supervised(t1, data, {"is_red"}, quick(3));
    train_supervised(t2, data, {"is_red", "is_large"}, quick(3));
    const auto t1_before = flat(t1);
    BlockNet student = BlockNet::build(tiny_spec({{"is_red", 2}}), 3);

    SUBCASE("zero epochs leave the student untouched") {
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}};
        auto res = train_amalgamate(teachers, student, data.images, quick(0));
        CHECK(res.history.steps.empty());
        CHECK(res.student.bitwise_equal(student));
    }
    SUBCASE("selection is vacuous with a single teacher") {
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}};
        AmalgamConfig with = quick(2), without = quick(2);
        without.disable_selection = true;
        auto a = train_amalgamate(teachers, student, data.images, with);
        auto b = train_amalgamate(teachers, student, data.images, without);
        CHECK(a.student.bitwise_equal(b.student));
        CHECK(a.history.steps.back().l_total == b.history.steps.back().l_total);
    }
    SUBCASE("two teachers: loss falls, breakdown re-sums, teachers stay frozen") {
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}, {&t2, {"is_red"}}};
        auto res = train_amalgamate(teachers, student, data.images, quick(5));
        CHECK(res.history.epoch_mean_total(4) < res.history.epoch_mean_total(0));
        CHECK(res.history.max_consistency_gap() < 1e-9);
        CHECK(flat(t1) == t1_before);
        CHECK(res.bridges.size() == 2);
        CHECK(res.bridges[0].size() == 1);
        for (const auto& s : res.history.steps) {
            CHECK(s.l_a.size() == 1);
            CHECK(s.selected.size() <= 16);
            for (auto t : s.selected) CHECK(t < 2);
        }
    }
    SUBCASE("one step moves student, FA weights and lambda") {
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}};
        AmalgamConfig c = quick(1);
        c.batch_size = 96;
        auto res = train_amalgamate(teachers, student, data.images, c);
        CHECK(flat(res.student) != flat(student));
        CHECK(res.scales.at(0).lambda.item() != 1.0);
        std::mt19937_64 rng(mix_seed(c.seed, 11));
        TransferBridge fresh = make_bridge(0, 4, 4, 4, c.fa_init, rng);
        const auto w = res.bridges[0][0].student_fa.weight.data();
        CHECK_FALSE(std::equal(w.begin(), w.end(), fresh.student_fa.weight.data().begin()));
    }
    SUBCASE("ablation switches") {
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}, {&t2, {"is_red"}}};
        AmalgamConfig kd = quick(1);
        kd.kd_only = true;
        auto k = train_amalgamate(teachers, student, data.images, kd);
        CHECK(k.bridges[0].empty());
        CHECK(k.history.steps[0].selected.empty());
        for (const auto& s : k.scales) CHECK(s.lambda.item() == 1.0);
        AmalgamConfig tb = quick(1);
        tb.disable_bridge = true;
        auto b = train_amalgamate(teachers, student, data.images, tb);
        CHECK(b.history.steps[0].l_a.empty());
        CHECK_FALSE(b.history.steps[0].selected.empty());
    }
    SUBCASE("coverage and geometry errors") {
        BlockNet wants_shape = BlockNet::build(tiny_spec({{"shape", 3}}), 1);
        std::vector<TeacherRef> teachers{{&t1, {"is_red"}}};
        try {
            train_amalgamate(teachers, wants_shape, data.images, quick(1));
            FAIL("expected coverage error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::coverage);
        }
        BlockNetSpec odd = tiny_spec({{"is_red", 2}});
        odd.block_strides = {1, 1};
        try {
            train_amalgamate(teachers, BlockNet::build(odd, 1), data.images, quick(1));
            FAIL("expected geometry error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::geometry);
        }
    }
}

TEST_CASE("dual stage and one shot") {
    Dataset data = tiny_data(64, 4);
    std::vector<SourceNet> pool;
    const std::vector<TaskSet> tasks{{"is_red", "is_large"}, {"is_red"}, {"is_large", "bright_background"}};
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        std::vector<HeadSpec> heads;
        for (const auto& t : tasks[i]) heads.push_back({t, 2});
        BlockNet net = BlockNet::build(tiny_spec(heads), 10 + i);
        train_supervised(net, data, tasks[i], quick(2));
        pool.push_back({"s" + std::to_string(i + 1), std::move(net), tasks[i]});
    }
    AmalgamConfig c = quick(2);

    auto dual = dual_stage(pool, {"is_red", "is_large"}, data.images, c);
    CHECK(dual.components.size() == 2);
    CHECK(dual.target.task_set() == TaskSet{"is_red", "is_large"});
    CHECK(dual.target.spec().block_channels == std::vector<std::size_t>{6, 12});
    CHECK(dual.stage1.size() == 2);
    CHECK_FALSE(dual.stage2.steps.empty());
    for (const auto& [task, h] : dual.stage1) CHECK(h.max_consistency_gap() < 1e-9);

    auto again = dual_stage(pool, {"is_red", "is_large"}, data.images, c);
    CHECK(again.target.bitwise_equal(dual.target));

    auto single = dual_stage(pool, {"is_red"}, data.images, c);
    CHECK(single.target.task_set() == TaskSet{"is_red"});

    auto three = dual_stage(pool, {"is_red", "is_large", "bright_background"}, data.images, quick(1));
    CHECK(three.target.spec().heads.size() == 3);

    auto one = one_shot_amalgamate(pool, {"is_red", "is_large"}, data.images, c);
    auto one_again = one_shot_amalgamate(pool, {"is_red", "is_large"}, data.images, c);
    CHECK(one.student.bitwise_equal(one_again.student));
    CHECK(one.student.task_set() == TaskSet{"is_red", "is_large"});

    CHECK_THROWS_AS(dual_stage(pool, {"shape"}, data.images, c), Error);
}

TEST_CASE("config validation") {
    AmalgamConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.momentum = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK_NOTHROW(AmalgamConfig{}.validate());
}
