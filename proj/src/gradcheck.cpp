#include "amalgam/gradcheck.hpp"

#include <functional>
#include <random>

#include "amalgam/blocknet.hpp"
#include "amalgam/bridge.hpp"
#include "amalgam/engine.hpp"
#include "amalgam/synthdata.hpp"

namespace amalgam {

namespace {

// Values bounded away from zero so relu kinks sit far outside the FD stencil.
Tensor signed_uniform(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
    std::uniform_real_distribution<double> mag(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Contracts an op output with fixed random weights, giving a scalar whose
// gradient exercises every output element differently.
Tensor project(const Tensor& out, std::mt19937_64& rng) {
    Tensor r = Tensor::uniform(out.shape(), -1, 1, rng);
    return sum(mul(out, r));
}

using CaseFn = std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(std::mt19937_64&)>;

std::vector<std::pair<std::string, CaseFn>> cases() {
    std::vector<std::pair<std::string, CaseFn>> out;
    auto add_case = [&](std::string name, CaseFn fn) { out.emplace_back(std::move(name), std::move(fn)); };

    add_case("conv2d", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({2, 3, 5, 5}, rng), w = signed_uniform({4, 3, 3, 3}, rng);
        Tensor r = Tensor::uniform({2, 4, 3, 3}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return sum(mul(conv2d(x, w, 2, 1), r)); }), std::vector{x, w}};
    });
    add_case("linear", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({4, 6}, rng), w = signed_uniform({6, 3}, rng), b = signed_uniform({3}, rng);
        Tensor r = Tensor::uniform({4, 3}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return sum(mul(linear(x, w, b), r)); }), std::vector{x, w, b}};
    });
    for (auto kind : {ElementwiseKind::add, ElementwiseKind::sub, ElementwiseKind::mul, ElementwiseKind::relu}) {
        static const char* names[] = {"add", "sub", "mul", "relu"};
        add_case(names[static_cast<int>(kind)], [kind](std::mt19937_64& rng) {
            Tensor a = signed_uniform({3, 4}, rng), b = signed_uniform({3, 4}, rng);
            Tensor r = Tensor::uniform({3, 4}, -1, 1, rng);
            const bool unary = kind == ElementwiseKind::relu;
            std::vector<Tensor> params = unary ? std::vector{a} : std::vector{a, b};
            return std::pair{std::function<Tensor()>([=] {
                                 return sum(mul(elementwise(kind, a, unary ? nullptr : &b), r));
                             }),
                             params};
        });
    }
    add_case("scale", [](std::mt19937_64& rng) {
        Tensor a = signed_uniform({3, 4}, rng), s = signed_uniform({1}, rng);
        Tensor r = Tensor::uniform({3, 4}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return add(sum(mul(scale(a, s), r)), sum(scale(a, 0.37))); }),
                         std::vector{a, s}};
    });
    add_case("sum", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({2, 3, 4}, rng);
        Tensor r = Tensor::uniform({2, 4}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return add(sum(mul(sum(x, {1}), r)), sum(x)); }), std::vector{x}};
    });
    add_case("mean", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({2, 3, 4}, rng);
        Tensor r = Tensor::uniform({2, 3}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return add(sum(mul(mean(x, {2}), r)), mean(x)); }), std::vector{x}};
    });
    add_case("softmax", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({4, 5}, rng);
        Tensor r = Tensor::uniform({4, 5}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return sum(mul(softmax(x), r)); }), std::vector{x}};
    });
    add_case("cross_entropy", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({4, 3}, rng);
        std::vector<int> labels{0, 2, 1, 2};
        return std::pair{std::function<Tensor()>([=] { return cross_entropy(x, labels); }), std::vector{x}};
    });
    add_case("reshape_take_rows", [](std::mt19937_64& rng) {
        Tensor x = signed_uniform({4, 6}, rng);
        Tensor r = Tensor::uniform({3, 3, 2}, -1, 1, rng);
        std::vector<std::size_t> rows{3, 0, 3};
        return std::pair{std::function<Tensor()>([=] { return sum(mul(reshape(take_rows(x, rows), {3, 3, 2}), r)); }),
                         std::vector{x}};
    });
    add_case("fa_forward", [](std::mt19937_64& rng) {
        Tensor w = signed_uniform({3, 4}, rng), f = signed_uniform({2, 4, 3, 3}, rng);
        Tensor r = Tensor::uniform({2, 3, 3, 3}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return sum(mul(fa_forward({w, BridgeSide::student, 0}, f), r)); }),
                         std::vector{w, f}};
    });
    add_case("transfer_loss", [](std::mt19937_64& rng) {
        Tensor s = signed_uniform({2, 3, 4, 4}, rng), t = signed_uniform({2, 3, 4, 4}, rng);
        return std::pair{std::function<Tensor()>([=] { return transfer_loss(s, t); }), std::vector{s, t}};
    });
    add_case("weight_regularization", [](std::mt19937_64& rng) {
        Tensor w = signed_uniform({3, 5}, rng);
        return std::pair{std::function<Tensor()>([=] { return weight_regularization({w, BridgeSide::teacher, 0}); }),
                         std::vector{w}};
    });
    add_case("soft_target_loss", [](std::mt19937_64& rng) {
        Tensor s = signed_uniform({4, 3}, rng), t = signed_uniform({4, 3}, rng, false);
        Tensor lambda = Tensor::scalar(0.5 + std::uniform_real_distribution<double>(0, 1)(rng), true);
        return std::pair{std::function<Tensor()>([=] { return soft_target_loss(s, t, lambda); }), std::vector{s, lambda}};
    });
    add_case("total_loss", [](std::mt19937_64& rng) {
        Tensor ws = signed_uniform({3, 4}, rng), wt = signed_uniform({3, 5}, rng);
        Tensor fs = signed_uniform({2, 4, 3, 3}, rng), ft = signed_uniform({2, 5, 3, 3}, rng, false);
        Tensor ls = signed_uniform({2, 2}, rng), lt = signed_uniform({2, 2}, rng, false);
        Tensor lambda = Tensor::scalar(1.0, true);
        return std::pair{std::function<Tensor()>([=] {
                             TransferBridge b{{wt, BridgeSide::teacher, 0}, {ws, BridgeSide::student, 0}, 0};
                             auto bl = bridge_block_loss(b, fs, ft);
                             std::vector<BlockTerms> terms{{bl.l_a, bl.l_reg}};
                             return total_loss(terms, soft_target_loss(ls, lt, lambda), 2);
                         }),
                         std::vector{ws, wt, fs, ls, lambda}};
    });
    add_case("blocknet", [](std::mt19937_64& rng) {
        BlockNetSpec spec;
        spec.input_shape = {2, 6, 6};
        spec.stem_channels = 3;
        spec.block_channels = {3, 4};
        spec.block_strides = {1, 2};
        spec.heads = {{"a", 2}};
        BlockNet net = BlockNet::build(spec, rng());
        net.set_trainable(true);
        Tensor x = Tensor::uniform({2, 2, 6, 6}, 0, 1, rng);
        Tensor r = Tensor::uniform({2, 2}, -1, 1, rng);
        return std::pair{std::function<Tensor()>([=] { return sum(mul(net.forward(x).logits.at("a"), r)); }),
                         net.parameter_tensors()};
    });
    return out;
}

}  // namespace

std::vector<GradCheckCase> gradient_suite(std::size_t seeds, double eps) {
    std::vector<GradCheckCase> results;
    for (const auto& [name, make] : cases()) {
        for (std::uint64_t s = 0; s < seeds; ++s) {
            std::mt19937_64 rng(mix_seed(s, 0x6cad));
            auto [loss, params] = make(rng);
            results.push_back({name, s, check_gradients(loss, params, eps).max_relative_error});
        }
    }
    return results;
}

}  // namespace amalgam
