#include "amalgam/blocknet.hpp"

#include <cmath>
#include <cstring>

namespace amalgam {

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

bool needs_shortcut(std::size_t in_channels, std::size_t out_channels, std::size_t stride) {
    return in_channels != out_channels || stride != 1;
}

std::string block_prefix(std::size_t b) { return "block" + std::to_string(b) + "."; }

}  // namespace

void BlockNetSpec::validate() const {
    if (input_shape[0] == 0 || input_shape[1] == 0 || input_shape[2] == 0) {
        fail(ErrorKind::spec, "input shape must be positive");
    }
    if (stem_channels == 0) fail(ErrorKind::spec, "stem_channels must be positive");
    if (block_channels.size() < 2) fail(ErrorKind::spec, "a blocknet needs at least 2 blocks");
    if (block_strides.size() != block_channels.size()) {
        fail(ErrorKind::spec, "block_strides and block_channels differ in length");
    }
    for (auto c : block_channels) {
        if (c == 0) fail(ErrorKind::spec, "block channel counts must be positive");
    }
    for (auto s : block_strides) {
        if (s != 1 && s != 2) fail(ErrorKind::spec, "block strides must be 1 or 2");
    }
    std::set<std::string> seen;
    for (const auto& h : heads) {
        if (h.task_id.empty()) fail(ErrorKind::spec, "head task_id must be non-empty");
        if (h.num_classes < 2) fail(ErrorKind::spec, "head '" + h.task_id + "' needs at least 2 classes");
        if (!seen.insert(h.task_id).second) fail(ErrorKind::spec, "duplicate head '" + h.task_id + "'");
    }
}

std::vector<std::array<std::size_t, 3>> BlockNetSpec::block_shapes() const {
    std::vector<std::array<std::size_t, 3>> shapes;
    std::size_t h = input_shape[1], w = input_shape[2];
    for (std::size_t b = 0; b < block_channels.size(); ++b) {
        h = conv_out(h, 3, block_strides[b], 1);
        w = conv_out(w, 3, block_strides[b], 1);
        shapes.push_back({block_channels[b], h, w});
    }
    return shapes;
}

BlockNetSpec BlockNetSpec::widened(double factor) const {
    if (!(factor > 0.0)) fail(ErrorKind::config, "widen factor must be positive");
    auto scaled = [factor](std::size_t c) { return static_cast<std::size_t>(std::ceil(static_cast<double>(c) * factor - 1e-9)); };
    BlockNetSpec out = *this;
    out.stem_channels = scaled(stem_channels);
    for (auto& c : out.block_channels) c = scaled(c);
    return out;
}

ResourceCount conv_resources(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                             std::size_t out_h, std::size_t out_w) {
    const std::uint64_t weights = in_channels * out_channels * kernel * kernel;
    return {weights, 2 * weights * out_h * out_w};
}

ResourceCount linear_resources(std::size_t in_features, std::size_t out_features, bool bias) {
    const std::uint64_t weights = in_features * out_features;
    return {weights + (bias ? out_features : 0), 2 * weights};
}

std::vector<std::pair<std::string, Shape>> BlockNet::parameter_layout(const BlockNetSpec& spec) {
    std::vector<std::pair<std::string, Shape>> layout;
    const std::size_t in_c = spec.input_shape[0];
    layout.emplace_back("stem.weight", Shape{spec.stem_channels, in_c, 3, 3});
    std::size_t prev = spec.stem_channels;
    for (std::size_t b = 0; b < spec.num_blocks(); ++b) {
        const std::size_t c = spec.block_channels[b];
        layout.emplace_back(block_prefix(b) + "conv1", Shape{c, prev, 3, 3});
        layout.emplace_back(block_prefix(b) + "conv2", Shape{c, c, 3, 3});
        if (needs_shortcut(prev, c, spec.block_strides[b])) {
            layout.emplace_back(block_prefix(b) + "shortcut", Shape{c, prev, 1, 1});
        }
        prev = c;
    }
    for (const auto& h : spec.heads) {
        layout.emplace_back("head." + h.task_id + ".weight", Shape{prev, h.num_classes});
        layout.emplace_back("head." + h.task_id + ".bias", Shape{h.num_classes});
    }
    return layout;
}

BlockNet::BlockNet(BlockNetSpec spec, std::vector<NamedTensor> params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const auto layout = parameter_layout(spec_);
    if (layout.size() != params_.size()) {
        fail(ErrorKind::spec, "expected " + std::to_string(layout.size()) + " parameters, got " +
                                  std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (params_[i].name != layout[i].first || params_[i].tensor.shape() != layout[i].second) {
            fail(ErrorKind::spec, "parameter " + std::to_string(i) + " is '" + params_[i].name + "' " +
                                      shape_str(params_[i].tensor.shape()) + ", expected '" + layout[i].first +
                                      "' " + shape_str(layout[i].second));
        }
        index_.emplace(params_[i].name, i);
    }
}

BlockNet BlockNet::build(const BlockNetSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::vector<NamedTensor> params;
    for (auto& [name, shape] : parameter_layout(spec)) {
        Tensor t;
        if (name.ends_with(".bias")) {
            t = Tensor::zeros(shape, true);
        } else if (name.starts_with("head.")) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            t = Tensor::uniform(shape, -bound, bound, rng, true);
        } else {
            const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
            const double bound = std::sqrt(6.0 / fan_in);
            t = Tensor::uniform(shape, -bound, bound, rng, true);
        }
        params.push_back({name, std::move(t)});
    }
    return BlockNet(spec, std::move(params));
}

TaskSet BlockNet::task_set() const {
    TaskSet tasks;
    for (const auto& h : spec_.heads) tasks.insert(h.task_id);
    return tasks;
}

bool BlockNet::has_head(std::string_view task) const {
    for (const auto& h : spec_.heads) {
        if (h.task_id == task) return true;
    }
    return false;
}

const HeadSpec& BlockNet::head(std::string_view task) const {
    for (const auto& h : spec_.heads) {
        if (h.task_id == task) return h;
    }
    fail(ErrorKind::coverage, "net has no head for task '" + std::string(task) + "'");
}

std::vector<Tensor> BlockNet::parameter_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
}

const Tensor& BlockNet::parameter(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::not_found, "no parameter named '" + std::string(name) + "'");
    return params_[it->second].tensor;
}

void BlockNet::set_trainable(bool on) {
    for (auto& p : params_) p.tensor.set_requires_grad(on);
}

BlockFeatures BlockNet::forward(const Tensor& batch) const {
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != spec_.input_shape[0] || s[2] != spec_.input_shape[1] || s[3] != spec_.input_shape[2]) {
        fail(ErrorKind::shape, "batch " + shape_str(s) + " does not match net input [N," +
                                   std::to_string(spec_.input_shape[0]) + "," + std::to_string(spec_.input_shape[1]) +
                                   "," + std::to_string(spec_.input_shape[2]) + "]");
    }
    BlockFeatures out;
    Tensor x = relu(conv2d(batch, parameter("stem.weight"), 1, 1));
    std::size_t prev = spec_.stem_channels;
    for (std::size_t b = 0; b < spec_.num_blocks(); ++b) {
        const std::size_t c = spec_.block_channels[b];
        const std::size_t stride = spec_.block_strides[b];
        const std::string prefix = block_prefix(b);
        Tensor h = relu(conv2d(x, parameter(prefix + "conv1"), stride, 1));
        h = conv2d(h, parameter(prefix + "conv2"), 1, 1);
        Tensor shortcut = needs_shortcut(prev, c, stride) ? conv2d(x, parameter(prefix + "shortcut"), stride, 0) : x;
        x = relu(add(h, shortcut));
        out.maps.push_back(x);
        prev = c;
    }
    if (!spec_.heads.empty()) {
        Tensor pooled = mean(x, {2, 3});
        for (const auto& h : spec_.heads) {
            out.logits.emplace(h.task_id, linear(pooled, parameter("head." + h.task_id + ".weight"),
                                                 parameter("head." + h.task_id + ".bias")));
        }
    }
    return out;
}

ResourceCount BlockNet::count_resources() const {
    ResourceCount total;
    std::size_t h = spec_.input_shape[1], w = spec_.input_shape[2];
    total += conv_resources(spec_.input_shape[0], spec_.stem_channels, 3, h, w);
    std::size_t prev = spec_.stem_channels;
    for (std::size_t b = 0; b < spec_.num_blocks(); ++b) {
        const std::size_t c = spec_.block_channels[b];
        const std::size_t stride = spec_.block_strides[b];
        const std::size_t oh = conv_out(h, 3, stride, 1), ow = conv_out(w, 3, stride, 1);
        total += conv_resources(prev, c, 3, oh, ow);
        total += conv_resources(c, c, 3, oh, ow);
        if (needs_shortcut(prev, c, stride)) total += conv_resources(prev, c, 1, oh, ow);
        h = oh;
        w = ow;
        prev = c;
    }
    for (const auto& head : spec_.heads) total += linear_resources(prev, head.num_classes, true);
    return total;
}

BlockNet BlockNet::clone() const {
    std::vector<NamedTensor> copy;
    copy.reserve(params_.size());
    for (const auto& p : params_) copy.push_back({p.name, p.tensor.clone()});
    return BlockNet(spec_, std::move(copy));
}

bool BlockNet::bitwise_equal(const BlockNet& other) const {
    if (!(spec_ == other.spec_) || params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto a = params_[i].tensor.data();
        const auto b = other.params_[i].tensor.data();
        if (params_[i].name != other.params_[i].name || a.size() != b.size() ||
            std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

}  // namespace amalgam
