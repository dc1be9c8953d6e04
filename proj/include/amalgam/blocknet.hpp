#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

using TaskSet = std::set<std::string>;

struct HeadSpec {
    std::string task_id;
    std::size_t num_classes = 2;

    bool operator==(const HeadSpec&) const = default;
};

struct BlockNetSpec {
    std::array<std::size_t, 3> input_shape{3, 16, 16};  // channels, height, width
    std::size_t stem_channels = 8;
    std::vector<std::size_t> block_channels{8, 16, 32};
    std::vector<std::size_t> block_strides{1, 2, 2};
    std::vector<HeadSpec> heads;

    std::size_t num_blocks() const { return block_channels.size(); }
    // Throws ErrorKind::spec on violation.
    void validate() const;
    // [C, H, W] of every block output.
    std::vector<std::array<std::size_t, 3>> block_shapes() const;
    // Same strides and input, every channel count multiplied by `factor`, rounded up.
    BlockNetSpec widened(double factor) const;

    bool operator==(const BlockNetSpec&) const = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct BlockFeatures {
    std::vector<Tensor> maps;              // one per block, [N, C_b, H_b, W_b]
    std::map<std::string, Tensor> logits;  // task_id -> [N, num_classes]
};

struct ResourceCount {
    std::uint64_t params = 0;
    std::uint64_t flops_per_image = 0;

    ResourceCount& operator+=(const ResourceCount& o) {
        params += o.params;
        flops_per_image += o.flops_per_image;
        return *this;
    }
    bool operator==(const ResourceCount&) const = default;
};

// Closed-form counts for a single layer; FLOPs are 2 x multiply-accumulates.
ResourceCount conv_resources(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                             std::size_t out_h, std::size_t out_w);
ResourceCount linear_resources(std::size_t in_features, std::size_t out_features, bool bias);

class BlockNet {
public:
    // Adopts existing parameters (e.g. from a checkpoint); names and shapes are checked.
    BlockNet(BlockNetSpec spec, std::vector<NamedTensor> params);

    static BlockNet build(const BlockNetSpec& spec, std::uint64_t seed);
    // Expected parameter names and shapes, in storage order.
    static std::vector<std::pair<std::string, Shape>> parameter_layout(const BlockNetSpec& spec);

    const BlockNetSpec& spec() const { return spec_; }
    std::size_t num_blocks() const { return spec_.num_blocks(); }
    TaskSet task_set() const;
    bool has_head(std::string_view task) const;
    const HeadSpec& head(std::string_view task) const;

    const std::vector<NamedTensor>& parameters() const { return params_; }
    std::vector<Tensor> parameter_tensors() const;
    const Tensor& parameter(std::string_view name) const;
    void set_trainable(bool on);

    BlockFeatures forward(const Tensor& batch) const;
    ResourceCount count_resources() const;

    // Deep copy with independent storage.
    BlockNet clone() const;
    bool bitwise_equal(const BlockNet& other) const;

private:
    BlockNetSpec spec_;
    std::vector<NamedTensor> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace amalgam
