#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amalgam/error.hpp"

namespace amalgam {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

// One recorded operation. The backward rule receives the output (value and
// gradient) and accumulates into the gradients of `inputs`.
struct Node {
    std::uint64_t seq = 0;
    const char* name = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> producer;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major float64 array. Copies share storage (handle semantics), the
// same way a framework tensor does; use clone() for an independent copy.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    // Only valid on leaves; flipping it on a recorded intermediate is a tape error.
    void set_requires_grad(bool on);
    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad; }
    void zero_grad();

    bool is_leaf() const { return impl_->producer == nullptr; }
    Tensor detach() const;
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Thread-local switch; while a guard lives, ops record nothing.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Topologically ordered record of the operations that produced a loss.
class Tape {
public:
    static Tape record(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    // Node names in execution (forward) order.
    std::vector<std::string> op_names() const;
    void backward(const Tensor& loss) const;

private:
    struct Entry {
        std::shared_ptr<detail::TensorImpl> output;
        std::shared_ptr<detail::Node> node;
    };
    std::vector<Entry> entries_;  // ascending seq
};

// Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad leaf.
void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride,
              std::size_t padding);

enum class ElementwiseKind { add, sub, mul, relu, scale_by_scalar };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor scale(const Tensor& a, double s);
// `s` must hold one element; differentiable with respect to both operands.
Tensor scale(const Tensor& a, const Tensor& s);
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr);

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Empty `axes` reduces everything to shape {1}.
Tensor sum(const Tensor& input, std::vector<std::size_t> axes = {});
Tensor mean(const Tensor& input, std::vector<std::size_t> axes = {});

Tensor softmax(const Tensor& logits);
// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor reshape(const Tensor& input, Shape shape);
// Gathers slices along axis 0.
Tensor take_rows(const Tensor& input, std::span<const std::size_t> rows);

// ---- optimizer ------------------------------------------------------------

// v <- momentum * v + grad; p <- p - lr * v. Velocities live with the optimizer.
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor> params, double lr, double momentum);
    // `lr_scales[k]` multiplies the step of params[k].
    SgdMomentum(std::vector<Tensor> params, double lr, double momentum, std::vector<double> lr_scales);

    void step();
    void zero_grad();
    double lr() const { return lr_; }
    void set_lr(double lr);
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    std::vector<double> lr_scales_;
    double lr_;
    double momentum_;
};

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping. `max_norm` <= 0 leaves gradients alone.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

// ---- finite differences -----------------------------------------------------

// Central differences per scalar coordinate; `params` are perturbed in place
// and restored.
std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  std::span<Tensor> params, double eps);

// ||a - b|| / (||a|| + ||b||), zero when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::vector<double> per_param;
};

// Compares backward() through `loss_fn` against finite_diff_grad.
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> params, double eps = 1e-5);

}  // namespace amalgam
