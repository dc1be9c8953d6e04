#include "amalgam/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace amalgam {

using detail::Node;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::geometry: return "geometry";
        case ErrorKind::arity: return "arity";
        case ErrorKind::axis: return "axis";
        case ErrorKind::tape: return "tape";
        case ErrorKind::optimizer_state: return "optimizer_state";
        case ErrorKind::normalization: return "normalization";
        case ErrorKind::selection: return "selection";
        case ErrorKind::alignment: return "alignment";
        case ErrorKind::coverage: return "coverage";
        case ErrorKind::spec: return "spec";
        case ErrorKind::size: return "size";
        case ErrorKind::config: return "config";
        case ErrorKind::usage: return "usage";
        case ErrorKind::io: return "io";
        case ErrorKind::format: return "format";
        case ErrorKind::version: return "version";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::conflict: return "conflict";
        case ErrorKind::not_found: return "not_found";
    }
    return "unknown";
}

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_node_seq{0};

void check_shape(const Shape& shape) {
    if (shape.empty()) fail(ErrorKind::shape, "tensor shape must have at least one dimension");
    for (auto d : shape) {
        if (d == 0) fail(ErrorKind::shape, "tensor dimensions must be positive, got " + shape_str(shape));
    }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!t_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t && t->requires_grad(); });
}

Tensor make_output(Shape shape, std::vector<double> data, bool record, const char* name,
                   std::vector<ImplPtr> inputs, std::function<void(const TensorImpl&)> rule) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (record) {
        auto node = std::make_shared<Node>();
        node->seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
        node->name = name;
        node->inputs = std::move(inputs);
        node->backward = std::move(rule);
        impl->requires_grad = true;
        impl->producer = std::move(node);
    }
    return Tensor::from_impl(std::move(impl));
}

// Accumulation target for an input, or nullptr when it does not need a gradient.
double* grad_target(const ImplPtr& in) {
    if (!in->requires_grad) return nullptr;
    in->ensure_grad();
    return in->grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
    }
}

}  // namespace

// ---- Tensor -------------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    check_shape(shape);
    if (amalgam::numel(shape) != data.size()) {
        fail(ErrorKind::shape, "data length " + std::to_string(data.size()) +
                                   " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    if (requires_grad) impl_->ensure_grad();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    std::vector<double> data(amalgam::numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    check_shape(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(amalgam::numel(shape));
    for (auto& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) fail(ErrorKind::axis, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) fail(ErrorKind::arity, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) fail(ErrorKind::tape, "requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
    if (on) {
        impl_->ensure_grad();
    } else {
        impl_->grad.clear();
    }
}

void Tensor::zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, is_leaf() && requires_grad()); }

// ---- grad mode ------------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

// ---- Tape -------------------------------------------------------------------------

Tape Tape::record(const Tensor& loss) {
    if (loss.numel() != 1) fail(ErrorKind::arity, "backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (loss.is_leaf()) fail(ErrorKind::tape, "loss was not produced by any recorded operation");

    Tape tape;
    std::unordered_set<const TensorImpl*> seen;
    std::vector<ImplPtr> stack{loss.impl()};
    while (!stack.empty()) {
        ImplPtr cur = std::move(stack.back());
        stack.pop_back();
        if (!cur->producer || !seen.insert(cur.get()).second) continue;
        for (const auto& in : cur->producer->inputs) stack.push_back(in);
        tape.entries_.push_back({cur, cur->producer});
    }
    std::sort(tape.entries_.begin(), tape.entries_.end(),
              [](const Entry& a, const Entry& b) { return a.node->seq < b.node->seq; });
    return tape;
}

std::vector<std::string> Tape::op_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.emplace_back(e.node->name);
    return names;
}

void Tape::backward(const Tensor& loss) const {
    if (entries_.empty() || entries_.back().output != loss.impl()) {
        fail(ErrorKind::tape, "tape was not recorded from this loss");
    }
    for (const auto& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
    loss.impl()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->node->backward(*it->output);
        if (it->output != loss.impl()) {
            it->output->grad.clear();
            it->output->grad.shrink_to_fit();
        }
    }
}

void backward(const Tensor& loss) { Tape::record(loss).backward(loss); }

// ---- conv2d ----------------------------------------------------------------------

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
    if (in + 2 * padding < k) {
        fail(ErrorKind::geometry, "kernel " + std::to_string(k) + " larger than padded input " +
                                      std::to_string(in + 2 * padding));
    }
    return (in + 2 * padding - k) / stride + 1;
}

struct ConvGeometry {
    long n, ci, h, w, co, k, oh, ow, stride, pad;

    long patch() const { return ci * k * k; }
    long columns() const { return n * oh * ow; }
};

// Visits every (patch row, column) pair whose input pixel is inside the image.
// Row r = (ci, kh, kw); column = (n, oh, ow); fn(row_ptr_offset_in, col_index_base, lo, hi, stride_in).
template <class Fn>
void for_each_patch_run(const ConvGeometry& g, Fn&& fn) {
    for (long ci = 0; ci < g.ci; ++ci)
        for (long kh = 0; kh < g.k; ++kh)
            for (long kw = 0; kw < g.k; ++kw) {
                const long r = (ci * g.k + kh) * g.k + kw;
                long lo = 0;
                if (g.pad > kw) lo = (g.pad - kw + g.stride - 1) / g.stride;
                long hi = g.w - 1 + g.pad - kw;
                hi = hi < 0 ? 0 : hi / g.stride + 1;
                lo = std::min(lo, g.ow);
                hi = std::min(hi, g.ow);
                if (lo >= hi) continue;
                for (long n = 0; n < g.n; ++n)
                    for (long oh = 0; oh < g.oh; ++oh) {
                        const long ih = oh * g.stride + kh - g.pad;
                        if (ih < 0 || ih >= g.h) continue;
                        const long in_row = ((n * g.ci + ci) * g.h + ih) * g.w + kw - g.pad;
                        const long col = r * g.columns() + (n * g.oh + oh) * g.ow;
                        fn(in_row, col, lo, hi);
                    }
            }
}

std::vector<double> im2col(const ConvGeometry& g, const double* x) {
    std::vector<double> cols(static_cast<std::size_t>(g.patch() * g.columns()), 0.0);
    for_each_patch_run(g, [&](long in_row, long col, long lo, long hi) {
        for (long ow = lo; ow < hi; ++ow) cols[col + ow] = x[in_row + ow * g.stride];
    });
    return cols;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || weight.rank() != 4) {
        fail(ErrorKind::shape, "conv2d expects 4-d input and weight, got " + shape_str(input.shape()) +
                                   " and " + shape_str(weight.shape()));
    }
    if (stride == 0) fail(ErrorKind::geometry, "conv2d stride must be positive");
    const auto& is = input.shape();
    const auto& ws = weight.shape();
    if (is[1] != ws[1]) {
        fail(ErrorKind::shape, "conv2d channel mismatch: input " + shape_str(is) + " weight " + shape_str(ws));
    }
    if (ws[2] != ws[3]) fail(ErrorKind::shape, "conv2d expects square kernels, got " + shape_str(ws));

    ConvGeometry g{};
    g.n = static_cast<long>(is[0]);
    g.ci = static_cast<long>(is[1]);
    g.h = static_cast<long>(is[2]);
    g.w = static_cast<long>(is[3]);
    g.co = static_cast<long>(ws[0]);
    g.k = static_cast<long>(ws[2]);
    g.stride = static_cast<long>(stride);
    g.pad = static_cast<long>(padding);
    g.oh = static_cast<long>(conv_out_size(is[2], ws[2], stride, padding));
    g.ow = static_cast<long>(conv_out_size(is[3], ws[3], stride, padding));

    auto cols = std::make_shared<std::vector<double>>(im2col(g, input.data().data()));
    const long plane = g.oh * g.ow;
    RowMatrix product = ConstMatrixMap(weight.data().data(), g.co, g.patch()) *
                        ConstMatrixMap(cols->data(), g.patch(), g.columns());
    // [Co, N*P] -> [N, Co, P]
    std::vector<double> out(static_cast<std::size_t>(g.n * g.co * plane));
    for (long co = 0; co < g.co; ++co)
        for (long n = 0; n < g.n; ++n)
            std::copy_n(product.data() + co * g.columns() + n * plane, plane, out.data() + (n * g.co + co) * plane);

    const bool record = should_record({&input, &weight});
    if (!record) cols.reset();
    auto in_impl = input.impl();
    auto w_impl = weight.impl();
    return make_output(
        Shape{is[0], ws[0], static_cast<std::size_t>(g.oh), static_cast<std::size_t>(g.ow)}, std::move(out),
        record, "conv2d", {in_impl, w_impl}, [g, plane, cols, in_impl, w_impl](const TensorImpl& o) {
            double* gx = grad_target(in_impl);
            double* gw = grad_target(w_impl);
            RowMatrix gout(g.co, g.columns());
            for (long co = 0; co < g.co; ++co)
                for (long n = 0; n < g.n; ++n)
                    std::copy_n(o.grad.data() + (n * g.co + co) * plane, plane, gout.data() + co * g.columns() + n * plane);
            if (gw) {
                MatrixMap(gw, g.co, g.patch()).noalias() +=
                    gout * ConstMatrixMap(cols->data(), g.patch(), g.columns()).transpose();
            }
            if (gx) {
                RowMatrix gcols = ConstMatrixMap(w_impl->data.data(), g.co, g.patch()).transpose() * gout;
                const double* gc = gcols.data();
                for_each_patch_run(g, [&](long in_row, long col, long lo, long hi) {
                    for (long ow = lo; ow < hi; ++ow) gx[in_row + ow * g.stride] += gc[col + ow];
                });
            }
        });
}

// ---- elementwise -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto ai = a.impl(), bi = b.impl();
    return make_output(a.shape(), std::move(out), should_record({&a, &b}), "add", {ai, bi},
                       [ai, bi](const TensorImpl& o) {
                           for (const auto& in : {ai, bi}) {
                               if (double* g = grad_target(in)) {
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                               }
                           }
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto ai = a.impl(), bi = b.impl();
    return make_output(a.shape(), std::move(out), should_record({&a, &b}), "sub", {ai, bi},
                       [ai, bi](const TensorImpl& o) {
                           if (double* g = grad_target(ai)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           }
                           if (double* g = grad_target(bi)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto ai = a.impl(), bi = b.impl();
    return make_output(a.shape(), std::move(out), should_record({&a, &b}), "mul", {ai, bi},
                       [ai, bi](const TensorImpl& o) {
                           if (double* g = grad_target(ai)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
                           }
                           if (double* g = grad_target(bi)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
                           }
                       });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    auto ai = a.impl();
    return make_output(a.shape(), std::move(out), should_record({&a}), "relu", {ai}, [ai](const TensorImpl& o) {
        if (double* g = grad_target(ai)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                if (ai->data[i] > 0.0) g[i] += o.grad[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    auto ai = a.impl();
    return make_output(a.shape(), std::move(out), should_record({&a}), "scale", {ai}, [ai, s](const TensorImpl& o) {
        if (double* g = grad_target(ai)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
        }
    });
}

Tensor scale(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) fail(ErrorKind::shape, "scale factor must hold one element, got " + shape_str(s.shape()));
    const double sv = s[0];
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
    auto ai = a.impl(), si = s.impl();
    return make_output(a.shape(), std::move(out), should_record({&a, &s}), "scale", {ai, si},
                       [ai, si](const TensorImpl& o) {
                           if (double* g = grad_target(ai)) {
                               const double sv = si->data[0];
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * sv;
                           }
                           if (double* g = grad_target(si)) {
                               double acc = 0.0;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * ai->data[i];
                               g[0] += acc;
                           }
                       });
}

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b) {
    auto need_b = [&]() -> const Tensor& {
        if (!b) fail(ErrorKind::arity, "binary elementwise op needs a second operand");
        return *b;
    };
    switch (kind) {
        case ElementwiseKind::add: return add(a, need_b());
        case ElementwiseKind::sub: return sub(a, need_b());
        case ElementwiseKind::mul: return mul(a, need_b());
        case ElementwiseKind::relu: return relu(a);
        case ElementwiseKind::scale_by_scalar: return scale(a, need_b());
    }
    fail(ErrorKind::arity, "unknown elementwise kind");
}

// ---- linear -------------------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
        fail(ErrorKind::shape, "linear expects [N,D] x [D,M] + [M], got " + shape_str(input.shape()) + ", " +
                                   shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
    }
    const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
    if (weight.dim(0) != d || bias.dim(0) != m) {
        fail(ErrorKind::shape, "linear dimension mismatch: " + shape_str(input.shape()) + " x " +
                                   shape_str(weight.shape()) + " + " + shape_str(bias.shape()));
    }
    std::vector<double> out(n * m);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        double* orow = out.data() + r * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] = bias[j];
        for (std::size_t k = 0; k < d; ++k) {
            const double xv = x[r * d + k];
            const double* wrow = w + k * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += xv * wrow[j];
        }
    }
    auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
    return make_output(Shape{n, m}, std::move(out), should_record({&input, &weight, &bias}), "linear", {xi, wi, bi},
                       [xi, wi, bi, n, d, m](const TensorImpl& o) {
                           const double* go = o.grad.data();
                           if (double* gx = grad_target(xi)) {
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t k = 0; k < d; ++k) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < m; ++j) acc += go[r * m + j] * wi->data[k * m + j];
                                       gx[r * d + k] += acc;
                                   }
                           }
                           if (double* gw = grad_target(wi)) {
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t k = 0; k < d; ++k) {
                                       const double xv = xi->data[r * d + k];
                                       for (std::size_t j = 0; j < m; ++j) gw[k * m + j] += xv * go[r * m + j];
                                   }
                           }
                           if (double* gb = grad_target(bi)) {
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < m; ++j) gb[j] += go[r * m + j];
                           }
                       });
}

// ---- reductions -----------------------------------------------------------------------

namespace {

// Maps each flat input index to its flat output index for a reduction.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced, Shape& out_shape) {
    out_shape.clear();
    for (std::size_t a = 0; a < shape.size(); ++a) {
        if (!reduced[a]) out_shape.push_back(shape[a]);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<std::size_t> out_stride(shape.size(), 0);
    std::size_t acc = 1;
    for (std::size_t a = shape.size(); a-- > 0;) {
        if (!reduced[a]) {
            out_stride[a] = acc;
            acc *= shape[a];
        }
    }
    const std::size_t total = numel(shape);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(shape.size(), 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t o = 0;
        for (std::size_t a = 0; a < shape.size(); ++a) o += idx[a] * out_stride[a];
        map[flat] = o;
        for (std::size_t a = shape.size(); a-- > 0;) {
            if (++idx[a] < shape[a]) break;
            idx[a] = 0;
        }
    }
    return map;
}

Tensor reduce(const Tensor& input, std::vector<std::size_t> axes, bool average) {
    const auto& shape = input.shape();
    std::vector<bool> reduced(shape.size(), axes.empty());
    for (auto a : axes) {
        if (a >= shape.size()) {
            fail(ErrorKind::axis, "reduction axis " + std::to_string(a) + " invalid for " + shape_str(shape));
        }
        if (reduced[a]) fail(ErrorKind::axis, "reduction axis " + std::to_string(a) + " repeated");
        reduced[a] = true;
    }
    Shape out_shape;
    auto map = std::make_shared<std::vector<std::size_t>>(reduction_map(shape, reduced, out_shape));
    const std::size_t out_n = numel(out_shape);
    const double count = static_cast<double>(input.numel() / out_n);
    const double factor = average ? 1.0 / count : 1.0;

    std::vector<double> out(out_n, 0.0);
    for (std::size_t i = 0; i < map->size(); ++i) out[(*map)[i]] += input[i];
    if (average) {
        for (auto& v : out) v /= count;
    }
    auto xi = input.impl();
    return make_output(std::move(out_shape), std::move(out), should_record({&input}), average ? "mean" : "sum", {xi},
                       [xi, map, factor](const TensorImpl& o) {
                           if (double* g = grad_target(xi)) {
                               for (std::size_t i = 0; i < map->size(); ++i) g[i] += o.grad[(*map)[i]] * factor;
                           }
                       });
}

}  // namespace

Tensor sum(const Tensor& input, std::vector<std::size_t> axes) { return reduce(input, std::move(axes), false); }
Tensor mean(const Tensor& input, std::vector<std::size_t> axes) { return reduce(input, std::move(axes), true); }

// ---- softmax / cross entropy ----------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
    const std::size_t c = logits.shape().back();
    if (c < 2) fail(ErrorKind::arity, "softmax needs at least 2 classes, got " + std::to_string(c));
    const std::size_t rows = logits.numel() / c;
    std::vector<double> out(logits.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = logits.data().data() + r * c;
        double* y = out.data() + r * c;
        const double mx = *std::max_element(x, x + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < c; ++j) y[j] /= z;
    }
    auto xi = logits.impl();
    return make_output(logits.shape(), std::move(out), should_record({&logits}), "softmax", {xi},
                       [xi, rows, c](const TensorImpl& o) {
                           double* g = grad_target(xi);
                           if (!g) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* y = o.data.data() + r * c;
                               const double* go = o.grad.data() + r * c;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < c; ++j) dot += go[j] * y[j];
                               for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (go[j] - dot);
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) fail(ErrorKind::shape, "cross_entropy expects [N,C] logits, got " + shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n) fail(ErrorKind::shape, "cross_entropy: label count does not match batch");
    if (c < 2) fail(ErrorKind::arity, "cross_entropy needs at least 2 classes");
    auto probs = std::make_shared<std::vector<double>>(n * c);
    std::vector<int> lab(labels.begin(), labels.end());
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= c) fail(ErrorKind::shape, "label out of range");
        const double* x = logits.data().data() + r * c;
        const double mx = *std::max_element(x, x + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += ((*probs)[r * c + j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] /= z;
        loss -= x[lab[r]] - mx - std::log(z);
    }
    loss /= static_cast<double>(n);
    auto xi = logits.impl();
    return make_output(Shape{1}, {loss}, should_record({&logits}), "cross_entropy", {xi},
                       [xi, probs, lab = std::move(lab), n, c](const TensorImpl& o) {
                           double* g = grad_target(xi);
                           if (!g) return;
                           const double s = o.grad[0] / static_cast<double>(n);
                           for (std::size_t r = 0; r < n; ++r) {
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double target = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
                                   g[r * c + j] += s * ((*probs)[r * c + j] - target);
                               }
                           }
                       });
}

// ---- shape ops ---------------------------------------------------------------------------

Tensor reshape(const Tensor& input, Shape shape) {
    check_shape(shape);
    if (numel(shape) != input.numel()) {
        fail(ErrorKind::shape, "cannot reshape " + shape_str(input.shape()) + " to " + shape_str(shape));
    }
    auto xi = input.impl();
    std::vector<double> out(input.data().begin(), input.data().end());
    return make_output(std::move(shape), std::move(out), should_record({&input}), "reshape", {xi},
                       [xi](const TensorImpl& o) {
                           if (double* g = grad_target(xi)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           }
                       });
}

Tensor take_rows(const Tensor& input, std::span<const std::size_t> rows) {
    if (rows.empty()) fail(ErrorKind::shape, "take_rows needs at least one row");
    const std::size_t n = input.dim(0);
    const std::size_t stride = input.numel() / n;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * stride);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) fail(ErrorKind::shape, "row index " + std::to_string(idx[r]) + " out of range");
        std::copy_n(input.data().begin() + static_cast<long>(idx[r] * stride), stride,
                    out.begin() + static_cast<long>(r * stride));
    }
    Shape shape = input.shape();
    shape[0] = idx.size();
    auto xi = input.impl();
    return make_output(std::move(shape), std::move(out), should_record({&input}), "take_rows", {xi},
                       [xi, idx = std::move(idx), stride](const TensorImpl& o) {
                           if (double* g = grad_target(xi)) {
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                   for (std::size_t k = 0; k < stride; ++k) g[idx[r] * stride + k] += o.grad[r * stride + k];
                           }
                       });
}

// ---- SGD -------------------------------------------------------------------------------

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double lr, double momentum)
    : SgdMomentum(std::move(params), lr, momentum, {}) {}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double lr, double momentum, std::vector<double> lr_scales)
    : params_(std::move(params)), lr_scales_(std::move(lr_scales)), lr_(lr), momentum_(momentum) {
    if (lr_scales_.empty()) lr_scales_.assign(params_.size(), 1.0);
    if (lr_scales_.size() != params_.size()) fail(ErrorKind::arity, "one lr scale per parameter required");
    for (double s : lr_scales_) {
        if (!(s >= 0.0) || !std::isfinite(s)) fail(ErrorKind::config, "lr scales must be finite and non-negative");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorKind::config, "learning rate must be finite and non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0, 1)");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) {
        if (!p.is_leaf()) fail(ErrorKind::optimizer_state, "optimizer parameters must be leaf tensors");
        velocity_.emplace_back(p.numel(), 0.0);
    }
}

void SgdMomentum::set_lr(double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorKind::config, "learning rate must be finite and non-negative");
    lr_ = lr;
}

void SgdMomentum::step() {
    for (const auto& p : params_) {
        if (!p.requires_grad() || !p.has_grad()) {
            fail(ErrorKind::optimizer_state, "parameter of shape " + shape_str(p.shape()) + " has no gradient");
        }
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto data = params_[k].mutable_data();
        auto grad = params_[k].mutable_grad();
        auto& v = velocity_[k];
        const double lr = lr_ * lr_scales_[k];
        for (std::size_t i = 0; i < data.size(); ++i) {
            v[i] = momentum_ * v[i] + grad[i];
            data[i] -= lr * v[i];
            grad[i] = 0.0;
        }
    }
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (const auto& p : params) {
            if (!p.has_grad()) continue;
            Tensor handle = p;
            for (double& g : handle.mutable_grad()) g *= f;
        }
    }
    return norm;
}

void SgdMomentum::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---- finite differences ------------------------------------------------------------------

std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f, std::span<Tensor> params,
                                                  double eps) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (auto& p : params) {
        auto data = p.mutable_data();
        std::vector<double> g(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double fp = f();
            data[i] = saved - eps;
            const double fm = f();
            data[i] = saved;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorKind::shape, "relative_error: length mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) + std::sqrt(nb);
    if (denom == 0.0) return 0.0;
    return std::sqrt(diff) / denom;
}

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, double eps) {
    for (auto& p : params) p.zero_grad();
    backward(loss_fn());
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
        p.zero_grad();
    }
    auto numeric = [&] {
        NoGradGuard guard;
        return finite_diff_grad([&] { return loss_fn().item(); }, params, eps);
    }();
    GradCheckResult result;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double err = relative_error(analytic[k], numeric[k]);
        result.per_param.push_back(err);
        result.max_relative_error = std::max(result.max_relative_error, err);
    }
    return result;
}

}  // namespace amalgam
