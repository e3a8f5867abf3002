#include "masklab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace masklab {

namespace {

thread_local Tape* g_active_tape = nullptr;

using Impl = std::shared_ptr<detail::TensorImpl>;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

bool wants_grad(const Tensor& a) {
    return Tape::recording() && a.impl()->requires_grad;
}
bool wants_grad(const Tensor& a, const Tensor& b) {
    return Tape::recording() && (a.impl()->requires_grad || b.impl()->requires_grad);
}
bool wants_grad(const Tensor& a, const Tensor& b, const Tensor& c) {
    return Tape::recording() &&
           (a.impl()->requires_grad || b.impl()->requires_grad || c.impl()->requires_grad);
}

// Output grad not allocated means no downstream gradient reached this value.
bool no_output_grad(const Impl& out) { return out->grad.empty(); }

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor make_tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    if (shape_product(shape) != data.size()) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                    std::to_string(data.size()) + " data elements");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return make_tensor({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
    check_defined(*this, "shape");
    return impl_->shape;
}

std::size_t Tensor::size() const {
    check_defined(*this, "size");
    return impl_->data.size();
}

std::size_t Tensor::dim(std::size_t i) const {
    const auto& s = shape();
    if (i >= s.size()) throw std::out_of_range("dim index out of range");
    return s[i];
}

std::vector<double>& Tensor::data() {
    check_defined(*this, "data");
    return impl_->data;
}

const std::vector<double>& Tensor::data() const {
    check_defined(*this, "data");
    return impl_->data;
}

double Tensor::value() const {
    check_defined(*this, "value");
    if (impl_->data.size() != 1) {
        throw std::invalid_argument("value: tensor " + shape_str(impl_->shape) + " is not scalar");
    }
    return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    check_defined(*this, "at");
    if (impl_->shape.size() != 2) {
        throw std::invalid_argument("at(i,j): tensor " + shape_str(impl_->shape) + " is not 2-D");
    }
    if (i >= impl_->shape[0] || j >= impl_->shape[1]) throw std::out_of_range("at(i,j) out of range");
    return impl_->data[i * impl_->shape[1] + j];
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool b) {
    check_defined(*this, "set_requires_grad");
    impl_->requires_grad = b;
}

bool Tensor::has_grad() const {
    check_defined(*this, "has_grad");
    return !impl_->grad.empty();
}

std::vector<double>& Tensor::grad() {
    check_defined(*this, "grad");
    impl_->ensure_grad();
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    check_defined(*this, "grad");
    if (impl_->grad.empty()) {
        throw std::runtime_error("grad: no gradient accumulated for tensor '" + impl_->name + "'");
    }
    return impl_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    impl_->grad.clear();
}

const std::string& Tensor::name() const {
    check_defined(*this, "name");
    return impl_->name;
}

Tensor& Tensor::set_name(std::string n) {
    check_defined(*this, "set_name");
    impl_->name = std::move(n);
    return *this;
}

Tensor Tensor::detached_copy() const {
    check_defined(*this, "detached_copy");
    return make_tensor(impl_->shape, impl_->data, false);
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::recording() { return g_active_tape != nullptr; }

void Tape::record(std::function<void()> backward_fn) {
    if (g_active_tape) g_active_tape->entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    }
    auto impl = loss.impl();
    impl->ensure_grad();
    impl->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// ---- element-wise helpers -------------------------------------------------

namespace {

Tensor grad_tracked(std::vector<std::size_t> shape, std::vector<double> data, bool track) {
    Tensor out = make_tensor(std::move(shape), std::move(data), track);
    return out;
}

// Unary element-wise op: f gives the value, dfdx the local derivative from
// (x, y) so closures can reuse the forward result.
template <typename F, typename DF>
Tensor unary_op(const char* opname, const Tensor& x, F f, DF dfdx) {
    check_defined(x, opname);
    const auto& xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    bool track = wants_grad(x);
    Tensor y = grad_tracked(x.shape(), std::move(out), track);
    if (track) {
        auto xi = x.impl();
        auto yi = y.impl();
        Tape::record([xi, yi, dfdx]() {
            if (no_output_grad(yi)) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->data.size(); ++i) {
                xi->grad[i] += yi->grad[i] * dfdx(xi->data[i], yi->data[i]);
            }
        });
    }
    return y;
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const char* opname, BinKind kind, const Tensor& a, const Tensor& b) {
    check_defined(a, opname);
    check_defined(b, opname);
    const auto& av = a.data();
    const auto& bv = b.data();
    bool a_scalar = av.size() == 1;
    bool b_scalar = bv.size() == 1;
    bool same = a.shape() == b.shape();
    if (!same && !a_scalar && !b_scalar) {
        throw std::invalid_argument(std::string(opname) + ": shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()) +
                                    " are not broadcastable (scalar or same-shape only)");
    }
    const std::vector<std::size_t>& out_shape = a_scalar && !same ? b.shape() : a.shape();
    std::size_t n = a_scalar && !same ? bv.size() : av.size();
    std::vector<double> out(n);
    auto a_at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
    auto b_at = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
    switch (kind) {
        case BinKind::Add:
            for (std::size_t i = 0; i < n; ++i) out[i] = a_at(i) + b_at(i);
            break;
        case BinKind::Sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = a_at(i) - b_at(i);
            break;
        case BinKind::Mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = a_at(i) * b_at(i);
            break;
    }
    bool track = wants_grad(a, b);
    Tensor y = grad_tracked(out_shape, std::move(out), track);
    if (track) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        Tape::record([ai, bi, yi, kind, a_scalar, b_scalar]() {
            if (no_output_grad(yi)) return;
            const auto& go = yi->grad;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    double g = go[i];
                    if (kind == BinKind::Mul) g *= b_scalar ? bi->data[0] : bi->data[i];
                    ai->grad[a_scalar ? 0 : i] += g;
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    double g = go[i];
                    if (kind == BinKind::Sub) g = -g;
                    if (kind == BinKind::Mul) g *= a_scalar ? ai->data[0] : ai->data[i];
                    bi->grad[b_scalar ? 0 : i] += g;
                }
            }
        });
    }
    return y;
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---- public ops -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::Mul, a, b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

Tensor neg(const Tensor& a) {
    return unary_op("neg", a, [](double x) { return -x; },
                    [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op("sigmoid", x, [](double v) { return sigmoid_scalar(v); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_op("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
    return unary_op("tanh", x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
    return unary_op("exp", x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    check_defined(x, "log");
    for (double v : x.data()) {
        if (!(v > 0.0)) {
            throw std::domain_error("log: input " + std::to_string(v) + " is not positive");
        }
    }
    return unary_op("log", x, [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        "gelu", x,
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
    return unary_op(
        "clamp", x,
        [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
    check_defined(x, "sum");
    double s = 0.0;
    for (double v : x.data()) s += v;
    bool track = wants_grad(x);
    Tensor y = grad_tracked({1}, {s}, track);
    if (track) {
        auto xi = x.impl();
        auto yi = y.impl();
        Tape::record([xi, yi]() {
            if (no_output_grad(yi)) return;
            xi->ensure_grad();
            double g = yi->grad[0];
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
        });
    }
    return y;
}

Tensor row_scale(const Tensor& w, const Tensor& m) {
    check_defined(w, "row_scale");
    check_defined(m, "row_scale");
    if (w.shape().size() != 2 || m.shape().size() != 1 || m.dim(0) != w.dim(0)) {
        throw std::invalid_argument("row_scale: need w[r x c] and m[r], got " +
                                    shape_str(w.shape()) + " and " + shape_str(m.shape()));
    }
    std::size_t r = w.dim(0), c = w.dim(1);
    std::vector<double> out(r * c);
    const auto& wv = w.data();
    const auto& mv = m.data();
    for (std::size_t i = 0; i < r; ++i) {
        double s = mv[i];
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = wv[i * c + j] * s;
    }
    bool track = wants_grad(w, m);
    Tensor y = grad_tracked(w.shape(), std::move(out), track);
    if (track) {
        auto wi = w.impl();
        auto mi = m.impl();
        auto yi = y.impl();
        Tape::record([wi, mi, yi, r, c]() {
            if (no_output_grad(yi)) return;
            const auto& go = yi->grad;
            if (wi->requires_grad) {
                wi->ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    double s = mi->data[i];
                    for (std::size_t j = 0; j < c; ++j) wi->grad[i * c + j] += go[i * c + j] * s;
                }
            }
            if (mi->requires_grad) {
                mi->ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j) acc += go[i * c + j] * wi->data[i * c + j];
                    mi->grad[i] += acc;
                }
            }
        });
    }
    return y;
}

namespace {

// C[mxn] += A[mxk] * B[kxn], row-major, i-k-j order.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[mxn] += A^T where A is [kxm], times B[kxn]: C += A^T B.
void matmul_at_b_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                     std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[mxk] += A[mxn] * B^T where B is [kxn]: C += A B^T.
void matmul_a_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                     std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    }
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    bool track = wants_grad(a, b);
    Tensor y = grad_tracked({m, n}, std::move(out), track);
    if (track) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto yi = y.impl();
        Tape::record([ai, bi, yi, m, k, n]() {
            if (no_output_grad(yi)) return;
            const double* go = yi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                // dA += dY * B^T
                matmul_a_bt_acc(go, bi->data.data(), ai->grad.data(), m, n, k);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                // dB += A^T * dY
                matmul_at_b_acc(ai->data.data(), go, bi->grad.data(), m, k, n);
            }
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_defined(x, "linear");
    check_defined(w, "linear");
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1)) {
        throw std::invalid_argument("linear: incompatible shapes x" + shape_str(x.shape()) +
                                    " and w" + shape_str(w.shape()));
    }
    std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
    bool has_bias = b.defined();
    if (has_bias && (b.shape().size() != 1 || b.dim(0) != out)) {
        throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                    " does not match " + std::to_string(out) + " outputs");
    }
    std::vector<double> yv(n * out, 0.0);
    // y = x * w^T (+ b)
    matmul_a_bt_acc(x.data().data(), w.data().data(), yv.data(), n, in, out);
    if (has_bias) {
        const auto& bv = b.data();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < out; ++j) yv[i * out + j] += bv[j];
        }
    }
    bool track = Tape::recording() &&
                 (x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad()));
    Tensor y = grad_tracked({n, out}, std::move(yv), track);
    if (track) {
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = has_bias ? b.impl() : nullptr;
        auto yi = y.impl();
        Tape::record([xi, wi, bi, yi, n, in, out]() {
            if (no_output_grad(yi)) return;
            const double* go = yi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                // dX += dY * W
                matmul_acc(go, wi->data.data(), xi->grad.data(), n, out, in);
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                // dW += dY^T * X
                matmul_at_b_acc(go, xi->data.data(), wi->grad.data(), n, out, in);
            }
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < out; ++j) bi->grad[j] += go[i * out + j];
                }
            }
        });
    }
    return y;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    check_defined(table, "embedding");
    if (table.shape().size() != 2) {
        throw std::invalid_argument("embedding: table must be 2-D, got " +
                                    shape_str(table.shape()));
    }
    std::size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw std::out_of_range("embedding: id " + std::to_string(id) +
                                    " outside table of " + std::to_string(v) + " rows");
        }
    }
    std::size_t n = ids.size();
    std::vector<double> out(n * d);
    const auto& tv = table.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = tv.data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    bool track = wants_grad(table);
    Tensor y = grad_tracked({n, d}, std::move(out), track);
    if (track) {
        auto ti = table.impl();
        auto yi = y.impl();
        Tape::record([ti, yi, ids, d]() {
            if (no_output_grad(yi)) return;
            ti->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = ti->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                const double* src = yi->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    check_defined(x, "gather_rows");
    if (x.shape().size() != 2) {
        throw std::invalid_argument("gather_rows: need 2-D input, got " + shape_str(x.shape()));
    }
    std::size_t n = x.dim(0), d = x.dim(1);
    for (std::size_t r : rows) {
        if (r >= n) {
            throw std::out_of_range("gather_rows: row " + std::to_string(r) + " outside " +
                                    std::to_string(n) + " rows");
        }
    }
    std::vector<double> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = x.data().data() + rows[i] * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    bool track = wants_grad(x);
    Tensor y = grad_tracked({rows.size(), d}, std::move(out), track);
    if (track) {
        auto xi = x.impl();
        auto yi = y.impl();
        Tape::record([xi, yi, rows, d]() {
            if (no_output_grad(yi)) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                double* dst = xi->grad.data() + rows[i] * d;
                const double* src = yi->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    check_defined(x, "reshape");
    if (shape_product(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    }
    bool track = wants_grad(x);
    Tensor y = grad_tracked(std::move(shape), x.data(), track);
    if (track) {
        auto xi = x.impl();
        auto yi = y.impl();
        Tape::record([xi, yi]() {
            if (no_output_grad(yi)) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_defined(x, "layer_norm");
    check_defined(gamma, "layer_norm");
    check_defined(beta, "layer_norm");
    if (x.shape().size() != 2) {
        throw std::invalid_argument("layer_norm: need 2-D input, got " + shape_str(x.shape()));
    }
    std::size_t n = x.dim(0), d = x.dim(1);
    if (gamma.shape() != std::vector<std::size_t>{d} || beta.shape() != std::vector<std::size_t>{d}) {
        throw std::invalid_argument("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    }
    std::vector<double> out(n * d);
    auto xhat = std::make_shared<std::vector<double>>(n * d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (row[j] - mean) * is;
            (*xhat)[i * d + j] = xh;
            out[i * d + j] = xh * gv[j] + bv[j];
        }
    }
    bool track = wants_grad(x, gamma, beta);
    Tensor y = grad_tracked(x.shape(), std::move(out), track);
    if (track) {
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto yi = y.impl();
        Tape::record([xi, gi, bi, yi, xhat, inv_std, n, d]() {
            if (no_output_grad(yi)) return;
            const auto& go = yi->grad;
            if (gi->requires_grad) {
                gi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gi->grad[j] += go[i * d + j] * (*xhat)[i * d + j];
                    }
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) bi->grad[j] += go[i * d + j];
                }
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = go[i * d + j] * gi->data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * (*xhat)[i * d + j];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    double is = (*inv_std)[i];
                    for (std::size_t j = 0; j < d; ++j) {
                        double dxh = go[i * d + j] * gi->data[j];
                        xi->grad[i * d + j] +=
                            is * (dxh - mean_dxh - (*xhat)[i * d + j] * mean_dxh_xh);
                    }
                }
            }
        });
    }
    return y;
}

Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t batch, std::size_t seq, std::size_t n_heads) {
    check_defined(q, "attention");
    check_defined(k, "attention");
    check_defined(v, "attention");
    std::size_t n = batch * seq;
    if (q.shape().size() != 2 || q.shape() != k.shape() || q.shape() != v.shape() ||
        q.dim(0) != n) {
        throw std::invalid_argument("attention: q/k/v must all be [" + std::to_string(n) +
                                    " x d_model], got q" + shape_str(q.shape()) + " k" +
                                    shape_str(k.shape()) + " v" + shape_str(v.shape()));
    }
    std::size_t d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) {
        throw std::invalid_argument("attention: d_model " + std::to_string(d) +
                                    " not divisible by " + std::to_string(n_heads) + " heads");
    }
    std::size_t dh = d / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs[b][h] is a lower-triangular seq x seq matrix of attention weights.
    auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq * seq, 0.0);
    std::vector<double> out(n * d, 0.0);
    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            double* p = probs->data() + ((b * n_heads + h) * seq) * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = qv.data() + (b * seq + i) * d + h * dh;
                double* prow = p + i * seq;
                double maxs = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = kv.data() + (b * seq + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= scale;
                    prow[j] = s;
                    if (s > maxs) maxs = s;
                }
                double denom = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    prow[j] = std::exp(prow[j] - maxs);
                    denom += prow[j];
                }
                double* orow = out.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    prow[j] /= denom;
                    const double* vj = vv.data() + (b * seq + j) * d + h * dh;
                    double w = prow[j];
                    for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vj[t];
                }
            }
        }
    }

    bool track = wants_grad(q, k, v);
    Tensor y = grad_tracked(q.shape(), std::move(out), track);
    if (track) {
        auto qi_ = q.impl();
        auto ki_ = k.impl();
        auto vi_ = v.impl();
        auto yi = y.impl();
        Tape::record([qi_, ki_, vi_, yi, probs, batch, seq, n_heads, dh, d, scale]() {
            if (no_output_grad(yi)) return;
            bool gq = qi_->requires_grad, gk = ki_->requires_grad, gv_ = vi_->requires_grad;
            if (gq) qi_->ensure_grad();
            if (gk) ki_->ensure_grad();
            if (gv_) vi_->ensure_grad();
            const auto& go = yi->grad;
            std::vector<double> dprow(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const double* p = probs->data() + ((b * n_heads + h) * seq) * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* gorow = go.data() + (b * seq + i) * d + h * dh;
                        const double* prow = p + i * seq;
                        // d probs and d v
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double* vj = vi_->data.data() + (b * seq + j) * d + h * dh;
                            double dp = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) dp += gorow[t] * vj[t];
                            dprow[j] = dp;
                            dot += dp * prow[j];
                            if (gv_) {
                                double* dvj = vi_->grad.data() + (b * seq + j) * d + h * dh;
                                double w = prow[j];
                                for (std::size_t t = 0; t < dh; ++t) dvj[t] += w * gorow[t];
                            }
                        }
                        if (!gq && !gk) continue;
                        // softmax backward restricted to the causal prefix
                        const double* qrow = qi_->data.data() + (b * seq + i) * d + h * dh;
                        double* dqrow = gq ? qi_->grad.data() + (b * seq + i) * d + h * dh : nullptr;
                        for (std::size_t j = 0; j <= i; ++j) {
                            double ds = prow[j] * (dprow[j] - dot) * scale;
                            const double* kj = ki_->data.data() + (b * seq + j) * d + h * dh;
                            if (gq) {
                                for (std::size_t t = 0; t < dh; ++t) dqrow[t] += ds * kj[t];
                            }
                            if (gk) {
                                double* dkj = ki_->grad.data() + (b * seq + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) dkj[t] += ds * qrow[t];
                            }
                        }
                    }
                }
            }
        });
    }
    return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    check_defined(logits, "softmax_cross_entropy");
    if (logits.shape().size() != 2) {
        throw std::invalid_argument("softmax_cross_entropy: logits must be 2-D, got " +
                                    shape_str(logits.shape()));
    }
    std::size_t batch = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != batch) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(batch) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                                    " outside vocab of " + std::to_string(vocab));
        }
    }
    auto probs = std::make_shared<std::vector<double>>(batch * vocab);
    const auto& lv = logits.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = lv.data() + i * vocab;
        double maxv = row[0];
        for (std::size_t j = 1; j < vocab; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        double* prow = probs->data() + i * vocab;
        for (std::size_t j = 0; j < vocab; ++j) {
            prow[j] = std::exp(row[j] - maxv);
            denom += prow[j];
        }
        for (std::size_t j = 0; j < vocab; ++j) prow[j] /= denom;
        std::size_t t = static_cast<std::size_t>(targets[i]);
        loss += std::log(denom) - (row[t] - maxv);
    }
    loss /= static_cast<double>(batch);
    bool track = wants_grad(logits);
    Tensor y = grad_tracked({1}, {loss}, track);
    if (track) {
        auto li = logits.impl();
        auto yi = y.impl();
        Tape::record([li, yi, probs, targets, batch, vocab]() {
            if (no_output_grad(yi)) return;
            li->ensure_grad();
            double g = yi->grad[0] / static_cast<double>(batch);
            for (std::size_t i = 0; i < batch; ++i) {
                const double* prow = probs->data() + i * vocab;
                double* grow = li->grad.data() + i * vocab;
                std::size_t t = static_cast<std::size_t>(targets[i]);
                for (std::size_t j = 0; j < vocab; ++j) {
                    grow[j] += g * (prow[j] - (j == t ? 1.0 : 0.0));
                }
            }
        });
    }
    return y;
}

std::vector<double> softmax_rows(const Tensor& x) {
    check_defined(x, "softmax_rows");
    if (x.shape().size() != 2) {
        throw std::invalid_argument("softmax_rows: need 2-D input, got " + shape_str(x.shape()));
    }
    std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(n * d);
    const auto& xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double maxv = row[0];
        for (std::size_t j = 1; j < d; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = std::exp(row[j] - maxv);
            denom += out[i * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= denom;
    }
    return out;
}

}  // namespace masklab
