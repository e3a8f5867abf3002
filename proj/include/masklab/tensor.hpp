#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace masklab {

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::string name;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Dense row-major f64 tensor. Copies share storage (shallow handle);
/// backward passes write only into grad buffers, never into data.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t dim(std::size_t i) const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double value() const;  // scalar tensors only
    double at(std::size_t i, std::size_t j) const;  // 2-D convenience

    bool requires_grad() const;
    void set_requires_grad(bool b);
    bool has_grad() const;
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    const std::string& name() const;
    Tensor& set_name(std::string n);

    /// Value copy detached from any gradient history.
    Tensor detached_copy() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_tensor(std::vector<std::size_t>, std::vector<double>, bool);
};

Tensor make_tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad);

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
/// current thread (define-by-run; a fresh tape per forward pass); destruction
/// restores the previous one. Entries are recorded in topological order, so
/// replaying them in reverse accumulates the full chain-rule gradient.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
    /// gradients into every requires_grad tensor reachable from `loss`.
    void backward(const Tensor& loss);

    std::size_t num_entries() const { return entries_.size(); }

    static Tape* active();
    static bool recording();
    static void record(std::function<void()> backward_fn);

private:
    std::vector<std::function<void()>> entries_;
    Tape* prev_ = nullptr;
};

// ---- primitive operations -------------------------------------------------
// Every op computes its value eagerly and, when a tape is active and an input
// carries gradient, records one backward closure.

// Element-wise; shapes must match exactly or one side must be a scalar tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // domain error on non-positive input
Tensor gelu(const Tensor& x);

/// Gradient is exactly 1 strictly inside (lo, hi) and exactly 0 when
/// saturated at or beyond either bound.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);  // scalar

/// y[i, j] = w[i, j] * m[i] for w[r x c], m[r].
Tensor row_scale(const Tensor& w, const Tensor& m);

/// Strict 2-D matrix product a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// y = x * w^T + b for x[n x in], w[out x in], b[out]; pass an undefined
/// Tensor as b for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Row gather: out[i, :] = table[ids[i], :].
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

/// out[i, :] = x[rows[i], :].
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

/// Same data, new shape (sizes must agree); identity Jacobian.
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

/// Row-wise normalization over the last dimension, then affine by gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Scaled dot-product attention over n_heads with a causal mask.
/// q, k, v are [batch*seq x d_model]; returns the same shape.
Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t batch, std::size_t seq, std::size_t n_heads);

/// Mean negative log-likelihood over rows of logits[batch x vocab] with
/// numerically stable max-subtraction. Exact gradient
/// (softmax(logits) - onehot(targets)) / batch.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Row-wise softmax of a [n x d] tensor; value-only utility (no gradient).
std::vector<double> softmax_rows(const Tensor& x);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace masklab
