#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "loopmdm/common.hpp"
#include "loopmdm/rng.hpp"

namespace loopmdm {

// Dense 2-D row-major tensor with reverse-mode autograd. Tensors are cheap
// shared handles; gradients accumulate additively into the owning node.
struct TensorData {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<real> value;
    std::vector<real> grad;  // empty until the first backward contribution
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
    static Tensor full(std::size_t rows, std::size_t cols, real v);
    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<real> v,
                              bool requires_grad = false);
    static Tensor scalar(real v);
    // Truncated normal init (resample outside two standard deviations).
    static Tensor trunc_normal(std::size_t rows, std::size_t cols, real stddev, Rng& rng,
                               bool requires_grad = true);

    bool defined() const { return static_cast<bool>(d_); }
    std::size_t rows() const { return d_->rows; }
    std::size_t cols() const { return d_->cols; }
    std::size_t size() const { return d_->value.size(); }
    std::array<std::size_t, 2> shape() const { return {d_->rows, d_->cols}; }

    real item() const;

    real at(std::size_t r, std::size_t c) const { return d_->value[r * d_->cols + c]; }
    real& at(std::size_t r, std::size_t c) { return d_->value[r * d_->cols + c]; }

    std::vector<real>& values() { return d_->value; }
    const std::vector<real>& values() const { return d_->value; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    // Gradient buffer, allocated zero-filled on first access.
    std::vector<real>& grad();
    bool has_grad() const { return !d_->grad.empty(); }
    void zero_grad();

    const std::shared_ptr<TensorData>& node() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

// Records one backward rule per forward operation. The newest Tape is the
// active recording context for the constructing thread; operations executed
// with no live Tape run forward-only. Single-threaded per tape.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_rule);
    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = seed, replays the tape in reverse, accumulating
    // into every requires_grad leaf, then frees the tape.
    void backward(const Tensor& loss, real seed = real(1));

    static Tape* current();

private:
    std::vector<std::function<void()>> ops_;
    Tape* prev_ = nullptr;
};

// Convenience wrapper over the active tape.
void backward(const Tensor& loss);

bool grad_enabled_for(const Tensor& t);
std::vector<real>& ensure_grad(TensorData& td);

// Attention probabilities captured from one layer application, for analysis.
struct AttnMaps {
    std::size_t n_blocks = 0;
    std::size_t n_heads = 0;
    std::size_t rows = 0;  // query/key count per block
    std::vector<real> probs;

    real at(std::size_t block, std::size_t head, std::size_t q, std::size_t k) const {
        return probs[((block * n_heads + head) * rows + q) * rows + k];
    }
};

// ---- operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
// x [r x in] * w [in x out] + bias [1 x out] broadcast over rows; bias optional.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
Tensor sum(const Tensor& a);
// axis 1: each row sums to one; axis 0: each column sums to one.
Tensor softmax(const Tensor& x, int axis = 1);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor embedding_gather(const Tensor& table, const std::vector<int32_t>& ids);
// Contiguous column range [start, start+len) as its own tensor.
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);

// Row-wise normalization with modulation: (1 + scale) * xhat + shift, where
// xhat uses a variance floor of 1e-5. scale/shift hold one row per block of
// block_rows consecutive rows of x.
Tensor adaln_blocks(const Tensor& x, const Tensor& scale, const Tensor& shift,
                    std::size_t block_rows);
Tensor layer_norm_adaptive(const Tensor& x, const Tensor& scale, const Tensor& shift);

// Pairwise rotation positional encoding, base frequency 10000, applied per
// head on a [rows x (n_heads*d_head)] tensor; positions give the angle index
// per row. d_head must be even.
Tensor rotary_apply(const Tensor& x, std::size_t n_heads, const std::vector<int32_t>& positions);

// Bidirectional multi-head attention over independent blocks of block_rows
// rows (one block per sequence), scaled by 1/sqrt(d_head). If capture is
// non-null the softmax probabilities are copied there.
Tensor attention_blocks(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t block_rows, AttnMaps* capture = nullptr);

// h + gate * x with gate holding one [1 x d] row per block of block_rows rows.
Tensor gated_residual_blocks(const Tensor& h, const Tensor& x, const Tensor& gate,
                             std::size_t block_rows);

// Sum over rows of mask[i] * weights[i] * (-log p[i][target[i]]), with the
// probability clamped at 1e-30 before the log. Rows where mask is zero are
// skipped entirely.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     const std::vector<uint8_t>& position_mask, const std::vector<real>& weights);

}  // namespace loopmdm
