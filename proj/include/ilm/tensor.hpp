#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ilm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // lazily allocated, same length as data
    bool requires_grad = false;
};

// Dense row-major f32 tensor. Value-semantics handle over shared storage;
// gradients live next to the data and accumulate additively across uses, so
// callers zero them between optimizer steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t dim(int axis) const;

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient buffer, zero-filled on first access.
    std::span<float> grad();
    std::span<const float> grad() const; // empty if never touched
    void zero_grad();

    float item() const; // scalar tensors only

    TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend class Tape;
};

// Integer id matrix for token batches and masking targets.
struct IdMatrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<int32_t> v;

    IdMatrix() = default;
    IdMatrix(int64_t r, int64_t c, int32_t fill = 0)
        : rows(r), cols(c), v(static_cast<size_t>(r * c), fill) {}

    int32_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
    int32_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
    int64_t numel() const { return rows * cols; }
};

// Reverse-mode tape. Ops execute eagerly and record a backward closure when
// any input requires gradients; backward() replays the closures once, in
// reverse order. One tape per forward/backward pass, single-threaded.
class Tape {
public:
    static constexpr int32_t kIgnoreId = -1;

    // a + b; b may have the same shape or match a trailing suffix of a's
    // shape (bias broadcast).
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b); // elementwise, same shape
    Tensor scale(const Tensor& a, float s);
    Tensor gelu(const Tensor& a); // exact erf form
    // Normalizes the last axis to zero mean / unit variance, then applies
    // learned gain and bias (both shaped like the last axis).
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
    // table [V,D], ids [B,L] -> [B,L,D]; gradients scatter-add into table.
    Tensor embedding_lookup(const Tensor& table, const IdMatrix& ids);
    Tensor mean_all(const Tensor& a);
    Tensor sum_all(const Tensor& a);
    Tensor transpose(const Tensor& a, std::vector<int> perm);
    Tensor reshape(const Tensor& a, Shape new_shape);
    Tensor concat(const std::vector<Tensor>& parts, int axis);

    Tensor matmul(const Tensor& a, const Tensor& b); // rank-2 only
    // Batched matmul over the last two axes; leading axes must match
    // exactly. With transpose_b, b's last two axes are [n,k] instead of [k,n].
    Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

    Tensor softmax(const Tensor& x, int axis);
    // logits [B,L,V] or [N,V]; targets of matching [B,L] / [N,1] shape.
    // Mean negative log-likelihood over positions whose target != ignore_id.
    Tensor masked_cross_entropy(const Tensor& logits, const IdMatrix& targets,
                                int32_t ignore_id = kIgnoreId);

    void backward(const Tensor& loss);
    void clear();
    size_t size() const { return nodes_.size(); }

private:
    Tensor make(Shape shape, bool requires_grad);
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    std::vector<std::function<void()>> nodes_;
};

// Throws NumericsError if any element is NaN or infinite.
void check_finite(const Tensor& t, const char* op_name);

} // namespace ilm
