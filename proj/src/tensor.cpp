#include "ilm/tensor.hpp"

#include <cmath>
#include <cstring>

#include "ilm/errors.hpp"
#include "ilm/kernels.hpp"

namespace ilm {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<float>& grad_buf(TensorImpl* t) {
    if (t->grad.empty()) {
        t->grad.assign(t->data.size(), 0.0f);
    }
    return t->grad;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

} // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) {
            out += ",";
        }
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (int64_t d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("from_vector: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

int64_t Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
    }
    return impl_->shape[static_cast<size_t>(axis)];
}

std::span<float> Tensor::grad() {
    return grad_buf(impl_.get());
}

std::span<const float> Tensor::grad() const {
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }
}

float Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item(): tensor with shape " + shape_str(shape()) + " is not scalar");
    }
    return impl_->data[0];
}

void check_finite(const Tensor& t, const char* op_name) {
    const auto d = t.data();
    double acc = 0.0;
    for (float x : d) {
        acc += static_cast<double>(x);
    }
    if (std::isfinite(acc)) {
        return;
    }
    for (size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw NumericsError(std::string(op_name) + ": non-finite value " +
                                std::to_string(d[i]) + " at flat index " + std::to_string(i));
        }
    }
    throw NumericsError(std::string(op_name) + ": non-finite accumulation");
}

Tensor Tape::make(Shape shape, bool requires_grad) {
    return Tensor::zeros(std::move(shape), requires_grad);
}

void Tape::clear() {
    nodes_.clear();
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    if (loss.requires_grad()) {
        loss.impl()->grad.assign(1, 1.0f);
    }
    for (size_t i = nodes_.size(); i-- > 0;) {
        nodes_[i]();
    }
}

// ---------------------------------------------------------------------------
// elementwise & structural ops

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    bool suffix = false;
    if (!same) {
        const int ra = a.rank(), rb = b.rank();
        suffix = rb <= ra;
        for (int i = 0; suffix && i < rb; ++i) {
            suffix = a.shape()[static_cast<size_t>(ra - rb + i)] == b.shape()[static_cast<size_t>(i)];
        }
        if (!suffix) {
            throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = make(a.shape(), rg);
    const auto& kt = kern::table();
    const size_t bn = static_cast<size_t>(b.numel());
    const size_t total = static_cast<size_t>(a.numel());
    if (same) {
        kt.vadd(a.data().data(), b.data().data(), out.data().data(), total);
    } else {
        for (size_t off = 0; off < total; off += bn) {
            kt.vadd(a.data().data() + off, b.data().data(), out.data().data() + off, bn);
        }
    }
    check_finite(out, "add");
    if (rg) {
        auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
        record([ai, bi, oi, bn, total] {
            if (oi->grad.empty()) {
                return;
            }
            const auto& kt2 = kern::table();
            if (ai->requires_grad) {
                kt2.axpy(1.0f, oi->grad.data(), grad_buf(ai.get()).data(), total);
            }
            if (bi->requires_grad) {
                float* bg = grad_buf(bi.get()).data();
                for (size_t off = 0; off < total; off += bn) {
                    kt2.axpy(1.0f, oi->grad.data() + off, bg, bn);
                }
            }
        });
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = make(a.shape(), rg);
    const size_t n = static_cast<size_t>(a.numel());
    kern::table().vmul(a.data().data(), b.data().data(), out.data().data(), n);
    check_finite(out, "mul");
    if (rg) {
        auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
        record([ai, bi, oi, n] {
            if (oi->grad.empty()) {
                return;
            }
            const auto& kt = kern::table();
            if (ai->requires_grad) {
                kt.vmul_acc(oi->grad.data(), bi->data.data(), grad_buf(ai.get()).data(), n);
            }
            if (bi->requires_grad) {
                kt.vmul_acc(oi->grad.data(), ai->data.data(), grad_buf(bi.get()).data(), n);
            }
        });
    }
    return out;
}

Tensor Tape::scale(const Tensor& a, float s) {
    const bool rg = a.requires_grad();
    Tensor out = make(a.shape(), rg);
    const size_t n = static_cast<size_t>(a.numel());
    kern::table().vscale(a.data().data(), s, out.data().data(), n);
    check_finite(out, "scale");
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        record([ai, oi, s, n] {
            if (oi->grad.empty()) {
                return;
            }
            kern::table().axpy(s, oi->grad.data(), grad_buf(ai.get()).data(), n);
        });
    }
    return out;
}

Tensor Tape::gelu(const Tensor& a) {
    const bool rg = a.requires_grad();
    Tensor out = make(a.shape(), rg);
    const size_t n = static_cast<size_t>(a.numel());
    const float* x = a.data().data();
    float* y = out.data().data();
    for (size_t i = 0; i < n; ++i) {
        const double xd = static_cast<double>(x[i]);
        y[i] = static_cast<float>(0.5 * xd * (1.0 + std::erf(xd * M_SQRT1_2)));
    }
    check_finite(out, "gelu");
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        record([ai, oi, n] {
            if (oi->grad.empty()) {
                return;
            }
            const float* xv = ai->data.data();
            const float* og = oi->grad.data();
            float* ag = grad_buf(ai.get()).data();
            for (size_t i = 0; i < n; ++i) {
                const double xd = static_cast<double>(xv[i]);
                const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
                const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * kPi);
                ag[i] += og[i] * static_cast<float>(cdf + xd * pdf);
            }
        });
    }
    return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (x.rank() < 1) {
        throw ShapeError("layer_norm: input must have rank >= 1");
    }
    const int64_t d = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
        throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " must be (" + std::to_string(d) +
                         ") for input " + shape_str(x.shape()));
    }
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    Tensor out = make(x.shape(), rg);
    const size_t dd = static_cast<size_t>(d);
    const size_t rows = static_cast<size_t>(x.numel()) / dd;
    std::vector<float> x_hat(static_cast<size_t>(x.numel()));
    std::vector<float> inv_std(rows);
    const float* xp = x.data().data();
    const float* g = gain.data().data();
    const float* b = bias.data().data();
    float* yp = out.data().data();
    for (size_t r = 0; r < rows; ++r) {
        const float* xr = xp + r * dd;
        double mean = 0.0;
        for (size_t j = 0; j < dd; ++j) {
            mean += xr[j];
        }
        mean /= static_cast<double>(dd);
        double var = 0.0;
        for (size_t j = 0; j < dd; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(dd);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[r] = inv;
        float* hr = x_hat.data() + r * dd;
        float* yr = yp + r * dd;
        for (size_t j = 0; j < dd; ++j) {
            hr[j] = (xr[j] - static_cast<float>(mean)) * inv;
            yr[j] = hr[j] * g[j] + b[j];
        }
    }
    check_finite(out, "layer_norm");
    if (rg) {
        auto xi = x.impl_, gi = gain.impl_, bi = bias.impl_, oi = out.impl_;
        record([xi, gi, bi, oi, rows, dd, xh = std::move(x_hat), istd = std::move(inv_std)] {
            if (oi->grad.empty()) {
                return;
            }
            const float* og = oi->grad.data();
            const float* gw = gi->data.data();
            float* xg = xi->requires_grad ? grad_buf(xi.get()).data() : nullptr;
            float* gg = gi->requires_grad ? grad_buf(gi.get()).data() : nullptr;
            float* bg = bi->requires_grad ? grad_buf(bi.get()).data() : nullptr;
            for (size_t r = 0; r < rows; ++r) {
                const float* ogr = og + r * dd;
                const float* hr = xh.data() + r * dd;
                if (gg || bg) {
                    for (size_t j = 0; j < dd; ++j) {
                        if (gg) {
                            gg[j] += ogr[j] * hr[j];
                        }
                        if (bg) {
                            bg[j] += ogr[j];
                        }
                    }
                }
                if (xg) {
                    double s1 = 0.0, s2 = 0.0;
                    for (size_t j = 0; j < dd; ++j) {
                        const double dxh = static_cast<double>(ogr[j]) * gw[j];
                        s1 += dxh;
                        s2 += dxh * hr[j];
                    }
                    s1 /= static_cast<double>(dd);
                    s2 /= static_cast<double>(dd);
                    float* xgr = xg + r * dd;
                    for (size_t j = 0; j < dd; ++j) {
                        const double dxh = static_cast<double>(ogr[j]) * gw[j];
                        xgr[j] += static_cast<float>(istd[r] * (dxh - s1 - hr[j] * s2));
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, const IdMatrix& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    }
    const int64_t v = table.dim(0);
    const int64_t d = table.dim(1);
    for (int64_t r = 0; r < ids.rows; ++r) {
        for (int64_t c = 0; c < ids.cols; ++c) {
            const int32_t id = ids.at(r, c);
            if (id < 0 || id >= v) {
                throw ShapeError("embedding_lookup: id " + std::to_string(id) + " at (" +
                                 std::to_string(r) + "," + std::to_string(c) +
                                 ") out of range [0," + std::to_string(v) + ")");
            }
        }
    }
    const bool rg = table.requires_grad();
    Tensor out = make({ids.rows, ids.cols, d}, rg);
    const size_t dd = static_cast<size_t>(d);
    const float* tp = table.data().data();
    float* op = out.data().data();
    for (int64_t p = 0; p < ids.numel(); ++p) {
        const int32_t id = ids.v[static_cast<size_t>(p)];
        std::memcpy(op + static_cast<size_t>(p) * dd, tp + static_cast<size_t>(id) * dd,
                    dd * sizeof(float));
    }
    check_finite(out, "embedding_lookup");
    if (rg) {
        auto ti = table.impl_, oi = out.impl_;
        record([ti, oi, idv = ids.v, dd] {
            if (oi->grad.empty()) {
                return;
            }
            const float* og = oi->grad.data();
            float* tg = grad_buf(ti.get()).data();
            const auto& kt = kern::table();
            for (size_t p = 0; p < idv.size(); ++p) {
                kt.axpy(1.0f, og + p * dd, tg + static_cast<size_t>(idv[p]) * dd, dd);
            }
        });
    }
    return out;
}

Tensor Tape::sum_all(const Tensor& a) {
    const bool rg = a.requires_grad();
    Tensor out = make({}, rg);
    double acc = 0.0;
    for (float x : a.data()) {
        acc += x;
    }
    out.data()[0] = static_cast<float>(acc);
    check_finite(out, "sum_all");
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        record([ai, oi] {
            if (oi->grad.empty()) {
                return;
            }
            const float g = oi->grad[0];
            float* ag = grad_buf(ai.get()).data();
            for (size_t i = 0; i < ai->data.size(); ++i) {
                ag[i] += g;
            }
        });
    }
    return out;
}

Tensor Tape::mean_all(const Tensor& a) {
    const bool rg = a.requires_grad();
    Tensor out = make({}, rg);
    double acc = 0.0;
    for (float x : a.data()) {
        acc += x;
    }
    const size_t n = static_cast<size_t>(a.numel());
    out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    check_finite(out, "mean_all");
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        record([ai, oi, n] {
            if (oi->grad.empty()) {
                return;
            }
            const float g = oi->grad[0] / static_cast<float>(n);
            float* ag = grad_buf(ai.get()).data();
            for (size_t i = 0; i < n; ++i) {
                ag[i] += g;
            }
        });
    }
    return out;
}

Tensor Tape::transpose(const Tensor& a, std::vector<int> perm) {
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r) {
        throw ShapeError("transpose: permutation size " + std::to_string(perm.size()) +
                         " does not match rank " + std::to_string(r));
    }
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) {
            throw ShapeError("transpose: invalid permutation");
        }
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    const bool rg = a.requires_grad();
    Tensor out = make(out_shape, rg);
    const auto in_strides = row_major_strides(a.shape());
    // stride to walk the input for each output axis
    std::vector<int64_t> walk(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        walk[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    const int64_t total = a.numel();
    const float* ap = a.data().data();
    float* op = out.data().data();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t in_flat = 0;
    for (int64_t o = 0; o < total; ++o) {
        op[o] = ap[in_flat];
        for (int axis = r - 1; axis >= 0; --axis) {
            const size_t ax = static_cast<size_t>(axis);
            in_flat += walk[ax];
            if (++idx[ax] < out_shape[ax]) {
                break;
            }
            in_flat -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        record([ai, oi, walk, out_shape, r, total] {
            if (oi->grad.empty()) {
                return;
            }
            const float* og = oi->grad.data();
            float* ag = grad_buf(ai.get()).data();
            std::vector<int64_t> ix(static_cast<size_t>(r), 0);
            int64_t in_flat2 = 0;
            for (int64_t o = 0; o < total; ++o) {
                ag[in_flat2] += og[o];
                for (int axis = r - 1; axis >= 0; --axis) {
                    const size_t ax = static_cast<size_t>(axis);
                    in_flat2 += walk[ax];
                    if (++ix[ax] < out_shape[ax]) {
                        break;
                    }
                    in_flat2 -= walk[ax] * out_shape[ax];
                    ix[ax] = 0;
                }
            }
        });
    }
    return out;
}

Tensor Tape::reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    }
    const bool rg = a.requires_grad();
    Tensor out = make(std::move(new_shape), rg);
    std::memcpy(out.data().data(), a.data().data(), static_cast<size_t>(a.numel()) * sizeof(float));
    if (rg) {
        auto ai = a.impl_, oi = out.impl_;
        const size_t n = static_cast<size_t>(a.numel());
        record([ai, oi, n] {
            if (oi->grad.empty()) {
                return;
            }
            kern::table().axpy(1.0f, oi->grad.data(), grad_buf(ai.get()).data(), n);
        });
    }
    return out;
}

Tensor Tape::concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ContractError("concat: no tensors given");
    }
    const int r = parts[0].rank();
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw ShapeError("concat: axis out of range");
    }
    Shape out_shape = parts[0].shape();
    int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != r) {
            throw ShapeError("concat: rank mismatch");
        }
        for (int i = 0; i < r; ++i) {
            if (i != axis && p.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)]) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()) + " on non-concat axis");
            }
        }
        axis_total += p.shape()[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;
    bool rg = false;
    for (const Tensor& p : parts) {
        rg = rg || p.requires_grad();
    }
    Tensor out = make(out_shape, rg);
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= out_shape[static_cast<size_t>(i)];
    }
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) {
        inner *= out_shape[static_cast<size_t>(i)];
    }
    const size_t out_row = static_cast<size_t>(axis_total * inner);
    float* op = out.data().data();
    size_t col_off = 0;
    for (const Tensor& p : parts) {
        const size_t block = static_cast<size_t>(p.shape()[static_cast<size_t>(axis)] * inner);
        const float* pp = p.data().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(op + static_cast<size_t>(o) * out_row + col_off,
                        pp + static_cast<size_t>(o) * block, block * sizeof(float));
        }
        col_off += block;
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<size_t> blocks;
        for (const Tensor& p : parts) {
            impls.push_back(p.impl_);
            blocks.push_back(static_cast<size_t>(p.shape()[static_cast<size_t>(axis)] * inner));
        }
        auto oi = out.impl_;
        record([oi, impls, blocks, outer, out_row] {
            if (oi->grad.empty()) {
                return;
            }
            const float* og = oi->grad.data();
            const auto& kt = kern::table();
            size_t off = 0;
            for (size_t pi = 0; pi < impls.size(); ++pi) {
                if (impls[pi]->requires_grad) {
                    float* pg = grad_buf(impls[pi].get()).data();
                    for (int64_t o = 0; o < outer; ++o) {
                        kt.axpy(1.0f, og + static_cast<size_t>(o) * out_row + off,
                                pg + static_cast<size_t>(o) * blocks[pi], blocks[pi]);
                    }
                }
                off += blocks[pi];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const size_t m = static_cast<size_t>(a.dim(0));
    const size_t k = static_cast<size_t>(a.dim(1));
    const size_t n = static_cast<size_t>(b.dim(1));
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = make({a.dim(0), b.dim(1)}, rg);
    kern::table().gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    check_finite(out, "matmul");
    if (rg) {
        auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
        record([ai, bi, oi, m, k, n] {
            if (oi->grad.empty()) {
                return;
            }
            const auto& kt = kern::table();
            const float* og = oi->grad.data();
            if (ai->requires_grad) {
                kt.gemm_nt(og, bi->data.data(), grad_buf(ai.get()).data(), m, n, k);
            }
            if (bi->requires_grad) {
                kt.gemm_tn(ai->data.data(), og, grad_buf(bi.get()).data(), m, k, n);
            }
        });
    }
    return out;
}

Tensor Tape::bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() < 3 || a.rank() != b.rank()) {
        throw ShapeError("bmm: expects equal ranks >= 3, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int r = a.rank();
    int64_t batch = 1;
    for (int i = 0; i < r - 2; ++i) {
        if (a.shape()[static_cast<size_t>(i)] != b.shape()[static_cast<size_t>(i)]) {
            throw ShapeError("bmm: leading dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        }
        batch *= a.shape()[static_cast<size_t>(i)];
    }
    const int64_t m = a.shape()[static_cast<size_t>(r - 2)];
    const int64_t k = a.shape()[static_cast<size_t>(r - 1)];
    const int64_t bk = transpose_b ? b.shape()[static_cast<size_t>(r - 1)]
                                   : b.shape()[static_cast<size_t>(r - 2)];
    const int64_t n = transpose_b ? b.shape()[static_cast<size_t>(r - 2)]
                                  : b.shape()[static_cast<size_t>(r - 1)];
    if (bk != k) {
        throw ShapeError("bmm: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = make(out_shape, rg);
    const size_t a_blk = static_cast<size_t>(m * k);
    const size_t b_blk = static_cast<size_t>(k * n);
    const size_t o_blk = static_cast<size_t>(m * n);
    const auto& kt = kern::table();
    for (int64_t s = 0; s < batch; ++s) {
        const float* ap = a.data().data() + static_cast<size_t>(s) * a_blk;
        const float* bp = b.data().data() + static_cast<size_t>(s) * b_blk;
        float* op = out.data().data() + static_cast<size_t>(s) * o_blk;
        if (transpose_b) {
            kt.gemm_nt(ap, bp, op, static_cast<size_t>(m), static_cast<size_t>(k),
                       static_cast<size_t>(n));
        } else {
            kt.gemm_nn(ap, bp, op, static_cast<size_t>(m), static_cast<size_t>(k),
                       static_cast<size_t>(n));
        }
    }
    check_finite(out, "bmm");
    if (rg) {
        auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
        record([ai, bi, oi, batch, m, k, n, a_blk, b_blk, o_blk, transpose_b] {
            if (oi->grad.empty()) {
                return;
            }
            const auto& kt2 = kern::table();
            const size_t mm = static_cast<size_t>(m), kk = static_cast<size_t>(k),
                         nn = static_cast<size_t>(n);
            for (int64_t s = 0; s < batch; ++s) {
                const float* og = oi->grad.data() + static_cast<size_t>(s) * o_blk;
                const float* ap = ai->data.data() + static_cast<size_t>(s) * a_blk;
                const float* bp = bi->data.data() + static_cast<size_t>(s) * b_blk;
                if (ai->requires_grad) {
                    float* ag = grad_buf(ai.get()).data() + static_cast<size_t>(s) * a_blk;
                    if (transpose_b) {
                        kt2.gemm_nn(og, bp, ag, mm, nn, kk); // dA += dC * B
                    } else {
                        kt2.gemm_nt(og, bp, ag, mm, nn, kk); // dA += dC * B^T
                    }
                }
                if (bi->requires_grad) {
                    float* bg = grad_buf(bi.get()).data() + static_cast<size_t>(s) * b_blk;
                    if (transpose_b) {
                        kt2.gemm_tn(og, ap, bg, mm, nn, kk); // dB += dC^T * A
                    } else {
                        kt2.gemm_tn(ap, og, bg, mm, kk, nn); // dB += A^T * dC
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax & loss

namespace {

// Softmax of one gathered slice; the exp sum is accumulated in double so
// normalized slices sum to 1 well within 1e-6.
void softmax_slice(const float* x, float* y, size_t len) {
    const float mx = kern::table().reduce_max(x, len);
    double sum = 0.0;
    for (size_t i = 0; i < len; ++i) {
        const float e = std::exp(x[i] - mx);
        y[i] = e;
        sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    kern::table().vscale(y, inv, y, len);
}

} // namespace

Tensor Tape::softmax(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw ShapeError("softmax: axis out of range for shape " + shape_str(x.shape()));
    }
    const int64_t len = x.shape()[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= x.shape()[static_cast<size_t>(i)];
    }
    for (int i = axis + 1; i < r; ++i) {
        inner *= x.shape()[static_cast<size_t>(i)];
    }
    const bool rg = x.requires_grad();
    Tensor out = make(x.shape(), rg);
    const float* xp = x.data().data();
    float* yp = out.data().data();
    const size_t slen = static_cast<size_t>(len);
    if (inner == 1) {
        for (int64_t o = 0; o < outer; ++o) {
            softmax_slice(xp + static_cast<size_t>(o) * slen, yp + static_cast<size_t>(o) * slen,
                          slen);
        }
    } else {
        std::vector<float> sx(slen), sy(slen);
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * len * inner + i;
                for (int64_t l = 0; l < len; ++l) {
                    sx[static_cast<size_t>(l)] = xp[base + l * inner];
                }
                softmax_slice(sx.data(), sy.data(), slen);
                for (int64_t l = 0; l < len; ++l) {
                    yp[base + l * inner] = sy[static_cast<size_t>(l)];
                }
            }
        }
    }
    check_finite(out, "softmax");
    if (rg) {
        auto xi = x.impl_, oi = out.impl_;
        record([xi, oi, outer, inner, len, slen] {
            if (oi->grad.empty()) {
                return;
            }
            const float* y = oi->data.data();
            const float* dy = oi->grad.data();
            float* dx = grad_buf(xi.get()).data();
            if (inner == 1) {
                for (int64_t o = 0; o < outer; ++o) {
                    const size_t off = static_cast<size_t>(o) * slen;
                    const float dotv = kern::table().dot(y + off, dy + off, slen);
                    for (size_t l = 0; l < slen; ++l) {
                        dx[off + l] += y[off + l] * (dy[off + l] - dotv);
                    }
                }
            } else {
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t i = 0; i < inner; ++i) {
                        const int64_t base = o * len * inner + i;
                        double dotv = 0.0;
                        for (int64_t l = 0; l < len; ++l) {
                            dotv += static_cast<double>(y[base + l * inner]) * dy[base + l * inner];
                        }
                        for (int64_t l = 0; l < len; ++l) {
                            dx[base + l * inner] += y[base + l * inner] *
                                (dy[base + l * inner] - static_cast<float>(dotv));
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor Tape::masked_cross_entropy(const Tensor& logits, const IdMatrix& targets, int32_t ignore_id) {
    int64_t positions = 0;
    int64_t vocab = 0;
    if (logits.rank() == 3) {
        if (targets.rows != logits.dim(0) || targets.cols != logits.dim(1)) {
            throw ShapeError("masked_cross_entropy: targets " + std::to_string(targets.rows) + "x" +
                             std::to_string(targets.cols) + " do not match logits " +
                             shape_str(logits.shape()));
        }
        positions = logits.dim(0) * logits.dim(1);
        vocab = logits.dim(2);
    } else if (logits.rank() == 2) {
        if (targets.numel() != logits.dim(0)) {
            throw ShapeError("masked_cross_entropy: targets " + std::to_string(targets.numel()) +
                             " do not match logits " + shape_str(logits.shape()));
        }
        positions = logits.dim(0);
        vocab = logits.dim(1);
    } else {
        throw ShapeError("masked_cross_entropy: logits must be rank 2 or 3, got " +
                         shape_str(logits.shape()));
    }

    std::vector<int64_t> selected;
    for (int64_t p = 0; p < positions; ++p) {
        const int32_t t = targets.v[static_cast<size_t>(p)];
        if (t == ignore_id) {
            continue;
        }
        if (t < 0 || t >= vocab) {
            throw ShapeError("masked_cross_entropy: target id " + std::to_string(t) +
                             " at position " + std::to_string(p) + " out of range [0," +
                             std::to_string(vocab) + ")");
        }
        selected.push_back(p);
    }
    if (selected.empty()) {
        throw ContractError("masked_cross_entropy: all positions ignored (empty batch)");
    }

    const size_t v = static_cast<size_t>(vocab);
    const float* lp = logits.data().data();
    std::vector<float> probs(selected.size() * v);
    double total = 0.0;
    for (size_t s = 0; s < selected.size(); ++s) {
        const float* row = lp + static_cast<size_t>(selected[s]) * v;
        float* prow = probs.data() + s * v;
        const float mx = kern::table().reduce_max(row, v);
        double sum = 0.0;
        for (size_t j = 0; j < v; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            prow[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (size_t j = 0; j < v; ++j) {
            prow[j] = static_cast<float>(prow[j] * inv);
        }
        const int32_t t = targets.v[static_cast<size_t>(selected[s])];
        const double logp = (static_cast<double>(row[static_cast<size_t>(t)]) - mx) - std::log(sum);
        total -= logp;
    }
    const bool rg = logits.requires_grad();
    Tensor out = make({}, rg);
    out.data()[0] = static_cast<float>(total / static_cast<double>(selected.size()));
    check_finite(out, "masked_cross_entropy");
    if (rg) {
        auto li = logits.impl_, oi = out.impl_;
        std::vector<int32_t> sel_targets(selected.size());
        for (size_t s = 0; s < selected.size(); ++s) {
            sel_targets[s] = targets.v[static_cast<size_t>(selected[s])];
        }
        record([li, oi, sel = std::move(selected), tg = std::move(sel_targets),
                pr = std::move(probs), v] {
            if (oi->grad.empty()) {
                return;
            }
            const float g = oi->grad[0] / static_cast<float>(sel.size());
            float* lg = grad_buf(li.get()).data();
            for (size_t s = 0; s < sel.size(); ++s) {
                float* row = lg + static_cast<size_t>(sel[s]) * v;
                const float* prow = pr.data() + s * v;
                kern::table().axpy(g, prow, row, v);
                row[static_cast<size_t>(tg[s])] -= g;
            }
        });
    }
    return out;
}

} // namespace ilm
