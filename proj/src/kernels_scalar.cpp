// Scalar reference kernels. These define the semantics; the SIMD variants
// must match them within floating-point reassociation tolerance.

#include "ilm/kernels.hpp"

#include <cmath>

namespace ilm::kern::scalar {

void gemm_nn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void gemm_nt(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const float* brow = b + j * k;
            float acc = 0.0f;
            for (size_t kk = 0; kk < k; ++kk) {
                acc += arow[kk] * brow[kk];
            }
            crow[j] += acc;
        }
    }
}

void gemm_tn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        const float* brow = b + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            float* crow = c + kk * n;
            for (size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

float dot(const float* x, const float* y, size_t n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        acc += x[i] * y[i];
    }
    return acc;
}

void axpy(float a, const float* x, float* y, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        y[i] += a * x[i];
    }
}

void vadd(const float* x, const float* y, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        out[i] = x[i] + y[i];
    }
}

void vmul(const float* x, const float* y, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        out[i] = x[i] * y[i];
    }
}

void vmul_acc(const float* x, const float* y, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        out[i] += x[i] * y[i];
    }
}

void vscale(const float* x, float a, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        out[i] = a * x[i];
    }
}

float reduce_sum(const float* x, size_t n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        acc += x[i];
    }
    return acc;
}

float reduce_max(const float* x, size_t n) {
    float best = x[0];
    for (size_t i = 1; i < n; ++i) {
        best = x[i] > best ? x[i] : best;
    }
    return best;
}

float sum_squares(const float* x, size_t n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        acc += x[i] * x[i];
    }
    return acc;
}

void adam_update(float* p, const float* g, float* m, float* v, size_t n, float lr, float beta1,
                 float beta2, float eps, float bc1, float bc2) {
    for (size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        const float m_hat = m[i] / bc1;
        const float v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

extern const KernelTable kTable;
const KernelTable kTable = {
    gemm_nn, gemm_nt, gemm_tn, dot,        axpy,       vadd,        vmul,
    vmul_acc, vscale, reduce_sum, reduce_max, sum_squares, adam_update,
};

} // namespace ilm::kern::scalar
