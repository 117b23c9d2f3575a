// AVX2/FMA kernel variants. Built only on x86-64 (this translation unit is
// compiled with -mavx2 -mfma); the dispatcher gates selection on cpuid so the
// code never runs on hosts without the instructions.

#include "ilm/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>

namespace ilm::kern::avx2 {

namespace {

inline float hsum(__m256 x) {
    __m128 lo = _mm256_castps256_ps128(x);
    __m128 hi = _mm256_extractf128_ps(x, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_movehdup_ps(lo));
    return _mm_cvtss_f32(lo);
}

inline float hmax(__m256 x) {
    __m128 lo = _mm256_castps256_ps128(x);
    __m128 hi = _mm256_extractf128_ps(x, 1);
    lo = _mm_max_ps(lo, hi);
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_movehdup_ps(lo));
    return _mm_cvtss_f32(lo);
}

} // namespace

void gemm_nn(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const __m256 va = _mm256_set1_ps(arow[kk]);
            const float* brow = b + kk * n;
            size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 vc = _mm256_loadu_ps(crow + j);
                vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), vc);
                _mm256_storeu_ps(crow + j, vc);
            }
            const float av = arow[kk];
            for (; j < n; ++j) {
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
            __m256 vacc = _mm256_setzero_ps();
            size_t kk = 0;
            for (; kk + 8 <= k; kk += 8) {
                vacc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + kk), _mm256_loadu_ps(brow + kk), vacc);
            }
            float acc = hsum(vacc);
            for (; kk < k; ++kk) {
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
            const __m256 va = _mm256_set1_ps(arow[kk]);
            float* crow = c + kk * n;
            size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 vc = _mm256_loadu_ps(crow + j);
                vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), vc);
                _mm256_storeu_ps(crow + j, vc);
            }
            const float av = arow[kk];
            for (; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

float dot(const float* x, const float* y, size_t n) {
    __m256 vacc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        vacc = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), vacc);
    }
    float acc = hsum(vacc);
    for (; i < n; ++i) {
        acc += x[i] * y[i];
    }
    return acc;
}

void axpy(float a, const float* x, float* y, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 vy = _mm256_loadu_ps(y + i);
        vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
        _mm256_storeu_ps(y + i, vy);
    }
    for (; i < n; ++i) {
        y[i] += a * x[i];
    }
}

void vadd(const float* x, const float* y, float* out, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) {
        out[i] = x[i] + y[i];
    }
}

void vmul(const float* x, const float* y, float* out, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) {
        out[i] = x[i] * y[i];
    }
}

void vmul_acc(const float* x, const float* y, float* out, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 vo = _mm256_loadu_ps(out + i);
        vo = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), vo);
        _mm256_storeu_ps(out + i, vo);
    }
    for (; i < n; ++i) {
        out[i] += x[i] * y[i];
    }
}

void vscale(const float* x, float a, float* out, size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    }
    for (; i < n; ++i) {
        out[i] = a * x[i];
    }
}

float reduce_sum(const float* x, size_t n) {
    __m256 vacc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        vacc = _mm256_add_ps(vacc, _mm256_loadu_ps(x + i));
    }
    float acc = hsum(vacc);
    for (; i < n; ++i) {
        acc += x[i];
    }
    return acc;
}

float reduce_max(const float* x, size_t n) {
    if (n < 8) {
        float best = x[0];
        for (size_t i = 1; i < n; ++i) {
            best = x[i] > best ? x[i] : best;
        }
        return best;
    }
    __m256 vbest = _mm256_loadu_ps(x);
    size_t i = 8;
    for (; i + 8 <= n; i += 8) {
        vbest = _mm256_max_ps(vbest, _mm256_loadu_ps(x + i));
    }
    float best = hmax(vbest);
    for (; i < n; ++i) {
        best = x[i] > best ? x[i] : best;
    }
    return best;
}

float sum_squares(const float* x, size_t n) {
    __m256 vacc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 vx = _mm256_loadu_ps(x + i);
        vacc = _mm256_fmadd_ps(vx, vx, vacc);
    }
    float acc = hsum(vacc);
    for (; i < n; ++i) {
        acc += x[i] * x[i];
    }
    return acc;
}

void adam_update(float* p, const float* g, float* m, float* v, size_t n, float lr, float beta1,
                 float beta2, float eps, float bc1, float bc2) {
    const __m256 vb1 = _mm256_set1_ps(beta1);
    const __m256 vb2 = _mm256_set1_ps(beta2);
    const __m256 vomb1 = _mm256_set1_ps(1.0f - beta1);
    const __m256 vomb2 = _mm256_set1_ps(1.0f - beta2);
    const __m256 vlr = _mm256_set1_ps(lr);
    const __m256 veps = _mm256_set1_ps(eps);
    const __m256 vibc1 = _mm256_set1_ps(1.0f / bc1);
    const __m256 vibc2 = _mm256_set1_ps(1.0f / bc2);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 vg = _mm256_loadu_ps(g + i);
        __m256 vm = _mm256_loadu_ps(m + i);
        __m256 vv = _mm256_loadu_ps(v + i);
        vm = _mm256_add_ps(_mm256_mul_ps(vb1, vm), _mm256_mul_ps(vomb1, vg));
        vv = _mm256_add_ps(_mm256_mul_ps(vb2, vv), _mm256_mul_ps(vomb2, _mm256_mul_ps(vg, vg)));
        _mm256_storeu_ps(m + i, vm);
        _mm256_storeu_ps(v + i, vv);
        const __m256 m_hat = _mm256_mul_ps(vm, vibc1);
        const __m256 v_hat = _mm256_mul_ps(vv, vibc2);
        const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(v_hat), veps);
        __m256 vp = _mm256_loadu_ps(p + i);
        vp = _mm256_sub_ps(vp, _mm256_div_ps(_mm256_mul_ps(vlr, m_hat), denom));
        _mm256_storeu_ps(p + i, vp);
    }
    for (; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        const float m_hat = m[i] * (1.0f / bc1);
        const float v_hat = v[i] * (1.0f / bc2);
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

extern const KernelTable kTable;
const KernelTable kTable = {
    gemm_nn, gemm_nt, gemm_tn, dot,        axpy,       vadd,        vmul,
    vmul_acc, vscale, reduce_sum, reduce_max, sum_squares, adam_update,
};

} // namespace ilm::kern::avx2

#endif // __AVX2__ && __FMA__
