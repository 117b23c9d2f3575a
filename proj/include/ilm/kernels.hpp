#pragma once

#include <cstddef>
#include <string>

namespace ilm::kern {

// Dense f32 primitives behind the tensor ops. Two implementations exist: a
// scalar reference and an AVX2/FMA variant; the active one is chosen at
// runtime from cpuid, overridable with the ILM_KERNELS env var or
// set_backend(). The variants are equivalence-tested against each other;
// within one process the selection is fixed, so results stay deterministic.
enum class Backend { scalar, avx2 };

struct KernelTable {
    // All matrices row-major. gemm kernels accumulate into c.
    // c[m,n] += a[m,k] * b[k,n]
    void (*gemm_nn)(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);
    // c[m,n] += a[m,k] * b^T, b stored [n,k]
    void (*gemm_nt)(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);
    // c[k,n] += a^T * b, a stored [m,k], b stored [m,n]
    void (*gemm_tn)(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);

    float (*dot)(const float* x, const float* y, size_t n);
    void (*axpy)(float a, const float* x, float* y, size_t n); // y += a*x
    void (*vadd)(const float* x, const float* y, float* out, size_t n);
    void (*vmul)(const float* x, const float* y, float* out, size_t n);
    void (*vmul_acc)(const float* x, const float* y, float* out, size_t n); // out += x*y
    void (*vscale)(const float* x, float a, float* out, size_t n);
    float (*reduce_sum)(const float* x, size_t n);
    float (*reduce_max)(const float* x, size_t n); // n >= 1
    float (*sum_squares)(const float* x, size_t n);

    // Fused Adam update. bc1 = 1 - beta1^t, bc2 = 1 - beta2^t.
    void (*adam_update)(float* p, const float* g, float* m, float* v, size_t n, float lr,
                        float beta1, float beta2, float eps, float bc1, float bc2);
};

const KernelTable& table();
const KernelTable& table_for(Backend b); // throws if unsupported

Backend active_backend();
void set_backend(Backend b); // throws ConfigError if unsupported on this host
bool backend_supported(Backend b);
std::string backend_name(Backend b);

} // namespace ilm::kern
