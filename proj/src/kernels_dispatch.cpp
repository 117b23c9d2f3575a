#include "ilm/kernels.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "ilm/errors.hpp"

namespace ilm::kern {

namespace scalar {
extern const KernelTable kTable;
}

#if defined(ILM_HAVE_AVX2_TU)
namespace avx2 {
extern const KernelTable kTable;
}
#endif

namespace {

bool host_has_avx2() {
#if defined(ILM_HAVE_AVX2_TU) && defined(__x86_64__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend detect_backend() {
    if (const char* env = std::getenv("ILM_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) {
            return Backend::scalar;
        }
        if (std::strcmp(env, "avx2") == 0) {
            if (!host_has_avx2()) {
                throw ConfigError("ILM_KERNELS=avx2 requested but AVX2+FMA not available on this host");
            }
            return Backend::avx2;
        }
        if (std::strcmp(env, "auto") != 0) {
            throw ConfigError(std::string("ILM_KERNELS must be scalar, avx2 or auto; got '") + env + "'");
        }
    }
    return host_has_avx2() ? Backend::avx2 : Backend::scalar;
}

Backend& active() {
    static Backend b = detect_backend();
    return b;
}

} // namespace

bool backend_supported(Backend b) {
    switch (b) {
    case Backend::scalar:
        return true;
    case Backend::avx2:
        return host_has_avx2();
    }
    return false;
}

std::string backend_name(Backend b) {
    switch (b) {
    case Backend::scalar:
        return "scalar";
    case Backend::avx2:
        return "avx2";
    }
    return "?";
}

const KernelTable& table_for(Backend b) {
    switch (b) {
    case Backend::scalar:
        return scalar::kTable;
    case Backend::avx2:
#if defined(ILM_HAVE_AVX2_TU)
        if (host_has_avx2()) {
            return avx2::kTable;
        }
#endif
        throw ConfigError("avx2 kernels not available on this host");
    }
    throw ConfigError("unknown kernel backend");
}

const KernelTable& table() {
    return table_for(active());
}

Backend active_backend() {
    return active();
}

void set_backend(Backend b) {
    if (!backend_supported(b)) {
        throw ConfigError("kernel backend '" + backend_name(b) + "' not supported on this host");
    }
    active() = b;
}

} // namespace ilm::kern
