#include "hsprobe/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cstdlib>
#include <string_view>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__) && !defined(HSPROBE_NO_ISA_DISPATCH)
#define HSPROBE_ISA_DISPATCH 1
#endif

namespace hsprobe::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 16;

// Register blocking: four output rows by kPanel output columns are kept in
// accumulators while the reduction index runs. Every output element is the
// sequential sum over the reduction index (the same multiply-add sequence in
// the blocked and the remainder paths), so results do not depend on how rows
// or columns are grouped, on n, or on the thread split.
constexpr std::size_t kPanel = 8;
constexpr std::size_t kRows = 4;

constexpr std::size_t panel_count(std::size_t m) {
    return (m + kPanel - 1) / kPanel;
}

constexpr std::size_t row_blocks(std::size_t n) {
    return (n + kRows - 1) / kRows;
}

// The same bodies compiled for baseline x86-64, AVX2+FMA and AVX-512. The
// variant is picked once from CPU feature bits (not the CPU model, which
// virtual machines often hide). Within one variant every path uses the same
// multiply-add contraction, so the serial/parallel equality holds per variant.
namespace isa_base {
#include "kernels_body.inc"
}  // namespace isa_base

#if defined(HSPROBE_ISA_DISPATCH)
namespace isa_avx2 {
#pragma GCC push_options
#pragma GCC target("avx2,fma")
#include "kernels_body.inc"
#pragma GCC pop_options
}  // namespace isa_avx2

namespace isa_avx512 {
#pragma GCC push_options
#pragma GCC target("avx512f,avx512vl,avx2,fma")
#include "kernels_body.inc"
#pragma GCC pop_options
}  // namespace isa_avx512
#endif

struct KernelTable {
    std::string_view name;
    decltype(&isa_base::nt_panel) nt_panel;
    decltype(&isa_base::nn_rows) nn_rows;
    decltype(&isa_base::tn_rows) tn_rows;
    decltype(&isa_base::scatter_row) scatter_row;
    decltype(&isa_base::dot) dot;
};

#define HSPROBE_TABLE(ns, label) \
    KernelTable { label, ns::nt_panel, ns::nn_rows, ns::tn_rows, ns::scatter_row, ns::dot }

KernelTable pick_table() {
    const char* forced = std::getenv("HSPROBE_ISA");
    const std::string_view want = forced != nullptr ? forced : "";
#if defined(HSPROBE_ISA_DISPATCH)
    __builtin_cpu_init();
    const bool fma = __builtin_cpu_supports("fma") && __builtin_cpu_supports("avx2");
    const bool avx512 = fma && __builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512vl");
    if (avx512 && (want.empty() || want == "avx512")) {
        return HSPROBE_TABLE(isa_avx512, "avx512");
    }
    if (fma && (want.empty() || want == "avx512" || want == "avx2")) {
        return HSPROBE_TABLE(isa_avx2, "avx2");
    }
#endif
    return HSPROBE_TABLE(isa_base, "base");
}

#undef HSPROBE_TABLE

const KernelTable& table() {
    static const KernelTable t = pick_table();
    return t;
}

bool worth_parallel(std::size_t work) {
    return work >= kParallelWork && max_threads() > 1 && !in_parallel();
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) noexcept {
    return table().dot(a, b, n);
}

std::string_view active_isa() noexcept {
    return table().name;
}

int max_threads() noexcept {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool in_parallel() noexcept {
#if defined(_OPENMP)
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

namespace serial {

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= m * k && out.size() >= n * m);
    std::vector<double> panel(k * kPanel);
    for (std::size_t t = 0; t < panel_count(m); ++t) {
        table().nt_panel(a, b, bias, out, n, k, m, kPanel * t, panel.data());
    }
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= k * m && out.size() >= n * m);
    for (std::size_t i = 0; i < n; i += kRows) {
        table().nn_rows(a, b, out, i, std::min(kRows, n - i), k, m);
    }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= n * m && out.size() >= k * m);
    for (std::size_t i = 0; i < k; i += kRows) {
        table().tn_rows(a, b, out, i, std::min(kRows, k - i), n, k, m);
    }
}

void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d) {
    assert(x.size() >= n * d && center.size() == d && scatter.size() == d * d);
    for (std::size_t i = 0; i < d; ++i) {
        table().scatter_row(x, center, scatter.data() + i * d, i, n, d);
    }
}

}  // namespace serial

namespace parallel {

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= m * k && out.size() >= n * m);
    const auto panels = static_cast<std::ptrdiff_t>(panel_count(m));
#pragma omp parallel
    {
        std::vector<double> panel(k * kPanel);
#pragma omp for schedule(static)
        for (std::ptrdiff_t t = 0; t < panels; ++t) {
            table().nt_panel(a, b, bias, out, n, k, m, kPanel * static_cast<std::size_t>(t), panel.data());
        }
    }
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= k * m && out.size() >= n * m);
    const auto blocks = static_cast<std::ptrdiff_t>(row_blocks(n));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < blocks; ++t) {
        const auto i = kRows * static_cast<std::size_t>(t);
        table().nn_rows(a, b, out, i, std::min(kRows, n - i), k, m);
    }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m) {
    assert(a.size() >= n * k && b.size() >= n * m && out.size() >= k * m);
    const auto blocks = static_cast<std::ptrdiff_t>(row_blocks(k));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < blocks; ++t) {
        const auto i = kRows * static_cast<std::size_t>(t);
        table().tn_rows(a, b, out, i, std::min(kRows, k - i), n, k, m);
    }
}

void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d) {
    assert(x.size() >= n * d && center.size() == d && scatter.size() == d * d);
    const auto rows = static_cast<std::ptrdiff_t>(d);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        table().scatter_row(x, center, scatter.data() + r * d, r, n, d);
    }
}

}  // namespace parallel

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m) {
    if (worth_parallel(n * k * m)) {
        parallel::matmul_nt(a, b, bias, out, n, k, m);
    } else {
        serial::matmul_nt(a, b, bias, out, n, k, m);
    }
}

void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m) {
    if (worth_parallel(n * k * m)) {
        parallel::matmul_nn(a, b, out, n, k, m);
    } else {
        serial::matmul_nn(a, b, out, n, k, m);
    }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m) {
    if (worth_parallel(n * k * m)) {
        parallel::matmul_tn_acc(a, b, out, n, k, m);
    } else {
        serial::matmul_tn_acc(a, b, out, n, k, m);
    }
}

void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d) {
    if (worth_parallel(n * d * d)) {
        parallel::scatter_acc(x, center, scatter, n, d);
    } else {
        serial::scatter_acc(x, center, scatter, n, d);
    }
}

}  // namespace hsprobe::kernels
