#pragma once

#include <cstddef>
#include <span>
#include <string_view>

// Dense kernels behind the probes and PCA. Each kernel has a serial reference
// and an OpenMP version that splits the work over output rows (column tiles for matmul_nt). Both variants
// evaluate every output element with the same instruction sequence, so their
// results are bit-identical for any thread count.
//
// All matrices are row-major spans; shapes are passed explicitly.
namespace hsprobe::kernels {

namespace serial {

// out[n x m] = a[n x k] * b[m x k]^T (+ bias[m] when non-empty)
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m);

// out[n x m] = a[n x k] * b[k x m]
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m);

// out[k x m] += a[n x k]^T * b[n x m]
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m);

// scatter[d x d] += sum_r (x_r - center)(x_r - center)^T over the n rows of x.
void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d);

}  // namespace serial

namespace parallel {

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m);
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m);
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m);
void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d);

}  // namespace parallel

// Dispatching entry points: parallel when the problem is large enough and the
// caller is not already inside a parallel region, serial otherwise.
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<const double> bias,
               std::span<double> out, std::size_t n, std::size_t k, std::size_t m);
void matmul_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
               std::size_t n, std::size_t k, std::size_t m);
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m);
void scatter_acc(std::span<const double> x, std::span<const double> center,
                 std::span<double> scatter, std::size_t n, std::size_t d);

double dot(const double* a, const double* b, std::size_t n) noexcept;

// Instruction set of the kernels in use: "avx512", "avx2" or "base". Picked
// once from CPU features; HSPROBE_ISA=avx2|base in the environment caps it.
std::string_view active_isa() noexcept;

// Threads available to parallel kernels (1 without OpenMP).
int max_threads() noexcept;
bool in_parallel() noexcept;

}  // namespace hsprobe::kernels
