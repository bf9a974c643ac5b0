#pragma once

#include <algorithm>
#include <cstddef>

// Dense kernels shared by the convolution ops. All matrices are row-major
// with explicit leading dimensions; every routine accumulates into C.
namespace adsam::detail {

// C(m x n) += A(m x k) * B(k x n), where A(i, p) = a[i * a_row + p * a_col].
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_row, std::size_t a_col,
              const T* __restrict b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t kBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + i * ldc + j0;
      T* __restrict c1 = c0 + ldc;
      T* __restrict c2 = c1 + ldc;
      T* __restrict c3 = c2 + ldc;
      for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a + i * a_row + p * a_col;
        const T a0 = ap[0], a1 = ap[a_row], a2 = ap[2 * a_row], a3 = ap[3 * a_row];
        const T* __restrict br = b + p * ldb + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) {
          const T bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict c0 = c + i * ldc + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[i * a_row + p * a_col];
        const T* __restrict br = b + p * ldb + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) c0[j] += a0 * br[j];
      }
    }
  }
}

template <typename T>
T dot(const T* __restrict x, const T* __restrict y, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

// C(m x n) += A(m x k) * B(n x k)^T.
template <typename T>
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] += dot(a + i * lda, b + j * ldb, k);
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, oh, ow, stride, padding;

  std::size_t taps() const { return cin * kh * kw; }
  std::size_t out_area() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

// cols[(ci, ky, kx)][(oy, ox)] = x[ci][oy*s + ky - pad][ox*s + kx - pad], zero outside.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * g.out_area();
        const T* plane = x + ci * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - pad;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_acc(const ConvGeometry& g, const T* cols, T* gx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * g.out_area();
        T* plane = gx + ci * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const T* src = row + oy * g.ow;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace adsam::detail
