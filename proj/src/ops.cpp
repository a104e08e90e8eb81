#include "m3snet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#ifdef _OPENMP
#define M3S_PARALLEL_FOR _Pragma("omp parallel for schedule(static)")
#else
#define M3S_PARALLEL_FOR
#endif

namespace m3snet {

namespace {

thread_local MacCounter* g_counter = nullptr;

using i64 = std::int64_t;

std::string axis_msg(const char* op, const char* what, const Shape& shape) {
  return std::string(op) + ": " + what + " (shape " + to_string(shape) + ")";
}

template <typename T>
inline T dot(const T* a, const T* b, i64 n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
  i64 i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
    s4 += a[i + 4] * b[i + 4];
    s5 += a[i + 5] * b[i + 5];
    s6 += a[i + 6] * b[i + 6];
    s7 += a[i + 7] * b[i + 7];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
}

template <typename T>
inline T sum(const T* a, i64 n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  i64 i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    s1 += a[i + 1];
    s2 += a[i + 2];
    s3 += a[i + 3];
  }
  for (; i < n; ++i) s0 += a[i];
  return (s0 + s1) + (s2 + s3);
}

// Valid output range [lo, hi) along one axis for kernel tap `k`.
inline void tap_range(i64 k, i64 stride, i64 pad, i64 in_len, i64 out_len, i64& lo, i64& hi) {
  // ix = ox * stride + k - pad must lie in [0, in_len).
  const i64 first = pad - k;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const i64 last = in_len - 1 + pad - k;
  hi = last < 0 ? 0 : std::min(out_len, last / stride + 1);
  if (hi < lo) hi = lo;
}

// 1x1 convolution kernels on (N, C, P) planes. Output channels are processed
// in blocks of four so each input tile is read once per block.
constexpr i64 kTile = 256;
constexpr i64 kBlock = 4;

template <typename T>
void pointwise_forward(i64 batch, i64 cin, i64 cout, i64 plane, const T* x, const T* wt, const T* bias, T* out) {
  const i64 tiles = (plane + kTile - 1) / kTile;
  M3S_PARALLEL_FOR
  for (i64 job = 0; job < batch * tiles; ++job) {
    const i64 n = job / tiles, p0 = (job % tiles) * kTile;
    const i64 len = std::min(kTile, plane - p0);
    const T* xin = x + n * cin * plane + p0;
    for (i64 o0 = 0; o0 < cout; o0 += kBlock) {
      const i64 ob = std::min(kBlock, cout - o0);
      alignas(64) T acc[kBlock][kTile];
      for (i64 i = 0; i < ob; ++i) std::fill_n(acc[i], len, bias ? bias[o0 + i] : T(0));
      for (i64 c = 0; c < cin; ++c) {
        const T* xr = xin + c * plane;
        if (ob == kBlock) {
          const T w0 = wt[o0 * cin + c], w1 = wt[(o0 + 1) * cin + c];
          const T w2 = wt[(o0 + 2) * cin + c], w3 = wt[(o0 + 3) * cin + c];
          for (i64 p = 0; p < len; ++p) {
            const T v = xr[p];
            acc[0][p] += w0 * v;
            acc[1][p] += w1 * v;
            acc[2][p] += w2 * v;
            acc[3][p] += w3 * v;
          }
        } else {
          for (i64 i = 0; i < ob; ++i) {
            const T wv = wt[(o0 + i) * cin + c];
            for (i64 p = 0; p < len; ++p) acc[i][p] += wv * xr[p];
          }
        }
      }
      for (i64 i = 0; i < ob; ++i) std::copy_n(acc[i], len, out + (n * cout + o0 + i) * plane + p0);
    }
  }
}

template <typename T>
void pointwise_backward_input(i64 batch, i64 cin, i64 cout, i64 plane, const T* gout, const T* wt, T* gx) {
  const i64 tiles = (plane + kTile - 1) / kTile;
  M3S_PARALLEL_FOR
  for (i64 job = 0; job < batch * tiles; ++job) {
    const i64 n = job / tiles, p0 = (job % tiles) * kTile;
    const i64 len = std::min(kTile, plane - p0);
    const T* gin = gout + n * cout * plane + p0;
    for (i64 c0 = 0; c0 < cin; c0 += kBlock) {
      const i64 cb = std::min(kBlock, cin - c0);
      alignas(64) T acc[kBlock][kTile];
      for (i64 j = 0; j < cb; ++j) std::copy_n(gx + (n * cin + c0 + j) * plane + p0, len, acc[j]);
      for (i64 o = 0; o < cout; ++o) {
        const T* gr = gin + o * plane;
        const T* wrow = wt + o * cin + c0;
        if (cb == kBlock) {
          const T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2], w3 = wrow[3];
          for (i64 p = 0; p < len; ++p) {
            const T v = gr[p];
            acc[0][p] += w0 * v;
            acc[1][p] += w1 * v;
            acc[2][p] += w2 * v;
            acc[3][p] += w3 * v;
          }
        } else {
          for (i64 j = 0; j < cb; ++j)
            for (i64 p = 0; p < len; ++p) acc[j][p] += wrow[j] * gr[p];
        }
      }
      for (i64 j = 0; j < cb; ++j) std::copy_n(acc[j], len, gx + (n * cin + c0 + j) * plane + p0);
    }
  }
}

template <typename T>
void pointwise_backward_weight(i64 batch, i64 cin, i64 cout, i64 plane, const T* gout, const T* x, T* gw, T* gb) {
  using V [[gnu::vector_size(64)]] = T;
  constexpr i64 kLanes = static_cast<i64>(sizeof(V) / sizeof(T));
  const i64 oblocks = (cout + kBlock - 1) / kBlock;
  M3S_PARALLEL_FOR
  for (i64 obi = 0; obi < oblocks; ++obi) {
    const i64 o0 = obi * kBlock, ob = std::min(kBlock, cout - o0);
    if (gb) {
      for (i64 i = 0; i < ob; ++i) {
        T acc = 0;
        for (i64 n = 0; n < batch; ++n) acc += sum(gout + (n * cout + o0 + i) * plane, plane);
        gb[o0 + i] += acc;
      }
    }
    for (i64 c0 = 0; c0 < cin; c0 += kBlock) {
      const i64 cb = std::min(kBlock, cin - c0);
      V acc[kBlock][kBlock] = {};
      T tail[kBlock][kBlock] = {};
      for (i64 n = 0; n < batch; ++n) {
        const T* gr[kBlock];
        const T* xr[kBlock];
        for (i64 i = 0; i < kBlock; ++i) gr[i] = gout + (n * cout + o0 + std::min(i, ob - 1)) * plane;
        for (i64 j = 0; j < kBlock; ++j) xr[j] = x + (n * cin + c0 + std::min(j, cb - 1)) * plane;
        i64 p = 0;
        for (; p + kLanes <= plane; p += kLanes) {
          V gv[kBlock], xv[kBlock];
          for (i64 i = 0; i < kBlock; ++i) std::memcpy(&gv[i], gr[i] + p, sizeof(V));
          for (i64 j = 0; j < kBlock; ++j) std::memcpy(&xv[j], xr[j] + p, sizeof(V));
          for (i64 i = 0; i < kBlock; ++i)
            for (i64 j = 0; j < kBlock; ++j) acc[i][j] += gv[i] * xv[j];
        }
        for (; p < plane; ++p)
          for (i64 i = 0; i < kBlock; ++i)
            for (i64 j = 0; j < kBlock; ++j) tail[i][j] += gr[i][p] * xr[j][p];
      }
      for (i64 i = 0; i < ob; ++i)
        for (i64 j = 0; j < cb; ++j) {
          T lanes[kLanes];
          std::memcpy(lanes, &acc[i][j], sizeof(V));
          gw[(o0 + i) * cin + c0 + j] += sum(lanes, kLanes) + tail[i][j];
        }
    }
  }
}

struct ConvGeom {
  i64 n, cin, h, w, cout, k, ho, wo, stride, pad, groups, cin_g, cout_g;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  bool depthwise3() const { return groups == cin && cin == cout && k == 3 && stride == 1 && pad == 1; }
  // Non-overlapping k x k patches: equal to a 1x1 conv on the space-to-depth input.
  bool patchwise() const { return groups == 1 && k > 1 && stride == k && pad == 0 && h % k == 0 && w % k == 0; }
};

// dst += correlate(src, taps) with zero padding 1 on an h x w plane.
template <typename T>
void depthwise3_accumulate(const T* src, T* dst, i64 h, i64 w, const T* taps) {
  for (i64 y = 0; y < h; ++y) {
    T* d = dst + y * w;
    for (i64 ky = 0; ky < 3; ++ky) {
      const i64 iy = y + ky - 1;
      if (iy < 0 || iy >= h) continue;
      const T* r = src + iy * w;
      const T w0 = taps[ky * 3], w1 = taps[ky * 3 + 1], w2 = taps[ky * 3 + 2];
      if (w == 1) {
        d[0] += w1 * r[0];
        continue;
      }
      d[0] += w1 * r[0] + w2 * r[1];
      for (i64 x = 1; x < w - 1; ++x) d[x] += w0 * r[x - 1] + w1 * r[x] + w2 * r[x + 1];
      d[w - 1] += w0 * r[w - 2] + w1 * r[w - 1];
    }
  }
}

// taps[ky][kx] += sum_y,x g[y][x] * src[y + ky - 1][x + kx - 1] (zero padding 1).
template <typename T>
void depthwise3_weight_grad(const T* g, const T* src, i64 h, i64 w, T* taps) {
  for (i64 ky = 0; ky < 3; ++ky) {
    T a0 = 0, a1 = 0, a2 = 0;
    for (i64 y = 0; y < h; ++y) {
      const i64 iy = y + ky - 1;
      if (iy < 0 || iy >= h) continue;
      const T* gr = g + y * w;
      const T* r = src + iy * w;
      a1 += dot(gr, r, w);
      if (w > 1) {
        a0 += dot(gr + 1, r, w - 1);
        a2 += dot(gr, r + 1, w - 1);
      }
    }
    taps[ky * 3] += a0;
    taps[ky * 3 + 1] += a1;
    taps[ky * 3 + 2] += a2;
  }
}

// (N, C, H, W) -> (N, C k k, H/k, W/k), channel index c k^2 + dy k + dx.
template <typename T>
void space_to_depth(const ConvGeom& g, const T* x, T* out) {
  const i64 k = g.k;
  for (i64 n = 0; n < g.n; ++n)
    for (i64 c = 0; c < g.cin; ++c)
      for (i64 dy = 0; dy < k; ++dy)
        for (i64 dx = 0; dx < k; ++dx) {
          T* dst = out + ((n * g.cin + c) * k * k + dy * k + dx) * g.ho * g.wo;
          const T* src = x + (n * g.cin + c) * g.h * g.w;
          for (i64 y = 0; y < g.ho; ++y)
            for (i64 xx = 0; xx < g.wo; ++xx) dst[y * g.wo + xx] = src[(y * k + dy) * g.w + xx * k + dx];
        }
}

template <typename T>
void depth_to_space_add(const ConvGeom& g, const T* in, T* x) {
  const i64 k = g.k;
  for (i64 n = 0; n < g.n; ++n)
    for (i64 c = 0; c < g.cin; ++c)
      for (i64 dy = 0; dy < k; ++dy)
        for (i64 dx = 0; dx < k; ++dx) {
          const T* src = in + ((n * g.cin + c) * k * k + dy * k + dx) * g.ho * g.wo;
          T* dst = x + (n * g.cin + c) * g.h * g.w;
          for (i64 y = 0; y < g.ho; ++y)
            for (i64 xx = 0; xx < g.wo; ++xx) dst[(y * k + dy) * g.w + xx * k + dx] += src[y * g.wo + xx];
        }
}

template <typename T>
void conv_forward(const ConvGeom& g, const T* x, const T* wt, const T* bias, T* out) {
  const i64 plane_in = g.h * g.w, plane_out = g.ho * g.wo;
  if (g.pointwise() && g.groups == 1) {
    pointwise_forward(g.n, g.cin, g.cout, plane_in, x, wt, bias, out);
    return;
  }
  if (g.patchwise()) {
    Buffer<T> packed(static_cast<std::size_t>(g.n * g.cin * g.k * g.k * plane_out));
    space_to_depth(g, x, packed.data());
    pointwise_forward(g.n, g.cin * g.k * g.k, g.cout, plane_out, packed.data(), wt, bias, out);
    return;
  }
  if (g.depthwise3()) {
    M3S_PARALLEL_FOR
    for (i64 job = 0; job < g.n * g.cout; ++job) {
      const i64 c = job % g.cout;
      T* dst = out + job * plane_out;
      std::fill(dst, dst + plane_out, bias ? bias[c] : T(0));
      depthwise3_accumulate(x + job * plane_in, dst, g.h, g.w, wt + c * 9);
    }
    return;
  }
  M3S_PARALLEL_FOR
  for (i64 job = 0; job < g.n * g.cout; ++job) {
    const i64 n = job / g.cout, o = job % g.cout;
    T* dst = out + job * plane_out;
    std::fill(dst, dst + plane_out, bias ? bias[o] : T(0));
    const i64 grp = o / g.cout_g;
    for (i64 cl = 0; cl < g.cin_g; ++cl) {
      const T* src = x + (n * g.cin + grp * g.cin_g + cl) * plane_in;
      for (i64 ky = 0; ky < g.k; ++ky) {
        i64 ylo, yhi;
        tap_range(ky, g.stride, g.pad, g.h, g.ho, ylo, yhi);
        for (i64 kx = 0; kx < g.k; ++kx) {
          i64 xlo, xhi;
          tap_range(kx, g.stride, g.pad, g.w, g.wo, xlo, xhi);
          const T wv = wt[((o * g.cin_g + cl) * g.k + ky) * g.k + kx];
          for (i64 oy = ylo; oy < yhi; ++oy) {
            const T* srow = src + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
            T* drow = dst + oy * g.wo;
            if (g.stride == 1) {
              for (i64 ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox];
            } else {
              for (i64 ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input(const ConvGeom& g, const T* gout, const T* wt, T* gx) {
  const i64 plane_in = g.h * g.w, plane_out = g.ho * g.wo;
  if (g.pointwise() && g.groups == 1) {
    pointwise_backward_input(g.n, g.cin, g.cout, plane_in, gout, wt, gx);
    return;
  }
  if (g.patchwise()) {
    Buffer<T> packed(static_cast<std::size_t>(g.n * g.cin * g.k * g.k * plane_out), T(0));
    pointwise_backward_input(g.n, g.cin * g.k * g.k, g.cout, plane_out, gout, wt, packed.data());
    depth_to_space_add(g, packed.data(), gx);
    return;
  }
  if (g.depthwise3()) {
    M3S_PARALLEL_FOR
    for (i64 job = 0; job < g.n * g.cin; ++job) {
      const i64 c = job % g.cin;
      T flipped[9];
      for (int t = 0; t < 9; ++t) flipped[t] = wt[c * 9 + 8 - t];
      depthwise3_accumulate(gout + job * plane_out, gx + job * plane_in, g.h, g.w, flipped);
    }
    return;
  }
  M3S_PARALLEL_FOR
  for (i64 job = 0; job < g.n * g.cin; ++job) {
    const i64 n = job / g.cin, c = job % g.cin;
    const i64 grp = c / g.cin_g, cl = c % g.cin_g;
    T* dst = gx + job * plane_in;
    for (i64 o = grp * g.cout_g; o < (grp + 1) * g.cout_g; ++o) {
      const T* src = gout + (n * g.cout + o) * plane_out;
      for (i64 ky = 0; ky < g.k; ++ky) {
        i64 ylo, yhi;
        tap_range(ky, g.stride, g.pad, g.h, g.ho, ylo, yhi);
        for (i64 kx = 0; kx < g.k; ++kx) {
          i64 xlo, xhi;
          tap_range(kx, g.stride, g.pad, g.w, g.wo, xlo, xhi);
          const T wv = wt[((o * g.cin_g + cl) * g.k + ky) * g.k + kx];
          for (i64 oy = ylo; oy < yhi; ++oy) {
            T* drow = dst + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
            const T* srow = src + oy * g.wo;
            if (g.stride == 1) {
              for (i64 ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox];
            } else {
              for (i64 ox = xlo; ox < xhi; ++ox) drow[ox * g.stride] += wv * srow[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_weight(const ConvGeom& g, const T* gout, const T* x, T* gw, T* gb) {
  const i64 plane_in = g.h * g.w, plane_out = g.ho * g.wo;
  if (g.pointwise() && g.groups == 1) {
    pointwise_backward_weight(g.n, g.cin, g.cout, plane_in, gout, x, gw, gb);
    return;
  }
  if (g.patchwise()) {
    Buffer<T> packed(static_cast<std::size_t>(g.n * g.cin * g.k * g.k * plane_out));
    space_to_depth(g, x, packed.data());
    pointwise_backward_weight(g.n, g.cin * g.k * g.k, g.cout, plane_out, gout, packed.data(), gw, gb);
    return;
  }
  if (g.depthwise3()) {
    M3S_PARALLEL_FOR
    for (i64 c = 0; c < g.cout; ++c) {
      T bias_acc = 0;
      for (i64 n = 0; n < g.n; ++n) {
        const T* gp = gout + (n * g.cout + c) * plane_out;
        depthwise3_weight_grad(gp, x + (n * g.cin + c) * plane_in, g.h, g.w, gw + c * 9);
        if (gb) bias_acc += sum(gp, plane_out);
      }
      if (gb) gb[c] += bias_acc;
    }
    return;
  }
  M3S_PARALLEL_FOR
  for (i64 o = 0; o < g.cout; ++o) {
    const i64 grp = o / g.cout_g;
    if (gb) {
      T acc = 0;
      for (i64 n = 0; n < g.n; ++n) acc += sum(gout + (n * g.cout + o) * plane_out, plane_out);
      gb[o] += acc;
    }
    for (i64 cl = 0; cl < g.cin_g; ++cl) {
      for (i64 ky = 0; ky < g.k; ++ky) {
        i64 ylo, yhi;
        tap_range(ky, g.stride, g.pad, g.h, g.ho, ylo, yhi);
        for (i64 kx = 0; kx < g.k; ++kx) {
          i64 xlo, xhi;
          tap_range(kx, g.stride, g.pad, g.w, g.wo, xlo, xhi);
          T acc = 0;
          for (i64 n = 0; n < g.n; ++n) {
            const T* gsrc = gout + (n * g.cout + o) * plane_out;
            const T* xsrc = x + (n * g.cin + grp * g.cin_g + cl) * plane_in;
            if (g.pointwise()) {
              acc += dot(gsrc, xsrc, plane_out);
              continue;
            }
            for (i64 oy = ylo; oy < yhi; ++oy) {
              const T* grow = gsrc + oy * g.wo;
              const T* xrow = xsrc + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
              if (g.stride == 1) {
                acc += dot(grow + xlo, xrow + xlo, xhi - xlo);
              } else {
                T s = 0;
                for (i64 ox = xlo; ox < xhi; ++ox) s += grow[ox] * xrow[ox * g.stride];
                acc += s;
              }
            }
          }
          gw[((o * g.cin_g + cl) * g.k + ky) * g.k + kx] += acc;
        }
      }
    }
  }
}

// Broadcast bookkeeping for binary element-wise ops.
struct Broadcast {
  Shape out;
  std::vector<i64> sa, sb;  // strides into a and b per output axis (0 on broadcast axes)
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<i64>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<i64>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " do not broadcast at aligned axis " + std::to_string(i));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  i64 stride_a = 1, stride_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.sa[i] = pa[i] == 1 ? 0 : stride_a;
    p.sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const std::size_t r = p.out.size();
  const i64 inner = p.out[r - 1];
  const i64 ia_step = p.sa[r - 1], ib_step = p.sb[r - 1];
  const i64 total = numel(p.out);
  std::vector<i64> idx(r, 0);
  i64 ia = 0, ib = 0;
  for (i64 o = 0; o < total; o += inner) {
    for (i64 j = 0; j < inner; ++j) fn(o + j, ia + j * ia_step, ib + j * ib_step);
    // advance the outer odometer
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      ia += p.sa[ax];
      ib += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.sa[ax] * idx[ax];
      ib -= p.sb[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

// Block length when `small` matches `big` on its leading axes and is 1 on the
// remaining (at least one) trailing axes; 0 otherwise.
i64 block_broadcast(const Shape& big, const Shape& small) {
  if (big.size() != small.size()) return 0;
  std::size_t k = big.size();
  while (k > 0 && small[k - 1] == 1) --k;
  if (k == big.size()) return 0;
  for (std::size_t i = 0; i < k; ++i)
    if (small[i] != big[i]) return 0;
  i64 inner = 1;
  for (std::size_t i = k; i < big.size(); ++i) inner *= big[i];
  return inner;
}

// out = a (op) b where one operand holds one value per contiguous block of the other.
template <typename T>
Var<T> binary_blocks(const Var<T>& a, const Var<T>& b, BinaryKind kind, const char* name, int small_side,
                     i64 inner) {
  const auto& big = small_side == 1 ? a.value() : b.value();
  const auto& small = small_side == 1 ? b.value() : a.value();
  const i64 blocks = static_cast<i64>(small.size());
  auto out = Tensor<T>::uninitialized(big.shape());
  const T* pbig = big.ptr();
  const T* psmall = small.ptr();
  T* po = out.ptr();
  for (i64 blk = 0; blk < blocks; ++blk) {
    const T sv = psmall[blk];
    const T* src = pbig + blk * inner;
    T* dst = po + blk * inner;
    switch (kind) {
      case BinaryKind::kAdd: for (i64 i = 0; i < inner; ++i) dst[i] = src[i] + sv; break;
      case BinaryKind::kMul: for (i64 i = 0; i < inner; ++i) dst[i] = src[i] * sv; break;
      case BinaryKind::kSub:
        if (small_side == 1) {
          for (i64 i = 0; i < inner; ++i) dst[i] = src[i] - sv;
        } else {
          for (i64 i = 0; i < inner; ++i) dst[i] = sv - src[i];
        }
        break;
    }
  }
  return record<T>(std::move(out), {a, b}, name, [kind, small_side, inner, blocks](Node<T>& self) {
    const int big_side = 1 - small_side;
    T* gbig = self.input_grad(static_cast<std::size_t>(big_side));
    T* gsmall = self.input_grad(static_cast<std::size_t>(small_side));
    const T* vbig = self.inputs[big_side]->value.ptr();
    const T* vsmall = self.inputs[small_side]->value.ptr();
    const T* g = self.grad.data();
    const T big_sign = kind == BinaryKind::kSub && big_side == 1 ? T(-1) : T(1);
    const T small_sign = kind == BinaryKind::kSub && small_side == 1 ? T(-1) : T(1);
    for (i64 blk = 0; blk < blocks; ++blk) {
      const T* gb = g + blk * inner;
      if (gbig) {
        T* dst = gbig + blk * inner;
        const T f = kind == BinaryKind::kMul ? vsmall[blk] : big_sign;
        for (i64 i = 0; i < inner; ++i) dst[i] += f * gb[i];
      }
      if (gsmall) {
        T acc = 0;
        if (kind == BinaryKind::kMul) {
          acc = dot(gb, vbig + blk * inner, inner);
        } else {
          acc = small_sign * sum(gb, inner);
        }
        gsmall[blk] += acc;
      }
    }
  });
}

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind, const char* name) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() == bv.shape()) {
    auto out = Tensor<T>::uninitialized(av.shape());
    const T* pa = av.ptr();
    const T* pb = bv.ptr();
    T* po = out.ptr();
    const i64 n = static_cast<i64>(out.size());
    switch (kind) {
      case BinaryKind::kAdd: for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinaryKind::kSub: for (i64 i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinaryKind::kMul: for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
    return record<T>(std::move(out), {a, b}, name, [kind, n](Node<T>& self) {
      const T* g = self.grad.data();
      T* ga = self.input_grad(0);
      T* gb = self.input_grad(1);
      const T* va = self.inputs[0]->value.ptr();
      const T* vb = self.inputs[1]->value.ptr();
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) for (i64 i = 0; i < n; ++i) ga[i] += g[i];
          if (gb) for (i64 i = 0; i < n; ++i) gb[i] += g[i];
          break;
        case BinaryKind::kSub:
          if (ga) for (i64 i = 0; i < n; ++i) ga[i] += g[i];
          if (gb) for (i64 i = 0; i < n; ++i) gb[i] -= g[i];
          break;
        case BinaryKind::kMul:
          if (ga) for (i64 i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
          if (gb) for (i64 i = 0; i < n; ++i) gb[i] += g[i] * va[i];
          break;
      }
    });
  }
  if (const i64 inner = block_broadcast(av.shape(), bv.shape())) return binary_blocks(a, b, kind, name, 1, inner);
  if (const i64 inner = block_broadcast(bv.shape(), av.shape())) return binary_blocks(a, b, kind, name, 0, inner);
  auto plan = plan_broadcast(av.shape(), bv.shape(), name);
  auto out = Tensor<T>::uninitialized(plan.out);
  T* po = out.ptr();
  const T* pa = av.ptr();
  const T* pb = bv.ptr();
  switch (kind) {
    case BinaryKind::kAdd: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] + pb[j]; }); break;
    case BinaryKind::kSub: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] - pb[j]; }); break;
    case BinaryKind::kMul: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] * pb[j]; }); break;
  }
  return record<T>(std::move(out), {a, b}, name, [kind, plan](Node<T>& self) {
    const T* g = self.grad.data();
    T* ga = self.input_grad(0);
    T* gb = self.input_grad(1);
    const T* va = self.inputs[0]->value.ptr();
    const T* vb = self.inputs[1]->value.ptr();
    for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += g[o];
          break;
        case BinaryKind::kSub:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] -= g[o];
          break;
        case BinaryKind::kMul:
          if (ga) ga[i] += g[o] * vb[j];
          if (gb) gb[j] += g[o] * va[i];
          break;
      }
    });
  });
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, const char* name, F f, D dfdx) {
  const auto& xv = x.value();
  auto out = Tensor<T>::uninitialized(xv.shape());
  const i64 n = static_cast<i64>(out.size());
  for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(xv[static_cast<std::size_t>(i)]);
  return record<T>(std::move(out), {x}, name, [n, dfdx](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* xs = self.inputs[0]->value.ptr();
    const T* ys = self.value.ptr();
    const T* g = self.grad.data();
    for (i64 i = 0; i < n; ++i) gx[i] += g[i] * dfdx(xs[i], ys[i]);
  });
}

}  // namespace

MacCounter::MacCounter() : previous_(g_counter) { g_counter = this; }
MacCounter::~MacCounter() { g_counter = previous_; }
std::uint64_t MacCounter::conv_macs() const { return conv_; }
std::uint64_t MacCounter::matmul_macs() const { return matmul_; }

void count_conv_macs(std::uint64_t macs) {
  if (g_counter) g_counter->conv_ += macs;
}
void count_matmul_macs(std::uint64_t macs) {
  if (g_counter) g_counter->matmul_ += macs;
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              Conv2dOptions options) {
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  require_rank(xs, 4, "conv2d", "input");
  require_rank(ws, 4, "conv2d", "weight");
  if (options.stride < 1 || options.padding < 0 || options.groups < 1) {
    throw ConfigError("conv2d: stride >= 1, padding >= 0 and groups >= 1 required");
  }
  ConvGeom g{};
  g.n = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.k = ws[2];
  g.stride = options.stride;
  g.pad = options.padding;
  g.groups = options.groups;
  if (ws[2] != ws[3]) throw DimensionError(axis_msg("conv2d", "weight axes 2 and 3 (kernel) must be equal", ws));
  if (g.cin % g.groups != 0) {
    throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(g.cin) +
                         " not divisible by groups " + std::to_string(g.groups));
  }
  if (g.cout % g.groups != 0) {
    throw DimensionError("conv2d: weight axis 0 (output channels) = " + std::to_string(g.cout) +
                         " not divisible by groups " + std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (ws[1] != g.cin_g) {
    throw DimensionError("conv2d: weight axis 1 (input channels per group) = " + std::to_string(ws[1]) +
                         ", expected input axis 1 / groups = " + std::to_string(g.cin_g));
  }
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != g.cout)) {
    throw DimensionError("conv2d: bias shape " + to_string(bias->shape()) +
                         " does not match weight axis 0 = " + std::to_string(g.cout));
  }
  const i64 hspan = g.h + 2 * g.pad - g.k, wspan = g.w + 2 * g.pad - g.k;
  if (hspan < 0 || wspan < 0) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.k) + " exceeds padded input axes 2/3 of " +
                         to_string(xs));
  }
  g.ho = hspan / g.stride + 1;
  g.wo = wspan / g.stride + 1;

  auto out = Tensor<T>::uninitialized(Shape{g.n, g.cout, g.ho, g.wo});
  conv_forward(g, input.value().ptr(), weight.value().ptr(), bias ? bias->value().ptr() : nullptr, out.ptr());
  count_conv_macs(static_cast<std::uint64_t>(g.n * g.cout * g.ho * g.wo * g.cin_g * g.k * g.k));

  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return record<T>(std::move(out), std::move(inputs), "conv2d", [g, has_bias](Node<T>& self) {
    const T* gout = self.grad.data();
    if (T* gx = self.input_grad(0)) conv_backward_input(g, gout, self.inputs[1]->value.ptr(), gx);
    T* gw = self.input_grad(1);
    T* gb = has_bias ? self.input_grad(2) : nullptr;
    if (gw) {
      conv_backward_weight(g, gout, self.inputs[0]->value.ptr(), gw, gb);
    } else if (gb) {
      const i64 plane = g.ho * g.wo;
      for (i64 o = 0; o < g.cout; ++o)
        for (i64 n = 0; n < g.n; ++n) gb[o] += sum(gout + (n * g.cout + o) * plane, plane);
    }
  });
}

template <typename T>
Var<T> layer_norm_channel(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, T eps) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "layer_norm_channel", "input");
  if (!(eps > T(0))) throw ConfigError("layer_norm_channel: eps must be positive");
  const i64 n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  if (numel(gain.shape()) != c || numel(offset.shape()) != c) {
    throw DimensionError("layer_norm_channel: gain " + to_string(gain.shape()) + " / offset " +
                         to_string(offset.shape()) + " must have input axis 1 (channels) = " +
                         std::to_string(c) + " elements");
  }
  auto out = Tensor<T>::uninitialized(xs);
  auto xhat = std::make_shared<Buffer<T>>(out.size());
  auto rstd = std::make_shared<Buffer<T>>(static_cast<std::size_t>(n * plane));
  const T* xp = x.value().ptr();
  const T* gp = gain.value().ptr();
  const T* op = offset.value().ptr();
  T* yp = out.ptr();
  std::vector<T> mean(static_cast<std::size_t>(plane)), var(static_cast<std::size_t>(plane));
  for (i64 b = 0; b < n; ++b) {
    const T* xb = xp + b * c * plane;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 p = 0; p < plane; ++p) mean[p] += xb[ch * plane + p];
    for (i64 p = 0; p < plane; ++p) mean[p] /= T(c);
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 p = 0; p < plane; ++p) {
        const T d = xb[ch * plane + p] - mean[p];
        var[p] += d * d;
      }
    T* rs = rstd->data() + b * plane;
    for (i64 p = 0; p < plane; ++p) rs[p] = T(1) / std::sqrt(var[p] / T(c) + eps);
    T* xh = xhat->data() + b * c * plane;
    T* yb = yp + b * c * plane;
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 p = 0; p < plane; ++p) {
        const i64 i = ch * plane + p;
        xh[i] = (xb[i] - mean[p]) * rs[p];
        yb[i] = xh[i] * gp[ch] + op[ch];
      }
  }
  return record<T>(std::move(out), {x, gain, offset}, "layer_norm_channel",
                   [n, c, plane, xhat, rstd](Node<T>& self) {
                     const T* g = self.grad.data();
                     const T* gp = self.inputs[1]->value.ptr();
                     T* gx = self.input_grad(0);
                     T* ggain = self.input_grad(1);
                     T* goff = self.input_grad(2);
                     std::vector<T> m1(static_cast<std::size_t>(plane)), m2(static_cast<std::size_t>(plane));
                     for (i64 b = 0; b < n; ++b) {
                       const T* gb = g + b * c * plane;
                       const T* xh = xhat->data() + b * c * plane;
                       for (i64 ch = 0; ch < c; ++ch) {
                         if (ggain) ggain[ch] += dot(gb + ch * plane, xh + ch * plane, plane);
                         if (goff) goff[ch] += sum(gb + ch * plane, plane);
                       }
                       if (!gx) continue;
                       std::fill(m1.begin(), m1.end(), T(0));
                       std::fill(m2.begin(), m2.end(), T(0));
                       for (i64 ch = 0; ch < c; ++ch)
                         for (i64 p = 0; p < plane; ++p) {
                           const T dyh = gb[ch * plane + p] * gp[ch];
                           m1[p] += dyh;
                           m2[p] += dyh * xh[ch * plane + p];
                         }
                       const T* rs = rstd->data() + b * plane;
                       T* gxb = gx + b * c * plane;
                       for (i64 ch = 0; ch < c; ++ch)
                         for (i64 p = 0; p < plane; ++p) {
                           const i64 i = ch * plane + p;
                           const T dyh = gb[i] * gp[ch];
                           gxb[i] += rs[p] * (dyh - m1[p] / T(c) - xh[i] * m2[p] / T(c));
                         }
                     }
                   });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T value) {
  return unary(x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  for (auto v : x.value().data()) {
    if (!(v > T(0))) throw UsageError("log: input must be positive");
  }
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary(
      x, "softplus",
      [](T v) { return v > T(20) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Var<T> reciprocal(const Var<T>& x) {
  return unary(x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  const auto& xv = x.value();
  double acc = 0.0;
  for (auto v : xv.data()) acc += static_cast<double>(v);
  const i64 n = static_cast<i64>(xv.size());
  return record<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x}, "sum_all", [n](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T g = self.grad[0];
    for (i64 i = 0; i < n; ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const i64 n = static_cast<i64>(x.value().size());
  return scale(sum_all(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const auto& xv = x.value();
  const i64 len = xv.shape().back();
  const i64 rows = static_cast<i64>(xv.size()) / len;
  auto out = Tensor<T>::uninitialized(xv.shape());
  for (i64 r = 0; r < rows; ++r) {
    const T* src = xv.ptr() + r * len;
    T* dst = out.ptr() + r * len;
    T mx = src[0];
    for (i64 j = 1; j < len; ++j) mx = std::max(mx, src[j]);
    if (!std::isfinite(mx)) throw UsageError("softmax_lastdim: non-finite input");
    T total = 0;
    for (i64 j = 0; j < len; ++j) {
      dst[j] = std::exp(src[j] - mx);
      total += dst[j];
    }
    const T inv = T(1) / total;
    for (i64 j = 0; j < len; ++j) dst[j] *= inv;
  }
  return record<T>(std::move(out), {x}, "softmax_lastdim", [rows, len](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* y = self.value.ptr();
    const T* g = self.grad.data();
    for (i64 r = 0; r < rows; ++r) {
      const T s = dot(g + r * len, y + r * len, len);
      for (i64 j = 0; j < len; ++j) gx[r * len + j] += y[r * len + j] * (g[r * len + j] - s);
    }
  });
}

template <typename T>
Var<T> matmul_batched(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  require_rank(as, 3, "matmul_batched", "left operand");
  require_rank(bs, 3, "matmul_batched", "right operand");
  if (as[0] != bs[0] || as[2] != bs[1]) {
    throw DimensionError("matmul_batched: left " + to_string(as) + " and right " + to_string(bs) +
                         " disagree on axis 0 (batch) or inner axes (left 2 / right 1)");
  }
  const i64 nb = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor<T> out(Shape{nb, m, n});
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  M3S_PARALLEL_FOR
  for (i64 job = 0; job < nb * m; ++job) {
    const i64 bb = job / m, i = job % m;
    T* orow = po + job * n;
    const T* arow = pa + job * k;
    const T* bmat = pb + bb * k * n;
    for (i64 kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = bmat + kk * n;
      for (i64 j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
    (void)i;
  }
  count_matmul_macs(static_cast<std::uint64_t>(nb * m * k * n));
  return record<T>(std::move(out), {a, b}, "matmul_batched", [nb, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = self.inputs[0]->value.ptr();
    const T* pb = self.inputs[1]->value.ptr();
    if (T* ga = self.input_grad(0)) {
      M3S_PARALLEL_FOR
      for (i64 job = 0; job < nb * m; ++job) {
        const i64 bb = job / m;
        for (i64 kk = 0; kk < k; ++kk) ga[job * k + kk] += dot(g + job * n, pb + (bb * k + kk) * n, n);
      }
    }
    if (T* gb = self.input_grad(1)) {
      M3S_PARALLEL_FOR
      for (i64 job = 0; job < nb * k; ++job) {
        const i64 bb = job / k, kk = job % k;
        T* grow = gb + job * n;
        for (i64 i = 0; i < m; ++i) {
          const T av = pa[(bb * m + i) * k + kk];
          const T* gr = g + (bb * m + i) * n;
          for (i64 j = 0; j < n; ++j) grow[j] += av * gr[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& x) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw DimensionError(axis_msg("transpose_last2", "needs at least 2 axes", xs));
  const i64 m = xs[xs.size() - 2], n = xs.back();
  const i64 batch = numel(xs) / (m * n);
  Shape os = xs;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  auto out = Tensor<T>::uninitialized(os);
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  for (i64 b = 0; b < batch; ++b)
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) dst[(b * n + j) * m + i] = src[(b * m + i) * n + j];
  return record<T>(std::move(out), {x}, "transpose_last2", [batch, m, n](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* g = self.grad.data();
    for (i64 b = 0; b < batch; ++b)
      for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) gx[(b * m + i) * n + j] += g[(b * n + j) * m + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != numel(x.shape())) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const i64 n = numel(shape);
  return record<T>(x.value().reshaped(std::move(shape)), {x}, "reshape", [n](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    for (i64 i = 0; i < n; ++i) gx[i] += self.grad[static_cast<std::size_t>(i)];
  });
}

template <typename T>
Var<T> adaptive_avg_pool_to_1(const Var<T>& x) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "adaptive_avg_pool_to_1", "input");
  const i64 planes = xs[0] * xs[1], plane = xs[2] * xs[3];
  auto out = Tensor<T>::uninitialized(Shape{xs[0], xs[1], 1, 1});
  for (i64 i = 0; i < planes; ++i) {
    double acc = 0.0;
    const T* src = x.value().ptr() + i * plane;
    for (i64 p = 0; p < plane; ++p) acc += static_cast<double>(src[p]);
    out[static_cast<std::size_t>(i)] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return record<T>(std::move(out), {x}, "adaptive_avg_pool_to_1", [planes, plane](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    for (i64 i = 0; i < planes; ++i) {
      const T g = self.grad[static_cast<std::size_t>(i)] / static_cast<T>(plane);
      for (i64 p = 0; p < plane; ++p) gx[i * plane + p] += g;
    }
  });
}

template <typename T>
Var<T> local_avg_pool(const Var<T>& x, int window) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "local_avg_pool", "input");
  if (window < 1) throw ConfigError("local_avg_pool: window must be >= 1");
  const i64 planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const i64 kh = std::min<i64>(window, h), kw = std::min<i64>(window, w);
  const i64 nh = h - kh + 1, nw = w - kw + 1;  // number of distinct window origins
  const i64 off_y = (kh - 1) / 2, off_x = (kw - 1) / 2;
  auto origin_y = [=](i64 y) { return std::clamp<i64>(y - off_y, 0, nh - 1); };
  auto origin_x = [=](i64 xx) { return std::clamp<i64>(xx - off_x, 0, nw - 1); };
  const double area = static_cast<double>(kh * kw);

  auto out = Tensor<T>::uninitialized(xs);
  std::vector<double> integral(static_cast<std::size_t>((h + 1) * (w + 1)));
  for (i64 pl = 0; pl < planes; ++pl) {
    const T* src = x.value().ptr() + pl * h * w;
    std::fill(integral.begin(), integral.end(), 0.0);
    for (i64 y = 0; y < h; ++y) {
      double row = 0.0;
      for (i64 xx = 0; xx < w; ++xx) {
        row += static_cast<double>(src[y * w + xx]);
        integral[(y + 1) * (w + 1) + xx + 1] = integral[y * (w + 1) + xx + 1] + row;
      }
    }
    T* dst = out.ptr() + pl * h * w;
    for (i64 y = 0; y < h; ++y) {
      const i64 y0 = origin_y(y), y1 = y0 + kh;
      for (i64 xx = 0; xx < w; ++xx) {
        const i64 x0 = origin_x(xx), x1 = x0 + kw;
        const double s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] -
                         integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
        dst[y * w + xx] = static_cast<T>(s / area);
      }
    }
  }
  return record<T>(std::move(out), {x}, "local_avg_pool",
                   [=](Node<T>& self) {
                     T* gx = self.input_grad(0);
                     if (!gx) return;
                     // Gather output gradients per window origin, then spread each
                     // origin's total uniformly over its box via a 2-D prefix sum.
                     std::vector<double> per_origin(static_cast<std::size_t>(nh * nw));
                     std::vector<double> integral2(static_cast<std::size_t>((nh + 1) * (nw + 1)));
                     for (i64 pl = 0; pl < planes; ++pl) {
                       const T* g = self.grad.data() + pl * h * w;
                       std::fill(per_origin.begin(), per_origin.end(), 0.0);
                       for (i64 y = 0; y < h; ++y)
                         for (i64 xx = 0; xx < w; ++xx)
                           per_origin[origin_y(y) * nw + origin_x(xx)] += static_cast<double>(g[y * w + xx]);
                       std::fill(integral2.begin(), integral2.end(), 0.0);
                       for (i64 y = 0; y < nh; ++y) {
                         double row = 0.0;
                         for (i64 xx = 0; xx < nw; ++xx) {
                           row += per_origin[y * nw + xx];
                           integral2[(y + 1) * (nw + 1) + xx + 1] = integral2[y * (nw + 1) + xx + 1] + row;
                         }
                       }
                       T* dst = gx + pl * h * w;
                       for (i64 y = 0; y < h; ++y) {
                         // origins whose box covers row y: [y - kh + 1, y] within [0, nh)
                         const i64 a0 = std::max<i64>(0, y - kh + 1), a1 = std::min<i64>(nh, y + 1);
                         for (i64 xx = 0; xx < w; ++xx) {
                           const i64 b0 = std::max<i64>(0, xx - kw + 1), b1 = std::min<i64>(nw, xx + 1);
                           const double s = integral2[a1 * (nw + 1) + b1] - integral2[a0 * (nw + 1) + b1] -
                                            integral2[a1 * (nw + 1) + b0] + integral2[a0 * (nw + 1) + b0];
                           dst[y * w + xx] += static_cast<T>(s / area);
                         }
                       }
                     }
                   });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int factor) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "pixel_shuffle", "input");
  const i64 r = factor, rr = r * r;
  if (r < 1 || xs[1] % rr != 0) {
    throw DimensionError("pixel_shuffle: input axis 1 (channels) = " + std::to_string(xs[1]) +
                         " not divisible by factor^2 = " + std::to_string(rr));
  }
  const i64 n = xs[0], c = xs[1] / rr, h = xs[2], w = xs[3];
  auto out = Tensor<T>::uninitialized(Shape{n, c, h * r, w * r});
  // out[n, c, y*r + i, x*r + j] = in[n, c*r*r + i*r + j, y, x]
  auto index_pair = [=](auto&& fn) {
    for (i64 b = 0; b < n; ++b)
      for (i64 ch = 0; ch < c; ++ch)
        for (i64 i = 0; i < r; ++i)
          for (i64 j = 0; j < r; ++j)
            for (i64 y = 0; y < h; ++y)
              for (i64 xx = 0; xx < w; ++xx)
                fn(((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j,
                   ((b * c * rr + ch * rr + i * r + j) * h + y) * w + xx);
  };
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  index_pair([&](i64 o, i64 s) { dst[o] = src[s]; });
  return record<T>(std::move(out), {x}, "pixel_shuffle", [index_pair](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* g = self.grad.data();
    index_pair([&](i64 o, i64 s) { gx[s] += g[o]; });
  });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int factor) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "pixel_unshuffle", "input");
  const i64 r = factor, rr = r * r;
  if (r < 1 || xs[2] % r != 0 || xs[3] % r != 0) {
    throw DimensionError("pixel_unshuffle: input axes 2/3 of " + to_string(xs) +
                         " not divisible by factor " + std::to_string(r));
  }
  const i64 n = xs[0], c = xs[1], h = xs[2] / r, w = xs[3] / r;
  auto out = Tensor<T>::uninitialized(Shape{n, c * rr, h, w});
  auto index_pair = [=](auto&& fn) {
    for (i64 b = 0; b < n; ++b)
      for (i64 ch = 0; ch < c; ++ch)
        for (i64 i = 0; i < r; ++i)
          for (i64 j = 0; j < r; ++j)
            for (i64 y = 0; y < h; ++y)
              for (i64 xx = 0; xx < w; ++xx)
                fn(((b * c * rr + ch * rr + i * r + j) * h + y) * w + xx,
                   ((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j);
  };
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  index_pair([&](i64 o, i64 s) { dst[o] = src[s]; });
  return record<T>(std::move(out), {x}, "pixel_unshuffle", [index_pair](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* g = self.grad.data();
    index_pair([&](i64 o, i64 s) { gx[s] += g[o]; });
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t start, std::int64_t count) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "slice_channels", "input");
  if (start < 0 || count < 1 || start + count > xs[1]) {
    throw DimensionError("slice_channels: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside input axis 1 (channels) = " +
                         std::to_string(xs[1]));
  }
  const i64 n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  auto out = Tensor<T>::uninitialized(Shape{n, count, xs[2], xs[3]});
  for (i64 b = 0; b < n; ++b) {
    const T* src = x.value().ptr() + (b * c + start) * plane;
    std::copy(src, src + count * plane, out.ptr() + b * count * plane);
  }
  return record<T>(std::move(out), {x}, "slice_channels", [=](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    for (i64 b = 0; b < n; ++b) {
      const T* g = self.grad.data() + b * count * plane;
      T* dst = gx + (b * c + start) * plane;
      for (i64 i = 0; i < count * plane; ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
std::pair<Var<T>, Var<T>> split_channels_half(const Var<T>& x) {
  require_rank(x.shape(), 4, "split_channels_half", "input");
  const i64 c = x.shape()[1];
  if (c % 2 != 0) {
    throw DimensionError("split_channels_half: input axis 1 (channels) = " + std::to_string(c) + " is odd");
  }
  return {slice_channels(x, 0, c / 2), slice_channels(x, c / 2, c / 2)};
}

template <typename T>
Var<T> half_product(const Var<T>& x) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "half_product", "input");
  const i64 c = xs[1];
  if (c % 2 != 0) {
    throw DimensionError("half_product: input axis 1 (channels) = " + std::to_string(c) + " is odd");
  }
  const i64 n = xs[0], half = c / 2 * xs[2] * xs[3];
  auto out = Tensor<T>::uninitialized(Shape{n, c / 2, xs[2], xs[3]});
  const T* px = x.value().ptr();
  T* po = out.ptr();
  for (i64 b = 0; b < n; ++b) {
    const T* a = px + b * 2 * half;
    const T* g = a + half;
    T* o = po + b * half;
    for (i64 i = 0; i < half; ++i) o[i] = a[i] * g[i];
  }
  return record<T>(std::move(out), {x}, "half_product", [n, half](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    const T* px = self.inputs[0]->value.ptr();
    const T* go = self.grad.data();
    for (i64 b = 0; b < n; ++b) {
      const T* a = px + b * 2 * half;
      const T* g = a + half;
      T* ga = gx + b * 2 * half;
      T* gg = ga + half;
      const T* gb = go + b * half;
      for (i64 i = 0; i < half; ++i) {
        ga[i] += gb[i] * g[i];
        gg[i] += gb[i] * a[i];
      }
    }
  });
}

namespace {
inline i64 reflect_index(i64 i, i64 n) {
  if (n == 1) return 0;
  const i64 period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}
}  // namespace

template <typename T>
Var<T> pad_reflect(const Var<T>& x, std::int64_t bottom, std::int64_t right) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "pad_reflect", "input");
  if (bottom < 0 || right < 0) throw DimensionError("pad_reflect: negative padding");
  if (bottom == 0 && right == 0) return x;
  const i64 planes = xs[0] * xs[1], h = xs[2], w = xs[3], ho = h + bottom, wo = w + right;
  auto out = Tensor<T>::uninitialized(Shape{xs[0], xs[1], ho, wo});
  for (i64 pl = 0; pl < planes; ++pl)
    for (i64 y = 0; y < ho; ++y)
      for (i64 xx = 0; xx < wo; ++xx)
        out[static_cast<std::size_t>((pl * ho + y) * wo + xx)] =
            x.value()[static_cast<std::size_t>((pl * h + reflect_index(y, h)) * w + reflect_index(xx, w))];
  return record<T>(std::move(out), {x}, "pad_reflect", [=](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    for (i64 pl = 0; pl < planes; ++pl)
      for (i64 y = 0; y < ho; ++y)
        for (i64 xx = 0; xx < wo; ++xx)
          gx[(pl * h + reflect_index(y, h)) * w + reflect_index(xx, w)] +=
              self.grad[static_cast<std::size_t>((pl * ho + y) * wo + xx)];
  });
}

template <typename T>
Var<T> crop(const Var<T>& x, std::int64_t height, std::int64_t width) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "crop", "input");
  if (height < 1 || width < 1 || height > xs[2] || width > xs[3]) {
    throw DimensionError("crop: window " + std::to_string(height) + "x" + std::to_string(width) +
                         " exceeds input axes 2/3 of " + to_string(xs));
  }
  if (height == xs[2] && width == xs[3]) return x;
  const i64 planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  auto out = Tensor<T>::uninitialized(Shape{xs[0], xs[1], height, width});
  for (i64 pl = 0; pl < planes; ++pl)
    for (i64 y = 0; y < height; ++y) {
      const T* src = x.value().ptr() + (pl * h + y) * w;
      std::copy(src, src + width, out.ptr() + (pl * height + y) * width);
    }
  return record<T>(std::move(out), {x}, "crop", [=](Node<T>& self) {
    T* gx = self.input_grad(0);
    if (!gx) return;
    for (i64 pl = 0; pl < planes; ++pl)
      for (i64 y = 0; y < height; ++y)
        for (i64 xx = 0; xx < width; ++xx)
          gx[(pl * h + y) * w + xx] += self.grad[static_cast<std::size_t>((pl * height + y) * width + xx)];
  });
}

#define M3S_INSTANTIATE(T)                                                                              \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, Conv2dOptions);    \
  template Var<T> layer_norm_channel(const Var<T>&, const Var<T>&, const Var<T>&, T);                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale(const Var<T>&, T);                                                              \
  template Var<T> add_scalar(const Var<T>&, T);                                                         \
  template Var<T> log(const Var<T>&);                                                                   \
  template Var<T> softplus(const Var<T>&);                                                              \
  template Var<T> reciprocal(const Var<T>&);                                                            \
  template Var<T> sum_all(const Var<T>&);                                                               \
  template Var<T> mean_all(const Var<T>&);                                                              \
  template Var<T> softmax_lastdim(const Var<T>&);                                                       \
  template Var<T> matmul_batched(const Var<T>&, const Var<T>&);                                         \
  template Var<T> transpose_last2(const Var<T>&);                                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                                        \
  template Var<T> adaptive_avg_pool_to_1(const Var<T>&);                                                \
  template Var<T> local_avg_pool(const Var<T>&, int);                                                   \
  template Var<T> pixel_shuffle(const Var<T>&, int);                                                    \
  template Var<T> pixel_unshuffle(const Var<T>&, int);                                                  \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                            \
  template std::pair<Var<T>, Var<T>> split_channels_half(const Var<T>&);                                \
  template Var<T> half_product(const Var<T>&);                                                          \
  template Var<T> pad_reflect(const Var<T>&, std::int64_t, std::int64_t);                               \
  template Var<T> crop(const Var<T>&, std::int64_t, std::int64_t);

M3S_INSTANTIATE(float)
M3S_INSTANTIATE(double)

}  // namespace m3snet
