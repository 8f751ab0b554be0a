// Direct convolution over a polyphase, zero-padded copy of the input.
//
// For stride s the padded input is split into s*s phase planes so that every
// kernel tap becomes a unit-stride shift: tap (ky, kx) reads phase
// (ky % s, kx % s) at offset (ky / s, kx / s). Outputs are produced in a
// "wide" layout of row pitch `pitch` (a few garbage columns per row), which
// turns each tap into one contiguous run. Per output element the
// accumulation order is bias, then input channel, then ky, then kx.

#include <algorithm>
#include <array>
#include <string>

#include "guidedseg/errors.hpp"
#include "guidedseg/ops.hpp"

namespace guidedseg::autodiff {

namespace {

constexpr int kBlock = 32;

struct Geometry {
  int cin, h, w, cout, kh, kw, stride, pad;
  int oh, ow;
  int pitch;        // row pitch of phase planes and wide outputs
  int plane_rows;   // rows allocated per phase plane
  int phases;       // stride * stride
  std::size_t plane_size() const {
    return static_cast<std::size_t>(plane_rows) * pitch;
  }
  std::size_t wide_size() const {
    return static_cast<std::size_t>(oh) * pitch;
  }
  // Offset of tap (ky, kx) within the phase-plane stack of one channel.
  std::size_t tap_offset(int ky, int kx) const {
    const int phase = (ky % stride) * stride + (kx % stride);
    return phase * plane_size() +
           static_cast<std::size_t>(ky / stride) * pitch + kx / stride;
  }
};

Geometry make_geometry(int cin, int h, int w, int cout, int kh, int kw,
                       int stride, int pad) {
  Geometry g{cin, h, w, cout, kh, kw, stride, pad, 0, 0, 0, 0, stride * stride};
  g.oh = (h + 2 * pad - kh) / stride + 1;
  g.ow = (w + 2 * pad - kw) / stride + 1;
  const int wp = w + 2 * pad;
  const int hp = h + 2 * pad;
  g.pitch = std::max((wp + stride - 1) / stride, g.ow + (kw - 1) / stride);
  // One spare row absorbs reads past the last tap of the final wide row.
  g.plane_rows =
      std::max((hp + stride - 1) / stride, g.oh + (kh - 1) / stride) + 1;
  return g;
}

// Zero-padded polyphase copy: [cin][phase][plane_rows][pitch].
std::vector<float> to_phases(const float* in, const Geometry& g) {
  std::vector<float> planes(static_cast<std::size_t>(g.cin) * g.phases *
                                g.plane_size(),
                            0.0f);
  const int s = g.stride;
  for (int ci = 0; ci < g.cin; ++ci) {
    float* base = planes.data() +
                  static_cast<std::size_t>(ci) * g.phases * g.plane_size();
    const float* src = in + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int y = 0; y < g.h; ++y) {
      const int py = y + g.pad;
      for (int x = 0; x < g.w; ++x) {
        const int px = x + g.pad;
        const int phase = (py % s) * s + (px % s);
        base[phase * g.plane_size() + static_cast<std::size_t>(py / s) * g.pitch +
             px / s] = src[static_cast<std::size_t>(y) * g.w + x];
      }
    }
  }
  return planes;
}

// Prefix counts of non-zero rows per (channel, phase) plane, used to skip
// blocks whose inputs are all zero.
struct RowIndex {
  std::vector<int> prefix;  // [cin * phases][plane_rows + 1]
  int rows = 0;
  bool any_live(std::size_t plane, int first_row, int last_row) const {
    first_row = std::max(first_row, 0);
    last_row = std::min(last_row, rows - 1);
    if (first_row > last_row) return false;
    const int* p = prefix.data() + plane * (rows + 1);
    return p[last_row + 1] - p[first_row] > 0;
  }
};

RowIndex index_rows(const std::vector<float>& planes, const Geometry& g) {
  RowIndex idx;
  idx.rows = g.plane_rows;
  const std::size_t nplanes = static_cast<std::size_t>(g.cin) * g.phases;
  idx.prefix.assign(nplanes * (g.plane_rows + 1), 0);
  for (std::size_t p = 0; p < nplanes; ++p) {
    int* pre = idx.prefix.data() + p * (g.plane_rows + 1);
    const float* plane = planes.data() + p * g.plane_size();
    for (int r = 0; r < g.plane_rows; ++r) {
      const float* row = plane + static_cast<std::size_t>(r) * g.pitch;
      const bool live = std::any_of(row, row + g.pitch, [](float v) { return v != 0.0f; });
      pre[r + 1] = pre[r] + (live ? 1 : 0);
    }
  }
  return idx;
}

void forward(const Geometry& g, const std::vector<float>& planes,
             const RowIndex& rows, const float* ker, const float* bias,
             float* out) {
  const std::size_t wide = g.wide_size();
  std::vector<float> acc_wide(wide);
  const int taps = g.kh * g.kw;
  std::vector<std::size_t> offsets(taps);
  std::vector<int> tap_rows(taps), tap_plane(taps);
  for (int ky = 0; ky < g.kh; ++ky) {
    for (int kx = 0; kx < g.kw; ++kx) {
      offsets[ky * g.kw + kx] = g.tap_offset(ky, kx);
      tap_rows[ky * g.kw + kx] = ky / g.stride;
      tap_plane[ky * g.kw + kx] = (ky % g.stride) * g.stride + (kx % g.stride);
    }
  }
  for (int co = 0; co < g.cout; ++co) {
    const float b0 = bias ? bias[co] : 0.0f;
    for (std::size_t j0 = 0; j0 < wide; j0 += kBlock) {
      const int n = static_cast<int>(std::min<std::size_t>(kBlock, wide - j0));
      std::array<float, kBlock> acc;
      acc.fill(b0);
      const int row_lo = static_cast<int>(j0 / g.pitch);
      const int row_hi = static_cast<int>((j0 + n - 1) / g.pitch) + 1;
      for (int ci = 0; ci < g.cin; ++ci) {
        const float* cplanes =
            planes.data() + static_cast<std::size_t>(ci) * g.phases * g.plane_size();
        const float* wk = ker + (static_cast<std::size_t>(co) * g.cin + ci) * taps;
        for (int t = 0; t < taps; ++t) {
          if (!rows.any_live(static_cast<std::size_t>(ci) * g.phases + tap_plane[t],
                             row_lo + tap_rows[t], row_hi + tap_rows[t])) {
            continue;
          }
          const float wv = wk[t];
          const float* src = cplanes + offsets[t] + j0;
          if (n == kBlock) {
            for (int k = 0; k < kBlock; ++k) acc[k] += wv * src[k];
          } else {
            for (int k = 0; k < n; ++k) acc[k] += wv * src[k];
          }
        }
      }
      std::copy(acc.begin(), acc.begin() + n, acc_wide.begin() + j0);
    }
    float* oplane = out + static_cast<std::size_t>(co) * g.oh * g.ow;
    for (int oy = 0; oy < g.oh; ++oy) {
      std::copy_n(acc_wide.begin() + static_cast<std::size_t>(oy) * g.pitch, g.ow,
                  oplane + static_cast<std::size_t>(oy) * g.ow);
    }
  }
}

float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

void backward(const Geometry& g, const Tensor& input, const Tensor& kernels,
              const Tensor& bias, const Tensor& out) {
  const float* gout = out.grad().data();
  const std::size_t wide = g.wide_size();
  const int taps = g.kh * g.kw;

  if (bias.requires_grad()) {
    auto gb = bias.grad();
    for (int co = 0; co < g.cout; ++co) {
      const float* p = gout + static_cast<std::size_t>(co) * g.oh * g.ow;
      float acc = 0.0f;
      for (int i = 0; i < g.oh * g.ow; ++i) acc += p[i];
      gb[co] += acc;
    }
  }
  if (!input.requires_grad() && !kernels.requires_grad()) return;

  // Output gradient in wide layout, zero in the garbage columns, with a
  // zero margin in front so that shifted reads stay in bounds.
  const std::size_t margin =
      static_cast<std::size_t>((g.kh - 1) / g.stride) * g.pitch + (g.kw - 1) / g.stride;
  const std::size_t gstride = margin + g.plane_size() + kBlock;
  std::vector<float> gwide(static_cast<std::size_t>(g.cout) * gstride, 0.0f);
  for (int co = 0; co < g.cout; ++co) {
    float* dst = gwide.data() + co * gstride + margin;
    const float* src = gout + static_cast<std::size_t>(co) * g.oh * g.ow;
    for (int oy = 0; oy < g.oh; ++oy) {
      std::copy_n(src + static_cast<std::size_t>(oy) * g.ow, g.ow,
                  dst + static_cast<std::size_t>(oy) * g.pitch);
    }
  }

  if (kernels.requires_grad()) {
    const std::vector<float> planes = to_phases(input.data().data(), g);
    std::vector<char> plane_live(static_cast<std::size_t>(g.cin) * g.phases);
    for (std::size_t p = 0; p < plane_live.size(); ++p) {
      const float* pl = planes.data() + p * g.plane_size();
      plane_live[p] = std::any_of(pl, pl + g.plane_size(), [](float v) { return v != 0.0f; });
    }
    float* gk = kernels.grad().data();
    for (int co = 0; co < g.cout; ++co) {
      const float* gw = gwide.data() + co * gstride + margin;
      for (int ci = 0; ci < g.cin; ++ci) {
        const float* cplanes =
            planes.data() + static_cast<std::size_t>(ci) * g.phases * g.plane_size();
        float* gkc = gk + (static_cast<std::size_t>(co) * g.cin + ci) * taps;
        for (int ky = 0; ky < g.kh; ++ky) {
          for (int kx = 0; kx < g.kw; ++kx) {
            const int phase = (ky % g.stride) * g.stride + (kx % g.stride);
            if (!plane_live[static_cast<std::size_t>(ci) * g.phases + phase]) continue;
            gkc[ky * g.kw + kx] += dot(gw, cplanes + g.tap_offset(ky, kx), wide);
          }
        }
      }
    }
  }

  if (input.requires_grad()) {
    // Gradient w.r.t. the phase planes, then folded back to the input.
    const float* ker = kernels.data().data();
    std::vector<float> gplanes(static_cast<std::size_t>(g.cin) * g.phases * g.plane_size(),
                               0.0f);
    for (int ci = 0; ci < g.cin; ++ci) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx) {
          const std::size_t off = g.tap_offset(ky, kx);
          // off = phase * plane_size + shift; reads of wide index j land at
          // plane index j + shift.
          const int phase = (ky % g.stride) * g.stride + (kx % g.stride);
          const std::size_t shift = off - static_cast<std::size_t>(phase) * g.plane_size();
          float* dst = gplanes.data() +
                       (static_cast<std::size_t>(ci) * g.phases + phase) * g.plane_size() + shift;
          for (int co = 0; co < g.cout; ++co) {
            const float wv = ker[(static_cast<std::size_t>(co) * g.cin + ci) * taps +
                                 ky * g.kw + kx];
            const float* src = gwide.data() + co * gstride + margin;
            for (std::size_t j = 0; j < wide; ++j) dst[j] += wv * src[j];
          }
        }
      }
    }
    float* gin = input.grad().data();
    const int s = g.stride;
    for (int ci = 0; ci < g.cin; ++ci) {
      const float* base =
          gplanes.data() + static_cast<std::size_t>(ci) * g.phases * g.plane_size();
      float* dst = gin + static_cast<std::size_t>(ci) * g.h * g.w;
      for (int y = 0; y < g.h; ++y) {
        const int py = y + g.pad;
        for (int x = 0; x < g.w; ++x) {
          const int px = x + g.pad;
          const int phase = (py % s) * s + (px % s);
          dst[static_cast<std::size_t>(y) * g.w + x] +=
              base[phase * g.plane_size() + static_cast<std::size_t>(py / s) * g.pitch + px / s];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int stride, int pad, Tape* tape) {
  if (!input.defined() || input.rank() != 3) {
    throw Error(ErrorCode::kInvalidShape, "conv2d: input must be [C, H, W]");
  }
  if (!kernels.defined() || kernels.rank() != 4) {
    throw Error(ErrorCode::kInvalidShape, "conv2d: kernels must be [C_out, C_in, kh, kw]");
  }
  const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw Error(ErrorCode::kInvalidShape,
                "conv2d: input has " + std::to_string(cin) + " channels but kernels expect " +
                    std::to_string(kernels.dim(1)));
  }
  if (stride < 1 || pad < 0) throw Error(ErrorCode::kInvalidShape, "conv2d: bad stride/pad");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw Error(ErrorCode::kInvalidShape, "conv2d: kernel larger than padded input");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw Error(ErrorCode::kInvalidShape, "conv2d: bias must be [" + std::to_string(cout) + "]");
  }
  const Geometry g = make_geometry(cin, h, w, cout, kh, kw, stride, pad);
  const bool grad = needs_grad(tape, {&input, &kernels, &bias});
  Tensor out({cout, g.oh, g.ow}, 0.0f, grad);

  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    // Pointwise: no padding or phases needed; same accumulation order.
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const float* x = input.data().data();
    const float* k = kernels.data().data();
    for (int co = 0; co < cout; ++co) {
      float* __restrict o = out.data().data() + co * n;
      std::fill_n(o, n, bias.defined() ? bias.data()[co] : 0.0f);
      for (int ci = 0; ci < cin; ++ci) {
        const float wv = k[static_cast<std::size_t>(co) * cin + ci];
        const float* __restrict xc = x + ci * n;
        for (std::size_t i = 0; i < n; ++i) o[i] += wv * xc[i];
      }
    }
  } else {
    const std::vector<float> planes = to_phases(input.data().data(), g);
    const RowIndex rows = index_rows(planes, g);
    forward(g, planes, rows, kernels.data().data(),
            bias.defined() ? bias.data().data() : nullptr, out.data().data());
  }

  if (grad) {
    tape->record({input, kernels, bias}, out,
                 [g, input, kernels, bias, out] { backward(g, input, kernels, bias, out); });
  }
  return out;
}

}  // namespace guidedseg::autodiff
