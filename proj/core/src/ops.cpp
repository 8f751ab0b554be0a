#include "guidedseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "guidedseg/errors.hpp"

namespace guidedseg::autodiff {

namespace {

[[noreturn]] void shape_error(const std::string& what) {
  throw Error(ErrorCode::kInvalidShape, what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op,
                  const char* name) {
  if (!t.defined() || t.rank() != rank) {
    shape_error(std::string(op) + ": " + name + " must have rank " +
                std::to_string(rank) +
                (t.defined() ? ", got " + to_string(t.shape()) : ""));
  }
}

// Half-open kernel index window.
struct Range {
  int lo;
  int hi;  // exclusive
};

}  // namespace

Tensor conv2d_tiled(const Tensor& vec, const Tensor& kernels, int out_h,
                    int out_w, int pad, Tape* tape) {
  require_rank(vec, 1, "conv2d_tiled", "vec");
  require_rank(kernels, 4, "conv2d_tiled", "kernels");
  const int cin = vec.dim(0);
  const int cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    shape_error("conv2d_tiled: vector length " + std::to_string(cin) +
                " does not match kernel input channels " +
                std::to_string(kernels.dim(1)));
  }
  if (kh != 2 * pad + 1 || kw != 2 * pad + 1 || out_h < 1 || out_w < 1) {
    shape_error("conv2d_tiled: kernel must be (2*pad+1) square");
  }

  // The valid kernel window at an output position depends only on its
  // distance to the border, so positions are grouped by window.
  auto windows = [pad](int extent, int k) {
    std::vector<Range> per_pos(extent);
    for (int p = 0; p < extent; ++p) {
      per_pos[p] = {std::max(0, pad - p), std::min(k, extent + pad - p)};
    }
    return per_pos;
  };
  const std::vector<Range> row_win = windows(out_h, kh);
  const std::vector<Range> col_win = windows(out_w, kw);

  auto key_of = [](Range r) { return std::pair{r.lo, r.hi}; };
  std::map<std::pair<int, int>, int> row_keys, col_keys;
  std::vector<int> row_id(out_h), col_id(out_w);
  std::vector<Range> row_unique, col_unique;
  for (int y = 0; y < out_h; ++y) {
    auto [it, inserted] =
        row_keys.emplace(key_of(row_win[y]), static_cast<int>(row_unique.size()));
    if (inserted) row_unique.push_back(row_win[y]);
    row_id[y] = it->second;
  }
  for (int x = 0; x < out_w; ++x) {
    auto [it, inserted] =
        col_keys.emplace(key_of(col_win[x]), static_cast<int>(col_unique.size()));
    if (inserted) col_unique.push_back(col_win[x]);
    col_id[x] = it->second;
  }

  const bool grad = needs_grad(tape, {&vec, &kernels});
  Tensor out({cout, out_h, out_w}, 0.0f, grad);
  const float* v = vec.data().data();
  const float* ker = kernels.data().data();
  float* o = out.data().data();

  const std::size_t nr = row_unique.size(), nc = col_unique.size();
  // Kernel as [ci][ky][kx][co] so each tap updates all output channels with
  // one contiguous run; per output the order stays ci, ky, kx.
  std::vector<float> kt(static_cast<std::size_t>(cin) * kh * kw * cout);
  const std::size_t taps = static_cast<std::size_t>(kh) * kw, rows = cin * taps;
  for (std::size_t j = 0; j < rows; ++j)
    for (int co = 0; co < cout; ++co) kt[j * cout + co] = ker[co * rows + j];
  std::vector<float> table(nr * nc * cout, 0.0f);  // [window][co]
  for (std::size_t r = 0; r < nr; ++r) {
    for (std::size_t c = 0; c < nc; ++c) {
      float* __restrict acc = table.data() + (r * nc + c) * cout;
      for (int ci = 0; ci < cin; ++ci) {
        const float vc = v[ci];
        if (vc == 0.0f) continue;
        for (int ky = row_unique[r].lo; ky < row_unique[r].hi; ++ky) {
          for (int kx = col_unique[c].lo; kx < col_unique[c].hi; ++kx) {
            const float* __restrict kw_co =
                kt.data() + (static_cast<std::size_t>(ci) * kh * kw + ky * kw + kx) * cout;
            for (int co = 0; co < cout; ++co) acc[co] += kw_co[co] * vc;
          }
        }
      }
    }
  }
  for (int co = 0; co < cout; ++co) {
    float* oplane = o + static_cast<std::size_t>(co) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) {
        oplane[y * out_w + x] = table[(row_id[y] * nc + col_id[x]) * cout + co];
      }
    }
  }

  if (grad) {
    tape->record({vec, kernels}, out,
                 [vec, kernels, out, cin, cout, kh, kw, out_h, out_w, row_win,
                  col_win]() mutable {
                   const float* gout = out.grad().data();
                   // region[co][ky][kx]: sum of output grads whose window
                   // contains (ky, kx).
                   std::vector<float> region(
                       static_cast<std::size_t>(cout) * kh * kw, 0.0f);
                   for (int co = 0; co < cout; ++co) {
                     const float* g =
                         gout + static_cast<std::size_t>(co) * out_h * out_w;
                     float* reg = region.data() +
                                  static_cast<std::size_t>(co) * kh * kw;
                     for (int y = 0; y < out_h; ++y) {
                       for (int x = 0; x < out_w; ++x) {
                         const float gv = g[y * out_w + x];
                         for (int ky = row_win[y].lo; ky < row_win[y].hi;
                              ++ky) {
                           for (int kx = col_win[x].lo; kx < col_win[x].hi;
                                ++kx) {
                             reg[ky * kw + kx] += gv;
                           }
                         }
                       }
                     }
                   }
                   const float* v = vec.data().data();
                   const float* ker = kernels.data().data();
                   float* gv = vec.requires_grad() ? vec.grad().data() : nullptr;
                   float* gk = kernels.requires_grad() ? kernels.grad().data()
                                                       : nullptr;
                   for (int co = 0; co < cout; ++co) {
                     const float* reg = region.data() +
                                        static_cast<std::size_t>(co) * kh * kw;
                     for (int ci = 0; ci < cin; ++ci) {
                       const std::size_t base =
                           (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
                       float acc = 0.0f;
                       for (int k = 0; k < kh * kw; ++k) {
                         acc += ker[base + k] * reg[k];
                         if (gk) gk[base + k] += v[ci] * reg[k];
                       }
                       if (gv) gv[ci] += acc;
                     }
                   }
                 });
  }
  return out;
}

Tensor relu(const Tensor& x, Tape* tape) {
  const bool grad = needs_grad(tape, {&x});
  Tensor out(x.shape(), 0.0f, grad);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
  }
  if (grad) {
    tape->record({x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      auto v = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > 0.0f) gx[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) {
    shape_error("add: shapes " + to_string(a.shape()) + " and " +
                to_string(b.shape()) + " differ");
  }
  const bool grad = needs_grad(tape, {&a, &b});
  Tensor out(a.shape(), 0.0f, grad);
  auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  if (grad) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b, Tape* tape) {
  bool broadcast = false;
  if (a.shape() != b.shape()) {
    broadcast = a.rank() == 3 && b.rank() == 3 && b.dim(0) == 1 &&
                a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2);
    if (!broadcast) {
      shape_error("elementwise_mul: cannot broadcast " + to_string(b.shape()) +
                  " against " + to_string(a.shape()));
    }
  }
  const std::size_t plane = broadcast ? b.numel() : a.numel();
  const bool grad = needs_grad(tape, {&a, &b});
  Tensor out(a.shape(), 0.0f, grad);
  auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i % plane];
  if (grad) {
    tape->record({a, b}, out, [a, b, out, plane]() mutable {
      auto g = out.grad();
      auto pa = a.data(), pb = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i % plane];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % plane] += g[i] * pa[i];
      }
    });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) shape_error("concat_channels: no parts");
  int channels = 0;
  for (const auto& p : parts) {
    require_rank(p, 3, "concat_channels", "part");
    if (p.dim(1) != parts[0].dim(1) || p.dim(2) != parts[0].dim(2)) {
      shape_error("concat_channels: spatial extents differ: " +
                  to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    }
    channels += p.dim(0);
  }
  bool grad = false;
  for (const auto& p : parts) grad = grad || needs_grad(tape, {&p});
  Tensor out({channels, parts[0].dim(1), parts[0].dim(2)}, 0.0f, grad);
  auto po = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), po.begin() + offset);
    offset += p.numel();
  }
  if (grad) {
    tape->record(parts, out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_vectors(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) shape_error("concat_vectors: no parts");
  int length = 0;
  bool grad = false;
  for (const auto& p : parts) {
    require_rank(p, 1, "concat_vectors", "part");
    length += p.dim(0);
    grad = grad || needs_grad(tape, {&p});
  }
  Tensor out({length}, 0.0f, grad);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + offset);
    offset += p.numel();
  }
  if (grad) {
    tape->record(parts, out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

namespace {

struct Taps {
  std::vector<int> lo, hi;
  std::vector<float> frac;
};

Taps resize_taps(int in_extent, int out_extent) {
  Taps taps;
  taps.lo.resize(out_extent);
  taps.hi.resize(out_extent);
  taps.frac.resize(out_extent);
  const float scale =
      static_cast<float>(in_extent) / static_cast<float>(out_extent);
  for (int d = 0; d < out_extent; ++d) {
    float s = (static_cast<float>(d) + 0.5f) * scale - 0.5f;
    s = std::clamp(s, 0.0f, static_cast<float>(in_extent - 1));
    const int lo = static_cast<int>(std::floor(s));
    taps.lo[d] = lo;
    taps.hi[d] = std::min(lo + 1, in_extent - 1);
    taps.frac[d] = s - static_cast<float>(lo);
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w, Tape* tape) {
  require_rank(x, 3, "bilinear_resize", "x");
  if (out_h < 1 || out_w < 1) shape_error("bilinear_resize: bad target size");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Taps ty = resize_taps(h, out_h);
  const Taps tx = resize_taps(w, out_w);
  const bool grad = needs_grad(tape, {&x});
  Tensor out({c, out_h, out_w}, 0.0f, grad);
  const float* src = x.data().data();
  float* dst = out.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src + static_cast<std::size_t>(ch) * h * w;
    float* oplane = dst + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const float fy = ty.frac[y];
      const float* r0 = plane + static_cast<std::size_t>(ty.lo[y]) * w;
      const float* r1 = plane + static_cast<std::size_t>(ty.hi[y]) * w;
      for (int xo = 0; xo < out_w; ++xo) {
        const float fx = tx.frac[xo];
        const int x0 = tx.lo[xo], x1 = tx.hi[xo];
        const float top = r0[x0] * (1.0f - fx) + r0[x1] * fx;
        const float bottom = r1[x0] * (1.0f - fx) + r1[x1] * fx;
        oplane[y * out_w + xo] = top * (1.0f - fy) + bottom * fy;
      }
    }
  }
  if (grad) {
    tape->record({x}, out, [x, out, ty, tx, c, h, w, out_h, out_w]() mutable {
      const float* g = out.grad().data();
      float* gx = x.grad().data();
      for (int ch = 0; ch < c; ++ch) {
        float* gplane = gx + static_cast<std::size_t>(ch) * h * w;
        const float* goplane = g + static_cast<std::size_t>(ch) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          const float fy = ty.frac[y];
          float* r0 = gplane + static_cast<std::size_t>(ty.lo[y]) * w;
          float* r1 = gplane + static_cast<std::size_t>(ty.hi[y]) * w;
          for (int xo = 0; xo < out_w; ++xo) {
            const float fx = tx.frac[xo];
            const int x0 = tx.lo[xo], x1 = tx.hi[xo];
            const float gv = goplane[y * out_w + xo];
            const float gt = gv * (1.0f - fy);
            const float gb = gv * fy;
            r0[x0] += gt * (1.0f - fx);
            r0[x1] += gt * fx;
            r1[x0] += gb * (1.0f - fx);
            r1[x1] += gb * fx;
          }
        }
      }
    });
  }
  return out;
}

MaskedAverage masked_average(const Tensor& features, const Tensor& mask,
                             Tape* tape) {
  require_rank(features, 3, "masked_average", "features");
  require_rank(mask, 3, "masked_average", "mask");
  if (mask.dim(0) != 1 || mask.dim(1) != features.dim(1) ||
      mask.dim(2) != features.dim(2)) {
    shape_error("masked_average: mask " + to_string(mask.shape()) +
                " does not match features " + to_string(features.shape()));
  }
  const int c = features.dim(0);
  const std::size_t plane = mask.numel();
  auto m = mask.data();
  float count = 0.0f;
  for (float v : m) count += v;

  const bool grad = needs_grad(tape, {&features});
  MaskedAverage result{Tensor({c}, 0.0f, grad), count};
  if (count == 0.0f) {
    if (grad) {
      tape->record({features}, result.mean, [] {});
    }
    return result;
  }
  auto f = features.data();
  auto mean = result.mean.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* row = f.data() + ch * plane;
    float acc = 0.0f;
    for (std::size_t i = 0; i < plane; ++i) {
      if (m[i] != 0.0f) acc += m[i] * row[i];
    }
    mean[ch] = acc / count;
  }
  if (grad) {
    tape->record({features}, result.mean,
                 [features, mask, out = result.mean, count, c,
                  plane]() mutable {
                   auto g = out.grad();
                   auto gf = features.grad();
                   auto m = mask.data();
                   for (int ch = 0; ch < c; ++ch) {
                     const float scale = g[ch] / count;
                     float* row = gf.data() + ch * plane;
                     for (std::size_t i = 0; i < plane; ++i) {
                       if (m[i] != 0.0f) row[i] += scale * m[i];
                     }
                   }
                 });
  }
  return result;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::uint8_t> target,
                             Tape* tape) {
  require_rank(logits, 3, "softmax_cross_entropy", "logits");
  const int k = logits.dim(0);
  const std::size_t plane =
      static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  if (k < 2) shape_error("softmax_cross_entropy: need at least 2 classes");
  if (target.size() != plane) {
    shape_error("softmax_cross_entropy: target has " +
                std::to_string(target.size()) + " labels for " +
                std::to_string(plane) + " pixels");
  }
  std::size_t valid = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (target[i] == kIgnoreLabel) continue;
    if (target[i] >= k) {
      throw Error(ErrorCode::kInvalidLabel,
                  "label " + std::to_string(target[i]) + " at pixel " +
                      std::to_string(i) + " outside {0.." +
                      std::to_string(k - 1) + ", IGNORE}");
    }
    ++valid;
  }
  const bool grad = needs_grad(tape, {&logits});
  Tensor out = Tensor::scalar(0.0f, grad);
  if (valid == 0) {
    if (grad) tape->record({logits}, out, [] {});
    return out;
  }
  const float* x = logits.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (target[i] == kIgnoreLabel) continue;
    float mx = -std::numeric_limits<float>::infinity();
    for (int c = 0; c < k; ++c) mx = std::max(mx, x[c * plane + i]);
    double se = 0.0;
    for (int c = 0; c < k; ++c) se += std::exp(double(x[c * plane + i]) - mx);
    total += (std::log(se) + mx) - x[target[i] * plane + i];
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(valid));
  if (grad) {
    std::vector<std::uint8_t> labels(target.begin(), target.end());
    tape->record({logits}, out,
                 [logits, out, labels = std::move(labels), k, plane,
                  valid]() mutable {
                   const float scale =
                       out.grad()[0] / static_cast<float>(valid);
                   const float* x = logits.data().data();
                   float* gx = logits.grad().data();
                   std::vector<double> p(k);
                   for (std::size_t i = 0; i < plane; ++i) {
                     if (labels[i] == kIgnoreLabel) continue;
                     float mx = -std::numeric_limits<float>::infinity();
                     for (int c = 0; c < k; ++c) {
                       mx = std::max(mx, x[c * plane + i]);
                     }
                     double se = 0.0;
                     for (int c = 0; c < k; ++c) {
                       p[c] = std::exp(double(x[c * plane + i]) - mx);
                       se += p[c];
                     }
                     for (int c = 0; c < k; ++c) {
                       const double d = p[c] / se - (c == labels[i] ? 1.0 : 0.0);
                       gx[c * plane + i] += static_cast<float>(d) * scale;
                     }
                   }
                 });
  }
  return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
  const bool grad = needs_grad(tape, {&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc), grad);
  if (grad) {
    tape->record({x}, out, [x, out]() mutable {
      const float g = out.grad()[0];
      for (float& v : x.grad()) v += g;
    });
  }
  return out;
}

Tensor weighted_mean(const std::vector<Tensor>& parts,
                     std::span<const float> weights, Tape* tape) {
  if (parts.empty() || parts.size() != weights.size()) {
    shape_error("weighted_mean: need one weight per part");
  }
  bool grad = false;
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) {
      shape_error("weighted_mean: part shapes differ");
    }
    grad = grad || needs_grad(tape, {&p});
  }
  float total = 0.0f;
  for (float w : weights) total += w;
  Tensor out(parts[0].shape(), 0.0f, grad);
  if (total == 0.0f) {
    if (grad) tape->record(parts, out, [] {});
    return out;
  }
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) {
    float acc = 0.0f;
    for (std::size_t s = 0; s < parts.size(); ++s) {
      if (weights[s] != 0.0f) acc += weights[s] * parts[s].data()[i];
    }
    po[i] = acc / total;
  }
  if (grad) {
    std::vector<float> w(weights.begin(), weights.end());
    tape->record(parts, out, [parts, out, w, total]() mutable {
      auto g = out.grad();
      for (std::size_t s = 0; s < parts.size(); ++s) {
        if (!parts[s].requires_grad() || w[s] == 0.0f) continue;
        auto gp = parts[s].grad();
        const float scale = w[s] / total;
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * scale;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Tape* tape) {
  require_rank(x, 1, "linear", "x");
  require_rank(weight, 2, "linear", "weight");
  const int m = weight.dim(0), n = weight.dim(1);
  if (x.dim(0) != n) shape_error("linear: input length mismatch");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != m)) {
    shape_error("linear: bias length mismatch");
  }
  const bool grad = needs_grad(tape, {&x, &weight, &bias});
  Tensor out({m}, 0.0f, grad);
  auto px = x.data(), pw = weight.data();
  auto po = out.data();
  for (int i = 0; i < m; ++i) {
    float acc = bias.defined() ? bias.data()[i] : 0.0f;
    for (int j = 0; j < n; ++j) acc += pw[i * n + j] * px[j];
    po[i] = acc;
  }
  if (grad) {
    tape->record({x, weight, bias}, out, [x, weight, bias, out, m, n]() mutable {
      auto g = out.grad();
      auto px = x.data(), pw = weight.data();
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (int i = 0; i < m; ++i) gb[i] += g[i];
      }
      if (weight.requires_grad()) {
        auto gw = weight.grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) gw[i * n + j] += g[i] * px[j];
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) gx[j] += g[i] * pw[i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t offset, Shape shape, Tape* tape) {
  const std::size_t n = numel_of(shape);
  if (offset + n > x.numel()) {
    shape_error("slice: range [" + std::to_string(offset) + ", " +
                std::to_string(offset + n) + ") exceeds " +
                std::to_string(x.numel()) + " elements");
  }
  const bool grad = needs_grad(tape, {&x});
  std::vector<float> values(x.data().begin() + offset,
                            x.data().begin() + offset + n);
  Tensor out(std::move(shape), std::move(values), grad);
  if (grad) {
    tape->record({x}, out, [x, out, offset]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
    });
  }
  return out;
}

Tensor prototype_logits(const Tensor& features, const Tensor& prototypes,
                        float temperature, Tape* tape) {
  require_rank(features, 3, "prototype_logits", "features");
  require_rank(prototypes, 2, "prototype_logits", "prototypes");
  const int c = features.dim(0);
  const int k = prototypes.dim(0);
  if (prototypes.dim(1) != c) {
    shape_error("prototype_logits: prototype width differs from features");
  }
  if (!(temperature > 0.0f)) {
    throw Error(ErrorCode::kConfiguration, "prototype temperature must be > 0");
  }
  const std::size_t plane =
      static_cast<std::size_t>(features.dim(1)) * features.dim(2);
  const bool grad = needs_grad(tape, {&features, &prototypes});
  Tensor out({k, features.dim(1), features.dim(2)}, 0.0f, grad);
  auto f = features.data(), p = prototypes.data();
  auto o = out.data();
  for (int j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < plane; ++i) {
      float d2 = 0.0f;
      for (int ch = 0; ch < c; ++ch) {
        const float d = f[ch * plane + i] - p[j * c + ch];
        d2 += d * d;
      }
      o[j * plane + i] = -d2 / temperature;
    }
  }
  if (grad) {
    tape->record({features, prototypes}, out,
                 [features, prototypes, out, temperature, c, k,
                  plane]() mutable {
                   auto g = out.grad();
                   auto f = features.data(), p = prototypes.data();
                   float* gf = features.requires_grad()
                                   ? features.grad().data()
                                   : nullptr;
                   float* gp = prototypes.requires_grad()
                                   ? prototypes.grad().data()
                                   : nullptr;
                   for (int j = 0; j < k; ++j) {
                     for (std::size_t i = 0; i < plane; ++i) {
                       const float s = -2.0f * g[j * plane + i] / temperature;
                       for (int ch = 0; ch < c; ++ch) {
                         const float d = f[ch * plane + i] - p[j * c + ch];
                         if (gf) gf[ch * plane + i] += s * d;
                         if (gp) gp[j * c + ch] -= s * d;
                       }
                     }
                   }
                 });
  }
  return out;
}

}  // namespace guidedseg::autodiff
