#pragma once

// Double-precision reference forward passes, written independently of the
// library's kernels. They serve as the finite-difference oracle: the library's
// float32 analytic gradients are compared against central differences of
// these functions.
//
// Every relu appends its activation pattern to the trace so the checker can
// discard probes that straddle a kink.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "guidedseg/annotations.hpp"
#include "guidedseg/config.hpp"

namespace guidedseg::testing::ref {

struct Trace {
  std::vector<std::uint8_t> relu_pattern;
};

struct Map {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  Map() = default;
  Map(int c_, int h_, int w_, double fill = 0.0)
      : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, fill) {}
  double& at(int ci, int y, int x) { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
};

inline Map conv(const Map& in, const std::vector<double>& k, int cout, int kh, int kw,
                const std::vector<double>* bias, int stride, int pad) {
  Map out(cout, (in.h + 2 * pad - kh) / stride + 1, (in.w + 2 * pad - kw) / stride + 1);
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        const int y0 = oy * stride - pad, x0 = ox * stride - pad;
        const int ky_lo = std::max(0, -y0), ky_hi = std::min(kh, in.h - y0);
        const int kx_lo = std::max(0, -x0), kx_hi = std::min(kw, in.w - x0);
        double acc = bias ? (*bias)[co] : 0.0;
        for (int ci = 0; ci < in.c; ++ci) {
          const double* kp = k.data() + (static_cast<std::size_t>(co) * in.c + ci) * kh * kw;
          const double* ip = in.v.data() + static_cast<std::size_t>(ci) * in.h * in.w;
          for (int ky = ky_lo; ky < ky_hi; ++ky)
            for (int kx = kx_lo; kx < kx_hi; ++kx) acc += kp[ky * kw + kx] * ip[(y0 + ky) * in.w + x0 + kx];
        }
        out.at(co, oy, ox) = acc;
      }
  return out;
}

inline Map relu(Map x, Trace* trace) {
  for (double& v : x.v) {
    if (trace) trace->relu_pattern.push_back(v > 0.0);
    v = std::max(v, 0.0);
  }
  return x;
}

inline std::vector<double> relu(std::vector<double> x, Trace* trace) {
  for (double& v : x) {
    if (trace) trace->relu_pattern.push_back(v > 0.0);
    v = std::max(v, 0.0);
  }
  return x;
}

inline Map concat(const std::vector<Map>& parts) {
  Map out(0, parts[0].h, parts[0].w);
  for (const auto& p : parts) {
    out.c += p.c;
    out.v.insert(out.v.end(), p.v.begin(), p.v.end());
  }
  return out;
}

inline Map tile(const std::vector<double>& vec, int h, int w) {
  Map out(static_cast<int>(vec.size()), h, w);
  for (int ci = 0; ci < out.c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(ci, y, x) = vec[ci];
  return out;
}

inline Map bilinear(const Map& in, int oh, int ow) {
  Map out(in.c, oh, ow);
  auto coord = [](int d, int n_in, int n_out) {
    return std::clamp((d + 0.5) * (static_cast<double>(n_in) / n_out) - 0.5, 0.0,
                      static_cast<double>(n_in - 1));
  };
  for (int ci = 0; ci < in.c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double sy = coord(y, in.h, oh), sx = coord(x, in.w, ow);
        const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        const int y1 = std::min(y0 + 1, in.h - 1), x1 = std::min(x0 + 1, in.w - 1);
        const double fy = sy - y0, fx = sx - x0;
        out.at(ci, y, x) = (1 - fy) * ((1 - fx) * in.at(ci, y0, x0) + fx * in.at(ci, y0, x1)) +
                           fy * ((1 - fx) * in.at(ci, y1, x0) + fx * in.at(ci, y1, x1));
      }
  return out;
}

/// Returns (mean vector, count) of the cells where mask is 1.
inline std::pair<std::vector<double>, double> masked_mean(const Map& f, const std::vector<double>& mask) {
  std::vector<double> mean(f.c, 0.0);
  double count = 0.0;
  for (double m : mask) count += m;
  if (count == 0.0) return {mean, 0.0};
  for (int ci = 0; ci < f.c; ++ci) {
    double acc = 0.0;
    for (int i = 0; i < f.h * f.w; ++i) acc += mask[i] * f.v[static_cast<std::size_t>(ci) * f.h * f.w + i];
    mean[ci] = acc / count;
  }
  return {mean, count};
}

inline double cross_entropy(const Map& logits, const std::vector<std::uint8_t>& target,
                            std::uint8_t ignore = 255) {
  double total = 0.0;
  int n = 0;
  for (int y = 0; y < logits.h; ++y)
    for (int x = 0; x < logits.w; ++x) {
      const std::uint8_t t = target[static_cast<std::size_t>(y) * logits.w + x];
      if (t == ignore) continue;
      double mx = -1e300;
      for (int k = 0; k < logits.c; ++k) mx = std::max(mx, logits.at(k, y, x));
      double se = 0.0;
      for (int k = 0; k < logits.c; ++k) se += std::exp(logits.at(k, y, x) - mx);
      total += std::log(se) + mx - logits.at(t, y, x);
      ++n;
    }
  return n == 0 ? 0.0 : total / n;
}

using Params = std::map<std::string, std::vector<double>>;

struct SupportShot {
  Map image;
  AnnotationSet points;
};

struct Guidance {
  bool local = false;
  std::vector<double> z_pos, z_neg;
  double pos_count = 0.0, neg_count = 0.0;
  Map g_pos, g_neg;
};

inline Map encoder(const std::string& prefix, Map x, const model::GuidanceConfig& config,
                   const Params& p, Trace* trace) {
  for (std::size_t i = 0; i < config.encoder.size(); ++i) {
    const auto& l = config.encoder[i];
    const std::string base = prefix + "." + std::to_string(i);
    x = relu(conv(x, p.at(base + ".weight"), l.channels, l.kernel, l.kernel, &p.at(base + ".bias"),
                  l.stride, l.kernel / 2),
             trace);
  }
  return x;
}

inline Guidance guidance(const std::vector<SupportShot>& support, const model::GuidanceConfig& config,
                         const Params& p, Trace* trace) {
  std::vector<Guidance> shots;
  const int stride = config.feature_stride();
  for (const auto& s : support) {
    Guidance g;
    if (config.fusion == model::Fusion::kEarly) {
      Map planes(2, s.image.h, s.image.w);
      for (const auto& pt : s.points.points())
        planes.at(pt.label == Polarity::kPositive ? 0 : 1, pt.row, pt.col) = 1.0;
      Map f = encoder("early_encoder", concat({s.image, planes}), config, p, trace);
      auto [mean, count] = masked_mean(f, std::vector<double>(static_cast<std::size_t>(f.h) * f.w, 1.0));
      g.z_pos = g.z_neg = mean;
      g.pos_count = g.neg_count = count;
      shots.push_back(g);
      continue;
    }
    Map f = encoder("encoder", s.image, config, p, trace);
    std::vector<double> pos(static_cast<std::size_t>(f.h) * f.w, 0.0), neg(pos);
    for (const auto& pt : s.points.points())
      (pt.label == Polarity::kPositive ? pos : neg)[(pt.row / stride) * f.w + pt.col / stride] = 1.0;
    if (config.locality == model::Locality::kIdentity) {
      g.local = true;
      g.g_pos = g.g_neg = f;
      for (int ci = 0; ci < f.c; ++ci)
        for (int i = 0; i < f.h * f.w; ++i) {
          g.g_pos.v[static_cast<std::size_t>(ci) * f.h * f.w + i] *= pos[i];
          g.g_neg.v[static_cast<std::size_t>(ci) * f.h * f.w + i] *= neg[i];
        }
    } else {
      std::tie(g.z_pos, g.pos_count) = masked_mean(f, pos);
      std::tie(g.z_neg, g.neg_count) = masked_mean(f, neg);
    }
    shots.push_back(g);
  }
  if (shots.size() == 1) return shots[0];
  Guidance merged;
  const std::size_t c = shots[0].z_pos.size();
  merged.z_pos.assign(c, 0.0);
  merged.z_neg.assign(c, 0.0);
  for (const auto& g : shots) {
    merged.pos_count += g.pos_count;
    merged.neg_count += g.neg_count;
    for (std::size_t i = 0; i < c; ++i) {
      merged.z_pos[i] += g.pos_count * g.z_pos[i];
      merged.z_neg[i] += g.neg_count * g.z_neg[i];
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    merged.z_pos[i] = merged.pos_count > 0 ? merged.z_pos[i] / merged.pos_count : 0.0;
    merged.z_neg[i] = merged.neg_count > 0 ? merged.z_neg[i] / merged.neg_count : 0.0;
  }
  return merged;
}

/// Logits [2, H, W] of the configured network.
inline Map logits(const std::vector<SupportShot>& support, const Map& query,
                  const model::GuidanceConfig& config, const Params& p, Trace* trace) {
  using model::Head;
  Guidance g;
  if (config.guided) g = guidance(support, config, p, trace);
  Map f = encoder("encoder", query, config, p, trace);
  const int c = f.c;

  if (config.guided && config.head == Head::kPrototype) {
    Map out(2, f.h, f.w);
    for (int k = 0; k < 2; ++k) {
      const auto& proto = k == 1 ? g.z_pos : g.z_neg;
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) {
          double d = 0.0;
          for (int ci = 0; ci < c; ++ci) d += (f.at(ci, y, x) - proto[ci]) * (f.at(ci, y, x) - proto[ci]);
          out.at(k, y, x) = -d / config.temperature;
        }
    }
    return bilinear(out, query.h, query.w);
  }
  if (config.guided && config.head == Head::kParamRegression) {
    std::vector<double> in = g.z_pos;
    in.insert(in.end(), g.z_neg.begin(), g.z_neg.end());
    in.push_back(g.pos_count);
    in.push_back(g.neg_count);
    auto affine = [](const std::vector<double>& W, const std::vector<double>& b, const std::vector<double>& x) {
      std::vector<double> y(b);
      for (std::size_t r = 0; r < y.size(); ++r)
        for (std::size_t k = 0; k < x.size(); ++k) y[r] += W[r * x.size() + k] * x[k];
      return y;
    };
    auto hidden = relu(affine(p.at("regressor.hidden.weight"), p.at("regressor.hidden.bias"), in), trace);
    auto theta = affine(p.at("regressor.out.weight"), p.at("regressor.out.bias"), hidden);
    std::vector<double> kernel(theta.begin(), theta.begin() + 2 * c);
    std::vector<double> bias(theta.begin() + 2 * c, theta.end());
    return bilinear(conv(f, kernel, 2, 1, 1, &bias, 1, 0), query.h, query.w);
  }

  // Decoder over concat(guidance maps, features) with the stacked kernel
  // [guide_weight | weight] along input channels.
  Map fused = f;
  std::vector<double> k0 = p.at("decoder.0.weight");
  int cin = c;
  if (config.guided) {
    Map maps;
    if (g.local) {
      maps = concat({g.g_pos, g.g_neg});
    } else if (config.fusion == model::Fusion::kEarly) {
      maps = tile(g.z_pos, f.h, f.w);
    } else {
      maps = concat({tile(g.z_pos, f.h, f.w), tile(g.z_neg, f.h, f.w)});
    }
    fused = concat({maps, f});
    const auto& gw = p.at("decoder.0.guide_weight");
    const int wd = config.decoder_width, gc = maps.c;
    cin = gc + c;
    k0.assign(static_cast<std::size_t>(wd) * cin * 9, 0.0);
    for (int co = 0; co < wd; ++co) {
      std::copy_n(gw.begin() + static_cast<std::ptrdiff_t>(co) * gc * 9, gc * 9, k0.begin() + co * cin * 9);
      std::copy_n(p.at("decoder.0.weight").begin() + static_cast<std::ptrdiff_t>(co) * c * 9, c * 9,
                  k0.begin() + co * cin * 9 + gc * 9);
    }
  }
  const int wd = config.decoder_width;
  Map x = relu(conv(fused, k0, wd, 3, 3, &p.at("decoder.0.bias"), 1, 1), trace);
  x = relu(conv(x, p.at("decoder.1.weight"), wd, 3, 3, &p.at("decoder.1.bias"), 1, 1), trace);
  x = conv(x, p.at("decoder.2.weight"), 2, 1, 1, &p.at("decoder.2.bias"), 1, 0);
  return bilinear(x, query.h, query.w);
}

}  // namespace guidedseg::testing::ref
