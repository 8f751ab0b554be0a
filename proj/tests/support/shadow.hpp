#pragma once

// Shadow recomputation for the session service: every service answer is
// checked against guidance and masks rebuilt from scratch with guide_late()
// and segment().

#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "guidedseg/errors.hpp"
#include "guidedseg/model.hpp"
#include "guidedseg/service.hpp"

namespace guidedseg::testing {

inline std::vector<float> tensor_values(const autodiff::Tensor& t) {
  if (!t.defined()) return {};
  auto d = t.data();
  return {d.begin(), d.end()};
}

inline bool same_representation(const model::TaskRepresentation& a, const model::TaskRepresentation& b) {
  return a.kind == b.kind && tensor_values(a.z_pos) == tensor_values(b.z_pos) &&
         tensor_values(a.z_neg) == tensor_values(b.z_neg) && tensor_values(a.g_pos) == tensor_values(b.g_pos) &&
         tensor_values(a.g_neg) == tensor_values(b.g_neg) && a.pos_count == b.pos_count &&
         a.neg_count == b.neg_count;
}

inline autodiff::Tensor random_frame(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  autodiff::Tensor t({3, h, w});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Same weights, different locality.
inline model::ModelParams with_locality(const model::ModelParams& params, model::Locality locality) {
  auto ckpt = params.to_checkpoint();
  auto config = params.config();
  config.locality = locality;
  ckpt.config = model::to_json(config);
  return model::ModelParams::from_checkpoint(ckpt);
}

/// Client-side record of one session: unpadded frames and their points.
struct ShadowSession {
  std::vector<autodiff::Tensor> frames;
  std::vector<std::map<std::pair<int, int>, Polarity>> points;  // (row, col)
};

inline AnnotationSet padded_annotations(const std::map<std::pair<int, int>, Polarity>& pts, int h, int w) {
  AnnotationSet a(h, w);
  for (const auto& [rc, label] : pts) a.set({rc.first, rc.second, label});
  return a;
}

/// From-scratch guidance: guide_late on each annotated frame, then merge.
inline model::TaskRepresentation shadow_guidance(const ShadowSession& s, const model::ModelParams& params) {
  const auto& c = params.config();
  const int stride = c.feature_stride();
  std::vector<model::TaskRepresentation> reps;
  int fh = 0, fw = 0;
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    auto img = service::pad_to_stride(s.frames[i], stride);
    auto feat = model::extract_features(img, params);
    fh = feat.dim(1);
    fw = feat.dim(2);
    if (s.points[i].empty()) continue;
    auto ann = padded_annotations(s.points[i], img.dim(1), img.dim(2));
    reps.push_back(model::guide_late(feat, model::rasterize_annotations(ann, fh, fw, stride), c.locality));
  }
  if (reps.empty()) return model::empty_guidance(c, fh, fw);
  return model::merge_shots(reps);
}

/// From-scratch mask: segment() with the annotated frames as support and
/// `frame` as query. With no annotations anywhere the query itself, without
/// points, is the support.
inline model::BinaryMask shadow_mask(const ShadowSession& s, int frame, const model::ModelParams& params) {
  const auto& c = params.config();
  const int stride = c.feature_stride();
  const int h = s.frames[frame].dim(1), w = s.frames[frame].dim(2);
  std::vector<model::SupportItem> support;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    if (s.points[i].empty()) continue;
    auto img = service::pad_to_stride(s.frames[i], stride);
    support.push_back({img, padded_annotations(s.points[i], img.dim(1), img.dim(2))});
    pos += support.back().annotations.count(Polarity::kPositive);
    neg += support.back().annotations.count(Polarity::kNegative);
  }
  auto query = service::pad_to_stride(s.frames[frame], stride);
  if (c.head == model::Head::kPrototype && (pos == 0 || neg == 0)) {
    return {h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  }
  if (support.empty()) support.push_back({query, AnnotationSet(query.dim(1), query.dim(2))});
  return service::crop_mask(model::argmax_mask(model::segment(support, query, params).logits), h, w);
}

struct FastPathReport {
  int sequences = 0;
  int guidance_checks = 0;
  int mask_checks = 0;
  int guidance_mismatches = 0;
  int mask_mismatches = 0;
  int contract_failures = 0;  // accepted bad clicks, wrong indices
  std::string first_failure;
};

/// Random mutation sequences (clicks, relabels, removals, clears, appended
/// frames, out-of-bounds rejections) against one service per model variant.
/// After every step the service's guidance and the masks of the touched
/// frame and one random frame must equal the shadow bit for bit.
inline FastPathReport run_fast_path_sequences(int sequences, std::uint64_t seed) {
  using model::Head;
  using model::Locality;
  struct Variant {
    Head head;
    Locality locality;
  };
  const std::vector<Variant> variants = {{Head::kFeatureFusion, Locality::kGlobalPool},
                                         {Head::kFeatureFusion, Locality::kIdentity},
                                         {Head::kParamRegression, Locality::kGlobalPool},
                                         {Head::kPrototype, Locality::kGlobalPool}};
  struct Model {
    std::shared_ptr<const model::ModelParams> params;
    model::ModelParams global;  // same weights with pooled guidance
    std::unique_ptr<service::SessionService> svc;
  };
  std::vector<Model> models;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    model::GuidanceConfig c;
    c.head = variants[i].head;
    c.locality = variants[i].locality;
    auto p = std::make_shared<const model::ModelParams>(model::ModelParams::initialize(c, seed + i));
    auto g = with_locality(*p, Locality::kGlobalPool);
    models.push_back({p, std::move(g), std::make_unique<service::SessionService>(p, "m")});
  }

  FastPathReport report;
  std::mt19937_64 rng(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  for (int seq = 0; seq < sequences; ++seq) {
    ++report.sequences;
    const int vi = seq % static_cast<int>(variants.size());
    auto& m = models[vi];
    const int h = pick(12, 36), w = pick(12, 36);
    int frames = pick(1, 3);
    if (variants[vi].locality == Locality::kIdentity && seq % 8 != 3) frames = 1;
    ShadowSession shadow;
    for (int f = 0; f < frames; ++f) {
      shadow.frames.push_back(random_frame(rng, h, w));
      shadow.points.emplace_back();
    }
    const auto created = m.svc->create_session(shadow.frames, "m");
    const model::ModelParams& ref = created.locality == Locality::kIdentity ? *m.params : m.global;

    auto fail = [&](const std::string& what, int step) {
      if (report.first_failure.empty()) {
        std::ostringstream os;
        os << "sequence " << seq << " step " << step << ": " << what;
        report.first_failure = os.str();
      }
    };
    auto check = [&](int step, int frame, const std::optional<service::MaskResult>& returned) {
      ++report.guidance_checks;
      if (!same_representation(m.svc->guidance(created.id), shadow_guidance(shadow, ref))) {
        ++report.guidance_mismatches;
        fail("guidance differs", step);
      }
      const int other = pick(0, static_cast<int>(shadow.frames.size()) - 1);
      for (int f : {frame, other}) {
        ++report.mask_checks;
        const auto expected = shadow_mask(shadow, f, ref);
        if (m.svc->get_mask(created.id, f).mask != expected) {
          ++report.mask_mismatches;
          fail("mask of frame " + std::to_string(f) + " differs", step);
        }
      }
      if (returned) {
        ++report.mask_checks;
        if (returned->mask != shadow_mask(shadow, frame, ref)) {
          ++report.mask_mismatches;
          fail("returned mask differs", step);
        }
      }
    };

    check(-1, 0, std::nullopt);
    const int steps = pick(4, 9);
    for (int step = 0; step < steps; ++step) {
      const int frame = pick(0, static_cast<int>(shadow.frames.size()) - 1);
      auto& pts = shadow.points[frame];
      const int op = pick(0, 9);
      if (op <= 5) {
        // Clicks, sometimes on already-annotated pixels, plus removals.
        std::vector<service::Click> clicks;
        std::vector<service::Pixel> removals;
        for (int k = pick(1, 4); k > 0; --k) {
          int x = pick(0, w - 1), y = pick(0, h - 1);
          if (!pts.empty() && pick(0, 3) == 0) {
            auto it = std::next(pts.begin(), pick(0, static_cast<int>(pts.size()) - 1));
            y = it->first.first;
            x = it->first.second;
          }
          clicks.push_back({x, y, pick(0, 1) ? Polarity::kPositive : Polarity::kNegative});
        }
        if (!pts.empty() && pick(0, 2) == 0) {
          auto it = std::next(pts.begin(), pick(0, static_cast<int>(pts.size()) - 1));
          removals.push_back({it->first.second, it->first.first});
        }
        auto r = m.svc->add_annotations(created.id, frame, clicks, removals);
        for (const auto& p : removals) pts.erase({p.y, p.x});
        for (const auto& c : clicks) pts[{c.y, c.x}] = c.label;
        check(step, frame, r);
      } else if (op == 6) {
        // Rejected request: nothing may change.
        std::vector<service::Click> clicks{{pick(0, w - 1), pick(0, h - 1), Polarity::kPositive},
                                           {w + pick(0, 3), pick(-2, h - 1), Polarity::kNegative}};
        try {
          m.svc->add_annotations(created.id, frame, clicks);
          fail("out-of-bounds click accepted", step);
          ++report.contract_failures;
        } catch (const service::InvalidPoint& e) {
          if (e.index() != 1) {
            fail("wrong rejected index", step);
            ++report.contract_failures;
          }
        }
        check(step, frame, std::nullopt);
      } else if (op == 7) {
        m.svc->clear_annotations(created.id, frame);
        pts.clear();
        check(step, frame, std::nullopt);
      } else if (op == 8 && pick(0, 2) == 0) {
        m.svc->clear_annotations(created.id, std::nullopt);
        for (auto& p : shadow.points) p.clear();
        check(step, frame, std::nullopt);
      } else if (created.locality != Locality::kIdentity && shadow.frames.size() < 4) {
        shadow.frames.push_back(random_frame(rng, h, w));
        shadow.points.emplace_back();
        const int idx = m.svc->append_frame(created.id, shadow.frames.back());
        if (idx != static_cast<int>(shadow.frames.size()) - 1) {
          fail("frame index not dense", step);
          ++report.contract_failures;
        }
        check(step, idx, std::nullopt);
      }
    }
    m.svc->erase_session(created.id);
  }
  return report;
}

}  // namespace guidedseg::testing
