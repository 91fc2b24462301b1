#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "denseloc/decoder.hpp"
#include "denseloc/geo.hpp"
#include "denseloc/geometry.hpp"

namespace denseloc {

struct Match {
  int idx1 = 0;
  int idx2 = 0;
  double distance = 0.0;  // descriptor euclidean distance
};

struct MatchSet {
  std::vector<Match> matches;  // each keypoint appears at most once
};

// Mutual nearest neighbors by descriptor distance; nearest-neighbor ties
// resolve to the lowest keypoint index.
inline MatchSet match_keypoints(const std::vector<Keypoint>& kps1, const std::vector<Keypoint>& kps2) {
  MatchSet out;
  if (kps1.empty() || kps2.empty()) return out;
  auto nearest = [](const std::vector<Keypoint>& from, const std::vector<Keypoint>& to) {
    std::vector<int> nn(from.size(), -1);
    for (std::size_t a = 0; a < from.size(); ++a) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t b = 0; b < to.size(); ++b) {
        double sq = 0.0;
        for (std::size_t k = 0; k < from[a].descriptor.size(); ++k) {
          const double d = from[a].descriptor[k] - to[b].descriptor[k];
          sq += d * d;
        }
        if (sq < best) {
          best = sq;
          nn[a] = static_cast<int>(b);
        }
      }
    }
    return nn;
  };
  const std::vector<int> nn12 = nearest(kps1, kps2);
  const std::vector<int> nn21 = nearest(kps2, kps1);
  for (std::size_t a = 0; a < kps1.size(); ++a) {
    const int b = nn12[a];
    if (b < 0 || nn21[b] != static_cast<int>(a)) continue;
    double sq = 0.0;
    for (std::size_t k = 0; k < kps1[a].descriptor.size(); ++k) {
      const double d = kps1[a].descriptor[k] - kps2[b].descriptor[k];
      sq += d * d;
    }
    out.matches.push_back({static_cast<int>(a), b, std::sqrt(sq)});
  }
  return out;
}

struct MatchingReport {
  bool defined = false;  // false when either shared-region keypoint set is empty
  std::optional<double> repeatability;
  std::optional<double> mle_px;  // undefined when nothing repeats
  std::optional<double> map;
  std::optional<double> matching_score;
  int kp1_count = 0, kp2_count = 0;
  int shared1 = 0, shared2 = 0;
  int match_count = 0, correct_matches = 0;
};

// Average precision with all-point interpolation over a ranked binary list:
// mean of precision at each positive's rank.
inline double average_precision(const std::vector<bool>& ranked_labels) {
  int positives = 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < ranked_labels.size(); ++k) {
    if (!ranked_labels[k]) continue;
    ++positives;
    acc += static_cast<double>(positives) / static_cast<double>(k + 1);
  }
  return positives > 0 ? acc / positives : 0.0;
}

// Homography-supervised matching metrics. The shared region is the overlap
// of the two views under h (a keypoint is shared when its warp lands inside
// the other image, equivalently when it lies inside the warped image quad);
// only shared keypoints enter denominators, and a match counts as correct
// only when both endpoints are shared and the warp residual is within
// eps_px.
inline MatchingReport matching_metrics(const Homography& h, int w1, int h1, int w2, int h2,
                                       const std::vector<Keypoint>& kps1, const std::vector<Keypoint>& kps2,
                                       double eps_px = 3.0) {
  MatchingReport report;
  report.kp1_count = static_cast<int>(kps1.size());
  report.kp2_count = static_cast<int>(kps2.size());
  const Homography hinv = h.inverse();

  auto in_rect = [](const Vec2& p, int w, int hgt) {
    return p.x >= 0.0 && p.x < static_cast<double>(w) && p.y >= 0.0 && p.y < static_cast<double>(hgt);
  };
  std::vector<bool> shared1(kps1.size()), shared2(kps2.size());
  std::vector<Vec2> warped1(kps1.size()), warped2(kps2.size());
  for (std::size_t i = 0; i < kps1.size(); ++i) {
    warped1[i] = h.apply(kps1[i].px, kps1[i].py);
    shared1[i] = in_rect(warped1[i], w2, h2);
    if (shared1[i]) ++report.shared1;
  }
  for (std::size_t i = 0; i < kps2.size(); ++i) {
    warped2[i] = hinv.apply(kps2[i].px, kps2[i].py);
    shared2[i] = in_rect(warped2[i], w1, h1);
    if (shared2[i]) ++report.shared2;
  }
  if (report.shared1 == 0 || report.shared2 == 0) return report;  // undefined
  report.defined = true;

  // repeatability: shared keypoints with any counterpart within eps_px,
  // averaged over both directions; residuals of repeated points feed MLE
  std::vector<double> residuals;
  auto count_repeats = [&](const std::vector<Vec2>& warped, const std::vector<bool>& shared,
                           const std::vector<Keypoint>& others) {
    int repeated = 0;
    for (std::size_t i = 0; i < warped.size(); ++i) {
      if (!shared[i]) continue;
      double best = std::numeric_limits<double>::infinity();
      for (const Keypoint& o : others) {
        const double dx = warped[i].x - o.px, dy = warped[i].y - o.py;
        best = std::min(best, std::sqrt(dx * dx + dy * dy));
      }
      if (best <= eps_px) {
        ++repeated;
        residuals.push_back(best);
      }
    }
    return repeated;
  };
  const int rep1 = count_repeats(warped1, shared1, kps2);
  const int rep2 = count_repeats(warped2, shared2, kps1);
  report.repeatability = 0.5 * (static_cast<double>(rep1) / report.shared1 + static_cast<double>(rep2) / report.shared2);
  if (!residuals.empty()) {
    double acc = 0.0;
    for (const double r : residuals) acc += r;
    report.mle_px = acc / static_cast<double>(residuals.size());
  }

  MatchSet matches = match_keypoints(kps1, kps2);
  report.match_count = static_cast<int>(matches.matches.size());
  std::stable_sort(matches.matches.begin(), matches.matches.end(),
                   [](const Match& a, const Match& b) { return a.distance < b.distance; });
  std::vector<bool> labels;
  labels.reserve(matches.matches.size());
  for (const Match& m : matches.matches) {
    const Vec2& w = warped1[m.idx1];
    const double dx = w.x - kps2[m.idx2].px, dy = w.y - kps2[m.idx2].py;
    const bool correct =
        shared1[m.idx1] && shared2[m.idx2] && std::sqrt(dx * dx + dy * dy) <= eps_px;
    labels.push_back(correct);
    if (correct) ++report.correct_matches;
  }
  report.map = average_precision(labels);
  report.matching_score = static_cast<double>(report.correct_matches) / std::min(report.shared1, report.shared2);
  return report;
}

struct DbEntry {
  std::string id;
  std::vector<double> descriptor;
  double lat = 0.0;
  double lon = 0.0;
};

// Exact (linear scan) nearest-neighbor index over global descriptors.
struct RetrievalIndex {
  std::vector<DbEntry> entries;
};

inline RetrievalIndex build_index(std::vector<DbEntry> db) {
  std::unordered_set<std::string> seen;
  for (const DbEntry& e : db)
    if (!seen.insert(e.id).second) throw ConfigError("duplicate database id '" + e.id + "'");
  if (!db.empty()) {
    const std::size_t dim = db.front().descriptor.size();
    for (const DbEntry& e : db)
      if (e.descriptor.size() != dim) throw ShapeError("database descriptors have mixed dimensions");
  }
  return RetrievalIndex{std::move(db)};
}

struct RankedHit {
  double distance = 0.0;
  std::size_t entry = 0;  // index into RetrievalIndex::entries
};

// Full ranking by (distance, id); the id comparison makes equidistant
// results deterministic.
inline std::vector<RankedHit> rank_all(const RetrievalIndex& index, const std::vector<double>& descriptor) {
  std::vector<RankedHit> hits;
  hits.reserve(index.entries.size());
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const DbEntry& e = index.entries[i];
    if (e.descriptor.size() != descriptor.size()) throw ShapeError("query descriptor dimension mismatch");
    double sq = 0.0;
    for (std::size_t k = 0; k < descriptor.size(); ++k) {
      const double d = descriptor[k] - e.descriptor[k];
      sq += d * d;
    }
    hits.push_back({std::sqrt(sq), i});
  }
  std::sort(hits.begin(), hits.end(), [&](const RankedHit& a, const RankedHit& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return index.entries[a.entry].id < index.entries[b.entry].id;
  });
  return hits;
}

struct QueryEntry {
  std::string id;
  std::vector<double> descriptor;
  double lat = 0.0;
  double lon = 0.0;
};

struct RetrievalReport {
  std::map<int, double> recall_at;
  std::vector<std::pair<double, double>> pr_curve;  // (precision, recall)
  double map = 0.0;
};

// recall@N at geo threshold d_m; PR curve swept over the top-1 descriptor
// distance; mAP per query over geo-relevance labels (queries with no
// relevant database entry are excluded from the average).
inline RetrievalReport recall_at_n(const RetrievalIndex& index, const std::vector<QueryEntry>& queries,
                                   double d_m = 25.0, std::vector<int> ns = {1, 5, 10}) {
  if (queries.empty()) throw ConfigError("retrieval evaluation needs at least one query");
  if (index.entries.empty()) throw ConfigError("retrieval evaluation needs a non-empty database");
  std::sort(ns.begin(), ns.end());
  RetrievalReport report;

  struct Top1 {
    double distance;
    bool correct;
  };
  std::vector<Top1> top1;
  top1.reserve(queries.size());
  double ap_sum = 0.0;
  int ap_queries = 0;
  std::map<int, int> hits;
  for (const int n : ns) hits[n] = 0;

  for (const QueryEntry& q : queries) {
    const std::vector<RankedHit> ranked = rank_all(index, q.descriptor);
    std::vector<bool> relevant(ranked.size());
    int n_relevant = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      const DbEntry& e = index.entries[ranked[k].entry];
      relevant[k] = haversine_m(q.lat, q.lon, e.lat, e.lon) <= d_m;
      if (relevant[k]) ++n_relevant;
    }
    for (const int n : ns) {
      const std::size_t limit = std::min<std::size_t>(n, ranked.size());
      for (std::size_t k = 0; k < limit; ++k)
        if (relevant[k]) {
          ++hits[n];
          break;
        }
    }
    top1.push_back({ranked.front().distance, static_cast<bool>(relevant.front())});
    if (n_relevant > 0) {
      ap_sum += average_precision(relevant);
      ++ap_queries;
    }
  }
  for (const int n : ns) report.recall_at[n] = static_cast<double>(hits[n]) / static_cast<double>(queries.size());
  report.map = ap_queries > 0 ? ap_sum / ap_queries : 0.0;

  // accept a query's top-1 answer iff its descriptor distance is below a
  // threshold; sweep the threshold through the observed distances
  std::sort(top1.begin(), top1.end(), [](const Top1& a, const Top1& b) { return a.distance < b.distance; });
  int total_correct = 0;
  for (const Top1& t : top1) total_correct += t.correct ? 1 : 0;
  if (total_correct > 0) {
    int tp = 0;
    for (std::size_t k = 0; k < top1.size(); ++k) {
      if (top1[k].correct) ++tp;
      report.pr_curve.emplace_back(static_cast<double>(tp) / static_cast<double>(k + 1),
                                   static_cast<double>(tp) / static_cast<double>(total_correct));
    }
  }
  return report;
}

// Detection-strength overlay: s_tilde upsampled (nearest) to the image
// resolution, scaled so its peak has full strength, alpha-blended in red.
inline Tensor3 render_detection_heatmap(const Tensor3& image, const Grid2& s_tilde, int stride,
                                        double alpha = 0.6) {
  if (stride <= 0) throw ConfigError("heatmap stride must be positive");
  if (image.c != 3) throw ShapeError("heatmap expects a 3-channel image");
  if (s_tilde.h * stride < image.h || s_tilde.w * stride < image.w)
    throw ShapeError("detection grid does not cover the image");
  double peak = 0.0;
  for (const double v : s_tilde.data) peak = std::max(peak, v);
  Tensor3 out(image.h, image.w, 3);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      const double heat = peak > 0.0 ? s_tilde.at(y / stride, x / stride) / peak : 0.0;
      const double a = alpha * heat;
      out.at(y, x, 0) = (1.0 - a) * image.at(y, x, 0) + a;
      out.at(y, x, 1) = (1.0 - a) * image.at(y, x, 1);
      out.at(y, x, 2) = (1.0 - a) * image.at(y, x, 2);
    }
  }
  return out;
}

}  // namespace denseloc
