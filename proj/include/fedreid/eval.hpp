#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "fedreid/data.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/nn.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

struct RetrievalResult {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::vector<double> average_precision;  // per query
};

// Eval-mode embeddings, one row per dataset row.
inline Matrix extract_embeddings(const EmbeddingNet& net, const Matrix& samples) { return net.infer(samples); }

inline Matrix l2_distance_matrix(const Matrix& queries, const Matrix& gallery) {
  if (queries.cols() != gallery.cols()) {
    throw InputError(concat_message("distance: query dim ", queries.cols(), " != gallery dim ", gallery.cols()));
  }
  Matrix out(queries.rows(), gallery.rows());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    auto a = queries.row(q);
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      auto b = gallery.row(g);
      double s = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s += d * d;
      }
      out(q, g) = std::sqrt(s);
    }
  }
  return out;
}

namespace detail {

inline void check_retrieval_inputs(const Matrix& dists, std::span<const int> query_ids, std::span<const int> gallery_ids) {
  if (dists.rows() != query_ids.size() || dists.cols() != gallery_ids.size()) {
    throw InputError("distance matrix shape does not match id lists");
  }
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    if (std::find(gallery_ids.begin(), gallery_ids.end(), query_ids[q]) == gallery_ids.end()) {
      throw InputError(concat_message("query ", q, " (id ", query_ids[q], ") has no match in the gallery"));
    }
  }
}

// Gallery indices sorted by distance; equal distances keep index order.
inline std::vector<std::size_t> ranked_gallery(const Matrix& dists, std::size_t q) {
  std::vector<std::size_t> order(dists.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dists(q, a) < dists(q, b); });
  return order;
}

}  // namespace detail

// Fraction of queries whose first correct match is within the top k, for each k.
inline std::vector<double> cmc(const Matrix& dists, std::span<const int> query_ids, std::span<const int> gallery_ids,
                               std::span<const std::size_t> ks) {
  detail::check_retrieval_inputs(dists, query_ids, gallery_ids);
  std::vector<double> hits(ks.size(), 0.0);
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto order = detail::ranked_gallery(dists, q);
    std::size_t first = 0;
    while (gallery_ids[order[first]] != query_ids[q]) ++first;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (first < ks[i]) hits[i] += 1.0;
    }
  }
  for (double& h : hits) h /= static_cast<double>(query_ids.size());
  return hits;
}

// Non-interpolated AP per query: mean over relevant positions of precision at
// that position in the distance-sorted gallery.
inline std::vector<double> average_precisions(const Matrix& dists, std::span<const int> query_ids,
                                              std::span<const int> gallery_ids) {
  detail::check_retrieval_inputs(dists, query_ids, gallery_ids);
  std::vector<double> aps(query_ids.size(), 0.0);
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto order = detail::ranked_gallery(dists, q);
    double found = 0.0, sum = 0.0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      if (gallery_ids[order[pos]] == query_ids[q]) {
        found += 1.0;
        sum += found / static_cast<double>(pos + 1);
      }
    }
    aps[q] = sum / found;
  }
  return aps;
}

inline double mean_average_precision(const Matrix& dists, std::span<const int> query_ids,
                                     std::span<const int> gallery_ids) {
  const auto aps = average_precisions(dists, query_ids, gallery_ids);
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

// Argmax accuracy; ties go to the lowest class index.
inline double classification_accuracy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw InputError("label count does not match logits");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Query and gallery samples of an evaluation domain.
struct RetrievalSet {
  Matrix query;
  Matrix gallery;
  std::vector<int> query_ids;
  std::vector<int> gallery_ids;
};

inline RetrievalSet make_retrieval_set(const DomainDataset& ds, const QueryGallery& split) {
  RetrievalSet s;
  s.query = gather_rows(ds.features, split.query);
  s.gallery = gather_rows(ds.features, split.gallery);
  for (std::size_t i : split.query) s.query_ids.push_back(ds.labels[i]);
  for (std::size_t i : split.gallery) s.gallery_ids.push_back(ds.labels[i]);
  return s;
}

inline RetrievalResult evaluate_features(const Matrix& query_features, const Matrix& gallery_features,
                                         const RetrievalSet& set) {
  const Matrix d = l2_distance_matrix(query_features, gallery_features);
  const std::size_t ks[] = {1, 5, 10};
  const auto ranks = cmc(d, set.query_ids, set.gallery_ids, ks);
  RetrievalResult r;
  r.rank1 = ranks[0];
  r.rank5 = ranks[1];
  r.rank10 = ranks[2];
  r.average_precision = average_precisions(d, set.query_ids, set.gallery_ids);
  r.map = std::accumulate(r.average_precision.begin(), r.average_precision.end(), 0.0) /
          static_cast<double>(r.average_precision.size());
  return r;
}

inline RetrievalResult evaluate_embedding(const EmbeddingNet& net, const RetrievalSet& set) {
  return evaluate_features(extract_embeddings(net, set.query), extract_embeddings(net, set.gallery), set);
}

}  // namespace fedreid
