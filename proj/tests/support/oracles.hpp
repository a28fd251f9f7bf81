#pragma once

// Independent reference implementations the tests compare the library
// against. Kept deliberately naive: straight loops, no shared code with the
// library beyond basic containers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xmc/consensus.hpp"
#include "xmc/corpus.hpp"
#include "xmc/linalg.hpp"
#include "xmc/xsearch.hpp"

namespace oracle {

inline double dot_f(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

// quadratic consensus score: mean cosine against every pool member, self
// included
inline std::vector<double> consensus_quadratic(const xmc::CommentPool& pool) {
  const std::size_t n = pool.comments.size();
  std::vector<double> scores(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      total += dot_f(pool.comments[i].vec, pool.comments[j].vec);
    }
    scores[i] = total / double(n);
  }
  return scores;
}

// full-scan top-R by cosine, similarity desc then ordinal asc
inline std::vector<xmc::SearchHit> exact_search(const xmc::FloatMatrix& vectors,
                                                const std::vector<float>& query, int top_r) {
  std::vector<xmc::SearchHit> hits;
  for (std::size_t i = 0; i < vectors.rows; ++i) {
    double acc = 0.0;
    const auto row = vectors.row(i);
    for (std::size_t x = 0; x < row.size(); ++x) acc += double(row[x]) * double(query[x]);
    hits.push_back({std::int64_t(i), acc});
  }
  std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.ordinal < b.ordinal;
  });
  if (int(hits.size()) > top_r) hits.resize(top_r);
  return hits;
}

struct FusedPost {
  std::string post_id;
  double s_img;
  double s_txt;
  double s_fused;
};

// brute-force fused ranking over the whole wild set, self excluded by id
inline std::vector<FusedPost> brute_force_retrieval(const xmc::PostRecord& query,
                                                    const xmc::WildView& wild, double alpha,
                                                    int top_k) {
  std::vector<FusedPost> scored;
  for (std::size_t i = 0; i < wild.size(); ++i) {
    const auto& post = wild.post(std::int64_t(i));
    if (post.post_id == query.post_id) continue;
    FusedPost f;
    f.post_id = post.post_id;
    f.s_img = dot_f(query.image_vec, post.image_vec);
    f.s_txt = dot_f(query.text_vec, post.text_vec);
    f.s_fused = alpha * f.s_img + (1.0 - alpha) * f.s_txt;
    scored.push_back(f);
  }
  std::sort(scored.begin(), scored.end(), [](const FusedPost& a, const FusedPost& b) {
    if (a.s_fused != b.s_fused) return a.s_fused > b.s_fused;
    return a.post_id < b.post_id;
  });
  if (int(scored.size()) > top_k) scored.resize(top_k);
  return scored;
}

// unit vectors drawn from a spherical gaussian
inline std::vector<float> random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
  } while (norm == 0.0);
  std::vector<float> out(dim);
  for (int i = 0; i < dim; ++i) out[i] = float(v[i] / norm);
  return out;
}

inline xmc::FloatMatrix random_unit_rows(std::mt19937_64& rng, std::size_t rows, int dim) {
  xmc::FloatMatrix m(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto v = random_unit(rng, dim);
    std::copy(v.begin(), v.end(), m.row(r).begin());
  }
  return m;
}

// clustered unit vectors: pick a center per cluster, add noise, renormalize
inline xmc::FloatMatrix clustered_unit_rows(std::mt19937_64& rng, std::size_t rows, int dim,
                                            int clusters, double noise) {
  std::vector<std::vector<float>> centers;
  for (int c = 0; c < clusters; ++c) centers.push_back(random_unit(rng, dim));
  std::normal_distribution<double> gauss(0.0, noise);
  xmc::FloatMatrix m(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& center = centers[r % clusters];
    std::vector<double> v(dim);
    double norm = 0.0;
    for (int x = 0; x < dim; ++x) {
      v[x] = double(center[x]) + gauss(rng);
      norm += v[x] * v[x];
    }
    norm = std::sqrt(norm);
    auto row = m.row(r);
    for (int x = 0; x < dim; ++x) row[x] = float(v[x] / norm);
  }
  return m;
}

}  // namespace oracle
