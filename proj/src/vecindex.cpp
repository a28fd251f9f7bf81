#include "xmc/vecindex.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "binio.hpp"
#include "xmc/error.hpp"

namespace xmc {

namespace {

// nearest centroid by squared L2, lowest index on ties
std::pair<int, double> nearest_row(const FloatMatrix& rows, std::span<const float> v) {
  int best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < rows.rows; ++j) {
    const double d2 = squared_l2_distance(rows.row(j), v);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = static_cast<int>(j);
    }
  }
  return {best, best_d2};
}

void sort_hits(std::vector<SearchHit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.ordinal < b.ordinal;
  });
}

}  // namespace

KMeansResult kmeans(const FloatMatrix& points, int k, int iters, std::uint64_t seed) {
  const std::size_t n = points.rows;
  const std::size_t d = points.cols;
  if (k < 1) throw ArgumentError("kmeans: k must be at least 1");
  if (iters < 1) throw ArgumentError("kmeans: iters must be at least 1");
  if (n < static_cast<std::size_t>(k)) throw ArgumentError("kmeans: fewer points than clusters");

  std::mt19937_64 rng(seed);
  KMeansResult result;
  result.centroids = FloatMatrix(k, d);

  // k-means++ seeding
  std::vector<double> seed_d2(n, 0.0);
  {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const std::size_t first = pick(rng);
    std::copy(points.row(first).begin(), points.row(first).end(),
              result.centroids.row(0).begin());
    for (std::size_t i = 0; i < n; ++i) {
      seed_d2[i] = squared_l2_distance(points.row(i), result.centroids.row(0));
    }
    for (int j = 1; j < k; ++j) {
      const double total = std::accumulate(seed_d2.begin(), seed_d2.end(), 0.0);
      std::size_t choice = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> pick_mass(0.0, total);
        const double r = pick_mass(rng);
        double cum = 0.0;
        choice = n;  // sentinel
        for (std::size_t i = 0; i < n; ++i) {
          if (seed_d2[i] <= 0.0) continue;
          cum += seed_d2[i];
          if (cum >= r) {
            choice = i;
            break;
          }
        }
        if (choice == n) {  // numeric slack: take the last positive-mass point
          for (std::size_t i = n; i-- > 0;) {
            if (seed_d2[i] > 0.0) {
              choice = i;
              break;
            }
          }
        }
      } else {
        // every point coincides with a chosen centroid; duplicates are all
        // that is left
        choice = static_cast<std::size_t>(j) % n;
      }
      std::copy(points.row(choice).begin(), points.row(choice).end(),
                result.centroids.row(j).begin());
      for (std::size_t i = 0; i < n; ++i) {
        seed_d2[i] = std::min(seed_d2[i],
                              squared_l2_distance(points.row(i), result.centroids.row(j)));
      }
    }
  }

  result.assignments.assign(n, 0);
  std::vector<double> point_d2(n, 0.0);
  std::vector<double> sums(static_cast<std::size_t>(k) * d);
  std::vector<std::size_t> counts(k);

  const auto assign_all = [&]() {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [cluster, d2] = nearest_row(result.centroids, points.row(i));
      result.assignments[i] = cluster;
      point_d2[i] = d2;
      inertia += d2;
    }
    return inertia;
  };

  for (int iter = 0; iter < iters; ++iter) {
    result.inertia.push_back(assign_all());

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0u);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(result.assignments[i]);
      counts[c]++;
      const auto row = points.row(i);
      for (std::size_t x = 0; x < d; ++x) sums[c * d + x] += row[x];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto row = result.centroids.row(c);
      for (std::size_t x = 0; x < d; ++x) {
        row[x] = static_cast<float>(sums[static_cast<std::size_t>(c) * d + x] / counts[c]);
      }
    }

    // re-seed empty clusters from the farthest points, one point each
    std::vector<int> empties;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) empties.push_back(c);
    }
    if (!empties.empty()) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0u);
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (point_d2[a] != point_d2[b]) return point_d2[a] > point_d2[b];
        return a < b;
      });
      for (std::size_t e = 0; e < empties.size() && e < n; ++e) {
        const std::size_t p = order[e];
        std::copy(points.row(p).begin(), points.row(p).end(),
                  result.centroids.row(empties[e]).begin());
      }
    }
  }

  // final assignment so assignments/inertia.back() describe the returned
  // centroids
  result.inertia.push_back(assign_all());
  return result;
}

IvfPqIndex IvfPqIndex::train(const FloatMatrix& vectors, const IvfPqConfig& config,
                             std::uint64_t seed) {
  const std::size_t n = vectors.rows;
  const int dim = static_cast<int>(vectors.cols);
  if (config.nlist < 1 || config.m < 1 || config.ks < 1) {
    throw ArgumentError("ivfpq: nlist, m, ks must be positive");
  }
  if (config.ks > 256) throw ArgumentError("ivfpq: ks must fit one byte (<= 256)");
  if (dim % config.m != 0) throw ArgumentError("ivfpq: dim must be divisible by m");
  const std::size_t need = static_cast<std::size_t>(std::max(config.nlist, config.ks));
  if (n < need) {
    throw DataError("ivfpq: " + std::to_string(n) + " training vectors, need at least " +
                    std::to_string(need));
  }

  IvfPqIndex index;
  index.dim_ = dim;
  index.dsub_ = dim / config.m;
  index.config_ = config;

  auto coarse = kmeans(vectors, config.nlist, config.kmeans_iters, seed);
  index.coarse_centroids_ = std::move(coarse.centroids);

  // residuals relative to the assigned coarse centroid
  FloatMatrix residuals(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto point = vectors.row(i);
    const auto centroid = index.coarse_centroids_.row(coarse.assignments[i]);
    auto out = residuals.row(i);
    for (int x = 0; x < dim; ++x) out[x] = point[x] - centroid[x];
  }

  index.codebooks_.assign(
      static_cast<std::size_t>(config.m) * config.ks * index.dsub_, 0.0f);
  for (int j = 0; j < config.m; ++j) {
    FloatMatrix sub(n, index.dsub_);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = residuals.row(i);
      std::copy(row.begin() + static_cast<std::size_t>(j) * index.dsub_,
                row.begin() + static_cast<std::size_t>(j + 1) * index.dsub_,
                sub.row(i).begin());
    }
    auto book = kmeans(sub, config.ks, config.kmeans_iters, seed + 0x9e3779b97f4a7c15ULL * (j + 1));
    std::copy(book.centroids.data.begin(), book.centroids.data.end(),
              index.codebooks_.begin() +
                  static_cast<std::size_t>(j) * config.ks * index.dsub_);
  }

  index.lists_.resize(config.nlist);
  index.trained_ = true;
  return index;
}

std::span<const float> IvfPqIndex::codebook_entry(int subspace, int code) const {
  const std::size_t offset =
      (static_cast<std::size_t>(subspace) * config_.ks + code) * dsub_;
  return {codebooks_.data() + offset, static_cast<std::size_t>(dsub_)};
}

FloatMatrix IvfPqIndex::codebook(int subspace) const {
  FloatMatrix out(config_.ks, dsub_);
  for (int k = 0; k < config_.ks; ++k) {
    const auto entry = codebook_entry(subspace, k);
    std::copy(entry.begin(), entry.end(), out.row(k).begin());
  }
  return out;
}

std::vector<std::size_t> IvfPqIndex::list_sizes() const {
  std::vector<std::size_t> sizes;
  sizes.reserve(lists_.size());
  for (const auto& list : lists_) sizes.push_back(list.ordinals.size());
  return sizes;
}

int IvfPqIndex::assign_coarse(std::span<const float> vector) const {
  if (!trained_) throw StateError("ivfpq: index is not trained");
  if (vector.size() != static_cast<std::size_t>(dim_)) {
    throw ArgumentError("ivfpq: vector dimension mismatch");
  }
  return nearest_row(coarse_centroids_, vector).first;
}

std::vector<std::uint8_t> IvfPqIndex::encode_residual(std::span<const float> vector,
                                                      int list_id) const {
  if (!trained_) throw StateError("ivfpq: index is not trained");
  const auto centroid = coarse_centroids_.row(list_id);
  std::vector<float> residual(dim_);
  for (int x = 0; x < dim_; ++x) residual[x] = vector[x] - centroid[x];

  std::vector<std::uint8_t> code(config_.m);
  for (int j = 0; j < config_.m; ++j) {
    const std::span<const float> sub{residual.data() + static_cast<std::size_t>(j) * dsub_,
                                     static_cast<std::size_t>(dsub_)};
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int k = 0; k < config_.ks; ++k) {
      const double d2 = squared_l2_distance(codebook_entry(j, k), sub);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = k;
      }
    }
    code[j] = static_cast<std::uint8_t>(best);
  }
  return code;
}

void IvfPqIndex::add(std::int64_t ordinal, std::span<const float> vector) {
  if (!trained_) throw StateError("ivfpq: cannot add to an untrained index");
  if (frozen_) throw StateError("ivfpq: index is frozen");
  if (vector.size() != static_cast<std::size_t>(dim_)) {
    throw ArgumentError("ivfpq: vector dimension mismatch");
  }
  if (locations_.contains(ordinal)) {
    throw ArgumentError("ivfpq: duplicate ordinal " + std::to_string(ordinal));
  }
  const int list_id = assign_coarse(vector);
  const auto code = encode_residual(vector, list_id);
  auto& list = lists_[list_id];
  locations_.emplace(ordinal,
                     std::make_pair(static_cast<std::uint32_t>(list_id),
                                    static_cast<std::uint32_t>(list.ordinals.size())));
  list.ordinals.push_back(ordinal);
  list.codes.insert(list.codes.end(), code.begin(), code.end());
  ++count_;
}

void IvfPqIndex::freeze() {
  if (!trained_) throw StateError("ivfpq: cannot freeze an untrained index");
  frozen_ = true;
}

void IvfPqIndex::rebuild_location_map() {
  locations_.clear();
  for (std::uint32_t l = 0; l < lists_.size(); ++l) {
    const auto& list = lists_[l];
    for (std::uint32_t p = 0; p < list.ordinals.size(); ++p) {
      locations_.emplace(list.ordinals[p], std::make_pair(l, p));
    }
  }
}

std::vector<SearchHit> IvfPqIndex::search(std::span<const float> query, int top_r,
                                          int nprobe) const {
  if (!trained_) throw StateError("ivfpq: cannot search an untrained index");
  if (!frozen_) throw StateError("ivfpq: freeze the index before searching");
  if (query.size() != static_cast<std::size_t>(dim_)) {
    throw ArgumentError("ivfpq: query dimension mismatch");
  }
  if (nprobe < 1 || nprobe > config_.nlist) {
    throw ArgumentError("ivfpq: nprobe must lie in [1, nlist]");
  }
  if (top_r <= 0 || count_ == 0) return {};

  // probe order: coarse distance ascending, list id ascending
  std::vector<std::pair<double, int>> coarse(config_.nlist);
  for (int l = 0; l < config_.nlist; ++l) {
    coarse[l] = {squared_l2_distance(coarse_centroids_.row(l), query), l};
  }
  std::partial_sort(coarse.begin(), coarse.begin() + nprobe, coarse.end());

  std::vector<SearchHit> hits;
  std::vector<double> lut(static_cast<std::size_t>(config_.m) * config_.ks);
  std::vector<float> residual(dim_);
  for (int p = 0; p < nprobe; ++p) {
    const int list_id = coarse[p].second;
    const auto& list = lists_[list_id];
    if (list.ordinals.empty()) continue;

    const auto centroid = coarse_centroids_.row(list_id);
    for (int x = 0; x < dim_; ++x) residual[x] = query[x] - centroid[x];
    for (int j = 0; j < config_.m; ++j) {
      const std::span<const float> sub{residual.data() + static_cast<std::size_t>(j) * dsub_,
                                       static_cast<std::size_t>(dsub_)};
      for (int k = 0; k < config_.ks; ++k) {
        lut[static_cast<std::size_t>(j) * config_.ks + k] =
            squared_l2_distance(codebook_entry(j, k), sub);
      }
    }

    for (std::size_t e = 0; e < list.ordinals.size(); ++e) {
      const std::uint8_t* code = list.codes.data() + e * config_.m;
      double d2 = 0.0;
      for (int j = 0; j < config_.m; ++j) {
        d2 += lut[static_cast<std::size_t>(j) * config_.ks + code[j]];
      }
      hits.push_back({list.ordinals[e], 1.0 - d2 / 2.0});
    }
  }

  sort_hits(hits);
  if (hits.size() > static_cast<std::size_t>(top_r)) hits.resize(top_r);
  return hits;
}

std::optional<double> IvfPqIndex::adc_similarity(std::span<const float> query,
                                                 std::int64_t ordinal) const {
  if (!trained_) throw StateError("ivfpq: index is not trained");
  const auto it = locations_.find(ordinal);
  if (it == locations_.end()) return std::nullopt;
  const auto [list_id, pos] = it->second;
  const auto& list = lists_[list_id];
  const auto centroid = coarse_centroids_.row(list_id);
  const std::uint8_t* code = list.codes.data() + static_cast<std::size_t>(pos) * config_.m;

  // same arithmetic as the search LUT: residual rounded to float, per-subspace
  // sums in double, so both paths report identical similarities
  double d2 = 0.0;
  for (int j = 0; j < config_.m; ++j) {
    const auto entry = codebook_entry(j, code[j]);
    double sub = 0.0;
    for (int x = 0; x < dsub_; ++x) {
      const int coord = j * dsub_ + x;
      const float r = query[coord] - centroid[coord];
      const double diff = static_cast<double>(entry[x]) - static_cast<double>(r);
      sub += diff * diff;
    }
    d2 += sub;
  }
  return 1.0 - d2 / 2.0;
}

std::vector<float> IvfPqIndex::reconstruct(std::int64_t ordinal) const {
  if (!trained_) throw StateError("ivfpq: index is not trained");
  const auto it = locations_.find(ordinal);
  if (it == locations_.end()) {
    throw ArgumentError("ivfpq: unknown ordinal " + std::to_string(ordinal));
  }
  const auto [list_id, pos] = it->second;
  const auto& list = lists_[list_id];
  const auto centroid = coarse_centroids_.row(list_id);
  const std::uint8_t* code = list.codes.data() + static_cast<std::size_t>(pos) * config_.m;

  std::vector<float> out(dim_);
  for (int j = 0; j < config_.m; ++j) {
    const auto entry = codebook_entry(j, code[j]);
    for (int x = 0; x < dsub_; ++x) {
      out[j * dsub_ + x] = centroid[j * dsub_ + x] + entry[x];
    }
  }
  return out;
}

void IvfPqIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open index file for writing: " + path.string());
  binio::put_magic(out, "IVFPQ1", 6);
  binio::put_le<std::uint16_t>(out, 1);
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.nlist));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.m));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.ks));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.kmeans_iters));
  binio::put_le<std::uint8_t>(out, trained_ ? 1 : 0);
  binio::put_le<std::uint8_t>(out, frozen_ ? 1 : 0);
  binio::put_le<std::uint64_t>(out, count_);
  for (float v : coarse_centroids_.data) binio::put_f32(out, v);
  for (float v : codebooks_) binio::put_f32(out, v);
  for (const auto& list : lists_) {
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(list.ordinals.size()));
    for (std::size_t e = 0; e < list.ordinals.size(); ++e) {
      binio::put_le<std::int64_t>(out, list.ordinals[e]);
      binio::put_bytes(out, list.codes.data() + e * config_.m, config_.m);
    }
  }
  if (!out) throw DataError("short write to index file: " + path.string());
}

IvfPqIndex IvfPqIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open index file: " + path.string());
  binio::expect_magic(in, "IVFPQ1", 6, "index " + path.string());
  const auto version = binio::get_le<std::uint16_t>(in);
  if (version != 1) throw DataError("unsupported index version " + std::to_string(version));

  IvfPqIndex index;
  index.dim_ = static_cast<int>(binio::get_le<std::uint32_t>(in));
  index.config_.nlist = static_cast<int>(binio::get_le<std::uint32_t>(in));
  index.config_.m = static_cast<int>(binio::get_le<std::uint32_t>(in));
  index.config_.ks = static_cast<int>(binio::get_le<std::uint32_t>(in));
  index.config_.kmeans_iters = static_cast<int>(binio::get_le<std::uint32_t>(in));
  index.trained_ = binio::get_le<std::uint8_t>(in) != 0;
  index.frozen_ = binio::get_le<std::uint8_t>(in) != 0;
  index.count_ = binio::get_le<std::uint64_t>(in);
  if (index.dim_ <= 0 || index.config_.m <= 0 || index.dim_ % index.config_.m != 0) {
    throw DataError("index file carries inconsistent dimensions");
  }
  index.dsub_ = index.dim_ / index.config_.m;

  index.coarse_centroids_ = FloatMatrix(index.config_.nlist, index.dim_);
  for (auto& v : index.coarse_centroids_.data) v = binio::get_f32(in);
  index.codebooks_.resize(static_cast<std::size_t>(index.config_.m) * index.config_.ks *
                          index.dsub_);
  for (auto& v : index.codebooks_) v = binio::get_f32(in);

  index.lists_.resize(index.config_.nlist);
  for (auto& list : index.lists_) {
    const auto len = binio::get_le<std::uint32_t>(in);
    list.ordinals.resize(len);
    list.codes.resize(static_cast<std::size_t>(len) * index.config_.m);
    for (std::uint32_t e = 0; e < len; ++e) {
      list.ordinals[e] = binio::get_le<std::int64_t>(in);
      binio::get_bytes(in, list.codes.data() + static_cast<std::size_t>(e) * index.config_.m,
                       index.config_.m);
    }
  }
  index.rebuild_location_map();
  return index;
}

std::vector<SearchHit> search_exact(const FloatMatrix& vectors, std::span<const float> query,
                                    int top_r) {
  if (vectors.rows > 0 && query.size() != vectors.cols) {
    throw ArgumentError("search_exact: query dimension mismatch");
  }
  if (top_r <= 0) return {};
  std::vector<SearchHit> hits;
  hits.reserve(vectors.rows);
  for (std::size_t i = 0; i < vectors.rows; ++i) {
    hits.push_back({static_cast<std::int64_t>(i), dot(vectors.row(i), query)});
  }
  sort_hits(hits);
  if (hits.size() > static_cast<std::size_t>(top_r)) hits.resize(top_r);
  return hits;
}

}  // namespace xmc
