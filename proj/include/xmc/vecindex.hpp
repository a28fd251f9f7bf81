#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "xmc/linalg.hpp"

namespace xmc {

struct SearchHit {
  std::int64_t ordinal;
  double similarity;  // cosine recovered as 1 - d2/2 on unit-normalized vectors

  bool operator==(const SearchHit&) const = default;
};

struct KMeansResult {
  FloatMatrix centroids;         // k x d
  std::vector<int> assignments;  // nearest returned centroid per point
  std::vector<double> inertia;   // SSE before each update, plus a final entry
                                 // for the returned centroids; non-increasing
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded from
// the point currently farthest from its assigned centroid.
KMeansResult kmeans(const FloatMatrix& points, int k, int iters, std::uint64_t seed);

struct IvfPqConfig {
  int nlist = 64;       // coarse cluster count
  int m = 8;            // subquantizer count; dim % m == 0
  int ks = 256;         // centroids per subquantizer, at most 256
  int kmeans_iters = 25;
};

// Inverted-file index with product quantization of residuals. Build with
// train(), fill with add(), freeze(), then search. Frozen indexes are
// immutable and safe for concurrent searches.
class IvfPqIndex {
 public:
  IvfPqIndex() = default;

  static IvfPqIndex train(const FloatMatrix& vectors, const IvfPqConfig& config,
                          std::uint64_t seed);

  void add(std::int64_t ordinal, std::span<const float> vector);
  void freeze();

  bool trained() const { return trained_; }
  bool frozen() const { return frozen_; }
  std::size_t size() const { return count_; }
  int dim() const { return dim_; }
  const IvfPqConfig& config() const { return config_; }

  // Top-R by similarity descending, ordinal ascending on ties. ADC: per
  // probed list, squared distances come from per-subspace lookup tables over
  // the query residual.
  std::vector<SearchHit> search(std::span<const float> query, int top_r, int nprobe) const;

  // ADC similarity of the query to one stored vector; nullopt if absent.
  std::optional<double> adc_similarity(std::span<const float> query,
                                       std::int64_t ordinal) const;

  int assign_coarse(std::span<const float> vector) const;
  std::vector<std::uint8_t> encode_residual(std::span<const float> vector, int list_id) const;
  std::vector<float> reconstruct(std::int64_t ordinal) const;

  void save(const std::filesystem::path& path) const;
  static IvfPqIndex load(const std::filesystem::path& path);

  const FloatMatrix& coarse_centroids() const { return coarse_centroids_; }
  // ks x dsub codebook of one subspace
  FloatMatrix codebook(int subspace) const;
  std::vector<std::size_t> list_sizes() const;

 private:
  struct InvertedList {
    std::vector<std::int64_t> ordinals;
    std::vector<std::uint8_t> codes;  // ordinals.size() * m bytes
  };

  std::span<const float> codebook_entry(int subspace, int code) const;
  void rebuild_location_map();

  int dim_ = 0;
  int dsub_ = 0;
  IvfPqConfig config_;
  FloatMatrix coarse_centroids_;     // nlist x dim
  std::vector<float> codebooks_;     // m * ks * dsub
  std::vector<InvertedList> lists_;  // nlist entries
  std::size_t count_ = 0;
  bool trained_ = false;
  bool frozen_ = false;
  // ordinal -> (list, position); rebuilt on freeze/load
  std::unordered_map<std::int64_t, std::pair<std::uint32_t, std::uint32_t>> locations_;
};

// Exact full-scan oracle: cosine via dot product on unit vectors, top-R,
// same (similarity desc, ordinal asc) order as the index.
std::vector<SearchHit> search_exact(const FloatMatrix& vectors, std::span<const float> query,
                                    int top_r);

}  // namespace xmc
