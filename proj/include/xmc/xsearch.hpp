#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmc/corpus.hpp"
#include "xmc/vecindex.hpp"

namespace xmc {

// Global fusion weight and the statistics it came from. alpha weights the
// image similarity; 1 - alpha weights the text similarity.
struct FusionWeights {
  double alpha = 0.5;
  double i_mean = 0.0;
  double t_mean = 0.0;
  int query_count = 0;  // M
  int rank_cutoff = 0;  // K

  bool operator==(const FusionWeights&) const = default;
};

double fuse_score(double s_img, double s_txt, double alpha);

// Turns the M x K per-rank similarity grids (image, text) into weights.
// Exposed separately so fixtures can bypass retrieval.
FusionWeights weights_from_rank_grids(const std::vector<std::vector<double>>& image_sims,
                                      const std::vector<std::vector<double>>& text_sims);

FusionWeights estimate_alpha(std::span<const PostRecord> queries, const IvfPqIndex& img_index,
                             const IvfPqIndex& txt_index, int top_k, int top_r, int nprobe);

// Same statistics from exhaustive search; rows of the matrices are the wild
// posts in ordinal order.
FusionWeights estimate_alpha_exact(std::span<const PostRecord> queries,
                                   const FloatMatrix& wild_image, const FloatMatrix& wild_text,
                                   int top_k);

// The wild split of a corpus, addressed by index ordinal (file order).
struct WildView {
  const Corpus* corpus = nullptr;
  std::vector<std::size_t> post_indices;

  static WildView from(const Corpus& corpus);

  std::size_t size() const { return post_indices.size(); }
  const PostRecord& post(std::int64_t ordinal) const;
  // nullptr when the id is not a wild post
  const PostRecord* find(const std::string& post_id) const;

 private:
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct ScoredHit {
  std::string post_id;
  double s_img = 0.0;
  double s_txt = 0.0;
  double s_fused = 0.0;

  bool operator==(const ScoredHit&) const = default;
};

enum class CandidateSource { intersection, union_fallback };

std::string to_string(CandidateSource source);

struct RetrievalResult {
  std::vector<ScoredHit> hits;  // s_fused desc, post_id asc
  CandidateSource candidate_source = CandidateSource::intersection;

  bool operator==(const RetrievalResult&) const = default;
};

struct RetrievalParams {
  int top_r = 1000;  // per-modality candidate depth
  int top_k = 5;     // returned posts
  int nprobe = 8;
  bool exact_rescore = true;  // final scores from raw vectors, not ADC
};

// Two-stage retrieval: ANN candidates per modality, intersect (union when the
// intersection is thinner than top_k), score with fuse_score, keep top_k.
// Hits whose post_id equals the query's are dropped.
RetrievalResult retrieve_similar_posts(const PostRecord& query, const WildView& wild,
                                       const IvfPqIndex& img_index, const IvfPqIndex& txt_index,
                                       const FusionWeights& weights,
                                       const RetrievalParams& params);

}  // namespace xmc
