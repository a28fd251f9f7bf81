#include "xmc/xsearch.hpp"

#include <algorithm>
#include <cmath>

#include "xmc/error.hpp"

namespace xmc {

double fuse_score(double s_img, double s_txt, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ArgumentError("fuse_score: alpha must lie in [0,1]");
  }
  return alpha * s_img + (1.0 - alpha) * s_txt;
}

FusionWeights weights_from_rank_grids(const std::vector<std::vector<double>>& image_sims,
                                      const std::vector<std::vector<double>>& text_sims) {
  if (image_sims.empty() || image_sims.size() != text_sims.size()) {
    throw ArgumentError("alpha estimation: need matching non-empty similarity grids");
  }
  const std::size_t m = image_sims.size();
  const std::size_t k = image_sims[0].size();
  if (k == 0) throw ArgumentError("alpha estimation: rank cutoff must be at least 1");

  double i_sum = 0.0;
  double t_sum = 0.0;
  for (std::size_t q = 0; q < m; ++q) {
    if (image_sims[q].size() != k || text_sims[q].size() != k) {
      throw ArgumentError("alpha estimation: ragged similarity grid");
    }
    for (std::size_t r = 0; r < k; ++r) {
      i_sum += image_sims[q][r];
      t_sum += text_sims[q][r];
    }
  }

  FusionWeights weights;
  weights.query_count = static_cast<int>(m);
  weights.rank_cutoff = static_cast<int>(k);
  weights.i_mean = i_sum / static_cast<double>(m * k);
  weights.t_mean = t_sum / static_cast<double>(m * k);
  const double denom = weights.i_mean + weights.t_mean;
  if (denom == 0.0) {
    throw DataError("alpha estimation: degenerate statistics, I_mean + T_mean == 0");
  }
  weights.alpha = weights.t_mean / denom;
  if (!(weights.alpha >= 0.0 && weights.alpha <= 1.0)) {
    throw DataError("alpha estimation: statistics place alpha outside [0,1]");
  }
  return weights;
}

namespace {

std::vector<double> top_k_similarities(const std::vector<SearchHit>& hits, int top_k,
                                       const char* modality) {
  if (hits.size() < static_cast<std::size_t>(top_k)) {
    throw DataError(std::string("alpha estimation: ") + modality + " search returned " +
                    std::to_string(hits.size()) + " hits, need " + std::to_string(top_k));
  }
  std::vector<double> sims(top_k);
  for (int r = 0; r < top_k; ++r) sims[r] = hits[r].similarity;
  return sims;
}

}  // namespace

FusionWeights estimate_alpha(std::span<const PostRecord> queries, const IvfPqIndex& img_index,
                             const IvfPqIndex& txt_index, int top_k, int top_r, int nprobe) {
  if (queries.empty()) throw ArgumentError("alpha estimation: empty query set");
  if (top_k < 1) throw ArgumentError("alpha estimation: top_k must be at least 1");
  if (top_r < top_k) throw ArgumentError("alpha estimation: top_r must be at least top_k");

  std::vector<std::vector<double>> image_sims;
  std::vector<std::vector<double>> text_sims;
  image_sims.reserve(queries.size());
  text_sims.reserve(queries.size());
  for (const auto& query : queries) {
    image_sims.push_back(
        top_k_similarities(img_index.search(query.image_vec, top_r, nprobe), top_k, "image"));
    text_sims.push_back(
        top_k_similarities(txt_index.search(query.text_vec, top_r, nprobe), top_k, "text"));
  }
  return weights_from_rank_grids(image_sims, text_sims);
}

FusionWeights estimate_alpha_exact(std::span<const PostRecord> queries,
                                   const FloatMatrix& wild_image, const FloatMatrix& wild_text,
                                   int top_k) {
  if (queries.empty()) throw ArgumentError("alpha estimation: empty query set");
  if (top_k < 1) throw ArgumentError("alpha estimation: top_k must be at least 1");

  std::vector<std::vector<double>> image_sims;
  std::vector<std::vector<double>> text_sims;
  image_sims.reserve(queries.size());
  text_sims.reserve(queries.size());
  for (const auto& query : queries) {
    image_sims.push_back(
        top_k_similarities(search_exact(wild_image, query.image_vec, top_k), top_k, "image"));
    text_sims.push_back(
        top_k_similarities(search_exact(wild_text, query.text_vec, top_k), top_k, "text"));
  }
  return weights_from_rank_grids(image_sims, text_sims);
}

WildView WildView::from(const Corpus& corpus) {
  WildView view;
  view.corpus = &corpus;
  for (std::size_t i = 0; i < corpus.posts.size(); ++i) {
    if (corpus.posts[i].split == Split::wild) {
      view.by_id_.emplace(corpus.posts[i].post_id, view.post_indices.size());
      view.post_indices.push_back(i);
    }
  }
  return view;
}

const PostRecord& WildView::post(std::int64_t ordinal) const {
  if (ordinal < 0 || static_cast<std::size_t>(ordinal) >= post_indices.size()) {
    throw ArgumentError("wild view: ordinal out of range: " + std::to_string(ordinal));
  }
  return corpus->posts[post_indices[static_cast<std::size_t>(ordinal)]];
}

const PostRecord* WildView::find(const std::string& post_id) const {
  const auto it = by_id_.find(post_id);
  if (it == by_id_.end()) return nullptr;
  return &corpus->posts[post_indices[it->second]];
}

std::string to_string(CandidateSource source) {
  return source == CandidateSource::intersection ? "intersection" : "union-fallback";
}

RetrievalResult retrieve_similar_posts(const PostRecord& query, const WildView& wild,
                                       const IvfPqIndex& img_index, const IvfPqIndex& txt_index,
                                       const FusionWeights& weights,
                                       const RetrievalParams& params) {
  RetrievalResult result;
  if (params.top_k <= 0) return result;
  if (!(weights.alpha >= 0.0 && weights.alpha <= 1.0)) {
    throw ArgumentError("retrieval: alpha must lie in [0,1]");
  }

  const auto img_hits = img_index.search(query.image_vec, params.top_r, params.nprobe);
  const auto txt_hits = txt_index.search(query.text_vec, params.top_r, params.nprobe);

  std::unordered_map<std::int64_t, double> img_sim;
  std::unordered_map<std::int64_t, double> txt_sim;
  img_sim.reserve(img_hits.size());
  txt_sim.reserve(txt_hits.size());
  for (const auto& hit : img_hits) img_sim.emplace(hit.ordinal, hit.similarity);
  for (const auto& hit : txt_hits) txt_sim.emplace(hit.ordinal, hit.similarity);

  const auto is_self = [&](std::int64_t ordinal) {
    return wild.post(ordinal).post_id == query.post_id;
  };

  std::vector<std::int64_t> candidates;
  for (const auto& [ordinal, sim] : img_sim) {
    (void)sim;
    if (txt_sim.contains(ordinal) && !is_self(ordinal)) candidates.push_back(ordinal);
  }
  if (candidates.size() < static_cast<std::size_t>(params.top_k)) {
    result.candidate_source = CandidateSource::union_fallback;
    candidates.clear();
    for (const auto& [ordinal, sim] : img_sim) {
      (void)sim;
      if (!is_self(ordinal)) candidates.push_back(ordinal);
    }
    for (const auto& [ordinal, sim] : txt_sim) {
      (void)sim;
      if (!img_sim.contains(ordinal) && !is_self(ordinal)) candidates.push_back(ordinal);
    }
  }

  result.hits.reserve(candidates.size());
  for (const std::int64_t ordinal : candidates) {
    const PostRecord& post = wild.post(ordinal);
    ScoredHit hit;
    hit.post_id = post.post_id;
    if (params.exact_rescore) {
      hit.s_img = dot(query.image_vec, post.image_vec);
      hit.s_txt = dot(query.text_vec, post.text_vec);
    } else {
      const auto img_it = img_sim.find(ordinal);
      hit.s_img = img_it != img_sim.end()
                      ? img_it->second
                      : *img_index.adc_similarity(query.image_vec, ordinal);
      const auto txt_it = txt_sim.find(ordinal);
      hit.s_txt = txt_it != txt_sim.end()
                      ? txt_it->second
                      : *txt_index.adc_similarity(query.text_vec, ordinal);
    }
    hit.s_fused = fuse_score(hit.s_img, hit.s_txt, weights.alpha);
    result.hits.push_back(std::move(hit));
  }

  std::sort(result.hits.begin(), result.hits.end(), [](const ScoredHit& a, const ScoredHit& b) {
    if (a.s_fused != b.s_fused) return a.s_fused > b.s_fused;
    return a.post_id < b.post_id;
  });
  if (result.hits.size() > static_cast<std::size_t>(params.top_k)) {
    result.hits.resize(params.top_k);
  }
  return result;
}

}  // namespace xmc
