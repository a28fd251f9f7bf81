#include "xmc/consensus.hpp"

#include <algorithm>
#include <numeric>

#include "xmc/error.hpp"

namespace xmc {

CommentPool build_comment_pool(const WildView& wild, const RetrievalResult& retrieval) {
  CommentPool pool;
  for (const auto& hit : retrieval.hits) {
    const PostRecord* post = wild.find(hit.post_id);
    if (post == nullptr) {
      throw ArgumentError("comment pool: retrieved post is not in the wild set: " + hit.post_id);
    }
    for (const auto& comment : post->comments) {
      pool.comments.push_back(comment);
      pool.source_post_ids.push_back(post->post_id);
    }
  }
  return pool;
}

std::vector<double> consensus_scores(const CommentPool& pool) {
  if (pool.comments.empty()) throw ArgumentError("consensus: empty comment pool");
  const std::size_t dim = pool.comments.front().vec.size();
  for (const auto& comment : pool.comments) {
    if (comment.vec.size() != dim) {
      throw ArgumentError("consensus: comment vectors disagree on dimension");
    }
  }

  std::vector<double> mean(dim, 0.0);
  for (const auto& comment : pool.comments) {
    for (std::size_t x = 0; x < dim; ++x) mean[x] += comment.vec[x];
  }
  const double inv = 1.0 / static_cast<double>(pool.comments.size());
  for (auto& v : mean) v *= inv;

  std::vector<double> scores(pool.comments.size(), 0.0);
  for (std::size_t i = 0; i < pool.comments.size(); ++i) {
    double q = 0.0;
    const auto& vec = pool.comments[i].vec;
    for (std::size_t x = 0; x < dim; ++x) q += static_cast<double>(vec[x]) * mean[x];
    scores[i] = q;
  }
  return scores;
}

ConsensusSet select_top_n(const CommentPool& pool, int n) {
  if (n < 1) throw ArgumentError("consensus: n must be at least 1");
  ConsensusSet set;
  set.requested = n;
  if (pool.comments.empty()) return set;

  const auto scores = consensus_scores(pool);
  std::vector<std::size_t> order(pool.comments.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (pool.comments[a].comment_id != pool.comments[b].comment_id) {
      return pool.comments[a].comment_id < pool.comments[b].comment_id;
    }
    return a < b;
  });

  const std::size_t take = std::min<std::size_t>(n, order.size());
  set.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    set.entries.push_back({pool.comments[order[i]], scores[order[i]]});
  }
  return set;
}

}  // namespace xmc
