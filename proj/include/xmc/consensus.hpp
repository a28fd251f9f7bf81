#pragma once

#include <string>
#include <vector>

#include "xmc/corpus.hpp"
#include "xmc/xsearch.hpp"

namespace xmc {

// All comments of the retrieved posts, each tagged with the post it came
// from. Duplicates are kept.
struct CommentPool {
  std::vector<CommentRecord> comments;
  std::vector<std::string> source_post_ids;  // parallel to comments
};

CommentPool build_comment_pool(const WildView& wild, const RetrievalResult& retrieval);

// q_i = mean cosine of comment i against the whole pool, itself included.
// Computed as dot with the pool mean vector, which is the same sum.
std::vector<double> consensus_scores(const CommentPool& pool);

struct ConsensusEntry {
  CommentRecord comment;
  double score = 0.0;

  bool operator==(const ConsensusEntry&) const = default;
};

struct ConsensusSet {
  std::vector<ConsensusEntry> entries;  // score desc, comment_id asc
  int requested = 0;

  bool operator==(const ConsensusSet&) const = default;
};

// Top-N comments by consensus score. An empty pool yields an empty set.
ConsensusSet select_top_n(const CommentPool& pool, int n);

}  // namespace xmc
