#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xmc/linalg.hpp"

namespace xmc {

enum class Split { train, val, test, wild };

Split split_from_string(std::string_view s);
std::string_view to_string(Split s);

enum class Modality { image, text };

struct CommentRecord {
  std::string comment_id;
  std::string text;
  std::vector<float> vec;  // lives in the text embedding space (d_T)

  bool operator==(const CommentRecord&) const = default;
};

// One multimodal post. Vectors are raw on load; call normalize_vectors to
// bring them to unit L2 norm before any similarity work.
struct PostRecord {
  std::string post_id;
  std::string text;
  std::vector<float> image_vec;  // d_I
  std::vector<float> text_vec;   // d_T
  std::vector<CommentRecord> comments;
  std::optional<int> label;  // present iff split is train/val/test
  Split split = Split::wild;

  bool operator==(const PostRecord&) const = default;
};

struct Corpus {
  std::vector<PostRecord> posts;
  int dim_image = 0;
  int dim_text = 0;
  int class_count = 0;

  // counts indexed by Split enum order
  std::array<std::size_t, 4> split_counts() const;

  bool operator==(const Corpus&) const = default;
};

std::unordered_map<std::string, std::size_t> make_id_index(const Corpus& corpus);

// Indices of the posts holding a split, in file order, plus per-modality
// vector matrices. Retrieval ordinals are positions in these lists.
std::vector<std::size_t> split_indices(const Corpus& corpus, Split split);
FloatMatrix split_matrix(const Corpus& corpus, Split split, Modality modality);

// Line-delimited corpus file: a header record {"dims":[d_I,d_T],"classes":C}
// followed by one post object per line. Vector fields hold either an inline
// array of numbers or a row index into a binary sidecar named in the header.
Corpus load_corpus(const std::filesystem::path& path);

struct SaveOptions {
  // When set, vectors go to "<stem>.img.xmvec" / "<stem>.txt.xmvec" files
  // next to the corpus and the lines carry row indices instead of arrays.
  bool use_sidecar = false;
};

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 const SaveOptions& options = {});

// Binary vector sidecar: magic "XMVEC1", u32 count, u32 dim, then
// count*dim little-endian 32-bit floats, row-major.
void write_vector_sidecar(const FloatMatrix& rows, const std::filesystem::path& path);
FloatMatrix read_vector_sidecar(const std::filesystem::path& path);

// Scales every image, text, and comment vector to unit L2 norm.
Corpus normalize_vectors(Corpus corpus);

struct SynthConfig {
  int classes = 2;
  int train_per_class = 50;
  int val_per_class = 10;
  int test_per_class = 10;
  int wild_per_class = 200;
  int dim_image = 64;
  int dim_text = 32;
  double spread = 0.15;         // stddev of coordinate noise around class centers
  double comment_signal = 0.8;  // weight of the class direction in comment vectors
  int min_comments = 1;
  int max_comments = 5;
};

// Deterministic synthetic corpus: per class, image/text vectors drawn around
// class-specific unit centers; comments mix the class text direction with
// noise so they carry label-relevant signal. Wild posts cluster identically
// but carry no label.
Corpus generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed);

}  // namespace xmc
