#include "xmc/corpus.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "binio.hpp"
#include "xmc/error.hpp"

namespace xmc {

using nlohmann::json;

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "wild") return Split::wild;
  throw SchemaError("unknown split tag '" + std::string(s) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::wild: return "wild";
  }
  return "?";
}

std::array<std::size_t, 4> Corpus::split_counts() const {
  std::array<std::size_t, 4> counts{};
  for (const auto& post : posts) counts[static_cast<std::size_t>(post.split)]++;
  return counts;
}

std::unordered_map<std::string, std::size_t> make_id_index(const Corpus& corpus) {
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(corpus.posts.size());
  for (std::size_t i = 0; i < corpus.posts.size(); ++i) {
    index.emplace(corpus.posts[i].post_id, i);
  }
  return index;
}

std::vector<std::size_t> split_indices(const Corpus& corpus, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < corpus.posts.size(); ++i) {
    if (corpus.posts[i].split == split) out.push_back(i);
  }
  return out;
}

FloatMatrix split_matrix(const Corpus& corpus, Split split, Modality modality) {
  const auto indices = split_indices(corpus, split);
  const std::size_t dim = modality == Modality::image
                              ? static_cast<std::size_t>(corpus.dim_image)
                              : static_cast<std::size_t>(corpus.dim_text);
  FloatMatrix mat(indices.size(), dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const PostRecord& post = corpus.posts[indices[r]];
    const auto& vec = modality == Modality::image ? post.image_vec : post.text_vec;
    std::copy(vec.begin(), vec.end(), mat.row(r).begin());
  }
  return mat;
}

void write_vector_sidecar(const FloatMatrix& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open sidecar for writing: " + path.string());
  binio::put_magic(out, "XMVEC1", 6);
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rows.rows));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rows.cols));
  for (float v : rows.data) binio::put_f32(out, v);
  if (!out) throw DataError("short write to sidecar: " + path.string());
}

FloatMatrix read_vector_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open sidecar: " + path.string());
  binio::expect_magic(in, "XMVEC1", 6, "sidecar " + path.string());
  const auto count = binio::get_le<std::uint32_t>(in);
  const auto dim = binio::get_le<std::uint32_t>(in);
  FloatMatrix rows(count, dim);
  for (auto& v : rows.data) v = binio::get_f32(in);
  return rows;
}

namespace {

std::vector<float> parse_vector_field(const json& field, const FloatMatrix* sidecar,
                                      const char* what, std::size_t line_no) {
  if (field.is_number_integer()) {
    if (sidecar == nullptr) {
      throw SchemaError("post references a sidecar row but the header names no sidecar (" +
                        std::string(what) + ")");
    }
    const auto row = field.get<std::int64_t>();
    if (row < 0 || static_cast<std::size_t>(row) >= sidecar->rows) {
      throw SchemaError("sidecar row " + std::to_string(row) + " out of range for " +
                        std::string(what));
    }
    const auto span = sidecar->row(static_cast<std::size_t>(row));
    return {span.begin(), span.end()};
  }
  if (!field.is_array()) {
    throw ParseError(std::string(what) + " must be an array or a sidecar row index", line_no);
  }
  std::vector<float> out;
  out.reserve(field.size());
  for (const auto& v : field) {
    if (!v.is_number()) throw ParseError(std::string(what) + " holds a non-number", line_no);
    out.push_back(v.get<float>());
  }
  return out;
}

void check_vector(const std::vector<float>& vec, std::size_t expected_dim, const char* what,
                  const std::string& id) {
  if (vec.size() != expected_dim) {
    throw SchemaError(std::string(what) + " of '" + id + "' has dimension " +
                      std::to_string(vec.size()) + ", expected " + std::to_string(expected_dim));
  }
  if (!all_finite(vec)) {
    throw DataError(std::string(what) + " of '" + id + "' has non-finite entries");
  }
  if (l2_norm(vec) <= 0.0) {
    throw DataError(std::string(what) + " of '" + id + "' has zero norm");
  }
}

json vector_to_json(const std::vector<float>& vec) {
  json arr = json::array();
  for (float v : vec) arr.push_back(v);
  return arr;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path.string());

  std::string line;
  std::size_t line_no = 0;

  // header
  json header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      header = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    break;
  }
  if (header.is_null()) throw SchemaError("corpus file has no header record");
  if (!header.contains("dims") || !header["dims"].is_array() || header["dims"].size() != 2 ||
      !header.contains("classes")) {
    throw SchemaError("header record must carry dims:[d_I,d_T] and classes");
  }

  Corpus corpus;
  corpus.dim_image = header["dims"][0].get<int>();
  corpus.dim_text = header["dims"][1].get<int>();
  corpus.class_count = header["classes"].get<int>();
  if (corpus.dim_image <= 0 || corpus.dim_text <= 0 || corpus.class_count < 1) {
    throw SchemaError("header dims/classes must be positive");
  }

  FloatMatrix image_sidecar, text_sidecar;
  const FloatMatrix* image_rows = nullptr;
  const FloatMatrix* text_rows = nullptr;
  if (header.contains("sidecars")) {
    const auto& sc = header["sidecars"];
    const auto dir = path.parent_path();
    if (sc.contains("image")) {
      image_sidecar = read_vector_sidecar(dir / sc["image"].get<std::string>());
      if (image_sidecar.cols != static_cast<std::size_t>(corpus.dim_image)) {
        throw SchemaError("image sidecar dimension does not match header d_I");
      }
      image_rows = &image_sidecar;
    }
    if (sc.contains("text")) {
      text_sidecar = read_vector_sidecar(dir / sc["text"].get<std::string>());
      if (text_sidecar.cols != static_cast<std::size_t>(corpus.dim_text)) {
        throw SchemaError("text sidecar dimension does not match header d_T");
      }
      text_rows = &text_sidecar;
    }
  }

  std::unordered_map<std::string, std::size_t> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }

    PostRecord post;
    try {
      post.post_id = rec.at("id").get<std::string>();
      post.text = rec.value("text", std::string{});
      post.image_vec = parse_vector_field(rec.at("image_vec"), image_rows, "image_vec", line_no);
      post.text_vec = parse_vector_field(rec.at("text_vec"), text_rows, "text_vec", line_no);
      post.split = split_from_string(rec.at("split").get<std::string>());
      if (rec.contains("label") && !rec["label"].is_null()) {
        post.label = rec["label"].get<int>();
      }
      for (const auto& c : rec.value("comments", json::array())) {
        CommentRecord comment;
        comment.comment_id = c.at("id").get<std::string>();
        comment.text = c.value("text", std::string{});
        comment.vec = parse_vector_field(c.at("vec"), text_rows, "comment vec", line_no);
        post.comments.push_back(std::move(comment));
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }

    check_vector(post.image_vec, corpus.dim_image, "image_vec", post.post_id);
    check_vector(post.text_vec, corpus.dim_text, "text_vec", post.post_id);
    for (const auto& c : post.comments) {
      check_vector(c.vec, corpus.dim_text, "comment vec", c.comment_id);
    }

    if (!seen_ids.emplace(post.post_id, line_no).second) {
      throw SchemaError("duplicate post id '" + post.post_id + "'");
    }
    if (post.split == Split::wild) {
      if (post.label.has_value()) {
        throw SchemaError("wild post '" + post.post_id + "' carries a label");
      }
    } else {
      if (!post.label.has_value()) {
        throw SchemaError("labeled-split post '" + post.post_id + "' is missing its label");
      }
      if (*post.label < 0 || *post.label >= corpus.class_count) {
        throw SchemaError("post '" + post.post_id + "' label out of range");
      }
    }

    corpus.posts.push_back(std::move(post));
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 const SaveOptions& options) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open corpus file for writing: " + path.string());

  json header;
  header["dims"] = {corpus.dim_image, corpus.dim_text};
  header["classes"] = corpus.class_count;

  if (!options.use_sidecar) {
    out << header.dump() << "\n";
    for (const auto& post : corpus.posts) {
      json rec;
      rec["id"] = post.post_id;
      rec["text"] = post.text;
      rec["image_vec"] = vector_to_json(post.image_vec);
      rec["text_vec"] = vector_to_json(post.text_vec);
      json comments = json::array();
      for (const auto& c : post.comments) {
        comments.push_back({{"id", c.comment_id}, {"text", c.text}, {"vec", vector_to_json(c.vec)}});
      }
      rec["comments"] = std::move(comments);
      if (post.label) rec["label"] = *post.label;
      rec["split"] = std::string(to_string(post.split));
      out << rec.dump() << "\n";
    }
    if (!out) throw DataError("short write to corpus file: " + path.string());
    return;
  }

  // Sidecar layout: one image row per post; text rows hold each post's
  // text_vec followed by its comment vectors, in file order.
  const std::string img_name = path.stem().string() + ".img.xmvec";
  const std::string txt_name = path.stem().string() + ".txt.xmvec";
  header["sidecars"] = {{"image", img_name}, {"text", txt_name}};
  out << header.dump() << "\n";

  std::size_t text_row_count = 0;
  for (const auto& post : corpus.posts) text_row_count += 1 + post.comments.size();
  FloatMatrix image_rows(corpus.posts.size(), corpus.dim_image);
  FloatMatrix text_rows(text_row_count, corpus.dim_text);

  std::size_t text_row = 0;
  for (std::size_t i = 0; i < corpus.posts.size(); ++i) {
    const auto& post = corpus.posts[i];
    std::copy(post.image_vec.begin(), post.image_vec.end(), image_rows.row(i).begin());

    json rec;
    rec["id"] = post.post_id;
    rec["text"] = post.text;
    rec["image_vec"] = i;
    std::copy(post.text_vec.begin(), post.text_vec.end(), text_rows.row(text_row).begin());
    rec["text_vec"] = text_row++;
    json comments = json::array();
    for (const auto& c : post.comments) {
      std::copy(c.vec.begin(), c.vec.end(), text_rows.row(text_row).begin());
      comments.push_back({{"id", c.comment_id}, {"text", c.text}, {"vec", text_row++}});
    }
    rec["comments"] = std::move(comments);
    if (post.label) rec["label"] = *post.label;
    rec["split"] = std::string(to_string(post.split));
    out << rec.dump() << "\n";
  }
  if (!out) throw DataError("short write to corpus file: " + path.string());

  const auto dir = path.parent_path();
  write_vector_sidecar(image_rows, dir / img_name);
  write_vector_sidecar(text_rows, dir / txt_name);
}

namespace {

void normalize_in_place(std::vector<float>& vec, const char* what, const std::string& id) {
  if (!all_finite(vec)) {
    throw DataError(std::string(what) + " of '" + id + "' has non-finite entries");
  }
  const double norm = l2_norm(vec);
  if (norm <= 0.0) {
    throw DataError(std::string(what) + " of '" + id + "' has zero norm");
  }
  for (auto& v : vec) v = static_cast<float>(static_cast<double>(v) / norm);
}

}  // namespace

Corpus normalize_vectors(Corpus corpus) {
  for (auto& post : corpus.posts) {
    normalize_in_place(post.image_vec, "image_vec", post.post_id);
    normalize_in_place(post.text_vec, "text_vec", post.post_id);
    for (auto& c : post.comments) normalize_in_place(c.vec, "comment vec", c.comment_id);
  }
  return corpus;
}

namespace {

std::vector<float> random_unit_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& x : v) {
      x = gauss(rng);
      norm2 += x * x;
    }
  } while (norm2 <= 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  std::vector<float> out(dim);
  for (int i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

std::vector<float> jitter(const std::vector<float>& center, double spread,
                          std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<float> out(center.size());
  for (std::size_t i = 0; i < center.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(center[i]) + spread * gauss(rng));
  }
  return out;
}

}  // namespace

Corpus generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed) {
  if (config.classes < 2) throw ArgumentError("synthetic corpus needs at least 2 classes");
  if (config.dim_image <= 0 || config.dim_text <= 0) {
    throw ArgumentError("synthetic corpus dims must be positive");
  }
  if (config.train_per_class <= 0 || config.val_per_class <= 0 ||
      config.test_per_class <= 0 || config.wild_per_class <= 0) {
    throw ArgumentError("synthetic per-class counts must be positive");
  }
  if (config.spread < 0.0) throw ArgumentError("spread must be non-negative");
  if (config.comment_signal < 0.0 || config.comment_signal > 1.0) {
    throw ArgumentError("comment_signal must lie in [0,1]");
  }
  if (config.min_comments < 1 || config.max_comments < config.min_comments) {
    throw ArgumentError("comment count range must satisfy 1 <= min <= max");
  }

  std::mt19937_64 rng(seed);

  std::vector<std::vector<float>> image_centers, text_centers;
  for (int c = 0; c < config.classes; ++c) {
    image_centers.push_back(random_unit_vector(rng, config.dim_image));
    text_centers.push_back(random_unit_vector(rng, config.dim_text));
  }

  Corpus corpus;
  corpus.dim_image = config.dim_image;
  corpus.dim_text = config.dim_text;
  corpus.class_count = config.classes;

  struct SplitPlan {
    Split split;
    const char* prefix;
    int per_class;
  };
  const SplitPlan plans[] = {
      {Split::train, "tr", config.train_per_class},
      {Split::val, "va", config.val_per_class},
      {Split::test, "te", config.test_per_class},
      {Split::wild, "wi", config.wild_per_class},
  };

  std::uniform_int_distribution<int> comment_count(config.min_comments, config.max_comments);
  for (const auto& plan : plans) {
    int serial = 0;
    for (int c = 0; c < config.classes; ++c) {
      for (int i = 0; i < plan.per_class; ++i, ++serial) {
        PostRecord post;
        {
          std::ostringstream id;
          id << plan.prefix << '-';
          id.width(5);
          id.fill('0');
          id << serial;
          post.post_id = id.str();
        }
        post.text = "class " + std::to_string(c) + " post " + std::to_string(serial);
        post.split = plan.split;
        if (plan.split != Split::wild) post.label = c;
        post.image_vec = jitter(image_centers[c], config.spread, rng);
        post.text_vec = jitter(text_centers[c], config.spread, rng);

        const int n_comments = comment_count(rng);
        for (int j = 0; j < n_comments; ++j) {
          CommentRecord comment;
          comment.comment_id = post.post_id + "-c" + std::to_string(j);
          comment.text = "comment " + std::to_string(j) + " on " + post.post_id;
          const auto noise = random_unit_vector(rng, config.dim_text);
          comment.vec.resize(config.dim_text);
          for (int k = 0; k < config.dim_text; ++k) {
            comment.vec[k] = static_cast<float>(
                config.comment_signal * static_cast<double>(text_centers[c][k]) +
                (1.0 - config.comment_signal) * static_cast<double>(noise[k]));
          }
          post.comments.push_back(std::move(comment));
        }
        corpus.posts.push_back(std::move(post));
      }
    }
  }
  return corpus;
}

}  // namespace xmc
